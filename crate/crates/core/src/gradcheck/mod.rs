//! Central finite-difference verification of analytic gradients.
//!
//! Everything here runs in `f64`: the function under test is re-evaluated on
//! a fresh graph (and a fresh copy of the parameter store) for every probe, so
//! probes are independent and run in parallel.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Probe at most this many coordinates per tensor (seeded sample).
    pub max_probes_per_tensor: Option<usize>,
    pub seed: u64,
    /// Multiplies the GELU derivative in the analytic pass (negative control).
    pub gelu_grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, tol: 1e-3, floor: 1e-3, max_probes_per_tensor: None, seed: 0, gelu_grad_scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Location of the worst probe, e.g. `input0[17]` or `enc.0.pw1.weight[3]`.
    pub worst: String,
    pub probes: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Clone, Copy)]
enum Target {
    Input(usize),
    Param(usize),
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d f / d (inputs, every parameter in store)`.
///
/// `f` must build a scalar from the given input vars, reading parameters
/// through `store`. It is called many times and must be deterministic; a
/// mismatch between two identical evaluations is reported as
/// [`Error::OracleInvalid`].
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var> + Sync,
{
    let eval = |xs: &[Tensor<f64>], st: &ParamStore<f64>| -> Result<f64> {
        let mut st = st.clone();
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &mut st, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::Contract(format!("gradient check needs a scalar output, got {:?}", v.dims())));
        }
        Ok(v.item())
    };

    let base = eval(inputs, store)?;
    let again = eval(inputs, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!("function is not deterministic: {base} vs {again}")));
    }

    // Analytic pass.
    let mut st = store.clone();
    let mut g = Graph::new();
    g.set_gelu_grad_scale(opts.gelu_grad_scale);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &mut st, &vars)?;
    g.backward(out)?;
    let analytic_inputs: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();
    st.zero_grads();
    st.accumulate_grads(&g);
    let analytic_params: Vec<Vec<f64>> = st.params().iter().map(|p| p.grad_or_zeros()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes: Vec<(Target, usize)> = Vec::new();
    let mut pick = |target: Target, len: usize, probes: &mut Vec<(Target, usize)>| match opts.max_probes_per_tensor {
        Some(k) if k < len => {
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            probes.extend(idx.into_iter().map(|i| (target, i)));
        }
        _ => probes.extend((0..len).map(|i| (target, i))),
    };
    for (i, x) in inputs.iter().enumerate() {
        pick(Target::Input(i), x.numel(), &mut probes);
    }
    for (i, p) in store.params().iter().enumerate() {
        pick(Target::Param(i), p.tensor().numel(), &mut probes);
    }

    let results: Vec<Result<(f64, String)>> = probes
        .par_iter()
        .map(|&(target, idx)| {
            let h = opts.step;
            let shifted = |delta: f64| -> Result<f64> {
                match target {
                    Target::Input(i) => {
                        let mut xs = inputs.to_vec();
                        xs[i].data_mut()[idx] += delta;
                        eval(&xs, store)
                    }
                    Target::Param(i) => {
                        let mut st = store.clone();
                        st.params_mut()[i].tensor_mut().data_mut()[idx] += delta;
                        eval(inputs, &st)
                    }
                }
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            let (analytic, label) = match target {
                Target::Input(i) => (analytic_inputs[i][idx], format!("input{i}[{idx}]")),
                Target::Param(i) => (analytic_params[i][idx], format!("{}[{idx}]", store.params()[i].name())),
            };
            Ok((relative_error(analytic, numeric, opts.floor), label))
        })
        .collect();

    let mut report = GradReport { max_rel_error: 0.0, worst: String::new(), probes: probes.len(), tol: opts.tol };
    for r in results {
        let (err, label) = r?;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = label;
        }
    }
    Ok(report)
}

/// Single-input form: checks `d f(x) / d x` with no parameters.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var> + Sync,
{
    let opts = GradCheckOptions { step, tol, ..GradCheckOptions::default() };
    check_gradients(std::slice::from_ref(x), &ParamStore::new(), |g, _, v| f(g, v[0]), &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn sum_has_zero_discrepancy() {
        let x = random([1, 2, 3, 3], 1);
        let r = finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-3, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn sum_of_gelu_passes() {
        let x = random([1, 2, 4, 4], 2);
        let r = finite_diff_check(
            |g, v| {
                let y = g.gelu(v);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_gelu_derivative_fails() {
        let x = random([1, 2, 4, 4], 3);
        let opts = GradCheckOptions { gelu_grad_scale: 1.1, ..Default::default() };
        let r = check_gradients(
            std::slice::from_ref(&x),
            &ParamStore::new(),
            |g, _, v| {
                let y = g.gelu(v[0]);
                Ok(g.sum(y))
            },
            &opts,
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_error > 0.05, "{r:?}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = AtomicUsize::new(0);
        let x = random([1, 1, 2, 2], 4);
        let err = finite_diff_check(
            |g, v| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let y = g.affine(v, 1.0, k);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = random([1, 1, 2, 2], 5);
        let err = finite_diff_check(|g, v| Ok(g.gelu(v)), &x, 1e-3, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
