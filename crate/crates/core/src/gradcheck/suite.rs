//! The standard gradient-check suites: every primitive op, every block and a
//! reduced-width network. Shared by the CLI and the acceptance target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradCheckOptions, GradReport};
use crate::autodiff::{Graph, RunningStats, ShiftVariant, Var};
use crate::blocks::{ConvStage, LightConvBlock, LightConvMode, SpatialShiftBlock, TokenizedShiftBlock};
use crate::error::Result;
use crate::layers::Mode;
use crate::network::{Network, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::{Dims, Tensor};

/// Stage widths of the network used by the network-scope check.
pub const REDUCED_WIDTHS: [usize; 5] = [4, 4, 12, 12, 12];
/// Input of the network-scope check.
pub const REDUCED_INPUT: Dims = [1, 3, 32, 32];
/// Central-difference step for the network scope. Normalization over the
/// 1x1 and 2x2 maps near the bottleneck makes the loss surface sharply
/// curved, so the O(h^2) truncation error at 1e-3 exceeds the tolerance.
pub const NETWORK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Network,
}

impl Scope {
    /// Default check options for this scope.
    pub fn options(self) -> GradCheckOptions {
        match self {
            Scope::Network => GradCheckOptions { step: NETWORK_STEP, ..GradCheckOptions::default() },
            _ => GradCheckOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradReport,
}

fn uniform(dims: Dims, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

fn binary(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// `sum(y * r)` for a fixed random `r`, so every output element gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.input(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

struct Runner<'a> {
    opts: &'a GradCheckOptions,
    rng: ChaCha8Rng,
    out: Vec<SuiteResult>,
}

impl Runner<'_> {
    /// Checks a parameter-free function of `inputs` whose output has `out_dims`.
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, out_dims: Dims, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
    {
        let r = uniform(out_dims, -1.0, 1.0, &mut self.rng);
        let report = check_gradients(
            &inputs,
            &ParamStore::new(),
            |g, _, v| {
                let y = f(g, v)?;
                project(g, y, &r)
            },
            self.opts,
        )?;
        self.out.push(SuiteResult { name: name.to_string(), report });
        Ok(())
    }

    /// Checks a scalar-valued function of `inputs` directly.
    fn scalar<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
    {
        let report = check_gradients(&inputs, &ParamStore::new(), |g, _, v| f(g, v), self.opts)?;
        self.out.push(SuiteResult { name: name.to_string(), report });
        Ok(())
    }

    fn block<F>(&mut self, name: &str, store: &ParamStore<f64>, x: Tensor<f64>, out_dims: Dims, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, Var) -> Result<Var> + Sync,
    {
        let r = uniform(out_dims, -1.0, 1.0, &mut self.rng);
        let report = check_gradients(
            std::slice::from_ref(&x),
            store,
            |g, s, v| {
                let y = f(g, s, v[0])?;
                project(g, y, &r)
            },
            self.opts,
        )?;
        self.out.push(SuiteResult { name: name.to_string(), report });
        Ok(())
    }
}

/// Runs one suite. Results come back in a fixed order, one per checked case.
pub fn run_suite(scope: Scope, seed: u64, opts: &GradCheckOptions) -> Result<Vec<SuiteResult>> {
    let mut r = Runner { opts, rng: ChaCha8Rng::seed_from_u64(seed), out: Vec::new() };
    match scope {
        Scope::Op => op_suite(&mut r)?,
        Scope::Block => block_suite(&mut r, seed)?,
        Scope::Network => network_case(&mut r, seed)?,
    }
    Ok(r.out)
}

fn op_suite(r: &mut Runner) -> Result<()> {
    let rng = &mut r.rng;
    let x = uniform([2, 3, 5, 4], -1.0, 1.0, rng);
    let w = uniform([4, 3, 3, 3], -0.5, 0.5, rng);
    let b = uniform([4, 1, 1, 1], -0.5, 0.5, rng);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let oh = (5 + 2 * pad - 3) / stride + 1;
        let ow = (4 + 2 * pad - 3) / stride + 1;
        r.op(&format!("conv2d k3 s{stride} p{pad}"), vec![x.clone(), w.clone(), b.clone()], [2, 4, oh, ow], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        })?;
    }
    let rng = &mut r.rng;
    let w1 = uniform([2, 3, 1, 1], -0.5, 0.5, rng);
    r.op("conv2d k1", vec![x.clone(), w1], [2, 2, 5, 4], |g, v| g.conv2d(v[0], v[1], None, 1, 0))?;

    let rng = &mut r.rng;
    let dw = uniform([3, 1, 3, 3], -0.5, 0.5, rng);
    let db = uniform([3, 1, 1, 1], -0.5, 0.5, rng);
    r.op("depthwise k3 s1 p1", vec![x.clone(), dw.clone(), db.clone()], [2, 3, 5, 4], |g, v| {
        g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)
    })?;
    r.op("depthwise k3 s2 p1", vec![x.clone(), dw, db], [2, 3, 3, 2], |g, v| {
        g.depthwise_conv2d(v[0], v[1], Some(v[2]), 2, 1)
    })?;

    let rng = &mut r.rng;
    let gamma = uniform([3, 1, 1, 1], 0.5, 1.5, rng);
    let beta = uniform([3, 1, 1, 1], -0.5, 0.5, rng);
    let rm = uniform([3, 1, 1, 1], -0.2, 0.2, rng);
    let rv = uniform([3, 1, 1, 1], 0.5, 1.5, rng);
    for training in [true, false] {
        let (rm, rv) = (rm.clone(), rv.clone());
        let name = if training { "batch_norm train" } else { "batch_norm eval" };
        r.op(name, vec![x.clone(), gamma.clone(), beta.clone()], [2, 3, 5, 4], move |g, v| {
            let (mut mean, mut var) = (rm.data().to_vec(), rv.data().to_vec());
            let stats = RunningStats { mean: &mut mean, var: &mut var };
            g.batch_norm2d(v[0], v[1], v[2], stats, training, 0.1, 1e-5)
        })?;
    }

    let rng = &mut r.rng;
    let x4 = uniform([2, 4, 3, 3], -1.0, 1.0, rng);
    let g4 = uniform([4, 1, 1, 1], 0.5, 1.5, rng);
    let b4 = uniform([4, 1, 1, 1], -0.5, 0.5, rng);
    r.op("group_norm", vec![x4.clone(), g4, b4], [2, 4, 3, 3], |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5))?;

    let rng = &mut r.rng;
    let y = uniform([2, 3, 5, 4], -1.0, 1.0, rng);
    let wide = uniform([2, 3, 5, 4], -3.0, 3.0, rng);
    r.op("gelu", vec![wide], [2, 3, 5, 4], |g, v| Ok(g.gelu(v[0])))?;
    r.op("add", vec![x.clone(), y.clone()], [2, 3, 5, 4], |g, v| g.add(v[0], v[1]))?;
    r.op("mul", vec![x.clone(), y], [2, 3, 5, 4], |g, v| g.mul(v[0], v[1]))?;
    r.op("affine", vec![x.clone()], [2, 3, 5, 4], |g, v| Ok(g.affine(v[0], -1.5, 0.25)))?;
    r.scalar("mean", vec![x.clone()], |g, v| Ok(g.mean(v[0])))?;
    r.op("slice_channels", vec![x.clone()], [2, 2, 5, 4], |g, v| g.slice_channels(v[0], 1, 2))?;
    r.op("upsample2x", vec![x.clone()], [2, 3, 10, 8], |g, v| Ok(g.upsample2x(v[0])))?;
    for variant in [ShiftVariant::A, ShiftVariant::B] {
        r.op(&format!("spatial_shift {variant:?}"), vec![x4.clone()], [2, 4, 3, 3], move |g, v| {
            g.spatial_shift(v[0], variant)
        })?;
    }
    r.op("global_avg_pool", vec![x.clone()], [2, 3, 1, 1], |g, v| Ok(g.global_avg_pool(v[0])))?;

    let rng = &mut r.rng;
    let logits = uniform([2, 6, 1, 1], -2.0, 2.0, rng);
    r.op("group_softmax", vec![logits], [2, 6, 1, 1], |g, v| g.group_softmax(v[0], 3))?;
    let rng = &mut r.rng;
    let s = uniform([2, 3, 1, 1], -1.0, 1.0, rng);
    r.op("scale_channels", vec![x.clone(), s], [2, 3, 5, 4], |g, v| g.scale_channels(v[0], v[1]))?;

    let rng = &mut r.rng;
    let feats = uniform([3, 4, 1, 1], -1.0, 1.0, rng);
    let lw = uniform([5, 4, 1, 1], -0.5, 0.5, rng);
    let lb = uniform([5, 1, 1, 1], -0.5, 0.5, rng);
    r.op("linear", vec![feats, lw, lb], [3, 5, 1, 1], |g, v| g.linear(v[0], v[1], Some(v[2])))?;

    let rng = &mut r.rng;
    let target = binary([2, 2, 4, 4], rng);
    let z = uniform([2, 2, 4, 4], -3.0, 3.0, rng);
    let t = target.clone();
    r.scalar("bce_with_logits", vec![z.clone()], move |g, v| g.bce_with_logits(v[0], &t))?;
    r.scalar("soft_dice", vec![z], move |g, v| g.soft_dice(v[0], &target, 1.0))?;

    let rng = &mut r.rng;
    let losses = uniform([1, 6, 1, 1], 0.1, 2.0, rng);
    let sigma = uniform([6, 1, 1, 1], 0.5, 1.5, rng);
    r.scalar("awl_combine", vec![losses, sigma], |g, v| {
        let parts: Vec<Var> = (0..6).map(|i| g.slice_channels(v[0], i, 1).map(|s| g.sum(s))).collect::<Result<_>>()?;
        g.awl_combine(&parts, v[1], 1e-8)
    })?;
    Ok(())
}

fn block_suite(r: &mut Runner, seed: u64) -> Result<()> {
    let mut brng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);

    let mut store = ParamStore::<f64>::new();
    let enc = LightConvBlock::new(&mut store, "enc", 2, 4, LightConvMode::Encoder, None, &mut brng)?;
    let x = uniform([2, 2, 6, 6], -1.0, 1.0, &mut r.rng);
    r.block("light_conv encoder", &store, x, [2, 4, 3, 3], |g, s, v| enc.forward(g, s, v, Mode::Train))?;

    let mut store = ParamStore::<f64>::new();
    let dec = LightConvBlock::new(&mut store, "dec", 4, 4, LightConvMode::Decoder, None, &mut brng)?;
    let x = uniform([2, 4, 4, 4], -1.0, 1.0, &mut r.rng);
    r.block("light_conv decoder", &store, x, [2, 4, 4, 4], |g, s, v| dec.forward(g, s, v, Mode::Train))?;

    let mut store = ParamStore::<f64>::new();
    let ssb = SpatialShiftBlock::new(&mut store, "ssb", 4, ShiftVariant::A, &mut brng)?;
    let x = uniform([2, 4, 4, 3], -1.0, 1.0, &mut r.rng);
    r.block("spatial_shift_block", &store, x, [2, 4, 4, 3], |g, s, v| ssb.forward(g, s, v))?;

    let mut store = ParamStore::<f64>::new();
    let down = TokenizedShiftBlock::new(&mut store, "down", 2, 4, true, ShiftVariant::A, None, &mut brng)?;
    let x = uniform([1, 2, 6, 6], -1.0, 1.0, &mut r.rng);
    r.block("tokenized_shift down", &store, x, [1, 4, 3, 3], |g, s, v| down.forward(g, s, v))?;

    let mut store = ParamStore::<f64>::new();
    let up = TokenizedShiftBlock::new(&mut store, "up", 4, 4, false, ShiftVariant::B, None, &mut brng)?;
    let x = uniform([1, 4, 4, 4], -1.0, 1.0, &mut r.rng);
    r.block("tokenized_shift up", &store, x, [1, 4, 4, 4], |g, s, v| up.forward(g, s, v))?;

    let mut store = ParamStore::<f64>::new();
    let plain = ConvStage::new(&mut store, "plain", 2, 3, 2, &mut brng)?;
    let x = uniform([2, 2, 4, 4], -1.0, 1.0, &mut r.rng);
    r.block("conv_stage", &store, x, [2, 3, 2, 2], |g, s, v| plain.forward(g, s, v, Mode::Train))?;
    Ok(())
}

/// Whole reduced network in training mode; the scalar is the sum of all six
/// logit maps.
fn network_case(r: &mut Runner, seed: u64) -> Result<()> {
    let cfg = NetworkConfig { stage_widths: REDUCED_WIDTHS, seed, ..NetworkConfig::default() };
    let net = Network::build(&cfg)?.cast::<f64>();
    let x = uniform(REDUCED_INPUT, -1.0, 1.0, &mut r.rng);
    let report = check_gradients(
        std::slice::from_ref(&x),
        net.store(),
        |g, s, v| {
            let out = net.forward_with_store(g, s, v[0], Mode::Train)?;
            let sums: Vec<Var> = out.levels.iter().map(|&l| g.sum(l)).collect();
            g.add_all(&sums)
        },
        r.opts,
    )?;
    r.out.push(SuiteResult { name: format!("network {REDUCED_WIDTHS:?} on {REDUCED_INPUT:?}"), report });
    Ok(())
}
