use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, ShiftVariant, Var};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::layers::Mode;
use crate::params::ParamStore;
use crate::tensor::{Dims, Tensor};

fn random(dims: Dims, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(random(g.value(y).dims(), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn eval_dims<F>(store: &ParamStore<f64>, x: Tensor<f64>, f: F) -> Dims
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, Var) -> Result<Var>,
{
    let mut store = store.clone();
    let mut g = Graph::new();
    let v = g.input(x);
    let y = f(&mut g, &mut store, v).unwrap();
    g.value(y).dims()
}

fn assert_gradcheck<F>(store: &ParamStore<f64>, x: Tensor<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, Var) -> Result<Var> + Sync,
{
    let report = check_gradients(
        &[x],
        store,
        |g, s, v| {
            let y = f(g, s, v[0])?;
            weighted_sum(g, y, 99)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn light_conv_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let enc = LightConvBlock::new(&mut store, "enc", 3, 8, LightConvMode::Encoder, None, &mut rng).unwrap();
    let dec = LightConvBlock::new(&mut store, "dec", 8, 8, LightConvMode::Decoder, None, &mut rng).unwrap();
    let d = eval_dims(&store, random([2, 3, 8, 6], 1), |g, s, x| enc.forward(g, s, x, Mode::Train));
    assert_eq!(d, [2, 8, 4, 3]);
    let d = eval_dims(&store, random([2, 8, 8, 6], 1), |g, s, x| dec.forward(g, s, x, Mode::Train));
    assert_eq!(d, [2, 8, 8, 6]);
    assert!(LightConvBlock::new(&mut store, "bad", 4, 8, LightConvMode::Decoder, None, &mut rng).is_err());
}

#[test]
fn light_conv_parameter_inventory() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    LightConvBlock::new(&mut store, "b", 3, 8, LightConvMode::Encoder, None, &mut rng).unwrap();
    // conv3x3, bn, depthwise, gn, pw1, pw2, skip
    let expected = (8 * 3 * 9 + 8) + 2 * 8 + (8 * 9 + 8) + 2 * 8 + 3 * (8 * 8 + 8);
    assert_eq!(store.num_scalars(), expected);
    assert_eq!(store.buffers().len(), 2);
}

#[test]
fn light_conv_gradcheck_encoder_and_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let enc = LightConvBlock::new(&mut store, "enc", 2, 4, LightConvMode::Encoder, Some(2), &mut rng).unwrap();
    assert_gradcheck(&store, random([2, 2, 4, 4], 2), |g, s, x| enc.forward(g, s, x, Mode::Train));

    let mut store = ParamStore::<f64>::new();
    let dec = LightConvBlock::new(&mut store, "dec", 4, 4, LightConvMode::Decoder, None, &mut rng).unwrap();
    assert_gradcheck(&store, random([2, 4, 4, 4], 3), |g, s, x| dec.forward(g, s, x, Mode::Train));
    assert_gradcheck(&store, random([1, 4, 4, 4], 4), |g, s, x| dec.forward(g, s, x, Mode::Eval));
}

#[test]
fn split_attention_weights_are_convex_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let attn = SplitAttention::new(&mut store, "attn", 4, &mut rng).unwrap();
    let mut g = Graph::new();
    let parts: Vec<Var> = (0..3).map(|k| g.input(random([2, 4, 3, 3], 10 + k))).collect();
    let (_, w) = attn.forward_with_weights(&mut g, &store, &[parts[0], parts[1], parts[2]]).unwrap();
    let wt = g.value(w);
    for n in 0..2 {
        for c in 0..4 {
            let s: f64 = (0..3).map(|k| wt.at([n, k * 4 + c, 0, 0])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn split_attention_of_identical_parts_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let attn = SplitAttention::new(&mut store, "attn", 8, &mut rng).unwrap();
    let x = random([1, 8, 3, 2], 7);
    let mut g = Graph::new();
    let p = g.input(x.clone());
    let y = attn.forward(&mut g, &store, &[p, p, p]).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-12);
}

#[test]
fn spatial_shift_block_shape_and_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    for (i, variant) in [ShiftVariant::A, ShiftVariant::B].into_iter().enumerate() {
        let block = SpatialShiftBlock::new(&mut store, &format!("s{i}"), 4, variant, &mut rng).unwrap();
        let d = eval_dims(&store, random([2, 4, 5, 3], 9), |g, s, x| block.forward(g, s, x));
        assert_eq!(d, [2, 4, 5, 3]);
    }
    let mut store = ParamStore::<f64>::new();
    let block = SpatialShiftBlock::new(&mut store, "s", 4, ShiftVariant::A, &mut rng).unwrap();
    assert_gradcheck(&store, random([2, 4, 4, 3], 10), |g, s, x| block.forward(g, s, x));
    assert!(SpatialShiftBlock::new(&mut store, "bad", 6, ShiftVariant::A, &mut rng).is_err());
}

#[test]
fn tokenized_shift_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let down = TokenizedShiftBlock::new(&mut store, "down", 6, 8, true, ShiftVariant::A, None, &mut rng).unwrap();
    let up = TokenizedShiftBlock::new(&mut store, "up", 8, 8, false, ShiftVariant::B, None, &mut rng).unwrap();
    assert_eq!(eval_dims(&store, random([1, 6, 8, 8], 1), |g, s, x| down.forward(g, s, x)), [1, 8, 4, 4]);
    assert_eq!(eval_dims(&store, random([1, 8, 8, 8], 1), |g, s, x| up.forward(g, s, x)), [1, 8, 8, 8]);
    // A 1x1 map still works: every shift keeps its boundary value.
    assert_eq!(eval_dims(&store, random([1, 6, 2, 2], 1), |g, s, x| down.forward(g, s, x)), [1, 8, 1, 1]);
}

#[test]
fn tokenized_shift_gradcheck_down_and_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let down = TokenizedShiftBlock::new(&mut store, "down", 2, 4, true, ShiftVariant::A, None, &mut rng).unwrap();
    assert_gradcheck(&store, random([1, 2, 6, 6], 13), |g, s, x| down.forward(g, s, x));
    let mut store = ParamStore::<f64>::new();
    let up = TokenizedShiftBlock::new(&mut store, "up", 4, 4, false, ShiftVariant::B, None, &mut rng).unwrap();
    assert_gradcheck(&store, random([1, 4, 4, 4], 14), |g, s, x| up.forward(g, s, x));
}

#[test]
fn conv_stage_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::<f64>::new();
    let stage = ConvStage::new(&mut store, "plain", 2, 3, 2, &mut rng).unwrap();
    assert_eq!(eval_dims(&store, random([2, 2, 6, 6], 1), |g, s, x| stage.forward(g, s, x, Mode::Train)), [2, 3, 3, 3]);
    assert_gradcheck(&store, random([2, 2, 4, 4], 16), |g, s, x| stage.forward(g, s, x, Mode::Train));
}
