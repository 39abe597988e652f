use lsunet::autodiff::Graph;
use lsunet::network::{count_params_flops, NUM_LEVELS};
use lsunet::{Error, Mode, Network, NetworkConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Registry walk of the default network (K = 1), recorded once.
const DEFAULT_PARAM_COUNT: usize = 1_817_318;

fn random(dims: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn conv(i: usize, o: usize, k: usize) -> usize {
    o * i * k * k + o
}

/// Hand count of the layer inventory, written from the block definitions
/// rather than by walking the store.
fn expected_params(cfg: &NetworkConfig) -> usize {
    let w = cfg.stage_widths;
    let lc_enc = |i: usize, o: usize| conv(i, o, 3) + 2 * o + 10 * o + 2 * o + 3 * conv(o, o, 1);
    let lc_dec = |c: usize| conv(c, c, 3) + 2 * c + 10 * c + 2 * c + 2 * conv(c, c, 1);
    let shift = |c: usize| {
        let h = (c / 4).max(4);
        conv(c, 3 * c, 1) + (h * c + h) + (3 * c * h + 3 * c)
    };
    let ts = |i: usize, o: usize, down: bool| {
        let t = if down { o } else { i };
        let embed = if down { conv(i, o, 3) } else { 0 };
        embed + conv(t, o, 1) + shift(o) + 10 * o + 2 * o + 2 * conv(o, o, 1) + conv(t, o, 1)
    };
    let plain = |i: usize, o: usize| conv(i, o, 3) + 2 * o;
    let conv_kind = |s: usize| s < cfg.conv_stages;

    let mut total = 0;
    let mut prev = cfg.in_channels;
    for (s, &o) in w.iter().enumerate() {
        total += match (conv_kind(s), cfg.disable_light_conv, cfg.disable_tokenized_shift) {
            (true, false, _) => lc_enc(prev, o),
            (false, _, false) => ts(prev, o, true),
            _ => plain(prev, o),
        };
        prev = o;
    }
    for level in (0..5).rev() {
        let c = if level == 0 { w[0] } else { w[level - 1] };
        total += conv(prev, c, 1);
        total += match (conv_kind(level), cfg.disable_light_conv, cfg.disable_tokenized_shift) {
            (true, false, _) => lc_dec(c),
            (false, _, false) => ts(c, c, false),
            _ => plain(c, c),
        };
        prev = c;
    }
    let head_widths = [w[0], w[0], w[1], w[2], w[3], w[4]];
    total + head_widths.iter().map(|&c| conv(c, cfg.num_classes, 1)).sum::<usize>()
}

#[test]
fn six_levels_at_64_with_two_classes() {
    let cfg = NetworkConfig { num_classes: 2, stage_widths: [4, 8, 16, 16, 24], ..Default::default() };
    let mut net = Network::build(&cfg).unwrap();
    let out = net.predict(&random([1, 3, 64, 64], 1)).unwrap();
    assert_eq!(out.len(), NUM_LEVELS);
    for (i, t) in out.iter().enumerate() {
        assert_eq!(t.dims(), [1, 2, 64 >> i, 64 >> i], "level {i}");
    }
}

#[test]
fn default_network_at_224_with_three_classes() {
    let cfg = NetworkConfig { num_classes: 3, ..Default::default() };
    let mut net = Network::build(&cfg).unwrap();
    let out = net.predict(&random([1, 3, 224, 224], 2)).unwrap();
    let sizes: Vec<usize> = out.iter().map(|t| t.dims()[2]).collect();
    assert_eq!(sizes, [224, 112, 56, 28, 14, 7]);
    assert!(out.iter().all(|t| t.dims()[1] == 3 && t.all_finite()));
}

#[test]
fn invalid_inputs_are_shape_errors() {
    let mut net = Network::build(&NetworkConfig { stage_widths: [4, 4, 8, 8, 8], ..Default::default() }).unwrap();
    assert!(matches!(net.predict(&random([1, 3, 48, 64], 0)), Err(Error::Shape(_))));
    assert!(matches!(net.predict(&random([1, 1, 64, 64], 0)), Err(Error::Shape(_))));
}

#[test]
fn build_errors_name_the_stage() {
    let cfg = NetworkConfig { stage_widths: [4, 8, 16, 18, 24], ..Default::default() };
    let err = Network::build(&cfg).unwrap_err().to_string();
    assert!(err.contains("stage 3"), "{err}");
    let cfg = NetworkConfig { stage_widths: [4, 0, 16, 16, 24], ..Default::default() };
    assert!(Network::build(&cfg).is_err());
}

#[test]
fn default_param_count_is_pinned_and_matches_hand_count() {
    let cfg = NetworkConfig::default();
    let net = Network::build(&cfg).unwrap();
    assert_eq!(net.num_params(), DEFAULT_PARAM_COUNT);
    assert_eq!(expected_params(&cfg), DEFAULT_PARAM_COUNT);
    let names: std::collections::HashSet<&str> = net.store().params().iter().map(|p| p.name()).collect();
    assert_eq!(names.len(), net.store().params().len());
}

#[test]
fn hand_count_covers_ablations_and_class_counts() {
    for cfg in [
        NetworkConfig { num_classes: 3, ..Default::default() },
        NetworkConfig { disable_light_conv: true, ..Default::default() },
        NetworkConfig { disable_tokenized_shift: true, ..Default::default() },
        NetworkConfig { stage_widths: [4, 8, 32, 40, 64], ..Default::default() },
    ] {
        assert_eq!(Network::build(&cfg).unwrap().num_params(), expected_params(&cfg), "{cfg:?}");
    }
}

#[test]
fn ablations_shrink_the_network() {
    let full = Network::build(&NetworkConfig::default()).unwrap().num_params();
    let no_lc = Network::build(&NetworkConfig { disable_light_conv: true, ..Default::default() }).unwrap().num_params();
    let no_ts =
        Network::build(&NetworkConfig { disable_tokenized_shift: true, ..Default::default() }).unwrap().num_params();
    assert!(no_lc < full && no_ts < full, "{no_lc} {no_ts} {full}");
}

#[test]
fn same_seed_same_parameters() {
    let cfg = NetworkConfig { seed: 11, ..Default::default() };
    let a = Network::build(&cfg).unwrap();
    let b = Network::build(&cfg).unwrap();
    assert!(a.store().bit_eq(b.store()));
    let c = Network::build(&NetworkConfig { seed: 12, ..Default::default() }).unwrap();
    assert!(!a.store().bit_eq(c.store()));
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let cfg = NetworkConfig { stage_widths: [4, 8, 16, 16, 24], ..Default::default() };
    let mut net = Network::build(&cfg).unwrap();
    let x0 = random([1, 3, 32, 64], 3);
    let x1 = random([1, 3, 32, 64], 4);
    let a = net.predict(&x0).unwrap();
    let b = net.predict(&x0).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.bit_eq(q)));

    let both = net.predict(&Tensor::concat_batch(&[&x0, &x1]).unwrap()).unwrap();
    let single1 = net.predict(&x1).unwrap();
    for level in 0..NUM_LEVELS {
        assert!(both[level].batch_slice(0, 1).unwrap().bit_eq(&a[level]), "level {level}");
        assert!(both[level].batch_slice(1, 1).unwrap().bit_eq(&single1[level]), "level {level}");
    }
}

#[test]
fn f64_cast_agrees_with_f32() {
    let cfg = NetworkConfig { stage_widths: [4, 8, 16, 16, 24], ..Default::default() };
    let mut net = Network::build(&cfg).unwrap();
    let mut net64 = net.cast::<f64>();
    let x = random([1, 3, 32, 32], 5);
    let a = net.predict(&x).unwrap();
    let b = net64.predict(&x.cast()).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!(p.cast::<f64>().max_abs_diff(q) < 1e-4);
    }
}

#[test]
fn training_forward_updates_only_running_stats() {
    let cfg = NetworkConfig { stage_widths: [4, 8, 16, 16, 24], ..Default::default() };
    let mut net = Network::build(&cfg).unwrap();
    let before = net.store().clone();
    let mut g = Graph::new();
    let x = g.input(random([2, 3, 32, 32], 6));
    let out = net.forward_multiscale(&mut g, x, Mode::Train).unwrap();
    assert_eq!(out.levels.len(), NUM_LEVELS);
    assert_eq!(out.finest(), out.levels[0]);
    for (p, q) in net.store().params().iter().zip(before.params()) {
        assert!(p.tensor().bit_eq(q.tensor()));
    }
    assert!(net.store().buffers().iter().zip(before.buffers()).any(|(p, q)| !p.tensor.bit_eq(&q.tensor)));
}

#[test]
fn single_pointwise_conv_flops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let layer = lsunet::layers::Conv2d::pointwise(&mut store, "pw", 3, 4, 1, &mut rng).unwrap();
    let (params, flops) =
        count_params_flops(&store, [1, 3, 224, 224], |g, s, x| layer.forward(g, s, x).map(|_| ())).unwrap();
    assert_eq!(params, 16);
    assert_eq!(flops, 2 * (3 * 224 * 224 * 4) + 4 * 224 * 224);
}

#[test]
fn zero_layer_network_counts_nothing() {
    let store = ParamStore::<f32>::new();
    assert_eq!(count_params_flops(&store, [1, 3, 224, 224], |_, _, _| Ok(())).unwrap(), (0, 0));
}

#[test]
fn network_flops_are_counted() {
    let net = Network::build(&NetworkConfig::default()).unwrap();
    let (params, flops) = net.count_params_flops([1, 3, 224, 224]).unwrap();
    assert_eq!(params, DEFAULT_PARAM_COUNT);
    // Dominated by the full-resolution 3x3 convs; well above 1 GFLOP.
    assert!(flops > 1_000_000_000 && flops < 3_000_000_000, "{flops}");
}
