use lsunet::loss::{deep_supervision_loss, mask_pyramid};
use lsunet::metrics::{binarize_logits, MetricAccumulator};
use lsunet::train::{evaluate, parse_run_tsv, RunPaths};
use lsunet::{
    load_config, synth_generate, AwlState, Dataset, Graph, LabelMode, LossKind, Mode, Network, Pooling, RunConfig,
    Split, SynthOptions, Tensor, Trainer,
};

fn small_run(seed: u64) -> RunConfig {
    RunConfig { stage_widths: [4, 8, 16, 16, 24], batch_size: 4, epochs: 3, seed, ..Default::default() }
}

fn synth(n: usize, classes: usize, seed: u64) -> (tempfile::TempDir, Dataset, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(dir.path(), &SynthOptions { n, size: 32, classes, channels: 3, seed }).unwrap();
    let train = Dataset::load(dir.path(), Some(Split::Train)).unwrap();
    let eval = Dataset::load(dir.path(), Some(Split::Eval)).unwrap();
    (dir, train, eval)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_d, train, _) = synth(8, 1, 1);
    let cfg = RunConfig { batch_size: train.len(), ..small_run(1) };
    let mut t = Trainer::new(&cfg).unwrap();
    let before = t.network().store().clone();
    let sigma = t.awl().sigma();
    let losses: Vec<f64> = (0..3).map(|_| t.train_epoch(&train, 0.0).unwrap()).collect();
    for (p, q) in t.network().store().params().iter().zip(before.params()) {
        assert!(p.tensor().bit_eq(q.tensor()), "{}", p.name());
    }
    assert_eq!(t.awl().sigma(), sigma);
    // Full-batch epochs differ only in sample order inside the batch.
    for l in &losses {
        assert!((l - losses[0]).abs() <= 1e-5 * losses[0].abs(), "{losses:?}");
    }
}

#[test]
fn single_sample_loss_strictly_decreases() {
    let (_d, train, _) = synth(5, 1, 2);
    let one =
        Dataset::from_tensors(train.images.batch_slice(0, 1).unwrap(), train.masks.batch_slice(0, 1).unwrap()).unwrap();
    let mut t = Trainer::new(&small_run(2)).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| t.train_epoch(&one, 1e-3).unwrap()).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    assert_eq!(t.awl().sigma().len(), 6);
}

#[test]
fn seeded_runs_are_identical() {
    let (_d, train, eval) = synth(10, 1, 3);
    let run = || {
        let mut t = Trainer::new(&RunConfig { epochs: 2, ..small_run(3) }).unwrap();
        t.run(&train, &eval, None, |_| {}).unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history(), b.history());
    assert!(a.network().store().bit_eq(b.network().store()));
    assert_eq!(a.epochs_done(), 2);
}

#[test]
fn disabled_awl_keeps_sigma_at_one() {
    let (_d, train, eval) = synth(10, 1, 4);
    let mut t = Trainer::new(&RunConfig { disable_awl: true, epochs: 2, ..small_run(4) }).unwrap();
    t.run(&train, &eval, None, |_| {}).unwrap();
    for row in t.history() {
        assert_eq!(row.sigma, vec![1.0; 6]);
    }
}

#[test]
fn frozen_awl_total_is_half_sum_plus_six_ln2() {
    let (_d, train, _) = synth(5, 2, 5);
    let mut net = Network::build(&RunConfig { num_classes: 2, ..small_run(5) }.network()).unwrap();
    let awl = AwlState::new(true);
    let pyramid = mask_pyramid(&train.masks).unwrap();
    let mut g = Graph::new();
    let x = g.input(train.images.clone());
    let out = net.forward_multiscale(&mut g, x, Mode::Train).unwrap();
    let loss = deep_supervision_loss(&mut g, &out, &pyramid, &[LossKind::Composite; 6], &awl).unwrap();
    let sum: f64 = loss.levels.iter().map(|&l| g.value(l).item() as f64).sum();
    let total = g.value(loss.total).item() as f64;
    let expected = 0.5 * sum + 6.0 * std::f64::consts::LN_2;
    assert!((total - expected).abs() < 1e-6 * expected, "{total} vs {expected}");
}

/// Counts intersections and unions with plain loops over thresholded logits.
fn counting_oracle(net: &mut Network, data: &Dataset) -> (f64, f64) {
    let [n, k, h, w] = data.masks.dims();
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    let mut sizes = vec![0u64; k];
    for s in 0..n {
        let logits = net.predict(&data.images.batch_slice(s, 1).unwrap()).unwrap();
        for c in 0..k {
            for y in 0..h {
                for x in 0..w {
                    let p = logits[0].at([0, c, y, x]) > 0.0;
                    let t = data.masks.at([s, c, y, x]) == 1.0;
                    inter[c] += (p && t) as u64;
                    union[c] += (p || t) as u64;
                    sizes[c] += p as u64 + t as u64;
                }
            }
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let miou = (0..k).map(|c| ratio(inter[c], union[c])).sum::<f64>() / k as f64;
    let dsc = (0..k).map(|c| ratio(2 * inter[c], sizes[c])).sum::<f64>() / k as f64;
    (miou, dsc)
}

#[test]
fn evaluate_matches_counting_oracle() {
    let (_d, _, eval) = synth(15, 2, 6);
    assert_eq!(eval.len(), 3);
    let mut net = Network::build(&RunConfig { num_classes: 2, ..small_run(6) }.network()).unwrap();
    let acc = evaluate(&mut net, &eval, 2, LabelMode::MultiLabel).unwrap();
    let scores = acc.scores(Pooling::Dataset).unwrap();
    let (miou, dsc) = counting_oracle(&mut net, &eval);
    assert_eq!((scores.miou, scores.dsc), (miou, dsc));
    assert_eq!(acc.images(), 3);
}

#[test]
fn masks_as_logits_score_perfectly() {
    let (_d, _, eval) = synth(15, 2, 7);
    let logits: Tensor<f32> = Tensor::from_fn(eval.masks.dims(), |i| 20.0 * eval.masks.at(i) - 10.0);
    let mut acc = MetricAccumulator::new();
    acc.add(&binarize_logits(&logits, LabelMode::MultiLabel), &eval.masks).unwrap();
    for pooling in [Pooling::Dataset, Pooling::PerImage] {
        let s = acc.scores(pooling).unwrap();
        assert_eq!((s.miou, s.dsc), (1.0, 1.0));
    }
}

#[test]
fn run_writes_history_checkpoints_and_sidecar() {
    let (dir, train, eval) = synth(10, 1, 8);
    let ckpt = dir.path().join("out/model.lsc");
    let paths = RunPaths::for_checkpoint(&ckpt);
    let cfg = small_run(8);
    let mut t = Trainer::new(&cfg).unwrap();
    let mut rows = Vec::new();
    t.run(&train, &eval, Some(&paths), |r| rows.push(r.to_string())).unwrap();

    let history = parse_run_tsv(&std::fs::read_to_string(&paths.history).unwrap()).unwrap();
    assert_eq!(history, t.history());
    assert_eq!(rows.len(), 4);
    assert_eq!(history[0].lr, 1e-3);
    assert!(history.windows(2).all(|w| w[1].lr < w[0].lr));
    assert_eq!(load_config(&paths.config).unwrap(), cfg);
    assert!(paths.best.is_file() && paths.last.is_file());
    assert!(paths.last.ends_with("model.final.lsc"));

    let mut restored = Network::build(&cfg.network()).unwrap();
    let mut awl = AwlState::new(false);
    lsunet::io::load_checkpoint(&paths.last, &mut restored, &mut awl).unwrap();
    assert!(restored.store().bit_eq(t.network().store()));
    assert_eq!(awl.sigma(), t.awl().sigma());
}

#[test]
fn empty_eval_split_is_an_error() {
    let (_d, train, _) = synth(5, 1, 9);
    let empty = Dataset::from_tensors(Tensor::zeros([0, 3, 32, 32]), Tensor::zeros([0, 1, 32, 32]));
    if let Ok(empty) = empty {
        let mut t = Trainer::new(&small_run(9)).unwrap();
        assert!(t.step_epoch(&train, &empty, None).is_err());
    }
}
