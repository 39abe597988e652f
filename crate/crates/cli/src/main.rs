//! `lsunet` command-line interface.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, data or
//! files; failed gradient checks), 2 runtime failure.

mod plots;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use lsunet::gradcheck::suite::{run_suite, Scope};
use lsunet::gradcheck::GradCheckOptions;
use lsunet::io::load_checkpoint;
use lsunet::metrics::binarize_logits;
use lsunet::train::{config_sidecar, evaluate, parse_run_tsv, RunPaths};
use lsunet::{
    load_config, synth_generate, AwlState, Dataset, Error, Network, Pooling, Result, RunConfig, Split, SynthOptions,
    Trainer,
};

use plots::{line_chart, pgm, Series};

/// Reference model size and cost of the published architecture.
const REFERENCE_PARAMS_M: f64 = 1.08;
const REFERENCE_GFLOPS: f64 = 1.10;
const BENCH_RUNS: usize = 10;

#[derive(Parser)]
#[command(name = "lsunet", version, about = "Lightweight shift U-Net: data, training, evaluation and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory; writes checkpoints and run.tsv next to --out.
    Train {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Best-checkpoint path (e.g. runs/model.lsc).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (its configuration is read from <ckpt>.json).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Op)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the analytic GELU derivative by 1.1 (negative control).
        #[arg(long)]
        corrupt_gelu: bool,
    },
    /// Report parameter count, FLOPs and forward time.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Render charts from run.tsv, plus prediction panels when --ckpt and --data are given.
    ExportPlots {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of samples rendered as panels.
        #[arg(long, default_value_t = 4)]
        panels: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Eval => Some(Split::Eval),
            SplitArg::All => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Network,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { out, n, size, classes, channels, seed } => {
            let m = synth_generate(&out, &SynthOptions { n, size, classes, channels, seed })?;
            println!(
                "wrote {} samples ({size}x{size}, {classes} class(es)) to {}: {} train, {} eval",
                m.samples.len(),
                out.display(),
                m.count(Split::Train),
                m.count(Split::Eval)
            );
        }
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out)?,
        Command::Eval { ckpt, data, split } => eval(&ckpt, &data, split.split())?,
        Command::Gradcheck { scope, seed, corrupt_gelu } => return gradcheck(scope, seed, corrupt_gelu),
        Command::Bench { config, size } => bench(config.as_deref(), size)?,
        Command::ExportPlots { run, out, ckpt, data, panels } => {
            export_plots(&run, &out, ckpt.as_deref(), data.as_deref(), panels)?
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn check_compatible(cfg: &RunConfig, data: &Dataset, what: &str) -> Result<()> {
    let [_, c, _, _] = data.images.dims();
    if data.num_classes() != cfg.num_classes || c != cfg.in_channels {
        return Err(Error::Config(format!(
            "{what} has {c} channel(s) and {} class(es); configuration expects {} and {}",
            data.num_classes(),
            cfg.in_channels,
            cfg.num_classes
        )));
    }
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = config_or_default(config)?;
    let train = Dataset::load(data, Some(Split::Train))?;
    let eval = Dataset::load(data, Some(Split::Eval))?;
    check_compatible(&cfg, &train, "dataset")?;
    let paths = RunPaths::for_checkpoint(out);
    let mut trainer = Trainer::new(&cfg)?;
    println!("{} parameters, {} train / {} eval samples", trainer.network().num_params(), train.len(), eval.len());
    trainer.run(&train, &eval, Some(&paths), |row| println!("{row}"))?;
    let last = trainer.history().last().expect("at least one epoch");
    println!("final eval: mIoU {:.4} DSC {:.4}", last.eval.miou, last.eval.dsc);
    if let Some((epoch, dsc)) = trainer.best() {
        println!("best eval DSC {dsc:.4} at epoch {epoch} -> {}", paths.best.display());
    }
    println!("final checkpoint -> {}", paths.last.display());
    Ok(())
}

/// Builds the network described by the checkpoint's sidecar and loads its weights.
fn load_model(ckpt: &Path) -> Result<(RunConfig, Network)> {
    let sidecar = config_sidecar(ckpt);
    if !sidecar.is_file() {
        return Err(Error::Config(format!("missing configuration sidecar {}", sidecar.display())));
    }
    let cfg = load_config(&sidecar)?;
    let mut net = Network::build(&cfg.network())?;
    let mut awl = AwlState::new(cfg.disable_awl);
    load_checkpoint(ckpt, &mut net, &mut awl)?;
    Ok((cfg, net))
}

fn eval(ckpt: &Path, data: &Path, split: Option<Split>) -> Result<()> {
    let (cfg, mut net) = load_model(ckpt)?;
    let data = Dataset::load(data, split)?;
    check_compatible(&cfg, &data, "dataset")?;
    let acc = evaluate(&mut net, &data, cfg.batch_size, cfg.label_mode)?;
    println!("{} samples", acc.images());
    for (label, pooling) in [("dataset-pooled", Pooling::Dataset), ("per-image", Pooling::PerImage)] {
        let s = acc.scores(pooling)?;
        println!("{label}: mIoU {:.4} DSC {:.4}", s.miou, s.dsc);
    }
    Ok(())
}

fn gradcheck(scope: ScopeArg, seed: u64, corrupt_gelu: bool) -> Result<ExitCode> {
    let scope = match scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Network => Scope::Network,
    };
    let opts = GradCheckOptions { gelu_grad_scale: if corrupt_gelu { 1.1 } else { 1.0 }, seed, ..scope.options() };
    let start = Instant::now();
    let results = run_suite(scope, seed, &opts)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.report.passed() { "ok" } else { "FAIL" };
        failed += !r.report.passed() as usize;
        println!(
            "{status:4} {:32} max rel err {:.3e}  ({} probes, worst {})",
            r.name, r.report.max_rel_error, r.report.probes, r.report.worst
        );
    }
    println!(
        "{} of {} passed (tol {:.0e}) in {:.1}s",
        results.len() - failed,
        results.len(),
        opts.tol,
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(config: Option<&Path>, size: usize) -> Result<()> {
    let cfg = config_or_default(config)?;
    let mut net = Network::build(&cfg.network())?;
    let dims = [1, cfg.in_channels, size, size];
    let (params, flops) = net.count_params_flops(dims)?;
    let x = lsunet::Tensor::zeros(dims);
    net.predict(&x)?;
    let start = Instant::now();
    for _ in 0..BENCH_RUNS {
        net.predict(&x)?;
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / BENCH_RUNS as f64;
    println!("input        {dims:?}");
    println!("parameters   {params} ({:.3} M)", params as f64 / 1e6);
    println!("FLOPs        {flops} ({:.3} G)", flops as f64 / 1e9);
    println!("forward      {ms:.1} ms (mean of {BENCH_RUNS} warm runs)");
    println!("reference    {REFERENCE_PARAMS_M:.2} M parameters, {REFERENCE_GFLOPS:.2} GFLOPs at 224x224");
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn export_plots(run: &Path, out: &Path, ckpt: Option<&Path>, data: Option<&Path>, panels: usize) -> Result<()> {
    let text = fs::read_to_string(run).map_err(|e| Error::Io { path: run.to_path_buf(), source: e })?;
    let rows = parse_run_tsv(&text).map_err(|e| Error::Value(format!("{}: {e}", run.display())))?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;

    let epochs: Vec<f64> = rows.iter().map(|r| r.epoch as f64).collect();
    let col = |f: &dyn Fn(&lsunet::train::EpochReport) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let loss = col(&|r| r.train_loss);
    let miou = col(&|r| r.eval.miou);
    let dsc = col(&|r| r.eval.dsc);
    let sigmas: Vec<Vec<f64>> = (0..6).map(|i| col(&|r| r.sigma[i])).collect();
    let charts = [
        ("loss.svg", "Training loss", vec![Series { label: "train loss".into(), values: &loss }]),
        ("miou.svg", "Eval mIoU", vec![Series { label: "mIoU".into(), values: &miou }]),
        ("dsc.svg", "Eval DSC", vec![Series { label: "DSC".into(), values: &dsc }]),
        (
            "sigma.svg",
            "Loss weights sigma",
            sigmas.iter().enumerate().map(|(i, v)| Series { label: format!("sigma{i} (l{i})"), values: v }).collect(),
        ),
    ];
    for (file, title, series) in &charts {
        let path = out.join(file);
        write(&path, line_chart(title, "epoch", &epochs, series))?;
        println!("wrote {}", path.display());
    }

    match (ckpt, data) {
        (Some(ckpt), Some(data)) => export_panels(ckpt, data, out, panels),
        (None, None) => Ok(()),
        _ => Err(Error::Config("--ckpt and --data must be given together".into())),
    }
}

/// One PGM per sample: image (channel mean) | ground truth | prediction,
/// with classes merged by maximum.
fn export_panels(ckpt: &Path, data: &Path, out: &Path, count: usize) -> Result<()> {
    let (cfg, mut net) = load_model(ckpt)?;
    let data = Dataset::load(data, None)?;
    check_compatible(&cfg, &data, "dataset")?;
    let [_, c, h, w] = data.images.dims();
    let k = data.num_classes();
    for s in 0..count.min(data.len()) {
        let (x, y) = data.batch(&[s])?;
        let pred = binarize_logits(&net.predict(&x)?[0], cfg.label_mode);
        let mut pixels = vec![0.0f32; 3 * w * h];
        for i in 0..h {
            for j in 0..w {
                let row = &mut pixels[i * 3 * w..(i + 1) * 3 * w];
                row[j] = (0..c).map(|ch| x.at([0, ch, i, j])).sum::<f32>() / c as f32;
                row[w + j] = (0..k).map(|ch| y.at([0, ch, i, j])).fold(0.0, f32::max);
                row[2 * w + j] = (0..k).map(|ch| pred.at([0, ch, i, j])).fold(0.0, f32::max);
            }
        }
        let path = out.join(format!("pred_{}.pgm", data.stems[s]));
        write(&path, pgm(3 * w, h, &pixels))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
