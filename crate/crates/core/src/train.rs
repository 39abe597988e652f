//! Epoch loop: shuffled mini-batches, deep-supervision loss, Adam with a
//! per-epoch cosine schedule, evaluation and checkpointing.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::layers::Mode;
use crate::loss::{deep_supervision_loss, mask_pyramid, AwlState};
use crate::metrics::{binarize_logits, LabelMode, MetricAccumulator, Scores};
use crate::network::{Network, NUM_LEVELS};
use crate::optim::{cosine_lr, Adam};
use crate::params::ParamStore;

/// Column header of `run.tsv` and of the per-epoch stdout lines.
pub const TSV_HEADER: &str =
    "epoch\tlr\ttrain_loss\teval_miou\teval_dsc\tsigma0\tsigma1\tsigma2\tsigma3\tsigma4\tsigma5";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the combined loss over the epoch.
    pub train_loss: f64,
    pub eval: Scores,
    pub sigma: Vec<f64>,
}

impl EpochReport {
    pub fn tsv_row(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{}\t{}", self.epoch, self.lr, self.train_loss, self.eval.miou, self.eval.dsc);
        for v in &self.sigma {
            write!(s, "\t{v}").expect("write to string");
        }
        s
    }

    pub fn parse_tsv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 + NUM_LEVELS {
            return Err(Error::Value(format!("expected {} columns, got {}", 5 + NUM_LEVELS, fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Value(format!("column {}: {:?} is not a number", i + 1, fields[i])))
        };
        let epoch =
            fields[0].trim().parse::<usize>().map_err(|_| Error::Value(format!("bad epoch {:?}", fields[0])))?;
        Ok(Self {
            epoch,
            lr: num(1)?,
            train_loss: num(2)?,
            eval: Scores { miou: num(3)?, dsc: num(4)? },
            sigma: (5..5 + NUM_LEVELS).map(num).collect::<Result<_>>()?,
        })
    }
}

/// Parses a `run.tsv` history (header plus one row per epoch).
pub fn parse_run_tsv(text: &str) -> Result<Vec<EpochReport>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim_end() == TSV_HEADER => {}
        Some(h) => return Err(Error::Value(format!("unexpected header {h:?}"))),
        None => return Err(Error::Value("empty history".into())),
    }
    let rows: Vec<EpochReport> = lines
        .enumerate()
        .map(|(i, l)| EpochReport::parse_tsv_row(l).map_err(|e| Error::Value(format!("row {}: {e}", i + 1))))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Value("history has no epochs".into()));
    }
    Ok(rows)
}

/// Files written next to a checkpoint path `<dir>/<name>.lsc`.
#[derive(Debug, Clone)]
pub struct RunPaths {
    /// Best checkpoint by eval DSC.
    pub best: PathBuf,
    /// Checkpoint after the last epoch: `<name>.final.lsc`.
    pub last: PathBuf,
    /// Run configuration sidecar: `<name>.lsc.json`.
    pub config: PathBuf,
    pub history: PathBuf,
}

impl RunPaths {
    pub fn for_checkpoint(ckpt: impl AsRef<Path>) -> Self {
        let best = ckpt.as_ref().to_path_buf();
        let dir = best.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = best.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        Self {
            last: dir.join(format!("{stem}.final.lsc")),
            config: config_sidecar(&best),
            history: dir.join("run.tsv"),
            best,
        }
    }
}

/// `<ckpt>.json`: the run configuration stored next to a checkpoint.
pub fn config_sidecar(ckpt: impl AsRef<Path>) -> PathBuf {
    let mut s = ckpt.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Eval-mode metrics of the finest output over `data`.
pub fn evaluate(
    net: &mut Network,
    data: &Dataset,
    batch_size: usize,
    label_mode: LabelMode,
) -> Result<MetricAccumulator> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut acc = MetricAccumulator::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = net.predict(&x)?;
        acc.add(&binarize_logits(&logits[0], label_mode), &y)?;
    }
    Ok(acc)
}

pub struct Trainer {
    cfg: RunConfig,
    net: Network,
    awl: AwlState,
    opt: Adam,
    rng: ChaCha8Rng,
    history: Vec<EpochReport>,
    best: Option<(usize, f64)>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(&cfg.network())?;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            awl: AwlState::new(cfg.disable_awl),
            opt: Adam::new(),
            // Shuffling stream, independent of the initialization stream.
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed),
            history: Vec::new(),
            best: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn awl(&self) -> &AwlState {
        &self.awl
    }

    pub fn history(&self) -> &[EpochReport] {
        &self.history
    }

    /// `(epoch, eval DSC)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Learning rate for the next epoch.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.history.len(), self.cfg.epochs, self.cfg.lr, self.cfg.lr_min)
    }

    /// One pass over `data` in a fresh seeded order at learning rate `lr`.
    /// Returns the sample-weighted mean combined loss.
    pub fn train_epoch(&mut self, data: &Dataset, lr: f64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let kinds = self.cfg.level_kinds();
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (x, y) = data.batch(chunk)?;
            let pyramid = mask_pyramid(&y)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let out = self.net.forward_multiscale(&mut g, xv, Mode::Train)?;
            let loss = deep_supervision_loss(&mut g, &out, &pyramid, &kinds, &self.awl).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("batch {b}: {m}")),
                other => other,
            })?;
            let value = g.value(loss.total).item() as f64;
            if !value.is_finite() {
                let levels: Vec<f32> = loss.levels.iter().map(|&v| g.value(v).item()).collect();
                return Err(Error::NonFinite(format!("batch {b}: combined loss {value}, level losses {levels:?}")));
            }
            total += value * chunk.len() as f64;
            g.backward(loss.total)?;
            self.net.store_mut().accumulate_grads(&g);
            let mut stores: Vec<&mut ParamStore> = vec![self.net.store_mut()];
            if !self.awl.is_frozen() {
                self.awl.accumulate_grad(&g, loss.sigma);
                stores.push(self.awl.store_mut());
            }
            self.opt.step(&mut stores, lr)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Trains one epoch on `train`, evaluates on `eval` and records the
    /// report. Saves the best checkpoint to `paths.best` when DSC improves.
    pub fn step_epoch(&mut self, train: &Dataset, eval: &Dataset, paths: Option<&RunPaths>) -> Result<&EpochReport> {
        let lr = self.current_lr();
        let train_loss = self.train_epoch(train, lr)?;
        let scores =
            evaluate(&mut self.net, eval, self.cfg.batch_size, self.cfg.label_mode)?.scores(self.cfg.pooling)?;
        let epoch = self.history.len() + 1;
        if self.best.is_none_or(|(_, d)| scores.dsc > d) {
            self.best = Some((epoch, scores.dsc));
            if let Some(p) = paths {
                save_checkpoint(&p.best, &self.net, &self.awl)?;
            }
        }
        self.history.push(EpochReport { epoch, lr, train_loss, eval: scores, sigma: self.awl.sigma() });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs all remaining epochs. With `paths`, writes the config sidecar,
    /// `run.tsv`, the best and the final checkpoint. Every TSV row is also
    /// passed to `on_row`.
    pub fn run(
        &mut self,
        train: &Dataset,
        eval: &Dataset,
        paths: Option<&RunPaths>,
        mut on_row: impl FnMut(&str),
    ) -> Result<()> {
        let mut tsv = match paths {
            Some(p) => {
                if let Some(dir) = p.best.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                fs::write(&p.config, self.cfg.to_json() + "\n").map_err(|e| Error::io(&p.config, e))?;
                let mut f = File::create(&p.history).map_err(|e| Error::io(&p.history, e))?;
                writeln!(f, "{TSV_HEADER}").map_err(|e| Error::io(&p.history, e))?;
                Some((f, p.history.clone()))
            }
            None => None,
        };
        on_row(TSV_HEADER);
        while self.history.len() < self.cfg.epochs {
            let row = self.step_epoch(train, eval, paths)?.tsv_row();
            if let Some((f, path)) = tsv.as_mut() {
                writeln!(f, "{row}").and_then(|_| f.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_row(&row);
        }
        if let Some(p) = paths {
            save_checkpoint(&p.last, &self.net, &self.awl)?;
        }
        Ok(())
    }
}
