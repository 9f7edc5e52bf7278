//! `dcrl` command-line interface.

mod config;
mod dataset;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcrl::autoencoder::{pretrain_model, Autoencoder};
use dcrl::checkpoint::{Checkpoint, Stage};
use dcrl::data::{self, Dataset, SplitSpec};
use dcrl::metrics::{self, MetricsReport};
use dcrl::trainer::{self, embeddings_csv, history_csv, Trainer};
use dcrl::DcrlError;

use config::{Common, Hyper, Resolved};
use dataset::DatasetSpec;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Unreadable or malformed input data; exit code 3.
    Data(String),
    /// Non-finite loss during training; exit code 4.
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "dcrl", version, about = "Deep clustering with geometric structure preservation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the denoising autoencoder; writes pretrain.ckpt and pretrain_loss.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Fine-tune with clustering and structure losses; writes model.ckpt,
    /// history.csv and embeddings.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        /// Pretraining checkpoint to start from, or a training checkpoint to resume.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretrain from scratch first.
        #[arg(long, conflicts_with = "checkpoint")]
        pretrain_first: bool,
    },
    /// Score a trained model on a dataset; writes metrics.json, metrics.csv
    /// and embeddings.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sanity mode: the embedding is the input and predictions are the labels.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        #[arg(long, default_value_t = metrics::DEFAULT_K1)]
        k1: usize,
        #[arg(long, default_value_t = metrics::DEFAULT_K2)]
        k2: usize,
    },
    /// Write a synthetic dataset as CSV (x0..x{d-1},label) to --out.
    GenData {
        /// blobs:... or manifolds:...
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("--out {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "--out {} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Usage(format!("--out {}: {e}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn out_dir(r: &Resolved) -> Result<PathBuf, CliError> {
    r.run.out.clone().ok_or_else(|| CliError::Usage("missing --out".into()))
}

/// Loads, standardizes and splits the dataset named by the run settings.
fn load_dataset(r: &Resolved, raw: bool) -> Result<Dataset, CliError> {
    let spec = r.run.dataset.as_deref().ok_or_else(|| CliError::Usage("missing --dataset".into()))?;
    let spec = DatasetSpec::parse(spec)?;
    let mut ds = spec.load(r.train.seed)?;
    if spec.is_vector_data() && !raw {
        ds = data::zscore(&ds);
    }
    match (r.run.split, r.run.part.as_deref()) {
        (None, None) => Ok(ds),
        (None, Some(_)) => Err(CliError::Usage("--part needs --split".into())),
        (Some(fraction), part) => {
            let spec = SplitSpec { train_fraction: fraction, seed: r.train.seed };
            let (train, test) = data::split_indices(&ds, spec).map_err(|e| CliError::Usage(format!("--split: {e}")))?;
            match part.unwrap_or("train") {
                "train" => Ok(ds.subset(&train, format!("{}-train", ds.name))),
                "test" => Ok(ds.subset(&test, format!("{}-test", ds.name))),
                other => Err(CliError::Usage(format!("--part must be train or test, got `{other}`"))),
            }
        }
    }
}

/// Uses the dataset's class count when `clusters` was never set.
fn infer_clusters(r: &mut Resolved, ds: &Dataset) {
    if !r.clusters_explicit {
        if let Some(c) = ds.num_classes {
            r.train.clusters = c;
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    ck.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("--checkpoint {}: {e}", path.display())))
}

/// Maps a training failure to an exit code, writing `abort.ckpt` first on
/// a numerical abort.
fn training_error(e: DcrlError, dir: &Path, abort: impl FnOnce() -> Checkpoint) -> CliError {
    match e {
        DcrlError::Numerical { .. } => {
            let path = dir.join("abort.ckpt");
            match abort().save(&path) {
                Ok(()) => CliError::Numerical(format!("{e}; state saved to {}", path.display())),
                Err(save) => CliError::Numerical(format!("{e}; saving {} failed: {save}", path.display())),
            }
        }
        DcrlError::Io(_) | DcrlError::Parse { .. } | DcrlError::Format { .. } => CliError::Data(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

/// Pretrains into `dir`, returning the model.
fn run_pretrain(r: &Resolved, x: &dcrl::Matrix, dir: &Path, quiet: bool) -> Result<Autoencoder, CliError> {
    let cfg = &r.train;
    let mut model = Autoencoder::new(cfg.architecture(x.cols()), cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    if !quiet {
        eprintln!("pretraining {} epochs on {} x {}", cfg.pretrain_epochs, x.rows(), x.cols());
    }
    let losses = pretrain_model(&mut model, x, &cfg.pretrain_config()).map_err(|e| {
        let stopped = match &e {
            DcrlError::Numerical { epoch, .. } => *epoch,
            _ => 0,
        };
        training_error(e, dir, || Checkpoint::pretrained(cfg.clone(), model.clone(), stopped))
    })?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    write_file(&dir.join("pretrain_loss.csv"), &csv)?;
    save_checkpoint(&Checkpoint::pretrained(cfg.clone(), model.clone(), cfg.pretrain_epochs), &dir.join("pretrain.ckpt"))?;
    if !quiet {
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            eprintln!("pretraining loss {first:.5} -> {last:.5}");
        }
    }
    Ok(model)
}

fn cmd_pretrain(common: Common, hyper: Hyper) -> Result<(), CliError> {
    let mut r = config::resolve(&common, &hyper, None)?;
    let ds = load_dataset(&r, common.raw)?;
    infer_clusters(&mut r, &ds);
    let dir = out_dir(&r)?;
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join("config.json"), &config::to_file_json(&r))?;
    run_pretrain(&r, &ds.x, &dir, common.quiet)?;
    Ok(())
}

fn cmd_train(common: Common, hyper: Hyper, checkpoint: Option<PathBuf>, pretrain_first: bool) -> Result<(), CliError> {
    let checkpoint = checkpoint.or(config::checkpoint_setting(&common)?);
    let loaded = match &checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None if pretrain_first => None,
        None => return Err(CliError::Usage("train needs --checkpoint or --pretrain-first".into())),
    };
    let mut r = config::resolve(&common, &hyper, loaded.as_ref().map(|c| &c.config))?;
    let ds = load_dataset(&r, common.raw)?;
    infer_clusters(&mut r, &ds);
    let dir = out_dir(&r)?;
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join("config.json"), &config::to_file_json(&r))?;
    let labels = ds.labels.as_deref();

    let mut t = match loaded {
        None => {
            let model = run_pretrain(&r, &ds.x, &dir, common.quiet)?;
            Trainer::new(r.train.clone(), model, &ds.x).map_err(|e| CliError::Usage(e.to_string()))?
        }
        Some(ck) if ck.stage == Stage::Pretrain => {
            if ck.model.arch != r.train.architecture(ds.dim()) {
                return Err(CliError::Usage(format!(
                    "--checkpoint architecture {:?} does not match the configured one for {}-dimensional data",
                    ck.model.arch.encoder_dims(),
                    ds.dim()
                )));
            }
            Trainer::new(r.train.clone(), ck.model, &ds.x).map_err(|e| CliError::Usage(e.to_string()))?
        }
        Some(ck) => {
            let mut t = ck.into_trainer().map_err(|e| CliError::Data(e.to_string()))?;
            if t.model.input_dim() != ds.dim() {
                return Err(CliError::Usage(format!(
                    "--checkpoint expects {} features, dataset has {}",
                    t.model.input_dim(),
                    ds.dim()
                )));
            }
            if t.config.architecture(ds.dim()) != r.train.architecture(ds.dim()) || t.config.clusters != r.train.clusters {
                return Err(CliError::Usage("cannot change the architecture or cluster count when resuming".into()));
            }
            t.config = r.train.clone();
            t
        }
    };

    while !t.is_finished() {
        let rec = match t.run_epoch(&ds.x, labels) {
            Ok(rec) => rec,
            Err(e) => return Err(training_error(e, &dir, || Checkpoint::from_trainer(&t))),
        };
        if !common.quiet {
            let mut line = format!(
                "epoch {:>4}/{} alpha {:.4} beta {:.4} ae {:.5} cluster {:.5} rank {:.4} lis {:.4} align {:.4}",
                rec.epoch + 1,
                t.config.epochs,
                rec.alpha,
                rec.beta,
                rec.l_ae,
                rec.l_cluster,
                rec.l_rank,
                rec.l_lis,
                rec.l_align
            );
            if let (Some(acc), Some(nmi)) = (rec.acc, rec.nmi) {
                line.push_str(&format!(" acc {acc:.4} nmi {nmi:.4}"));
            }
            eprintln!("{line}");
        }
    }
    save_checkpoint(&Checkpoint::from_trainer(&t), &dir.join("model.ckpt"))?;
    write_file(&dir.join("history.csv"), &history_csv(t.history()))?;
    let (z, pred) = t.predict(&ds.x).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&dir.join("embeddings.csv"), &embeddings_csv(&z, &pred, labels))?;
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: Option<PathBuf>, identity: bool, k1: usize, k2: usize) -> Result<(), CliError> {
    let checkpoint = if identity { None } else { checkpoint.or(config::checkpoint_setting(&common)?) };
    let loaded = match &checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None if identity => None,
        None => return Err(CliError::Usage("eval needs --checkpoint or --identity".into())),
    };
    let r = config::resolve(&common, &Hyper::default(), loaded.as_ref().map(|c| &c.config))?;
    let ds = load_dataset(&r, common.raw)?;
    let labels = ds
        .labels
        .clone()
        .ok_or_else(|| CliError::Data("--dataset has no labels; eval needs ground truth".into()))?;
    let (z, pred) = match &loaded {
        None => (ds.x.clone(), labels.clone()),
        Some(ck) => {
            if ck.model.input_dim() != ds.dim() {
                return Err(CliError::Usage(format!(
                    "--checkpoint expects {} features, dataset has {}",
                    ck.model.input_dim(),
                    ds.dim()
                )));
            }
            let centers = ck
                .centers()
                .ok_or_else(|| CliError::Usage("--checkpoint is a pretraining checkpoint; train it first".into()))?;
            trainer::predict(&ck.model, centers, &ds.x).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    let (k1, k2) = metrics::clamp_bounds(k1, k2, ds.len()).map_err(|e| CliError::Usage(format!("--k1/--k2: {e}")))?;
    let report: MetricsReport =
        metrics::evaluate_all(&ds.x, &z, &labels, &pred, k1, k2).map_err(|e| CliError::Data(e.to_string()))?;
    let dir = out_dir(&r)?;
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join("metrics.json"), &(report.to_json() + "\n"))?;
    write_file(&dir.join("metrics.csv"), &report.to_csv())?;
    write_file(&dir.join("embeddings.csv"), &embeddings_csv(&z, &pred, Some(&labels)))?;
    if !common.quiet {
        eprintln!(
            "acc {:.4} nmi {:.4} rre {:.5} trust {:.4} cont {:.4} d_rmse {:.4} lgd {:.4} cra {:.4}",
            report.acc, report.nmi, report.rre, report.trust, report.cont, report.d_rmse, report.lgd, report.cra
        );
    }
    Ok(())
}

fn cmd_gen_data(spec: &str, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let spec = DatasetSpec::parse(spec)?;
    if !matches!(spec, DatasetSpec::Blobs { .. } | DatasetSpec::Manifolds { .. }) {
        return Err(CliError::Usage("gen-data --dataset must be blobs:... or manifolds:...".into()));
    }
    let ds = spec.load(seed.unwrap_or(0))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_file(out, &data::to_csv_string(&ds))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { common, hyper } => cmd_pretrain(common, hyper),
        Command::Train { common, hyper, checkpoint, pretrain_first } => cmd_train(common, hyper, checkpoint, pretrain_first),
        Command::Eval { common, checkpoint, identity, k1, k2 } => cmd_eval(common, checkpoint, identity, k1, k2),
        Command::GenData { dataset, seed, out } => cmd_gen_data(&dataset, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
