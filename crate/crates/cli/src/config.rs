//! Run configuration: a JSON file layered over defaults (or a checkpoint's
//! stored config), with command-line flags applied last.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use dcrl::trainer::TrainConfig;
use serde_json::{json, Map, Value};

use crate::CliError;

pub const CONFIG_VERSION: u64 = 1;

/// Top-level keys that are not training hyperparameters.
const RUN_KEYS: [&str; 6] = ["version", "dataset", "out", "checkpoint", "split", "part"];

#[derive(Args, Debug, Clone, Default)]
pub struct Hyper {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Neighbors for the isometry graph.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub ramp_end_epoch: Option<usize>,
    #[arg(long)]
    pub alpha_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub sigma_pretrain: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub inner_l2_steps: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Drop the isometry, ranking and alignment losses.
    #[arg(long)]
    pub no_structure_losses: bool,
    /// Drop the clustering loss.
    #[arg(long)]
    pub no_cluster_loss: bool,
    #[arg(long)]
    pub no_lis: bool,
    #[arg(long)]
    pub no_rank: bool,
    #[arg(long)]
    pub no_align: bool,
    /// Add the point-level separation baseline.
    #[arg(long)]
    pub sep: bool,
    /// Constant loss weights.
    #[arg(long)]
    pub no_weight_continuation: bool,
    /// One joint objective instead of alternating phases.
    #[arg(long)]
    pub joint: bool,
    #[arg(long)]
    pub early_stop: bool,
}

/// Shared flags of every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// blobs:..., manifolds:..., csv:PATH or idx:IMAGES,LABELS.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Train fraction of a stratified split, used with --part.
    #[arg(long)]
    pub split: Option<f64>,
    /// Which side of --split to use: train or test.
    #[arg(long)]
    pub part: Option<String>,
    /// Skip feature standardization of vector datasets.
    #[arg(long)]
    pub raw: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// Resolved non-hyperparameter settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSettings {
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<f64>,
    pub part: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub train: TrainConfig,
    pub run: RunSettings,
    /// Whether `clusters` was set anywhere other than the defaults.
    pub clusters_explicit: bool,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn hyper_patch(h: &Hyper, seed: Option<u64>) -> Value {
    let mut m = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    put("epochs", h.epochs.map(Value::from));
    put("batch", h.batch.map(Value::from));
    put("lr", h.lr.map(Value::from));
    put("k", h.k.map(Value::from));
    put("kappa", h.kappa.map(Value::from));
    put("ramp_end_epoch", h.ramp_end_epoch.map(Value::from));
    put("alpha_start", h.alpha_start.map(Value::from));
    put("beta_end", h.beta_end.map(Value::from));
    put("clusters", h.clusters.map(Value::from));
    put("sigma_pretrain", h.sigma_pretrain.map(Value::from));
    put("pretrain_epochs", h.pretrain_epochs.map(Value::from));
    put("inner_l2_steps", h.inner_l2_steps.map(Value::from));
    put("hidden", h.hidden.clone().map(Value::from));
    put("latent_dim", h.latent_dim.map(Value::from));
    put("seed", seed.map(Value::from));
    put("weight_continuation", h.no_weight_continuation.then_some(json!(false)));
    put("alternating", h.joint.then_some(json!(false)));
    put("early_stop", h.early_stop.then_some(json!(true)));
    let mut losses = Map::new();
    if h.no_structure_losses {
        for k in ["lis", "rank", "align"] {
            losses.insert(k.into(), json!(false));
        }
    }
    for (flag, key) in [(h.no_cluster_loss, "cluster"), (h.no_lis, "lis"), (h.no_rank, "rank"), (h.no_align, "align")] {
        if flag {
            losses.insert(key.into(), json!(false));
        }
    }
    if h.sep {
        losses.insert("sep".into(), json!(true));
    }
    if !losses.is_empty() {
        m.insert("losses".into(), Value::Object(losses));
    }
    Value::Object(m)
}

fn read_file(path: &PathBuf) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    parse_file(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
}

fn parse_file(text: &str) -> Result<Map<String, Value>, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let Value::Object(map) = value else {
        return Err("expected a JSON object".into());
    };
    match map.get("version").and_then(Value::as_u64) {
        Some(CONFIG_VERSION) => Ok(map),
        Some(v) => Err(format!("unsupported version {v} (expected {CONFIG_VERSION})")),
        None => Err("missing integer field `version`".into()),
    }
}

fn string_field(map: &Map<String, Value>, key: &str) -> Result<Option<String>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(CliError::Usage(format!("--config: `{key}` must be a string"))),
    }
}

/// The `checkpoint` key of the config file, if any. Read before the full
/// resolve, since the checkpoint supplies the base configuration.
pub fn checkpoint_setting(common: &Common) -> Result<Option<PathBuf>, CliError> {
    match &common.config {
        Some(path) => Ok(string_field(&read_file(path)?, "checkpoint")?.map(PathBuf::from)),
        None => Ok(None),
    }
}

/// Layers defaults (or `base`), the config file, then flags.
pub fn resolve(common: &Common, hyper: &Hyper, base: Option<&TrainConfig>) -> Result<Resolved, CliError> {
    let mut value = serde_json::to_value(base.cloned().unwrap_or_default()).expect("config serializes");
    let mut run = RunSettings::default();
    let mut clusters_explicit = base.is_some() || hyper.clusters.is_some();
    if let Some(path) = &common.config {
        let mut file = read_file(path)?;
        run.dataset = string_field(&file, "dataset")?;
        run.out = string_field(&file, "out")?.map(PathBuf::from);
        run.checkpoint = string_field(&file, "checkpoint")?.map(PathBuf::from);
        run.part = string_field(&file, "part")?;
        run.split = match file.get("split") {
            None => None,
            Some(v) => Some(v.as_f64().ok_or_else(|| CliError::Usage("--config: `split` must be a number".into()))?),
        };
        for key in RUN_KEYS {
            file.remove(key);
        }
        clusters_explicit |= file.contains_key("clusters");
        merge(&mut value, Value::Object(file));
    }
    merge(&mut value, hyper_patch(hyper, common.seed));
    let train: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    train.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;

    if common.dataset.is_some() {
        run.dataset = common.dataset.clone();
    }
    if common.out.is_some() {
        run.out = common.out.clone();
    }
    if common.split.is_some() {
        run.split = common.split;
    }
    if common.part.is_some() {
        run.part = common.part.clone();
    }
    Ok(Resolved { train, run, clusters_explicit })
}

/// The resolved configuration as a versioned config file.
pub fn to_file_json(r: &Resolved) -> String {
    let mut value = serde_json::to_value(&r.train).expect("config serializes");
    let map = value.as_object_mut().expect("object");
    map.insert("version".into(), json!(CONFIG_VERSION));
    if let Some(d) = &r.run.dataset {
        map.insert("dataset".into(), json!(d));
    }
    if let Some(s) = r.run.split {
        map.insert("split".into(), json!(s));
    }
    if let Some(p) = &r.run.part {
        map.insert("part".into(), json!(p));
    }
    serde_json::to_string_pretty(&value).expect("config serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn flags_override_file() {
        let (_d, path) = write(r#"{"version": 1, "epochs": 7, "ramp_end_epoch": 5, "lr": 0.01, "losses": {"sep": true}, "dataset": "blobs:"}"#);
        let common = Common { config: Some(path), seed: Some(3), ..Common::default() };
        let hyper = Hyper { epochs: Some(9), no_lis: true, ..Hyper::default() };
        let r = resolve(&common, &hyper, None).unwrap();
        assert_eq!((r.train.epochs, r.train.lr, r.train.seed), (9, 0.01, 3));
        assert!(r.train.losses.sep && !r.train.losses.lis && r.train.losses.rank);
        assert_eq!(r.run.dataset.as_deref(), Some("blobs:"));
        assert!(!r.clusters_explicit);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        for text in [
            r#"{"version": 1, "epoch": 5}"#,
            r#"{"version": 1, "losses": {"isometry": false}}"#,
            r#"{"version": 2}"#,
            r#"{"epochs": 5}"#,
            r#"[1]"#,
        ] {
            let (_d, path) = write(text);
            let common = Common { config: Some(path), ..Common::default() };
            assert!(matches!(resolve(&common, &Hyper::default(), None), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn ablation_flags_map_to_toggles() {
        let hyper = Hyper { no_structure_losses: true, joint: true, no_weight_continuation: true, ..Hyper::default() };
        let r = resolve(&Common::default(), &hyper, None).unwrap();
        assert_eq!(r.train.losses, dcrl::trainer::LossToggles::clustering_only());
        assert!(!r.train.alternating && !r.train.weight_continuation);
    }

    #[test]
    fn written_config_resolves_to_itself() {
        let hyper = Hyper { hidden: Some(vec![8, 4]), clusters: Some(3), ..Hyper::default() };
        let common = Common { dataset: Some("manifolds:c=3".into()), ..Common::default() };
        let r = resolve(&common, &hyper, None).unwrap();
        let (_d, path) = write(&to_file_json(&r));
        let again = resolve(&Common { config: Some(path), ..Common::default() }, &Hyper::default(), None).unwrap();
        assert_eq!(again.train, r.train);
        assert_eq!(again.run.dataset, r.run.dataset);
        assert!(again.clusters_explicit);
    }
}
