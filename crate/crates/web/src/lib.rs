//! Browser demo: generate a dataset, train a small model epoch by epoch
//! with or without the structure losses, and score the embedding.
//!
//! [`Demo`] holds the logic and is plain Rust; [`DemoSession`] is the
//! JavaScript-facing wrapper. Every call returns a JSON string.

use dcrl::autoencoder::pretrain;
use dcrl::data::{self, Dataset};
use dcrl::metrics;
use dcrl::trainer::{LossToggles, TrainConfig, Trainer};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Latent width; two dimensions so the embedding can be drawn directly.
const LATENT: usize = 2;

#[derive(Serialize)]
struct Points {
    /// First two input coordinates per point.
    input: Vec<[f64; 2]>,
    latent: Vec<[f64; 2]>,
    labels: Vec<usize>,
    pred: Vec<usize>,
    centers: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct Progress {
    epoch: usize,
    epochs: usize,
    alpha: f64,
    beta: f64,
    l_ae: f64,
    l_cluster: f64,
    l_rank: f64,
    l_lis: f64,
    acc: f64,
    nmi: f64,
    points: Points,
}

pub struct Demo {
    data: Dataset,
    trainer: Trainer,
}

fn pairs(m: &dcrl::Matrix) -> Vec<[f64; 2]> {
    (0..m.rows()).map(|i| [m.get(i, 0), m.get(i, 1.min(m.cols() - 1))]).collect()
}

impl Demo {
    /// `kind` is `blobs` or `manifolds`. Pretrains a small autoencoder on
    /// the standardized data and initializes the centers.
    pub fn new(kind: &str, n_per_cluster: usize, clusters: usize, seed: u64, structure: bool, epochs: usize) -> Result<Self, String> {
        let raw = match kind {
            "blobs" => data::gen_blobs(n_per_cluster, clusters, 10, 2.0, seed),
            "manifolds" => data::gen_intersecting_manifolds(n_per_cluster, clusters, seed),
            other => return Err(format!("unknown dataset `{other}`")),
        }
        .map_err(|e| e.to_string())?;
        let data = data::zscore(&raw);
        let config = TrainConfig {
            epochs,
            ramp_end_epoch: epochs / 2,
            pretrain_epochs: 30,
            batch: 64,
            lr: 0.003,
            hidden: vec![32, 32],
            latent_dim: LATENT,
            clusters,
            seed,
            losses: if structure { LossToggles::default() } else { LossToggles::clustering_only() },
            ..TrainConfig::default()
        };
        config.validate().map_err(|e| e.to_string())?;
        let (model, _) = pretrain(&data.x, config.architecture(data.dim()), &config.pretrain_config()).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(config, model, &data.x).map_err(|e| e.to_string())?;
        Ok(Demo { data, trainer })
    }

    fn points(&self) -> Result<Points, String> {
        let (z, pred) = self.trainer.predict(&self.data.x).map_err(|e| e.to_string())?;
        Ok(Points {
            input: pairs(&self.data.x),
            latent: pairs(&z),
            labels: self.data.labels.clone().unwrap_or_default(),
            pred,
            centers: pairs(self.trainer.centers()),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.trainer.is_finished()
    }

    /// Runs up to `epochs` more epochs and reports the latest one.
    pub fn step(&mut self, epochs: usize) -> Result<String, String> {
        let labels = self.data.labels.as_deref();
        for _ in 0..epochs {
            if self.trainer.is_finished() {
                break;
            }
            self.trainer.run_epoch(&self.data.x, labels).map_err(|e| e.to_string())?;
        }
        let last = self.trainer.history().last();
        let get = |f: fn(&dcrl::trainer::EpochRecord) -> f64| last.map_or(f64::NAN, f);
        let progress = Progress {
            epoch: self.trainer.epoch,
            epochs: self.trainer.config.epochs,
            alpha: get(|r| r.alpha),
            beta: get(|r| r.beta),
            l_ae: get(|r| r.l_ae),
            l_cluster: get(|r| r.l_cluster),
            l_rank: get(|r| r.l_rank),
            l_lis: get(|r| r.l_lis),
            acc: get(|r| r.acc.unwrap_or(f64::NAN)),
            nmi: get(|r| r.nmi.unwrap_or(f64::NAN)),
            points: self.points()?,
        };
        serde_json::to_string(&progress).map_err(|e| e.to_string())
    }

    /// All eight metrics of the current embedding.
    pub fn evaluate(&self) -> Result<String, String> {
        let labels = self.data.labels.as_deref().ok_or("dataset has no labels")?;
        let (z, pred) = self.trainer.predict(&self.data.x).map_err(|e| e.to_string())?;
        let (k1, k2) =
            metrics::clamp_bounds(metrics::DEFAULT_K1, metrics::DEFAULT_K2, self.data.len()).map_err(|e| e.to_string())?;
        let report = metrics::evaluate_all(&self.data.x, &z, labels, &pred, k1, k2).map_err(|e| e.to_string())?;
        Ok(report.to_json())
    }
}

#[wasm_bindgen]
pub struct DemoSession(Demo);

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, n_per_cluster: usize, clusters: usize, seed: u32, structure: bool, epochs: usize) -> Result<DemoSession, JsError> {
        Demo::new(kind, n_per_cluster, clusters, seed.into(), structure, epochs)
            .map(DemoSession)
            .map_err(|e| JsError::new(&e))
    }

    pub fn step(&mut self, epochs: usize) -> Result<String, JsError> {
        self.0.step(epochs).map_err(|e| JsError::new(&e))
    }

    pub fn evaluate(&self) -> Result<String, JsError> {
        self.0.evaluate().map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn finished(&self) -> bool {
        self.0.is_finished()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_runs_to_completion() {
        let mut demo = Demo::new("blobs", 40, 3, 1, true, 6).unwrap();
        let first: serde_json::Value = serde_json::from_str(&demo.step(2).unwrap()).unwrap();
        assert_eq!(first["epoch"], 2);
        assert_eq!(first["points"]["latent"].as_array().unwrap().len(), 120);
        assert_eq!(first["points"]["centers"].as_array().unwrap().len(), 3);
        let last: serde_json::Value = serde_json::from_str(&demo.step(100).unwrap()).unwrap();
        assert_eq!(last["epoch"], 6);
        assert!(demo.is_finished());
        let report: serde_json::Value = serde_json::from_str(&demo.evaluate().unwrap()).unwrap();
        for key in ["acc", "nmi", "rre", "trust", "cont", "d_rmse", "lgd", "cra"] {
            assert!(report[key].is_number(), "{key}");
        }
    }

    #[test]
    fn rejects_unknown_dataset() {
        assert!(Demo::new("spirals", 10, 2, 0, true, 4).is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut d = Demo::new("manifolds", 30, 3, 4, false, 4).unwrap();
            d.step(4).unwrap()
        };
        assert_eq!(run(), run());
    }
}
