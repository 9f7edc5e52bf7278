//! Fine-tuning loop: per-epoch snapshot refresh, a mini-batch phase on the
//! reconstruction, clustering and center-ranking losses, and a full-batch
//! phase on the isometry and center-alignment losses.
//!
//! Loss scaling follows the printed sums: the KL term of a mini-batch sums
//! over its rows, the isometry term over all same-cluster edges of the
//! latent kNN graph, while the reconstruction term is a mean. Each phase
//! keeps its own Adam moments so the two objectives' scales do not mix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{batches, stream_rng, Architecture, Autoencoder};
use crate::autodiff::Tape;
use crate::cluster::{self, ClusterState};
use crate::error::{DcrlError, Result};
use crate::geometry::{self, ManifoldCenters, NeighborGraph};
use crate::losses::{self, IsometryPair};
use crate::metrics;
use crate::optim::AdamState;
use crate::tensor::Matrix;

const TRAIN_STREAM: u64 = 2 << 40;

/// Fraction of changed assignments under which an epoch counts as stable.
pub const STABLE_CHANGE: f64 = 1e-3;
/// Consecutive stable epochs that trigger early stopping.
pub const STABLE_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub cluster: bool,
    pub lis: bool,
    pub rank: bool,
    pub align: bool,
    /// Point-level push-away baseline. Off in the default stack.
    pub sep: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            cluster: true,
            lis: true,
            rank: true,
            align: true,
            sep: false,
        }
    }
}

impl LossToggles {
    /// Clustering loss only; all structure losses disabled.
    pub fn clustering_only() -> Self {
        LossToggles {
            lis: false,
            rank: false,
            align: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub k: usize,
    pub kappa: f64,
    pub ramp_end_epoch: usize,
    pub alpha_start: f64,
    pub beta_end: f64,
    pub clusters: usize,
    pub sigma_pretrain: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub inner_l2_steps: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub losses: LossToggles,
    pub weight_continuation: bool,
    pub alternating: bool,
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch: 256,
            lr: 1e-3,
            k: 5,
            kappa: 3.0,
            ramp_end_epoch: 150,
            alpha_start: 0.1,
            beta_end: 1.0,
            clusters: 10,
            sigma_pretrain: 0.2,
            pretrain_epochs: 100,
            seed: 0,
            inner_l2_steps: 1,
            hidden: Architecture::DEFAULT_HIDDEN.to_vec(),
            latent_dim: Architecture::DEFAULT_LATENT,
            losses: LossToggles::default(),
            weight_continuation: true,
            alternating: true,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("k", self.k),
            ("ramp_end_epoch", self.ramp_end_epoch),
            ("pretrain_epochs", self.pretrain_epochs),
            ("inner_l2_steps", self.inner_l2_steps),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DcrlError::Argument(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("lr", self.lr),
            ("kappa", self.kappa),
            ("alpha_start", self.alpha_start),
            ("beta_end", self.beta_end),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DcrlError::Argument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.sigma_pretrain >= 0.0 && self.sigma_pretrain.is_finite()) {
            return Err(DcrlError::Argument(format!("sigma_pretrain must be non-negative, got {}", self.sigma_pretrain)));
        }
        if self.clusters < 2 {
            return Err(DcrlError::Argument(format!("clusters must be at least 2, got {}", self.clusters)));
        }
        if self.ramp_end_epoch > self.epochs {
            return Err(DcrlError::Argument(format!(
                "ramp_end_epoch {} exceeds epochs {}",
                self.ramp_end_epoch, self.epochs
            )));
        }
        if self.hidden.contains(&0) {
            return Err(DcrlError::Argument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn pretrain_config(&self) -> crate::autoencoder::PretrainConfig {
        crate::autoencoder::PretrainConfig {
            epochs: self.pretrain_epochs,
            sigma: self.sigma_pretrain,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

/// Loss weights `(α, β)` for `epoch`. Without weight continuation both stay
/// at their end-point values `α_start` and `β_end`; a disabled clustering
/// loss forces `α = 0`.
pub fn schedule(epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let (alpha, beta) = if config.weight_continuation {
        let t = epoch as f64 / config.ramp_end_epoch as f64;
        (config.alpha_start * (1.0 - t).max(0.0), config.beta_end * t.min(1.0))
    } else {
        (config.alpha_start, config.beta_end)
    };
    (if config.losses.cluster { alpha } else { 0.0 }, beta)
}

/// Everything held fixed during one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSnapshot {
    pub z: Matrix,
    pub cluster: ClusterState,
    pub input_centers: ManifoldCenters,
    pub latent_centers: ManifoldCenters,
    pub graph: NeighborGraph,
    pub pairs: Vec<IsometryPair>,
}

impl EpochSnapshot {
    pub fn assignments(&self) -> &[usize] {
        &self.cluster.assignments
    }

    pub fn empty_clusters(&self) -> Vec<usize> {
        self.input_centers.empty_clusters()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Losses {
    pub total: f64,
    pub ae: f64,
    pub cluster: f64,
    pub rank: f64,
    /// Only used by the separation baseline and the joint mode.
    pub extra: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Losses {
    pub total: f64,
    pub lis: f64,
    pub align: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub l_ae: f64,
    pub l_cluster: f64,
    pub l_rank: f64,
    pub l_lis: f64,
    pub l_align: f64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
}

impl EpochRecord {
    pub const FIELDS: usize = 10;

    pub(crate) fn to_row(&self) -> [f64; Self::FIELDS] {
        [
            self.epoch as f64,
            self.alpha,
            self.beta,
            self.l_ae,
            self.l_cluster,
            self.l_rank,
            self.l_lis,
            self.l_align,
            self.acc.unwrap_or(f64::NAN),
            self.nmi.unwrap_or(f64::NAN),
        ]
    }

    pub(crate) fn from_row(row: &[f64]) -> Self {
        let opt = |v: f64| if v.is_nan() { None } else { Some(v) };
        EpochRecord {
            epoch: row[0] as usize,
            alpha: row[1],
            beta: row[2],
            l_ae: row[3],
            l_cluster: row[4],
            l_rank: row[5],
            l_lis: row[6],
            l_align: row[7],
            acc: opt(row[8]),
            nmi: opt(row[9]),
        }
    }
}

/// History as CSV; the `acc,nmi` columns appear when every record has them.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let labelled = !history.is_empty() && history.iter().all(|r| r.acc.is_some() && r.nmi.is_some());
    let mut out = String::from("epoch,alpha,beta,l_ae,l_cluster,l_rank,l_lis,l_align");
    if labelled {
        out.push_str(",acc,nmi");
    }
    out.push('\n');
    for r in history {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.alpha, r.beta, r.l_ae, r.l_cluster, r.l_rank, r.l_lis, r.l_align
        );
        if labelled {
            let _ = write!(out, ",{},{}", r.acc.unwrap_or(f64::NAN), r.nmi.unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// `z0..z{m-1},pred[,label]` rows.
pub fn embeddings_csv(z: &Matrix, pred: &[usize], labels: Option<&[usize]>) -> String {
    let mut out = String::new();
    for c in 0..z.cols() {
        let _ = write!(out, "z{c},");
    }
    out.push_str("pred");
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..z.rows() {
        for v in z.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = write!(out, "{}", pred[i]);
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[i]);
        }
        out.push('\n');
    }
    out
}

/// Adam moments for the three update groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    /// Encoder, decoder and centers under the mini-batch objective.
    pub l1: AdamState,
    /// Encoder under the isometry loss.
    pub lis: AdamState,
    /// Centers under the alignment loss.
    pub align: AdamState,
}

impl Optimizers {
    pub fn new(model: &Autoencoder, centers: &Matrix) -> Self {
        let mut shapes = model.shapes();
        shapes.push(centers.shape());
        Optimizers {
            l1: AdamState::new(&shapes),
            lis: AdamState::new(&model.encoder_shapes()),
            align: AdamState::new(&[centers.shape()]),
        }
    }

    pub fn named(&self) -> [(&'static str, &AdamState); 3] {
        [("l1", &self.l1), ("lis", &self.lis), ("align", &self.align)]
    }
}

/// Mutable training state besides the network itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub centers: Matrix,
    pub optimizers: Optimizers,
    pub history: Vec<EpochRecord>,
    pub prev_assignments: Option<Vec<usize>>,
    pub stable_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Autoencoder,
    /// Number of completed epochs.
    pub epoch: usize,
    pub state: TrainState,
}

fn numerical(stage: &'static str, epoch: usize, batch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(DcrlError::Numerical { stage, epoch, batch, loss })
    }
}

impl Trainer {
    /// Starts fine-tuning from a (pretrained) model: centers come from
    /// k-means on the latent codes of `x`.
    pub fn new(config: TrainConfig, model: Autoencoder, x: &Matrix) -> Result<Self> {
        config.validate()?;
        if x.cols() != model.input_dim() {
            return Err(DcrlError::dim("trainer", format!("{} columns for a {}-input model", x.cols(), model.input_dim())));
        }
        if x.rows() <= config.clusters {
            return Err(DcrlError::Argument(format!("{} points cannot form {} clusters", x.rows(), config.clusters)));
        }
        let z = model.encode(x)?;
        let init = cluster::init_centers(&z, config.clusters, config.seed)?;
        let optimizers = Optimizers::new(&model, &init.centers);
        Ok(Trainer {
            config,
            model,
            epoch: 0,
            state: TrainState {
                centers: init.centers,
                optimizers,
                history: Vec::new(),
                prev_assignments: None,
                stable_epochs: 0,
            },
        })
    }

    pub fn centers(&self) -> &Matrix {
        &self.state.centers
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || (self.config.early_stop && self.state.stable_epochs >= STABLE_EPOCHS)
    }

    /// Recomputes z, Q, P, assignments, both sets of empirical centers and
    /// the latent kNN graph from the current parameters.
    pub fn refresh(&self, x: &Matrix) -> Result<EpochSnapshot> {
        let c = self.config.clusters;
        let z = self.model.encode(x)?;
        let state = ClusterState::from_centers(&z, self.state.centers.clone())?;
        let input_centers = geometry::manifold_centers(x, &state.assignments, c)?;
        let latent_centers = geometry::manifold_centers(&z, &state.assignments, c)?;
        let graph = geometry::knn_points(&z, self.config.k.min(x.rows() - 1))?;
        let pairs = losses::isometry_pairs(x, &graph, &state.assignments)?;
        Ok(EpochSnapshot {
            z,
            cluster: state,
            input_centers,
            latent_centers,
            graph,
            pairs,
        })
    }

    /// Restores rows of clusters with no members so their centers stay put.
    fn freeze(centers: &mut Matrix, saved: &Matrix, empty: &[usize]) {
        for &j in empty {
            centers.row_mut(j).copy_from_slice(saved.row(j));
        }
    }

    /// One Adam step on `L_AE + α·L_cluster + L_rank` over the rows `idx`.
    /// In the joint (non-alternating) mode `β·L_LIS` on the batch's own kNN
    /// graph and `L_align` are added to the same step.
    /// Phase-1 objective on one mini-batch and its gradients, in
    /// `parameters_mut` order followed by the center gradient. Nothing is
    /// updated.
    pub fn phase1_gradients(&self, x: &Matrix, snap: &EpochSnapshot, idx: &[usize], alpha: f64, beta: f64) -> Result<(Phase1Losses, Vec<Matrix>)> {
        let toggles = self.config.losses.clone();
        let joint = !self.config.alternating;
        let b = idx.len();
        let bf = b as f64;
        let xb = x.select_rows(idx);
        let pb = snap.cluster.p.select_rows(idx);
        let sb: Vec<usize> = idx.iter().map(|&i| snap.cluster.assignments[i]).collect();
        let centers = self.state.centers.clone();

        let mut tape = Tape::new();
        let taped = self.model.register(&mut tape);
        let input = tape.constant(xb.clone());
        let z = Autoencoder::encode_on_tape(&mut tape, &taped, input)?;
        let y = Autoencoder::decode_on_tape(&mut tape, &taped, z)?;
        let ae = tape.mse(y, input)?;
        let mut objective = ae;

        let zb = tape.value(z).clone();
        let qb = cluster::soft_assign(&zb, &centers)?;
        let cluster_value = cluster::kl_cluster_loss(&pb, &qb)?;
        if toggles.cluster && alpha > 0.0 {
            // KL(P‖Q) = Σ p ln p − Σ p ln q; only the second part depends on z.
            let mu = tape.constant(centers.clone());
            let d = tape.sq_dist(z, mu)?;
            let d1 = tape.add_scalar(d, 1.0);
            let kernel = tape.recip(d1);
            let q = tape.row_normalize(kernel);
            let lnq = tape.ln(q);
            let target = tape.constant(pb.clone());
            let cross = tape.mul(target, lnq)?;
            let s = tape.sum(cross);
            let weighted = tape.scale(s, -alpha);
            objective = tape.add(objective, weighted)?;
        }

        let mut extra = 0.0;
        // The pairwise sum has B² terms; one factor of B is divided out.
        if toggles.sep {
            if let Some(sep) = losses::sep_on_tape(&mut tape, z, &sb)? {
                extra += tape.value(sep).item() / bf;
                let scaled = tape.scale(sep, 1.0 / bf);
                objective = tape.add(objective, scaled)?;
            }
        }
        if joint && toggles.lis && beta > 0.0 && b > 1 {
            let graph = geometry::knn_points(&zb, self.config.k.min(b - 1))?;
            let pairs = losses::isometry_pairs(&xb, &graph, &sb)?;
            if !pairs.is_empty() {
                let lis = losses::lis_on_tape(&mut tape, z, &pairs)?;
                extra += beta * tape.value(lis).item();
                let weighted = tape.scale(lis, beta);
                objective = tape.add(objective, weighted)?;
            }
        }

        let ae_value = tape.value(ae).item();
        let rank_value = if toggles.rank {
            losses::rank_loss(&centers, &snap.input_centers, self.config.kappa)?
        } else {
            0.0
        };
        let mut align_value = 0.0;
        let mut mu_grad = Matrix::zeros(centers.rows(), centers.cols());
        if toggles.cluster && alpha > 0.0 {
            let g = cluster::grad_centers_cluster(&zb, &centers, &pb, &qb)?;
            mu_grad.axpy(alpha, &g)?;
        }
        if toggles.rank {
            mu_grad.add_assign(&losses::grad_centers_rank(&centers, &snap.input_centers, self.config.kappa)?)?;
        }
        if joint && toggles.align {
            align_value = losses::align_loss(&centers, &snap.latent_centers)?;
            mu_grad.add_assign(&losses::grad_centers_align(&centers, &snap.latent_centers)?)?;
        }
        let alpha_cluster = if toggles.cluster { alpha * cluster_value } else { 0.0 };
        let total = ae_value + alpha_cluster + rank_value + extra + align_value;
        numerical("phase1", self.epoch, 0, total)?;

        let grads = tape.backward(objective)?;
        let mut g = self.model.collect_gradients(&taped, &grads);
        g.push(mu_grad);
        let losses = Phase1Losses {
            total,
            ae: ae_value,
            cluster: cluster_value,
            rank: rank_value,
            extra: extra + align_value,
        };
        Ok((losses, g))
    }

    /// One Adam step on the phase-1 objective for the batch `idx`.
    pub fn phase1_step(&mut self, x: &Matrix, snap: &EpochSnapshot, idx: &[usize], alpha: f64, beta: f64) -> Result<Phase1Losses> {
        let (losses, g) = self.phase1_gradients(x, snap, idx, alpha, beta)?;
        let grefs: Vec<&Matrix> = g.iter().collect();
        let lr = self.config.lr;
        let empty = snap.empty_clusters();
        let centers = self.state.centers.clone();
        let Trainer { model, state, .. } = self;
        let mut params = model.parameters_mut();
        params.push(&mut state.centers);
        state.optimizers.l1.step(&mut params, &grefs, lr)?;
        Self::freeze(&mut state.centers, &centers, &empty);
        Ok(losses)
    }

    /// Phase-2 objective `β·L_LIS + L_align` on the full data, with the
    /// encoder gradient of the isometry term and the center gradient of the
    /// alignment term. Disabled terms contribute zero.
    pub fn phase2_gradients(&self, x: &Matrix, snap: &EpochSnapshot, beta: f64) -> Result<(Phase2Losses, Vec<Matrix>, Matrix)> {
        let toggles = &self.config.losses;
        let mut tape = Tape::new();
        let taped = self.model.register_encoder(&mut tape);
        let input = tape.constant(x.clone());
        let z = Autoencoder::encode_on_tape(&mut tape, &taped, input)?;
        let lis = losses::lis_on_tape(&mut tape, z, &snap.pairs)?;
        let lis_value = tape.value(lis).item();
        let align_value = losses::align_loss(&self.state.centers, &snap.latent_centers)?;
        let lis_term = if toggles.lis { beta * lis_value } else { 0.0 };
        let align_term = if toggles.align { align_value } else { 0.0 };
        let weighted = tape.scale(lis, if toggles.lis { beta } else { 0.0 });
        let grads = tape.backward(weighted)?;
        let enc: Vec<Matrix> = taped.encoder_vars().into_iter().map(|v| grads.wrt(v)).collect();
        let mu = if toggles.align {
            losses::grad_centers_align(&self.state.centers, &snap.latent_centers)?
        } else {
            Matrix::zeros(self.state.centers.rows(), self.state.centers.cols())
        };
        let l = Phase2Losses {
            total: lis_term + align_term,
            lis: lis_value,
            align: align_value,
        };
        Ok((l, enc, mu))
    }

    /// `inner_l2_steps` full-batch steps on `β·L_LIS + L_align`. The
    /// isometry term moves the encoder only; the alignment term moves the
    /// centers only. Inactive terms leave their parameters untouched.
    /// Returns the losses measured before the first step.
    pub fn phase2_step(&mut self, x: &Matrix, snap: &EpochSnapshot, beta: f64) -> Result<Phase2Losses> {
        let empty = snap.empty_clusters();
        let lr = self.config.lr;
        let mut first = None;
        for _ in 0..self.config.inner_l2_steps {
            let (losses, enc, mu) = self.phase2_gradients(x, snap, beta)?;
            numerical("phase2", self.epoch, 0, losses.total)?;
            let toggles = &self.config.losses;
            let step_lis = toggles.lis && beta > 0.0 && !snap.pairs.is_empty();
            let step_align = toggles.align && losses.align > 0.0;
            first.get_or_insert(losses);

            let Trainer { model, state, .. } = self;
            if step_lis {
                let grefs: Vec<&Matrix> = enc.iter().collect();
                state.optimizers.lis.step(&mut model.encoder_parameters_mut(), &grefs, lr)?;
            }
            if step_align {
                let saved = state.centers.clone();
                state.optimizers.align.step(&mut [&mut state.centers], &[&mu], lr)?;
                Self::freeze(&mut state.centers, &saved, &empty);
            }
        }
        Ok(first.expect("inner_l2_steps is positive"))
    }

    /// One full epoch: schedule, refresh, shuffled mini-batch sweep, then
    /// the full-batch phase.
    pub fn run_epoch(&mut self, x: &Matrix, labels: Option<&[usize]>) -> Result<EpochRecord> {
        if let Some(l) = labels {
            if l.len() != x.rows() {
                return Err(DcrlError::dim("run_epoch", format!("{} labels for {} rows", l.len(), x.rows())));
            }
        }
        let epoch = self.epoch;
        let (alpha, beta) = schedule(epoch, &self.config);
        let snap = self.refresh(x)?;
        let (acc, nmi) = match labels {
            Some(l) => (Some(metrics::acc(l, snap.assignments())?), Some(metrics::nmi(l, snap.assignments())?)),
            None => (None, None),
        };

        let mut rng = stream_rng(self.config.seed, TRAIN_STREAM + epoch as u64);
        let batch_list = batches(x.rows(), self.config.batch, &mut rng);
        let (mut ae, mut cl, mut rank) = (0.0, 0.0, 0.0);
        for (b, idx) in batch_list.iter().enumerate() {
            let l = self.phase1_step(x, &snap, idx, alpha, beta).map_err(|e| match e {
                DcrlError::Numerical { stage, epoch, loss, .. } => DcrlError::Numerical { stage, epoch, batch: b, loss },
                other => other,
            })?;
            ae += l.ae;
            cl += l.cluster;
            rank += l.rank;
        }
        let nb = batch_list.len() as f64;
        let (lis, align) = if self.config.alternating {
            let l2 = self.phase2_step(x, &snap, beta)?;
            (l2.lis, l2.align)
        } else {
            let lis = losses::lis_loss(x, &snap.z, &snap.graph, snap.assignments())?;
            (lis, losses::align_loss(&self.state.centers, &snap.latent_centers)?)
        };

        if let Some(prev) = &self.state.prev_assignments {
            let changed = prev.iter().zip(snap.assignments()).filter(|(a, b)| a != b).count();
            if (changed as f64) < STABLE_CHANGE * x.rows() as f64 {
                self.state.stable_epochs += 1;
            } else {
                self.state.stable_epochs = 0;
            }
        }
        self.state.prev_assignments = Some(snap.cluster.assignments.clone());

        let record = EpochRecord {
            epoch,
            alpha,
            beta,
            l_ae: ae / nb,
            l_cluster: cl / nb,
            l_rank: rank / nb,
            l_lis: lis,
            l_align: align,
            acc,
            nmi,
        };
        self.state.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until the budget is spent or early stopping triggers.
    pub fn fit(&mut self, x: &Matrix, labels: Option<&[usize]>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(x, labels)?;
        }
        Ok(())
    }

    /// Latent codes and hard assignments (argmax of the target
    /// distribution) under the current parameters.
    pub fn predict(&self, x: &Matrix) -> Result<(Matrix, Vec<usize>)> {
        predict(&self.model, &self.state.centers, x)
    }
}

/// Latent codes of `x` and their argmax-P assignments against `centers`.
pub fn predict(model: &Autoencoder, centers: &Matrix, x: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let z = model.encode(x)?;
    let state = ClusterState::from_centers(&z, centers.clone())?;
    Ok((z, state.assignments))
}

/// Fraction of rows whose assignment differs.
pub fn assignment_change(a: &[usize], b: &[usize]) -> f64 {
    let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
    changed as f64 / a.len().max(1) as f64
}

/// Pretrains, then fine-tunes for the configured epoch budget.
pub fn fit(x: &Matrix, labels: Option<&[usize]>, config: &TrainConfig) -> Result<Trainer> {
    config.validate()?;
    let (model, _) = crate::autoencoder::pretrain(x, config.architecture(x.cols()), &config.pretrain_config())?;
    let mut trainer = Trainer::new(config.clone(), model, x)?;
    trainer.fit(x, labels)?;
    Ok(trainer)
}

/// Mean of the per-cluster latent rows, for cross-checking refreshes.
pub fn latent_means(z: &Matrix, assignments: &[usize], clusters: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; z.cols()]; clusters];
    let mut counts = vec![0usize; clusters];
    for (i, &s) in assignments.iter().enumerate() {
        counts[s] += 1;
        for (a, &v) in sums[s].iter_mut().zip(z.row(i)) {
            *a += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::tensor;

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch: 32,
            lr: 1e-3,
            ramp_end_epoch: 3,
            clusters: 3,
            pretrain_epochs: 5,
            hidden: vec![16],
            latent_dim: 2,
            ..TrainConfig::default()
        }
    }

    fn fixture() -> (Matrix, Vec<usize>, Trainer) {
        let ds = gen_blobs(20, 3, 4, 0.5, 7).unwrap();
        let cfg = small_config();
        let (model, _) = crate::autoencoder::pretrain(&ds.x, cfg.architecture(4), &cfg.pretrain_config()).unwrap();
        let t = Trainer::new(cfg, model, &ds.x).unwrap();
        (ds.x, ds.labels.unwrap(), t)
    }

    #[test]
    fn schedule_defaults() {
        let c = TrainConfig::default();
        assert_eq!(schedule(0, &c), (0.1, 0.0));
        assert_eq!(schedule(75, &c), (0.05, 0.5));
        assert_eq!(schedule(150, &c), (0.0, 1.0));
        assert_eq!(schedule(299, &c), (0.0, 1.0));
        let flat = TrainConfig {
            weight_continuation: false,
            ..TrainConfig::default()
        };
        assert_eq!(schedule(0, &flat), (0.1, 1.0));
        let no_cluster = TrainConfig {
            losses: LossToggles {
                cluster: false,
                ..LossToggles::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(schedule(0, &no_cluster).0, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            ramp_end_epoch: 400,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { clusters: 1, ..TrainConfig::default() }.validate().is_err());
        let json = r#"{"epochs": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.batch, 256);
    }

    #[test]
    fn refresh_is_pure_and_means_match() {
        let (x, _, t) = fixture();
        let a = t.refresh(&x).unwrap();
        let b = t.refresh(&x).unwrap();
        assert_eq!(a, b);
        let oracle = latent_means(&a.z, a.assignments(), 3);
        for (j, m) in oracle.iter().enumerate() {
            if let Some(m) = m {
                for (c, v) in m.iter().enumerate() {
                    assert!((a.latent_centers.centers.get(j, c) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn phase1_total_recomposes() {
        let (x, _, mut t) = fixture();
        let snap = t.refresh(&x).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let centers = t.state.centers.clone();
        let xb = x.select_rows(&idx);
        let zb = t.model.encode(&xb).unwrap();
        let ae = tensor::mse(&t.model.decode(&zb).unwrap(), &xb).unwrap();
        let q = cluster::soft_assign(&zb, &centers).unwrap();
        let kl = cluster::kl_cluster_loss(&snap.cluster.p.select_rows(&idx), &q).unwrap();
        let rank = losses::rank_loss(&centers, &snap.input_centers, 3.0).unwrap();
        let l = t.phase1_step(&x, &snap, &idx, 0.1, 0.0).unwrap();
        assert!((l.total - (ae + 0.1 * kl + rank)).abs() < 1e-10);
    }

    #[test]
    fn gradient_routing() {
        let (x, _, mut base) = fixture();
        // k-means leaves the centers on the latent means; move them off.
        base.state.centers = base.state.centers.map(|v| v + 0.05);
        let snap = base.refresh(&x).unwrap();
        let idx: Vec<usize> = (0..20).collect();

        // Mini-batch phase without clustering and ranking terms: centers fixed.
        let mut t = base.clone();
        t.config.losses.rank = false;
        t.phase1_step(&x, &snap, &idx, 0.0, 0.0).unwrap();
        assert_eq!(t.state.centers, base.state.centers);
        assert_ne!(t.model, base.model);

        // Full-batch phase: decoder never moves; alignment alone leaves the
        // encoder unchanged.
        let mut t = base.clone();
        t.phase2_step(&x, &snap, 0.0).unwrap();
        assert_eq!(t.model, base.model);
        assert_ne!(t.state.centers, base.state.centers);

        let mut t = base.clone();
        t.phase2_step(&x, &snap, 1.0).unwrap();
        assert_eq!(t.model.decoder, base.model.decoder);
        assert_ne!(t.model.encoder, base.model.encoder);
    }

    #[test]
    fn phase2_zero_when_aligned() {
        let (x, _, mut t) = fixture();
        let snap = t.refresh(&x).unwrap();
        t.state.centers = snap.latent_centers.centers.clone();
        let before = t.clone();
        let l = t.phase2_step(&x, &snap, 0.0).unwrap();
        assert_eq!(l.total, 0.0);
        assert_eq!(t, before);
    }

    #[test]
    fn phase2_decreases_on_frozen_snapshot() {
        let (x, _, mut t) = fixture();
        t.config.lr = 1e-2;
        let snap = t.refresh(&x).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..5 {
            let l = t.phase2_step(&x, &snap, 1.0).unwrap();
            assert!(l.total < prev, "{} !< {prev}", l.total);
            prev = l.total;
        }
    }

    #[test]
    fn run_is_deterministic() {
        let (x, labels, t) = fixture();
        let mut a = t.clone();
        let mut b = t;
        a.fit(&x, Some(&labels)).unwrap();
        b.fit(&x, Some(&labels)).unwrap();
        assert_eq!(history_csv(a.history()), history_csv(b.history()));
        assert_eq!(a, b);
        assert_eq!(a.history().len(), 6);
        assert_eq!(a.history()[0].alpha, 0.1);
        assert_eq!(a.history()[5].alpha, 0.0);
    }

    #[test]
    fn ablation_modes_run() {
        let (x, labels, t) = fixture();
        for (toggles, alternating) in [
            (LossToggles::clustering_only(), true),
            (LossToggles { cluster: false, ..LossToggles::default() }, true),
            (LossToggles { sep: true, rank: false, ..LossToggles::default() }, true),
            (LossToggles::default(), false),
        ] {
            let mut t = t.clone();
            t.config.losses = toggles;
            t.config.alternating = alternating;
            t.config.epochs = 2;
            t.config.ramp_end_epoch = 2;
            t.fit(&x, Some(&labels)).unwrap();
            assert_eq!(t.history().len(), 2);
        }
    }

    #[test]
    fn csv_layouts() {
        let z = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25]]);
        assert_eq!(embeddings_csv(&z, &[1, 0], Some(&[0, 1])), "z0,z1,pred,label\n0.5,-1,1,0\n2,0.25,0,1\n");
        assert_eq!(embeddings_csv(&z, &[1, 0], None), "z0,z1,pred\n0.5,-1,1\n2,0.25,0\n");
        let r = EpochRecord {
            epoch: 0,
            alpha: 0.1,
            beta: 0.0,
            l_ae: 1.5,
            l_cluster: 0.25,
            l_rank: 2.0,
            l_lis: 3.0,
            l_align: 0.5,
            acc: None,
            nmi: None,
        };
        assert_eq!(history_csv(std::slice::from_ref(&r)), "epoch,alpha,beta,l_ae,l_cluster,l_rank,l_lis,l_align\n0,0.1,0,1.5,0.25,2,3,0.5\n");
        assert_eq!(EpochRecord::from_row(&r.to_row()), r);
    }

    #[test]
    fn early_stop_bookkeeping() {
        assert_eq!(assignment_change(&[0, 1, 2, 2], &[0, 1, 1, 2]), 0.25);
        let (x, labels, mut t) = fixture();
        t.config.early_stop = true;
        t.state.stable_epochs = STABLE_EPOCHS;
        assert!(t.is_finished());
        t.fit(&x, Some(&labels)).unwrap();
        assert!(t.history().is_empty());
    }
}
