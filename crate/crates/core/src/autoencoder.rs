//! MLP encoder/decoder pair and denoising pretraining.
//!
//! Hidden layers use ReLU; the latent layer and the reconstruction layer are
//! linear. The decoder mirrors the encoder's widths.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{DcrlError, Result};
use crate::optim::AdamState;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl Architecture {
    pub const DEFAULT_HIDDEN: [usize; 4] = [500, 500, 500, 2000];
    pub const DEFAULT_LATENT: usize = 10;

    /// `d-500-500-500-2000-10`.
    pub fn standard(input_dim: usize) -> Self {
        Architecture {
            input_dim,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            latent_dim: Self::DEFAULT_LATENT,
        }
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.latent_dim);
        dims
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = self.encoder_dims();
        dims.reverse();
        dims
    }

    /// Weights plus biases over both halves.
    pub fn param_count(&self) -> usize {
        let count = |dims: &[usize]| dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        count(&self.encoder_dims()) + count(&self.decoder_dims())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(DcrlError::Argument(format!("layer widths must be positive: {:?}", self.encoder_dims())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// in × out
    pub weight: Matrix,
    /// 1 × out
    pub bias: Matrix,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Dense {
            weight: Matrix::from_vec(fan_in, fan_out, w).expect("sized"),
            bias: Matrix::from_vec(1, fan_out, b).expect("sized"),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Matrix, relu: bool) -> Result<Matrix> {
        let y = x.matmul(&self.weight)?.add_row_vector(&self.bias)?;
        Ok(if relu { y.map(|v| v.max(0.0)) } else { y })
    }
}

/// Tape handles for every weight and bias of a registered model.
#[derive(Clone, Debug)]
pub struct TapedModel {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl TapedModel {
    pub fn encoder_vars(&self) -> Vec<Var> {
        self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn decoder_vars(&self) -> Vec<Var> {
        self.decoder.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub arch: Architecture,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

impl Autoencoder {
    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization for weights and biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let build = |dims: &[usize], rng: &mut ChaCha8Rng| dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        let encoder = build(&arch.encoder_dims(), &mut rng);
        let decoder = build(&arch.decoder_dims(), &mut rng);
        Ok(Autoencoder { arch, encoder, decoder })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let build = |dims: &[usize]| dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let encoder = build(&arch.encoder_dims());
        let decoder = build(&arch.decoder_dims());
        Ok(Autoencoder { arch, encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn run(layers: &[Dense], x: &Matrix) -> Result<Matrix> {
        let last = layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            h = layer.forward(&h, l < last)?;
        }
        Ok(h)
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.arch.input_dim {
            return Err(DcrlError::dim(
                "encode",
                format!("input has {} columns, model expects {}", x.cols(), self.arch.input_dim),
            ));
        }
        Self::run(&self.encoder, x)
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.arch.latent_dim {
            return Err(DcrlError::dim(
                "decode",
                format!("latent has {} columns, model expects {}", z.cols(), self.arch.latent_dim),
            ));
        }
        Self::run(&self.decoder, z)
    }

    /// Parameters in fixed order: encoder (w, b) per layer, then decoder.
    pub fn parameters(&self) -> Vec<&Matrix> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn encoder_parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .iter_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().into_iter().map(Matrix::shape).collect()
    }

    pub fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        self.encoder
            .iter()
            .flat_map(|d| [d.weight.shape(), d.bias.shape()])
            .collect()
    }

    /// Number of parameter matrices (two per layer).
    pub fn num_tensors(&self) -> usize {
        2 * (self.encoder.len() + self.decoder.len())
    }

    pub fn register(&self, tape: &mut Tape) -> TapedModel {
        let mut reg = |layers: &[Dense]| -> Vec<(Var, Var)> {
            layers
                .iter()
                .map(|d| (tape.param(d.weight.clone()), tape.param(d.bias.clone())))
                .collect()
        };
        let encoder = reg(&self.encoder);
        let decoder = reg(&self.decoder);
        TapedModel { encoder, decoder }
    }

    /// Registers only the encoder; decoder handles are left empty.
    pub fn register_encoder(&self, tape: &mut Tape) -> TapedModel {
        let encoder = self
            .encoder
            .iter()
            .map(|d| (tape.param(d.weight.clone()), tape.param(d.bias.clone())))
            .collect();
        TapedModel {
            encoder,
            decoder: Vec::new(),
        }
    }

    fn run_on_tape(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
        let last = layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if l < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn encode_on_tape(tape: &mut Tape, model: &TapedModel, x: Var) -> Result<Var> {
        Self::run_on_tape(tape, &model.encoder, x)
    }

    pub fn decode_on_tape(tape: &mut Tape, model: &TapedModel, z: Var) -> Result<Var> {
        Self::run_on_tape(tape, &model.decoder, z)
    }

    /// Gradients for every parameter in [`Self::parameters`] order; decoder
    /// slots are zero when the decoder was not registered.
    pub fn collect_gradients(&self, taped: &TapedModel, grads: &Gradients) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = taped.encoder_vars().into_iter().map(|v| grads.wrt(v)).collect();
        if taped.decoder.is_empty() {
            out.extend(self.decoder.iter().flat_map(|d| {
                [
                    Matrix::zeros(d.weight.rows(), d.weight.cols()),
                    Matrix::zeros(1, d.bias.cols()),
                ]
            }));
        } else {
            out.extend(taped.decoder_vars().into_iter().map(|v| grads.wrt(v)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub sigma: f64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            sigma: 0.2,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-epoch shuffled mini-batches of row indices.
pub(crate) fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

const PRETRAIN_STREAM: u64 = 1 << 40;

/// Trains `model` to reconstruct clean rows from Gaussian-corrupted copies
/// `x + N(0, σ²)`. Returns the mean batch loss of every epoch.
pub fn pretrain_model(model: &mut Autoencoder, x: &Matrix, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Err(DcrlError::Argument("pretraining needs at least one epoch".into()));
    }
    if cfg.sigma.is_nan() || cfg.sigma < 0.0 {
        return Err(DcrlError::Argument(format!("noise level must be non-negative, got {}", cfg.sigma)));
    }
    if x.cols() != model.input_dim() {
        return Err(DcrlError::dim("pretrain", format!("{} columns for a {}-input model", x.cols(), model.input_dim())));
    }
    let mut adam = AdamState::new(&model.shapes());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, PRETRAIN_STREAM + epoch as u64);
        let mut total = 0.0;
        let batch_list = batches(x.rows(), cfg.batch, &mut rng);
        for (b, idx) in batch_list.iter().enumerate() {
            let clean = x.select_rows(idx);
            let noisy = if cfg.sigma > 0.0 {
                clean.map(|v| {
                    let e: f64 = rng.sample(StandardNormal);
                    v + cfg.sigma * e
                })
            } else {
                clean.clone()
            };
            let mut tape = Tape::new();
            let taped = model.register(&mut tape);
            let input = tape.constant(noisy);
            let target = tape.constant(clean);
            let z = Autoencoder::encode_on_tape(&mut tape, &taped, input)?;
            let y = Autoencoder::decode_on_tape(&mut tape, &taped, z)?;
            let loss = tape.mse(y, target)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(DcrlError::Numerical {
                    stage: "pretrain",
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            let g = model.collect_gradients(&taped, &grads);
            let grefs: Vec<&Matrix> = g.iter().collect();
            adam.step(&mut model.parameters_mut(), &grefs, cfg.lr)?;
        }
        history.push(total / batch_list.len() as f64);
    }
    Ok(history)
}

/// Builds a freshly initialized model (seeded by `cfg.seed`) and pretrains it.
pub fn pretrain(x: &Matrix, arch: Architecture, cfg: &PretrainConfig) -> Result<(Autoencoder, Vec<f64>)> {
    let mut model = Autoencoder::new(arch, cfg.seed)?;
    let history = pretrain_model(&mut model, x, cfg)?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn small_arch(d: usize) -> Architecture {
        Architecture {
            input_dim: d,
            hidden: vec![8, 6],
            latent_dim: 2,
        }
    }

    #[test]
    fn zero_model_maps_to_zero() {
        let m = Autoencoder::zeros(small_arch(3)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        assert_eq!(m.encode(&x).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(m.decode(&Matrix::filled(2, 2, 4.0)).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn row_permutation_equivariance() {
        let m = Autoencoder::new(small_arch(3), 4).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0], [0.2, 0.2, -0.7]]);
        let perm = [2, 0, 1];
        let z = m.encode(&x).unwrap();
        assert_eq!(m.encode(&x.select_rows(&perm)).unwrap(), z.select_rows(&perm));
        let y = m.decode(&z).unwrap();
        assert_eq!(m.decode(&z.select_rows(&perm)).unwrap(), y.select_rows(&perm));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]);
        let a = Autoencoder::new(small_arch(3), 9).unwrap();
        let b = Autoencoder::new(small_arch(3), 9).unwrap();
        assert_eq!(a.encode(&x).unwrap(), b.encode(&x).unwrap());
        assert_eq!(a.decode(&Matrix::from_rows(&[[0.5, -0.5]])).unwrap(), b.decode(&Matrix::from_rows(&[[0.5, -0.5]])).unwrap());
    }

    #[test]
    fn dimension_errors() {
        let m = Autoencoder::new(small_arch(3), 0).unwrap();
        assert!(m.encode(&Matrix::zeros(1, 4)).is_err());
        assert!(m.decode(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn param_count_formula() {
        let arch = Architecture::standard(784);
        let enc = 784 * 500 + 500 + 500 * 500 + 500 + 500 * 500 + 500 + 500 * 2000 + 2000 + 2000 * 10 + 10;
        let dec = 10 * 2000 + 2000 + 2000 * 500 + 500 + 500 * 500 + 500 + 500 * 500 + 500 + 500 * 784 + 784;
        assert_eq!(arch.param_count(), enc + dec);
        let m = Autoencoder::new(small_arch(5), 0).unwrap();
        let total: usize = m.parameters().iter().map(|p| p.len()).sum();
        assert_eq!(total, m.arch.param_count());
    }

    #[test]
    fn linear_bottleneck_learns_low_rank_data() {
        // Rank-2 data through a single linear 2-unit bottleneck.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = Matrix::from_rows(&[[1.0, 0.5, -0.3, 0.2], [0.0, 0.8, 0.6, -0.4]]);
        let coeffs = Matrix::from_vec(64, 2, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = coeffs.matmul(&basis).unwrap();
        let arch = Architecture {
            input_dim: 4,
            hidden: vec![],
            latent_dim: 2,
        };
        let cfg = PretrainConfig {
            epochs: 1500,
            sigma: 0.0,
            batch: 64,
            lr: 0.01,
            seed: 1,
        };
        let (_, losses) = pretrain(&x, arch, &cfg).unwrap();
        assert!(losses[losses.len() - 1] < 1e-4, "final loss {}", losses[losses.len() - 1]);
    }

    #[test]
    fn pretraining_reduces_loss_deterministically() {
        let ds = gen_blobs(30, 3, 6, 1.0, 2).unwrap();
        let cfg = PretrainConfig {
            epochs: 15,
            sigma: 0.2,
            batch: 32,
            lr: 1e-3,
            seed: 5,
        };
        let arch = Architecture {
            input_dim: 6,
            hidden: vec![16, 16],
            latent_dim: 3,
        };
        let (_, a) = pretrain(&ds.x, arch.clone(), &cfg).unwrap();
        assert!(a[a.len() - 1] < a[0]);
        let (_, b) = pretrain(&ds.x, arch, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretraining_rejects_bad_config() {
        let x = Matrix::zeros(4, 3);
        let bad = PretrainConfig { epochs: 0, ..Default::default() };
        assert!(pretrain(&x, small_arch(3), &bad).is_err());
        let bad = PretrainConfig { sigma: -1.0, ..Default::default() };
        assert!(pretrain(&x, small_arch(3), &bad).is_err());
    }
}
