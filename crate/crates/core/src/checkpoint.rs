//! Binary checkpoints.
//!
//! Layout: the magic line `DCRL1`, then `key=value` text lines ending with
//! a line `end`, then the raw little-endian f64 payload of every `block=`
//! line in declaration order. A `block=name rows cols` line declares one
//! matrix. Writes go to a temporary sibling file that is renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::autoencoder::{Architecture, Autoencoder};
use crate::error::{DcrlError, Result};
use crate::optim::AdamState;
use crate::tensor::Matrix;
use crate::trainer::{EpochRecord, Optimizers, TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8] = b"DCRL1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Train,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub model: Autoencoder,
    /// Completed epochs of the stage.
    pub epoch: usize,
    /// Present for the fine-tuning stage only.
    pub train: Option<TrainState>,
}

impl Checkpoint {
    pub fn pretrained(config: TrainConfig, model: Autoencoder, epochs: usize) -> Self {
        Checkpoint {
            stage: Stage::Pretrain,
            config,
            model,
            epoch: epochs,
            train: None,
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            stage: Stage::Train,
            config: t.config.clone(),
            model: t.model.clone(),
            epoch: t.epoch,
            train: Some(t.state.clone()),
        }
    }

    /// Resumes a fine-tuning checkpoint.
    pub fn into_trainer(self) -> Result<Trainer> {
        let state = self
            .train
            .ok_or_else(|| DcrlError::checkpoint("stage", "pretraining checkpoint has no training state"))?;
        Ok(Trainer {
            config: self.config,
            model: self.model,
            epoch: self.epoch,
            state,
        })
    }

    /// Centers of a fine-tuning checkpoint.
    pub fn centers(&self) -> Option<&Matrix> {
        self.train.as_ref().map(|s| &s.centers)
    }

    fn blocks(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (half, layers) in [("encoder", &self.model.encoder), ("decoder", &self.model.decoder)] {
            for (l, d) in layers.iter().enumerate() {
                out.push((format!("{half}.{l}.weight"), d.weight.clone()));
                out.push((format!("{half}.{l}.bias"), d.bias.clone()));
            }
        }
        if let Some(s) = &self.train {
            out.push(("centers".into(), s.centers.clone()));
            for (name, adam) in s.optimizers.named() {
                for (k, m) in adam.first_moment.iter().enumerate() {
                    out.push((format!("adam.{name}.m.{k}"), m.clone()));
                }
                for (k, v) in adam.second_moment.iter().enumerate() {
                    out.push((format!("adam.{name}.v.{k}"), v.clone()));
                }
            }
            let rows: Vec<f64> = s.history.iter().flat_map(|r| r.to_row()).collect();
            out.push((
                "history".into(),
                Matrix::from_vec(s.history.len(), EpochRecord::FIELDS, rows).expect("sized"),
            ));
            if let Some(a) = &s.prev_assignments {
                out.push((
                    "assignments".into(),
                    Matrix::from_vec(a.len(), 1, a.iter().map(|&v| v as f64).collect()).expect("sized"),
                ));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let dims: Vec<String> = self.model.arch.encoder_dims().iter().map(usize::to_string).collect();
        let _ = writeln!(header, "format={FORMAT_VERSION}");
        let _ = writeln!(header, "stage={}", self.stage.as_str());
        let _ = writeln!(header, "dims={}", dims.join(","));
        let _ = writeln!(header, "clusters={}", self.config.clusters);
        let _ = writeln!(header, "epoch={}", self.epoch);
        let _ = writeln!(header, "seed={}", self.config.seed);
        let _ = writeln!(header, "config={}", serde_json::to_string(&self.config).expect("config serializes"));
        if let Some(s) = &self.train {
            let _ = writeln!(header, "stable_epochs={}", s.stable_epochs);
            for (name, a) in s.optimizers.named() {
                let _ = writeln!(header, "adam.{name}={} {} {} {}", a.step, a.beta1, a.beta2, a.epsilon);
            }
        }
        let blocks = self.blocks();
        for (name, m) in &blocks {
            let _ = writeln!(header, "block={name} {} {}", m.rows(), m.cols());
        }
        header.push_str("end\n");

        let payload: usize = blocks.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        for (_, m) in &blocks {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(DcrlError::Format {
                offset: 0,
                message: "missing DCRL1 magic line".into(),
            });
        }
        let mut header = Header::default();
        let mut pos = MAGIC.len();
        loop {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| DcrlError::Format {
                offset: pos as u64,
                message: "header truncated before `end`".into(),
            })?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| DcrlError::Format {
                offset: pos as u64,
                message: "header line is not UTF-8".into(),
            })?;
            let line_offset = pos;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| DcrlError::Format {
                offset: line_offset as u64,
                message: format!("malformed header line `{line}`"),
            })?;
            header.set(key, value)?;
        }
        let mut reader = Payload { bytes, pos };
        let ckpt = header.build(&mut reader)?;
        if reader.pos != bytes.len() {
            return Err(DcrlError::Format {
                offset: reader.pos as u64,
                message: format!("{} trailing bytes after the last block", bytes.len() - reader.pos),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file_name = path
            .file_name()
            .ok_or_else(|| DcrlError::Argument(format!("checkpoint path {} has no file name", path.display())))?;
        let mut tmp_name = file_name.to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Default)]
struct Header {
    format: Option<u32>,
    stage: Option<Stage>,
    dims: Option<Vec<usize>>,
    clusters: Option<usize>,
    epoch: Option<usize>,
    seed: Option<u64>,
    config: Option<TrainConfig>,
    stable_epochs: Option<usize>,
    adam: Vec<(String, [f64; 3], u64)>,
    blocks: Vec<(String, usize, usize)>,
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| DcrlError::checkpoint(field, format!("cannot parse `{value}`")))
}

fn required<T>(field: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| DcrlError::checkpoint(field, "missing from header"))
}

impl Header {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "format" => {
                let v: u32 = parse_field(key, value)?;
                if v != FORMAT_VERSION {
                    return Err(DcrlError::checkpoint("format", format!("version {v} is not supported (expected {FORMAT_VERSION})")));
                }
                self.format = Some(v);
            }
            "stage" => {
                self.stage = Some(match value {
                    "pretrain" => Stage::Pretrain,
                    "train" => Stage::Train,
                    other => return Err(DcrlError::checkpoint("stage", format!("unknown stage `{other}`"))),
                })
            }
            "dims" => {
                let dims = value.split(',').map(|d| parse_field("dims", d)).collect::<Result<Vec<usize>>>()?;
                if dims.len() < 2 {
                    return Err(DcrlError::checkpoint("dims", "need at least input and latent widths"));
                }
                self.dims = Some(dims);
            }
            "clusters" => self.clusters = Some(parse_field(key, value)?),
            "epoch" => self.epoch = Some(parse_field(key, value)?),
            "seed" => self.seed = Some(parse_field(key, value)?),
            "stable_epochs" => self.stable_epochs = Some(parse_field(key, value)?),
            "config" => {
                self.config = Some(
                    serde_json::from_str(value).map_err(|e| DcrlError::checkpoint("config", e.to_string()))?,
                )
            }
            "block" => {
                let parts: Vec<&str> = value.split(' ').collect();
                if parts.len() != 3 {
                    return Err(DcrlError::checkpoint("block", format!("expected `name rows cols`, got `{value}`")));
                }
                self.blocks.push((
                    parts[0].to_string(),
                    parse_field(parts[0], parts[1])?,
                    parse_field(parts[0], parts[2])?,
                ));
            }
            _ => {
                if let Some(name) = key.strip_prefix("adam.") {
                    let parts: Vec<&str> = value.split(' ').collect();
                    if parts.len() != 4 {
                        return Err(DcrlError::checkpoint(key, "expected `step beta1 beta2 epsilon`"));
                    }
                    let step: u64 = parse_field(key, parts[0])?;
                    let mut hyper = [0.0; 3];
                    for (slot, p) in hyper.iter_mut().zip(&parts[1..]) {
                        *slot = parse_field(key, p)?;
                    }
                    self.adam.push((name.to_string(), hyper, step));
                } else {
                    return Err(DcrlError::checkpoint(key, "unknown header key"));
                }
            }
        }
        Ok(())
    }

    fn build(self, payload: &mut Payload) -> Result<Checkpoint> {
        required("format", self.format)?;
        let stage = required("stage", self.stage)?;
        let dims = required("dims", self.dims)?;
        let clusters = required("clusters", self.clusters)?;
        let epoch = required("epoch", self.epoch)?;
        let seed = required("seed", self.seed)?;
        let config = required("config", self.config)?;
        if config.clusters != clusters || config.seed != seed {
            return Err(DcrlError::checkpoint("config", "disagrees with the clusters/seed header lines"));
        }
        let arch = Architecture {
            input_dim: dims[0],
            hidden: dims[1..dims.len() - 1].to_vec(),
            latent_dim: dims[dims.len() - 1],
        };
        let mut model = Autoencoder::zeros(arch).map_err(|e| DcrlError::checkpoint("dims", e.to_string()))?;

        let mut blocks = self.blocks.into_iter();
        let mut next = |name: &str, shape: Option<(usize, usize)>| -> Result<Matrix> {
            let (found, rows, cols) = blocks
                .next()
                .ok_or_else(|| DcrlError::checkpoint(name, "block missing"))?;
            if found != name {
                return Err(DcrlError::checkpoint(name, format!("expected block `{name}`, found `{found}`")));
            }
            if let Some(s) = shape {
                if s != (rows, cols) {
                    return Err(DcrlError::checkpoint(name, format!("shape {rows}x{cols}, expected {}x{}", s.0, s.1)));
                }
            }
            payload.matrix(name, rows, cols)
        };

        for (half, layers) in [("encoder", &mut model.encoder), ("decoder", &mut model.decoder)] {
            for (l, d) in layers.iter_mut().enumerate() {
                d.weight = next(&format!("{half}.{l}.weight"), Some(d.weight.shape()))?;
                d.bias = next(&format!("{half}.{l}.bias"), Some(d.bias.shape()))?;
            }
        }
        let train = match stage {
            Stage::Pretrain => None,
            Stage::Train => {
                let centers = next("centers", Some((clusters, model.latent_dim())))?;
                let mut l1_shapes = model.shapes();
                l1_shapes.push(centers.shape());
                let groups = [
                    ("l1", l1_shapes),
                    ("lis", model.encoder_shapes()),
                    ("align", vec![centers.shape()]),
                ];
                let mut adams = Vec::new();
                for (name, shapes) in groups {
                    let field = format!("adam.{name}");
                    let (_, hyper, step) = self
                        .adam
                        .iter()
                        .find(|(n, _, _)| n == name)
                        .ok_or_else(|| DcrlError::checkpoint(&field, "missing from header"))?;
                    let [beta1, beta2, epsilon] = *hyper;
                    let mut a = AdamState::with_hyperparameters(&shapes, beta1, beta2, epsilon);
                    a.step = *step;
                    for (k, &s) in shapes.iter().enumerate() {
                        a.first_moment[k] = next(&format!("{field}.m.{k}"), Some(s))?;
                    }
                    for (k, &s) in shapes.iter().enumerate() {
                        a.second_moment[k] = next(&format!("{field}.v.{k}"), Some(s))?;
                    }
                    adams.push(a);
                }
                let align = adams.pop().expect("three groups");
                let lis = adams.pop().expect("three groups");
                let l1 = adams.pop().expect("three groups");
                let history_block = next("history", None)?;
                if history_block.cols() != EpochRecord::FIELDS && history_block.rows() > 0 {
                    return Err(DcrlError::checkpoint("history", format!("{} columns", history_block.cols())));
                }
                let history = (0..history_block.rows())
                    .map(|r| EpochRecord::from_row(history_block.row(r)))
                    .collect();
                let prev_assignments = match next("assignments", None) {
                    Ok(m) => Some(m.data().iter().map(|&v| v as usize).collect()),
                    Err(DcrlError::Checkpoint { message, .. }) if message == "block missing" => None,
                    Err(e) => return Err(e),
                };
                Some(TrainState {
                    centers,
                    optimizers: Optimizers { l1, lis, align },
                    history,
                    prev_assignments,
                    stable_epochs: required("stable_epochs", self.stable_epochs)?,
                })
            }
        };
        if let Some((name, _, _)) = blocks.next() {
            return Err(DcrlError::checkpoint(name, "unexpected extra block"));
        }
        Ok(Checkpoint {
            stage,
            config,
            model,
            epoch,
            train,
        })
    }
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Payload<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| DcrlError::checkpoint(name, "block size overflows"))?;
        let chunk = self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            DcrlError::checkpoint(
                name,
                format!("payload truncated at byte {} ({} of {len} bytes present)", self.pos, self.bytes.len().saturating_sub(self.pos)),
            )
        })?;
        self.pos += len;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn trainer() -> (Matrix, Vec<usize>, Trainer) {
        let ds = gen_blobs(15, 3, 4, 0.5, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch: 16,
            ramp_end_epoch: 2,
            clusters: 3,
            pretrain_epochs: 3,
            hidden: vec![8],
            latent_dim: 2,
            ..TrainConfig::default()
        };
        let (model, _) = crate::autoencoder::pretrain(&ds.x, cfg.architecture(4), &cfg.pretrain_config()).unwrap();
        let t = Trainer::new(cfg, model, &ds.x).unwrap();
        (ds.x, ds.labels.unwrap(), t)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (x, labels, mut t) = trainer();
        t.run_epoch(&x, Some(&labels)).unwrap();
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        assert!(bytes.starts_with(MAGIC));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let resumed = back.into_trainer().unwrap();
        assert_eq!(resumed.model.encode(&x).unwrap(), t.model.encode(&x).unwrap());
        assert_eq!(resumed.history(), t.history());
    }

    #[test]
    fn pretrain_stage_round_trip() {
        let (_, _, t) = trainer();
        let c = Checkpoint::pretrained(t.config.clone(), t.model.clone(), 3);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(back.into_trainer().is_err());
    }

    #[test]
    fn file_round_trip_and_resume() {
        let (x, labels, t) = trainer();
        let mut full = t.clone();
        full.fit(&x, Some(&labels)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut part = t;
        part.run_epoch(&x, Some(&labels)).unwrap();
        part.run_epoch(&x, Some(&labels)).unwrap();
        Checkpoint::from_trainer(&part).save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
        resumed.fit(&x, Some(&labels)).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (x, labels, mut t) = trainer();
        t.run_epoch(&x, Some(&labels)).unwrap();
        let bytes = Checkpoint::from_trainer(&t).to_bytes();

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, DcrlError::Checkpoint { .. }), "{err}");
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(DcrlError::Format { offset: 0, .. })));

        let text = String::from_utf8_lossy(&bytes[..60]).to_string();
        assert!(text.contains("format=1"));
        let mut wrong = bytes.clone();
        let at = wrong.windows(8).position(|w| w == b"format=1").unwrap();
        wrong[at + 7] = b'9';
        match Checkpoint::from_bytes(&wrong) {
            Err(DcrlError::Checkpoint { field, .. }) => assert_eq!(field, "format"),
            other => panic!("{other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(DcrlError::Format { .. })));
    }
}
