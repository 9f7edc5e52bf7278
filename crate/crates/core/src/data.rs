//! Dataset loading, normalization, splitting and synthetic generators.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DcrlError, Result};
use crate::tensor::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub num_classes: Option<usize>,
}

impl Dataset {
    /// Validates the dataset invariants and infers `num_classes` from the
    /// labels when it is not given.
    pub fn new(name: impl Into<String>, x: Matrix, labels: Option<Vec<usize>>, num_classes: Option<usize>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(DcrlError::Argument(format!(
                "dataset must have at least one row and column, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(DcrlError::Argument("dataset contains non-finite values".into()));
        }
        let mut num_classes = num_classes;
        if let Some(labels) = &labels {
            if labels.len() != x.rows() {
                return Err(DcrlError::dim(
                    "dataset",
                    format!("{} labels for {} samples", labels.len(), x.rows()),
                ));
            }
            let observed = labels.iter().max().map_or(0, |m| m + 1);
            match num_classes {
                Some(c) if observed > c => {
                    return Err(DcrlError::Argument(format!(
                        "label {} outside [0, {c})",
                        observed - 1
                    )))
                }
                None => num_classes = Some(observed),
                _ => {}
            }
        }
        Ok(Dataset {
            x,
            labels,
            name: name.into(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: name.into(),
            num_classes: self.num_classes,
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| DcrlError::Format {
            offset: self.pos as u64,
            message: format!("{} file truncated in header", self.what),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| DcrlError::Format {
            offset: self.bytes.len() as u64,
            message: format!(
                "{} file truncated: expected {} payload bytes from offset {}",
                self.what, n, self.pos
            ),
        })?;
        self.pos = end;
        Ok(chunk)
    }
}

/// Parses an IDX image container (magic 2051) and scales pixels to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Matrix, usize, usize)> {
    let mut r = ByteReader { bytes, pos: 0, what: "image" };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DcrlError::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let height = r.u32_be()? as usize;
    let width = r.u32_be()? as usize;
    if count == 0 {
        return Err(DcrlError::Format {
            offset: 4,
            message: "image file declares zero images".into(),
        });
    }
    if height == 0 || width == 0 {
        return Err(DcrlError::Format {
            offset: 8,
            message: format!("degenerate image size {height}x{width}"),
        });
    }
    let d = height * width;
    let pixels = r.take(count * d)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok((Matrix::from_vec(count, d, data)?, height, width))
}

/// Parses an IDX label container (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = ByteReader { bytes, pos: 0, what: "label" };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DcrlError::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (x, _, _) = parse_idx_images(&fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&fs::read(labels_path.as_ref())?)?;
    if labels.len() != x.rows() {
        return Err(DcrlError::Format {
            offset: 4,
            message: format!("label count {} does not match image count {}", labels.len(), x.rows()),
        });
    }
    let name = images_path
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, x, Some(labels), None)
}

/// Encodes pixel rows in [0, 1] as an IDX image container, rounding to the
/// nearest byte.
pub fn encode_idx_images(x: &Matrix, height: usize, width: usize) -> Result<Vec<u8>> {
    if height * width != x.cols() {
        return Err(DcrlError::dim(
            "encode_idx_images",
            format!("{height}x{width} pixels for {} columns", x.cols()),
        ));
    }
    let mut out = Vec::with_capacity(16 + x.len());
    for v in [IDX_IMAGES_MAGIC, x.rows() as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(x.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| DcrlError::Argument(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Parses numeric CSV text. With `has_label_column` the final column is read
/// as a non-negative integer label.
pub fn parse_csv(text: &str, has_label_column: bool, has_header: bool) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && has_header {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(DcrlError::Parse {
                    line: line_no,
                    message: format!("expected {w} columns, found {}", cells.len()),
                })
            }
            _ => {}
        }
        let features = if has_label_column {
            if cells.len() < 2 {
                return Err(DcrlError::Parse {
                    line: line_no,
                    message: "labeled rows need at least one feature and a label".into(),
                });
            }
            let raw = cells[cells.len() - 1];
            let label: usize = raw.parse().map_err(|_| DcrlError::Parse {
                line: line_no,
                message: format!("label `{raw}` is not a non-negative integer"),
            })?;
            labels.push(label);
            &cells[..cells.len() - 1]
        } else {
            &cells[..]
        };
        for cell in features {
            let v: f64 = cell.parse().map_err(|_| DcrlError::Parse {
                line: line_no,
                message: format!("cell `{cell}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(DcrlError::Parse {
                    line: line_no,
                    message: format!("cell `{cell}` is not finite"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DcrlError::Parse {
            line: 0,
            message: "no data rows".into(),
        });
    }
    let cols = values.len() / rows;
    let x = Matrix::from_vec(rows, cols, values)?;
    Dataset::new("csv", x, has_label_column.then_some(labels), None)
}

pub fn load_csv(path: impl AsRef<Path>, has_label_column: bool, has_header: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut ds = parse_csv(&text, has_label_column, has_header)?;
    if let Some(stem) = path.as_ref().file_stem() {
        ds.name = stem.to_string_lossy().into_owned();
    }
    Ok(ds)
}

/// Renders `x0..x{d-1}[,label]` CSV with a header row.
pub fn to_csv_string(ds: &Dataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let cells: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        if let Some(labels) = &ds.labels {
            out.push(',');
            out.push_str(&labels[i].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_csv_string(ds).as_bytes())?;
    Ok(())
}

/// Centers every feature and scales it to unit variance. Constant features
/// are only centered.
pub fn zscore(ds: &Dataset) -> Dataset {
    let (n, d) = ds.x.shape();
    let mut x = ds.x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| ds.x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (ds.x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let centered = ds.x.get(i, j) - mean;
            x.set(i, j, if sd > 0.0 { centered / sd } else { centered });
        }
    }
    Dataset { x, ..ds.clone() }
}

/// Isotropic Gaussian clusters. Centers are drawn uniformly from
/// `[-5, 5]^dim`; samples are `center + spread·N(0, I)`.
pub fn gen_blobs(n_per_cluster: usize, clusters: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if clusters < 2 || dim < 2 || n_per_cluster == 0 {
        return Err(DcrlError::Argument(format!(
            "gen_blobs needs clusters >= 2, dim >= 2, n >= 1 (got {clusters}, {dim}, {n_per_cluster})"
        )));
    }
    if spread.is_nan() || spread < 0.0 {
        return Err(DcrlError::Argument(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(n_per_cluster * clusters * dim);
    let mut labels = Vec::with_capacity(n_per_cluster * clusters);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_cluster {
            for &mu in center {
                let e: f64 = rng.sample(StandardNormal);
                data.push(mu + spread * e);
            }
            labels.push(c);
        }
    }
    let x = Matrix::from_vec(labels.len(), dim, data)?;
    Dataset::new("blobs", x, Some(labels), Some(clusters))
}

/// Noisy circles in 3-D, each lying in its own plane through the z-axis
/// and all passing through the two points `(0, 0, ±h)`, so every pair of
/// manifolds intersects.
pub fn gen_intersecting_manifolds(n_per_manifold: usize, clusters: usize, seed: u64) -> Result<Dataset> {
    if !(2..=8).contains(&clusters) || n_per_manifold == 0 {
        return Err(DcrlError::Argument(format!(
            "gen_intersecting_manifolds needs 2 <= clusters <= 8 and n >= 1 (got {clusters}, {n_per_manifold})"
        )));
    }
    const H: f64 = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_per_manifold * clusters * 3);
    let mut labels = Vec::with_capacity(n_per_manifold * clusters);
    let tau = std::f64::consts::TAU;
    for c in 0..clusters {
        let phi = tau * c as f64 / clusters as f64 + rng.random_range(-0.2..0.2);
        let radius: f64 = rng.random_range(0.9..1.2);
        let shift = (radius * radius - H * H).sqrt();
        let u = [phi.cos(), phi.sin(), 0.0];
        for _ in 0..n_per_manifold {
            let t = rng.random_range(0.0..tau);
            let (a, b) = (shift + radius * t.cos(), radius * t.sin());
            let point = [a * u[0], a * u[1], b];
            for p in point {
                let e: f64 = rng.sample(StandardNormal);
                data.push(p + 0.03 * e);
            }
            labels.push(c);
        }
    }
    let x = Matrix::from_vec(labels.len(), 3, data)?;
    Dataset::new("manifolds", x, Some(labels), Some(clusters))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Stratified seeded split of row indices into (train, test).
pub fn split_indices(ds: &Dataset, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DcrlError::Argument(format!(
            "train fraction must lie strictly between 0 and 1, got {}",
            spec.train_fraction
        )));
    }
    if ds.len() < 2 {
        return Err(DcrlError::Argument("cannot split fewer than two samples".into()));
    }
    let groups = ds.num_classes.filter(|_| ds.labels.is_some()).unwrap_or(1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for i in 0..ds.len() {
        let g = ds.labels.as_ref().map_or(0, |l| l[i]);
        by_class[g].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    // Largest-remainder allocation keeps the total at round(fraction · N).
    let quotas: Vec<f64> = by_class.iter().map(|m| spec.train_fraction * m.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let target = (spec.train_fraction * ds.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(counts.iter().sum());
    for &g in order.iter().cycle().take(groups * 2) {
        if missing == 0 {
            break;
        }
        if counts[g] < by_class[g].len() {
            counts[g] += 1;
            missing -= 1;
        }
    }
    for (members, &n_train) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(DcrlError::Argument(format!(
            "train fraction {} leaves one side of the split empty",
            spec.train_fraction
        )));
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, spec)?;
    Ok((
        ds.subset(&train, format!("{}-train", ds.name)),
        ds.subset(&test, format!("{}-test", ds.name)),
    ))
}
