//! `--dataset SPEC` parsing and loading.
//!
//! ```text
//! blobs:n=200,c=4,dim=10,spread=2,seed=0
//! manifolds:n=150,c=4,seed=0
//! csv:PATH            header row ending in `label` means labeled
//! csv:PATH:labels     last column is the label, header auto-detected
//! csv:PATH:nolabels
//! idx:IMAGES,LABELS
//! ```

use std::collections::BTreeMap;
use std::fs;

use dcrl::data::{self, Dataset};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Blobs { n: usize, clusters: usize, dim: usize, spread: f64, seed: Option<u64> },
    Manifolds { n: usize, clusters: usize, seed: Option<u64> },
    Csv { path: String, labels: Option<bool> },
    Idx { images: String, labels: String },
}

fn params(body: &str) -> Result<BTreeMap<&str, &str>, CliError> {
    let mut out = BTreeMap::new();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--dataset: expected key=value, got `{part}`")))?;
        out.insert(k.trim(), v.trim());
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(p: &mut BTreeMap<&str, &str>, key: &str, default: Option<T>) -> Result<Option<T>, CliError> {
    match p.remove(key) {
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("--dataset: bad value `{v}` for `{key}`"))),
        None => Ok(default),
    }
}

fn reject_rest(p: &BTreeMap<&str, &str>) -> Result<(), CliError> {
    match p.keys().next() {
        Some(k) => Err(CliError::Usage(format!("--dataset: unknown parameter `{k}`"))),
        None => Ok(()),
    }
}

impl DatasetSpec {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (kind, body) = spec
            .split_once(':')
            .ok_or_else(|| CliError::Usage(format!("--dataset: expected KIND:PARAMS, got `{spec}`")))?;
        match kind {
            "blobs" => {
                let mut p = params(body)?;
                let s = DatasetSpec::Blobs {
                    n: take(&mut p, "n", Some(200))?.unwrap(),
                    clusters: take(&mut p, "c", Some(4))?.unwrap(),
                    dim: take(&mut p, "dim", Some(10))?.unwrap(),
                    spread: take(&mut p, "spread", Some(2.0))?.unwrap(),
                    seed: take(&mut p, "seed", None)?,
                };
                reject_rest(&p)?;
                Ok(s)
            }
            "manifolds" => {
                let mut p = params(body)?;
                let s = DatasetSpec::Manifolds {
                    n: take(&mut p, "n", Some(150))?.unwrap(),
                    clusters: take(&mut p, "c", Some(4))?.unwrap(),
                    seed: take(&mut p, "seed", None)?,
                };
                reject_rest(&p)?;
                Ok(s)
            }
            "csv" => {
                let (path, labels) = if let Some(p) = body.strip_suffix(":labels") {
                    (p, Some(true))
                } else if let Some(p) = body.strip_suffix(":nolabels") {
                    (p, Some(false))
                } else {
                    (body, None)
                };
                if path.is_empty() {
                    return Err(CliError::Usage("--dataset: csv needs a path".into()));
                }
                Ok(DatasetSpec::Csv { path: path.into(), labels })
            }
            "idx" => {
                let (images, labels) = body
                    .split_once(',')
                    .ok_or_else(|| CliError::Usage("--dataset: idx needs IMAGES,LABELS".into()))?;
                Ok(DatasetSpec::Idx { images: images.into(), labels: labels.into() })
            }
            other => Err(CliError::Usage(format!(
                "--dataset: unknown kind `{other}` (blobs, manifolds, csv, idx)"
            ))),
        }
    }

    /// Generators and CSV files hold raw feature vectors and are
    /// standardized; IDX pixels are already in [0, 1].
    pub fn is_vector_data(&self) -> bool {
        !matches!(self, DatasetSpec::Idx { .. })
    }

    pub fn load(&self, run_seed: u64) -> Result<Dataset, CliError> {
        let data_err = |e: dcrl::DcrlError| CliError::Data(format!("--dataset: {e}"));
        match self {
            DatasetSpec::Blobs { n, clusters, dim, spread, seed } => {
                data::gen_blobs(*n, *clusters, *dim, *spread, seed.unwrap_or(run_seed)).map_err(data_err)
            }
            DatasetSpec::Manifolds { n, clusters, seed } => {
                data::gen_intersecting_manifolds(*n, *clusters, seed.unwrap_or(run_seed)).map_err(data_err)
            }
            DatasetSpec::Csv { path, labels } => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("--dataset: {path}: {e}")))?;
                let first = text.lines().next().unwrap_or("");
                let header = first
                    .split(',')
                    .next()
                    .is_some_and(|cell| cell.trim().parse::<f64>().is_err());
                let labeled = labels.unwrap_or_else(|| header && first.rsplit(',').next().map(str::trim) == Some("label"));
                let mut ds = data::parse_csv(&text, labeled, header).map_err(data_err)?;
                if let Some(stem) = std::path::Path::new(path).file_stem() {
                    ds.name = stem.to_string_lossy().into_owned();
                }
                Ok(ds)
            }
            DatasetSpec::Idx { images, labels } => data::load_idx(images, labels).map_err(data_err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_generators_with_defaults() {
        assert_eq!(
            DatasetSpec::parse("blobs:c=3,seed=7").unwrap(),
            DatasetSpec::Blobs { n: 200, clusters: 3, dim: 10, spread: 2.0, seed: Some(7) }
        );
        assert_eq!(
            DatasetSpec::parse("manifolds:").unwrap(),
            DatasetSpec::Manifolds { n: 150, clusters: 4, seed: None }
        );
    }

    #[test]
    fn parses_files() {
        assert_eq!(
            DatasetSpec::parse("csv:a/b.csv:nolabels").unwrap(),
            DatasetSpec::Csv { path: "a/b.csv".into(), labels: Some(false) }
        );
        assert_eq!(
            DatasetSpec::parse("idx:x.idx,y.idx").unwrap(),
            DatasetSpec::Idx { images: "x.idx".into(), labels: "y.idx".into() }
        );
    }

    #[test]
    fn rejects_bad_specs() {
        for bad in ["blobs", "blobs:q=1", "blobs:n=x", "tsv:a", "idx:only", "csv:"] {
            assert!(matches!(DatasetSpec::parse(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn csv_label_detection() {
        let dir = tempfile::tempdir().unwrap();
        let with = dir.path().join("with.csv");
        fs::write(&with, "x0,x1,label\n1,2,0\n3,4,1\n").unwrap();
        let ds = DatasetSpec::parse(&format!("csv:{}", with.display())).unwrap().load(0).unwrap();
        assert_eq!(ds.labels, Some(vec![0, 1]));
        let bare = dir.path().join("bare.csv");
        fs::write(&bare, "1,2,0\n3,4,1\n").unwrap();
        let ds = DatasetSpec::parse(&format!("csv:{}", bare.display())).unwrap().load(0).unwrap();
        assert_eq!((ds.dim(), ds.labels), (3, None));
    }
}
