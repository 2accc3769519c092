//! Dataset files: one CSV (`domain,x_0..,z_0..,split`) plus a JSON sidecar
//! with the generation config, specs, mixing weights and content hash.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::ndgrad::Tensor;
use crate::synthgen::{Dataset, DomainData, DomainSpec, Generated, GenerationConfig, MixingFunction, Split};
use crate::trainer::dataset_hash;

pub const DATA_FILE: &str = "data.csv";
pub const SIDECAR_FILE: &str = "data.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: GenerationConfig,
    pub specs: Vec<DomainSpec>,
    pub mixing: MixingFunction,
    pub content_hash: String,
    pub train_rows: usize,
    pub test_rows: usize,
    pub data_file: String,
}

fn header(n: usize) -> Vec<String> {
    let mut h = vec!["domain".to_string()];
    h.extend((0..n).map(|i| format!("x_{i}")));
    h.extend((0..n).map(|i| format!("z_{i}")));
    h.push("split".into());
    h
}

/// Writes `data.csv` and `data.json` into `dir`; returns the content hash.
pub fn write_dataset(dir: &Path, generated: &Generated) -> Result<String> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ds = &generated.dataset;
    let path = dir.join(DATA_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header(ds.n))?;
    for (split, part) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        for d in part {
            for r in 0..d.x.rows() {
                let mut rec = vec![d.domain.to_string()];
                rec.extend(d.x.row(r).iter().map(|v| v.to_string()));
                rec.extend(d.z.row(r).iter().map(|v| v.to_string()));
                rec.push(split.as_str().to_string());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    let hash = dataset_hash(ds);
    let sidecar = Sidecar {
        config: generated.config.clone(),
        specs: generated.specs.clone(),
        mixing: generated.mixing.clone(),
        content_hash: hash.clone(),
        train_rows: ds.train.iter().map(|d| d.x.rows()).sum(),
        test_rows: ds.test.iter().map(|d| d.x.rows()).sum(),
        data_file: DATA_FILE.into(),
    };
    fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(hash)
}

/// Resolves a dataset location: a directory holding `data.json`, or the
/// sidecar path itself.
fn sidecar_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SIDECAR_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a dataset written by [`write_dataset`] and checks its hash.
pub fn read_dataset(path: &Path) -> Result<(Sidecar, Dataset)> {
    let sc_path = sidecar_path(path);
    let text = fs::read_to_string(&sc_path).with_context(|| format!("reading {}", sc_path.display()))?;
    let sidecar: Sidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", sc_path.display()))?;
    let csv_path = sc_path.parent().unwrap_or(Path::new(".")).join(&sidecar.data_file);
    let n = sidecar.config.n;
    let mut rdr = csv::Reader::from_path(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != header(n) {
        bail!("{}: unexpected header", csv_path.display());
    }
    // (domain, split) -> (x rows, z rows), in first-seen order.
    let mut groups: Vec<(usize, Split, Vec<f64>, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || anyhow::anyhow!("{}: malformed row {}", csv_path.display(), line + 2);
        let domain: usize = rec.get(0).ok_or_else(bad)?.parse()?;
        let split = match rec.get(2 * n + 1).ok_or_else(bad)? {
            "train" => Split::Train,
            "test" => Split::Test,
            other => bail!("{}: unknown split '{other}'", csv_path.display()),
        };
        let vals: Vec<f64> = (1..=2 * n)
            .map(|i| rec.get(i).ok_or_else(bad)?.parse::<f64>().map_err(Into::into))
            .collect::<Result<_>>()?;
        let g = match groups.iter_mut().position(|g| g.0 == domain && g.1 == split) {
            Some(i) => &mut groups[i],
            None => {
                groups.push((domain, split, Vec::new(), Vec::new()));
                groups.last_mut().expect("just pushed")
            }
        };
        g.2.extend_from_slice(&vals[..n]);
        g.3.extend_from_slice(&vals[n..]);
    }
    let mut ds = Dataset {
        n,
        n_s: sidecar.config.n_s,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (domain, split, x, z) in groups {
        let rows = x.len() / n;
        let d = DomainData {
            domain,
            x: Tensor::matrix(rows, n, x)?,
            z: Tensor::matrix(rows, n, z)?,
        };
        match split {
            Split::Train => ds.train.push(d),
            Split::Test => ds.test.push(d),
        }
    }
    let hash = dataset_hash(&ds);
    if hash != sidecar.content_hash {
        bail!("content hash mismatch: file {hash}, sidecar {}", sidecar.content_hash);
    }
    Ok((sidecar, ds))
}
