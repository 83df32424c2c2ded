//! Datasets, checkpoints and metric logs on disk.
//!
//! Every CSV carries a header row and ends with a `# caama v<version> seed=<seed>`
//! comment line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cor_net::CorPaymentNet;
use crate::distributions::{Dataset, DistributionSpec, Manifest};
use crate::error::{Error, Result};
use crate::mech::ValuationProfile;
use crate::relaxation::RawAmaParams;
use crate::trainer::{MetricRow, Mode, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: &str = "caama-checkpoint/1";

pub fn version_tag() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn footer(seed: u64) -> String {
    format!("# caama {} seed={seed}", version_tag())
}

/// Writes `header` + `rows` + footer.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>], seed: u64) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::DimensionMismatch {
                what: "table row",
                expected: header.len(),
                got: r.len(),
            });
        }
        w.write_record(r)?;
    }
    w.flush()?;
    drop(w);
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{}", footer(seed))?;
    Ok(())
}

/// Header plus string rows, skipping `#` lines.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

/// Column names `v_<i>_<j>` in row-major order.
pub fn dataset_header(n: usize, m: usize) -> Vec<String> {
    (0..n)
        .flat_map(|i| (0..m).map(move |j| format!("v_{i}_{j}")))
        .collect()
}

/// Writes the profiles as CSV and the manifest alongside.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<PathBuf> {
    let (n, m) = (data.spec.n, data.spec.m);
    let header = dataset_header(n, m);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = data
        .profiles
        .iter()
        .map(|v| v.values().iter().map(|x| x.to_string()).collect())
        .collect();
    write_table(path, &header_refs, &rows, data.manifest.seed)?;
    let mp = manifest_path(path);
    write_json(&mp, &data.manifest)?;
    Ok(mp)
}

/// Reads a dataset CSV; the manifest is used when present.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_table(path)?;
    let (n, m) = parse_dataset_header(&header)?;
    let mut profiles = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let values = row
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::invalid("dataset value", format!("row {}: {s:?}: {e}", r + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        profiles.push(ValuationProfile::new(n, m, values)?);
    }
    if profiles.is_empty() {
        return Err(Error::invalid("dataset", "no rows"));
    }
    let mp = manifest_path(path);
    let manifest: Manifest = if mp.exists() {
        read_json(&mp)?
    } else {
        let spec = DistributionSpec::uniform(n, m, 0);
        Manifest {
            spec,
            seed: 0,
            stream: 0,
            count: profiles.len(),
            generator: "unknown".into(),
        }
    };
    if manifest.spec.n != n || manifest.spec.m != m {
        return Err(Error::invalid(
            "dataset manifest",
            format!("shape {}x{} disagrees with columns {n}x{m}", manifest.spec.n, manifest.spec.m),
        ));
    }
    Ok(Dataset {
        profiles,
        spec: manifest.spec.clone(),
        manifest,
    })
}

fn parse_dataset_header(header: &[String]) -> Result<(usize, usize)> {
    let mut max_i = 0;
    let mut max_j = 0;
    for h in header {
        let parts: Vec<&str> = h.trim().split('_').collect();
        let parsed = match parts.as_slice() {
            ["v", i, j] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()),
            _ => None,
        };
        let (i, j) = parsed.ok_or_else(|| Error::invalid("dataset header", format!("bad column {h:?}")))?;
        max_i = max_i.max(i);
        max_j = max_j.max(j);
    }
    let (n, m) = (max_i + 1, max_j + 1);
    if header.is_empty() || dataset_header(n, m) != header {
        return Err(Error::invalid("dataset header", "columns must be v_<i>_<j> in row-major order"));
    }
    Ok((n, m))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub mode: Mode,
    pub raw: RawAmaParams,
    pub cor: Option<CorPaymentNet>,
    pub config: TrainConfig,
    pub spec: DistributionSpec,
    pub iter: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig, spec: &DistributionSpec) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            mode: state.mode,
            raw: state.raw.clone(),
            cor: state.cor.clone(),
            config: cfg.clone(),
            spec: spec.clone(),
            iter: state.iter,
            gamma: state.gamma,
            seed: cfg.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid("checkpoint format", c.format));
        }
        c.raw.validate()?;
        if let Some(net) = &c.cor {
            if net.n() != c.raw.n || net.m() != c.raw.m {
                return Err(Error::invalid("checkpoint", "net and menu shapes disagree"));
            }
        }
        if c.mode == Mode::Caama && c.cor.is_none() {
            return Err(Error::invalid("checkpoint", "caama checkpoint without a payment net"));
        }
        Ok(c)
    }

    pub fn into_state(self) -> TrainState {
        TrainState::from_parts(&self.config, self.raw, self.cor, self.gamma, self.iter, self.mode)
    }
}

pub const METRIC_HEADER: [&str; 8] = [
    "iter",
    "revenue_soft",
    "revenue_exact",
    "regret_ir",
    "gamma",
    "stage",
    "pay_ama",
    "pay_cor",
];

pub fn write_metric_log(path: &Path, log: &[MetricRow], seed: u64) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                r.revenue_soft.to_string(),
                r.revenue_exact.to_string(),
                r.regret_ir.to_string(),
                r.gamma.to_string(),
                match r.stage {
                    crate::trainer::Stage::Mutual => "mutual".into(),
                    crate::trainer::Stage::Post => "post".into(),
                },
                r.pay_ama.to_string(),
                r.pay_cor.to_string(),
            ]
        })
        .collect();
    write_table(path, &METRIC_HEADER, &rows, seed)
}
