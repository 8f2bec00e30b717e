//! Checkpoints, metrics tables, trajectory exports and run directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Architecture;
use crate::pdpo::EpochRecord;
use crate::problems::ProblemConfig;
use crate::spline::SplinePath;

/// Environment variable naming the root for run directories.
pub const OUT_ENV: &str = "DENSITYPATH_OUT";

/// Times of the trajectory export grid.
pub const EXPORT_TIMES: usize = 51;

/// Parameter vectors with their architecture and a tag naming what they fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub tag: String,
    pub controls: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn single(&self) -> Result<Array1<f64>> {
        if self.controls.len() != 1 {
            return Err(Error::Config(format!(
                "expected one parameter vector in checkpoint `{}`, found {}",
                self.tag,
                self.controls.len()
            )));
        }
        let v = Array1::from(self.controls[0].clone());
        self.arch.check(&v)?;
        Ok(v)
    }

    pub fn from_params(arch: Architecture, tag: impl Into<String>, theta: &Array1<f64>) -> Self {
        Self {
            arch,
            tag: tag.into(),
            controls: vec![theta.to_vec()],
        }
    }

    pub fn from_path(arch: Architecture, tag: impl Into<String>, path: &SplinePath) -> Self {
        Self {
            arch,
            tag: tag.into(),
            controls: path.control().iter().map(|c| c.to_vec()).collect(),
        }
    }

    pub fn to_path(&self) -> Result<SplinePath> {
        let ctl: Vec<Array1<f64>> = self.controls.iter().map(|c| Array1::from(c.clone())).collect();
        for c in &ctl {
            self.arch.check(c)?;
        }
        SplinePath::new(ctl)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(rows: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// `time,sample_id,x1..xd` rows, one block per time.
pub fn trajectory_csv(times: &[f64], blocks: &[Array2<f64>]) -> Result<Vec<u8>> {
    let d = blocks.first().map_or(0, |b| b.ncols());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["time".to_string(), "sample_id".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for (t, b) in times.iter().zip(blocks) {
        for (i, row) in b.rows().into_iter().enumerate() {
            let mut rec = vec![t.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub fn export_times() -> Vec<f64> {
    (0..EXPORT_TIMES).map(|i| i as f64 / (EXPORT_TIMES - 1) as f64).collect()
}

/// Output root: `$DENSITYPATH_OUT`, else `./runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// `<root>/<problem>-<unix seconds>-<seed>`, made unique with a suffix.
pub fn new_run_dir(root: &Path, cfg: &ProblemConfig) -> Result<PathBuf> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("{}-{}-{}", cfg.name(), ts, cfg.seed);
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{base}.{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Writes the run-level config snapshot and then per-epoch folders.
pub struct RunWriter {
    pub dir: PathBuf,
    config: String,
    rows: Vec<EpochRecord>,
    arch: Architecture,
    tag: String,
}

impl RunWriter {
    pub fn create(dir: PathBuf, cfg: &ProblemConfig) -> Result<Self> {
        let config = cfg.to_toml()?;
        write_atomic(&dir.join("config.toml"), config.as_bytes())?;
        Ok(Self {
            dir,
            config,
            rows: Vec::new(),
            arch: cfg.architecture,
            tag: cfg.name().to_string(),
        })
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch}"))
    }

    pub fn record(&mut self, rec: &EpochRecord, path: &SplinePath) -> Result<()> {
        self.rows.push(*rec);
        let ed = self.epoch_dir(rec.epoch);
        let csv = metrics_csv(&self.rows)?;
        Checkpoint::from_path(self.arch, self.tag.clone(), path).write(&ed.join("controls.json"))?;
        write_atomic(&ed.join("metrics.csv"), &csv)?;
        write_atomic(&ed.join("config.toml"), self.config.as_bytes())?;
        write_atomic(&self.dir.join("metrics.csv"), &csv)
    }

    pub fn rows(&self) -> &[EpochRecord] {
        &self.rows
    }
}

/// Applies `key.path=value` overrides; values parse as TOML, else as strings.
pub fn apply_overrides(cfg: &ProblemConfig, overrides: &[String]) -> Result<ProblemConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Parse(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
    }
    let text = toml::to_string(&root).map_err(|e| Error::Parse(e.to_string()))?;
    ProblemConfig::from_toml(&text)
}
