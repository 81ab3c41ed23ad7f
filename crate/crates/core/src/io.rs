//! On-disk formats. Binary files are a single JSON header line followed by
//! a little-endian payload; reports and metrics are JSON. Every file
//! records the resolved config, the code version and the seed, and every
//! write goes through a temporary file renamed into place.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tempfile::NamedTempFile;

use crate::autodiff::ParamStore;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::spirograph::{FactorsOfInterest, Nuisance, RenderGrid, SpiroDataset, SpiroSpecs};
use crate::tensor::Tensor;
use crate::train::{MetricsRecord, TrainObserver};

pub const FORMAT_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const FACTOR_NAMES: [&str; 4] = ["m", "b", "sigma", "f_r"];
pub const NUISANCE_NAMES: [&str; 6] = ["h", "f_g", "f_b", "b_r", "b_g", "b_b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub code_version: String,
    pub seed: u64,
    pub config: Value,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Provenance {
            code_version: CODE_VERSION.into(),
            seed: cfg.seed,
            config: cfg.to_value(),
        }
    }

    /// The embedded config, parsed and validated.
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_value(self.config.clone(), &[], "embedded config")
    }
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct Envelope {
    version: u32,
    kind: String,
}

/// Parses the header line and returns it with the payload offset.
fn split_header<H: DeserializeOwned>(bytes: &[u8], path: &Path, kind: &str) -> Result<(H, usize)> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, bytes.len(), "missing header line"))?;
    check_envelope(&bytes[..end], path, kind, 0)?;
    let header = serde_json::from_slice(&bytes[..end]).map_err(|e| format_err(path, 0, format!("bad header: {e}")))?;
    Ok((header, end + 1))
}

fn check_envelope(line: &[u8], path: &Path, kind: &str, offset: usize) -> Result<()> {
    let env: Envelope =
        serde_json::from_slice(line).map_err(|e| format_err(path, offset, format!("bad header: {e}")))?;
    if env.version != FORMAT_VERSION {
        return Err(format_err(
            path,
            offset,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                env.version
            ),
        ));
    }
    if env.kind != kind {
        return Err(format_err(
            path,
            offset,
            format!("expected a {kind} file, found {}", env.kind),
        ));
    }
    Ok(())
}

fn put_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// `count` values of `width` bytes starting at `offset`.
fn take<'a>(bytes: &'a [u8], offset: usize, count: usize, width: usize, path: &Path) -> Result<&'a [u8]> {
    let need = count * width;
    if bytes.len() < offset + need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload truncated: expected {need} bytes from offset {offset}"),
        ));
    }
    Ok(&bytes[offset..offset + need])
}

fn f64s(raw: &[u8]) -> Vec<f64> {
    raw.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

fn expect_end(bytes: &[u8], at: usize, path: &Path) -> Result<()> {
    if bytes.len() != at {
        return Err(format_err(path, at, format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    version: u32,
    kind: String,
    n: usize,
    first_index: u64,
    factor_names: Vec<String>,
    nuisance_names: Vec<String>,
    seed: u64,
    resolution: usize,
    extent: f64,
    specs: SpiroSpecs,
    provenance: Provenance,
}

pub fn write_dataset(path: &Path, data: &SpiroDataset, provenance: &Provenance) -> Result<()> {
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        kind: "dataset".into(),
        n: data.len(),
        first_index: data.first_index,
        factor_names: FACTOR_NAMES.map(String::from).to_vec(),
        nuisance_names: NUISANCE_NAMES.map(String::from).to_vec(),
        seed: data.seed,
        resolution: data.grid.resolution,
        extent: data.grid.extent,
        specs: data.specs,
        provenance: provenance.clone(),
    };
    let line = serde_json::to_vec(&header)?;
    atomic_write(path, |w| {
        w.write_all(&line)?;
        w.write_all(b"\n")?;
        put_f64s(w, data.factors.iter().flat_map(|f| f.to_array()))?;
        put_f64s(w, data.eval_nuisance.iter().flat_map(|f| f.to_array()))
    })
}

pub fn read_dataset(path: &Path) -> Result<(SpiroDataset, Provenance)> {
    let bytes = read_file(path)?;
    let (h, off): (DatasetHeader, usize) = split_header(&bytes, path, "dataset")?;
    if h.factor_names != FACTOR_NAMES || h.nuisance_names != NUISANCE_NAMES {
        return Err(format_err(path, 0, "unexpected parameter names"));
    }
    let grid = RenderGrid::new(h.resolution, h.extent).map_err(|e| format_err(path, 0, e.to_string()))?;
    h.specs.validate().map_err(|e| format_err(path, 0, e.to_string()))?;
    let factors = f64s(take(&bytes, off, h.n * 4, 8, path)?);
    let off2 = off + h.n * 32;
    let nuisance = f64s(take(&bytes, off2, h.n * 6, 8, path)?);
    expect_end(&bytes, off2 + h.n * 48, path)?;
    let data = SpiroDataset {
        seed: h.seed,
        first_index: h.first_index,
        specs: h.specs,
        grid,
        factors: factors
            .chunks_exact(4)
            .map(|c| FactorsOfInterest::from_array(c.try_into().expect("4")))
            .collect(),
        eval_nuisance: nuisance
            .chunks_exact(6)
            .map(|c| Nuisance::from_array(c.try_into().expect("6")))
            .collect(),
    };
    Ok((data, h.provenance))
}

/// Storage width of checkpoint tensors. Computation is always `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    kind: String,
    precision: Precision,
    step: u64,
    tensors: Vec<TensorEntry>,
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f64>,
    pub step: u64,
    pub provenance: Provenance,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, precision: Precision) -> Result<()> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        kind: "checkpoint".into(),
        precision,
        step: ckpt.step,
        tensors: ckpt
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        provenance: ckpt.provenance.clone(),
    };
    let line = serde_json::to_vec(&header)?;
    atomic_write(path, |w| {
        w.write_all(&line)?;
        w.write_all(b"\n")?;
        for (_, t) in ckpt.params.iter() {
            for &v in t.data() {
                match precision {
                    Precision::F64 => w.write_all(&v.to_le_bytes())?,
                    Precision::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                }
            }
        }
        Ok(())
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let (h, mut off): (CheckpointHeader, usize) = split_header(&bytes, path, "checkpoint")?;
    let width = h.precision.width();
    let mut params = ParamStore::new();
    for entry in h.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&bytes, off, n, width, path)?;
        let data = match h.precision {
            Precision::F64 => f64s(raw),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        params
            .insert(entry.name, Tensor::new(&entry.shape, data)?)
            .map_err(|e| format_err(path, off, e.to_string()))?;
        off += n * width;
    }
    expect_end(&bytes, off, path)?;
    Ok(Checkpoint {
        params,
        step: h.step,
        provenance: h.provenance,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsHeader {
    version: u32,
    kind: String,
    provenance: Provenance,
}

/// Streams metrics records to a temporary file; [`MetricsWriter::finish`]
/// moves it into place.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<NamedTempFile>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, provenance: &Provenance) -> Result<Self> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = BufWriter::new(tmp);
        let header = MetricsHeader {
            version: FORMAT_VERSION,
            kind: "metrics".into(),
            provenance: provenance.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
            last_step: None,
        })
    }

    pub fn push(&mut self, r: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| r.step <= s) {
            return Err(Error::invalid(format!(
                "metrics step {} does not follow {}",
                r.step,
                self.last_step.unwrap_or_default()
            )));
        }
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(r.step);
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let path = self.path;
        let tmp = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

impl TrainObserver for MetricsWriter {
    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        self.push(r)
    }
}

pub fn write_metrics(path: &Path, provenance: &Provenance, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(path, provenance)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Reads a metrics file, rejecting records whose step does not increase.
pub fn read_metrics(path: &Path) -> Result<(Provenance, Vec<MetricsRecord>)> {
    let bytes = read_file(path)?;
    let (h, mut off): (MetricsHeader, usize) = split_header(&bytes, path, "metrics")?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    while off < bytes.len() {
        let end = bytes[off..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| off + p)
            .ok_or_else(|| format_err(path, off, "unterminated record"))?;
        let r: MetricsRecord =
            serde_json::from_slice(&bytes[off..end]).map_err(|e| format_err(path, off, format!("bad record: {e}")))?;
        if let Some(prev) = records.last() {
            if r.step <= prev.step {
                return Err(format_err(
                    path,
                    off,
                    format!("non-monotone step {} after {}", r.step, prev.step),
                ));
            }
        }
        records.push(r);
        off = end + 1;
    }
    Ok((h.provenance, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonDocument<T> {
    pub version: u32,
    pub kind: String,
    pub provenance: Provenance,
    pub body: T,
}

/// Pretty JSON document with provenance, written atomically.
pub fn write_json<T: Serialize>(path: &Path, kind: &str, provenance: &Provenance, body: &T) -> Result<()> {
    let doc = JsonDocument {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        provenance: provenance.clone(),
        body,
    };
    let text = serde_json::to_vec_pretty(&doc)?;
    atomic_write(path, |w| {
        w.write_all(&text)?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<JsonDocument<T>> {
    let bytes = read_file(path)?;
    check_envelope(&bytes, path, kind, 0)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, 0, format!("bad {kind} document: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::spirograph::generate_split;

    fn prov() -> Provenance {
        Provenance::new(&ExperimentConfig::default())
    }

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            epoch: 0,
            lr: 1e-3,
            infonce: 4.5,
            penalty: Some(0.25),
            penalty_clipped: false,
            wall_ms: None,
        }
    }

    #[test]
    fn dataset_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let data = generate_split(6, 3, 10, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        write_dataset(&path, &data, &prov()).unwrap();
        let (back, p) = read_dataset(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(p, prov());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset as usize, bytes.len() - 1),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let data = generate_split(2, 3, 0, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        write_dataset(&path, &data, &prov()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":2", 1);
        std::fs::write(&path, text.as_bytes()).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn checkpoint_round_trip_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let cfg = ExperimentConfig::default();
        let ckpt = Checkpoint {
            params: init_params(&cfg.encoder, &cfg.head, 4).unwrap(),
            step: 17,
            provenance: prov(),
        };
        write_checkpoint(&path, &ckpt, Precision::F64).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        write_checkpoint(&path, &ckpt, Precision::F32).unwrap();
        let back = read_checkpoint(&path).unwrap();
        for ((n1, a), (n2, b)) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn metrics_round_trip_and_monotonicity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![record(0), record(1), record(5)];
        write_metrics(&path, &prov(), &recs).unwrap();
        let (p, back) = read_metrics(&path).unwrap();
        assert_eq!((p, back), (prov(), recs.clone()));
        assert!(write_metrics(&path, &prov(), &[record(2), record(2)]).is_err());
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = read_metrics(&path).unwrap_err();
        assert!(err.to_string().contains("non-monotone"), "{err}");
    }

    #[test]
    fn writes_are_atomic_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_json(&path, "report", &prov(), &1.5).unwrap();
        let failed = atomic_write(&path, |w| {
            w.write_all(b"partial")?;
            Err(std::io::Error::other("disk full"))
        });
        assert!(failed.is_err());
        let doc: JsonDocument<f64> = read_json(&path, "report").unwrap();
        assert_eq!(doc.body, 1.5);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(read_json::<f64>(&path, "comparison").is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_metrics(&path, &prov(), &[record(0)]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
