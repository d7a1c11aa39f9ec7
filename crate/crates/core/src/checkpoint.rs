//! Parameter snapshots and their on-disk form: a text manifest plus a
//! little-endian `f32` blob.
//!
//! ```text
//! bitcd-checkpoint 1
//! config <n>
//! <n lines of rendered configuration>
//! param <name> <dims joined by x> <offset> <count>
//! buffer <name> <dims joined by x> <offset> <count>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &str = "bitcd-checkpoint 1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Copy of every learnable parameter and running statistic of a model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Snapshot {
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

fn to_named<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

fn from_named<T: Scalar>(n: &NamedTensor) -> Result<Tensor<T>> {
    Tensor::new(&n.shape, n.data.iter().map(|&v| T::of(v as f64)).collect())
}

impl Snapshot {
    pub fn capture<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> Self {
        Self {
            params: model.params().iter().map(|p| to_named(p.name(), &p.value())).collect(),
            buffers: model.buffers().iter().map(|b| to_named(b.name(), &b.value())).collect(),
        }
    }

    /// Writes the snapshot into `model`; names, order and shapes must match.
    pub fn restore<T: Scalar, M: Module<T> + ?Sized>(&self, model: &M) -> Result<()> {
        let params = model.params();
        let buffers = model.buffers();
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} params / {} buffers, snapshot has {} / {}",
                params.len(),
                buffers.len(),
                self.params.len(),
                self.buffers.len()
            )));
        }
        for (p, n) in params.iter().zip(&self.params) {
            if p.name() != n.name {
                return Err(Error::Checkpoint(format!("expected `{}`, found `{}`", p.name(), n.name)));
            }
            p.set(from_named(n)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", n.name)))?;
        }
        for (b, n) in buffers.iter().zip(&self.buffers) {
            if b.name() != n.name {
                return Err(Error::Checkpoint(format!("expected `{}`, found `{}`", b.name(), n.name)));
            }
            b.set(from_named(n)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", n.name)))?;
        }
        Ok(())
    }
}

fn dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Saves `snapshot` and the rendered configuration into directory `dir`.
pub fn save(dir: &Path, snapshot: &Snapshot, config_text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_lines: Vec<&str> = config_text.lines().collect();
    let mut manifest = format!("{MAGIC}\nconfig {}\n", config_lines.len());
    for l in &config_lines {
        manifest.push_str(l);
        manifest.push('\n');
    }
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (kind, list) in [("param", &snapshot.params), ("buffer", &snapshot.buffers)] {
        for t in list {
            manifest.push_str(&format!("{kind} {} {} {offset} {}\n", t.name, dims(&t.shape), t.data.len()));
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.data.len();
        }
    }
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    let b = dir.join(BLOB_FILE);
    fs::write(&b, blob).map_err(|e| Error::io(&b, e))?;
    Ok(())
}

/// Loads a checkpoint directory; returns the snapshot and the embedded
/// configuration text.
pub fn load(dir: &Path) -> Result<(Snapshot, String)> {
    let m = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let b = dir.join(BLOB_FILE);
    let blob = fs::read(&b).map_err(|e| Error::io(&b, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("blob length {} is not a multiple of 4", blob.len())));
    }
    let values: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("missing manifest header".into()));
    }
    let n_config: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("config "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing config line count".into()))?;
    let mut config = String::new();
    for _ in 0..n_config {
        let l = lines.next().ok_or_else(|| Error::Checkpoint("truncated config".into()))?;
        config.push_str(l);
        config.push('\n');
    }
    let mut snapshot = Snapshot::default();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Checkpoint(format!("malformed entry `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let shape = parse_dims(f[2]).ok_or_else(bad)?;
        let offset: usize = f[3].parse().map_err(|_| bad())?;
        let count: usize = f[4].parse().map_err(|_| bad())?;
        if shape.iter().product::<usize>() != count || offset + count > values.len() {
            return Err(bad());
        }
        let t = NamedTensor {
            name: f[1].to_string(),
            shape,
            data: values[offset..offset + count].to_vec(),
        };
        match f[0] {
            "param" => snapshot.params.push(t),
            "buffer" => snapshot.buffers.push(t),
            _ => return Err(bad()),
        }
    }
    Ok((snapshot, config))
}
