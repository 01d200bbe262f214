//! Files written by the commands: JSON reports, CSV tables, and named-tensor
//! checkpoints.
//!
//! A checkpoint is one text line `CARDCKPT1`, one line of JSON listing each
//! tensor's name, shape, and element offset, then every tensor's data as
//! little-endian `f64`, in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, Context};
use card_core::Tensor;
use serde::{Deserialize, Serialize};

const MAGIC: &str = "CARDCKPT1";

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> anyhow::Result<()> {
    let mut offset = 0;
    let manifest: Vec<Entry> = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    writeln!(f, "{MAGIC}")?;
    writeln!(f, "{}", serde_json::to_string(&manifest)?)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<Vec<(String, Tensor)>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        bail!("{} is not a checkpoint", path.display());
    }
    line.clear();
    r.read_line(&mut line)?;
    let manifest: Vec<Entry> = serde_json::from_str(line.trim_end())?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        bail!("truncated checkpoint {}", path.display());
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        let len = e.shape[0] * e.shape[1];
        let Some(data) = values.get(e.offset..e.offset + len) else {
            bail!("tensor {} runs past the end of {}", e.name, path.display());
        };
        out.push((e.name, Tensor::new(e.shape[0], e.shape[1], data.to_vec())?));
    }
    Ok(out)
}
