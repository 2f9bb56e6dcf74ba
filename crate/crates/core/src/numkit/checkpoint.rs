//! Parameter checkpoints: a one-line JSON header (version + shape manifest)
//! followed by the raw little-endian f64 buffers in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        entries: entries
            .iter()
            .map(|(name, t)| EntryMeta { name: name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in entries {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if b[0] == b'\n' {
            break;
        }
        header_bytes.push(b[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut out = Vec::with_capacity(header.entries.len());
    for entry in header.entries {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((entry.name, Tensor::new(entry.shape, data)));
    }
    Ok(out)
}

/// Pull one named tensor out of a loaded checkpoint.
pub fn take(entries: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    match entries.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(entries.remove(i).1),
        None => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::Rng;

    #[test]
    fn round_trips_exact_bits() {
        let mut rng = Rng::seed_from_u64(17);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[7], 0.3, &mut rng);
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save(&path, &[("weights.a".into(), &a), ("weights.b".into(), &b)]).unwrap();
        let mut loaded = load(&path).unwrap();
        let a2 = take(&mut loaded, "weights.a").unwrap();
        let b2 = take(&mut loaded, "weights.b").unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        assert!(take(&mut loaded, "weights.a").is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
