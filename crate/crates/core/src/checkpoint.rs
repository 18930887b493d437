//! Versioned binary checkpoints.
//!
//! Layout, all integers 64-bit little-endian: 8 magic bytes, format version,
//! entry count; per entry a length-prefixed UTF-8 name, the rank, the
//! extents, then the data as little-endian IEEE-754 f32. A length-prefixed
//! UTF-8 config snapshot (the TOML the model was built from) closes the file.
//! Round-trips are bit-exact, including negative zero and subnormals.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MVSCOST\0";
const VERSION: u64 = 1;

/// Named parameter tensors in their canonical order, plus the configuration
/// text they were trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub config_text: String,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(ckpt.entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in &ckpt.entries {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &e in tensor.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    out.write_all(&(ckpt.config_text.len() as u64).to_le_bytes())?;
    out.write_all(ckpt.config_text.as_bytes())?;
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn length(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // A cheap sanity bound so a corrupt length fails cleanly instead of
        // attempting a multi-terabyte allocation.
        if n > (1 << 33) {
            return Err(Error::Format(format!("implausible {what} length {n}")));
        }
        Ok(n as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.length(what)?;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut reader = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 8];
    reader.inner.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = reader.u64()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} unsupported (this build reads {VERSION})"
        )));
    }
    let count = reader.length("entry count")?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = reader.string("entry name")?;
        let rank = reader.length("rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.length("extent")?);
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        reader.inner.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let config_text = reader.string("config snapshot")?;
    let mut rest = [0u8; 1];
    if reader.inner.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        entries,
        config_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Checkpoint {
            entries: vec![
                (
                    "stage0.rdact.embed.weight".into(),
                    Tensor::random_uniform(&[128, 8], -1.0, 1.0, &mut rng),
                ),
                ("bias".into(), Tensor::zeros(&[8])),
                (
                    "exotic".into(),
                    Tensor::new(vec![4], vec![-0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, -1e-40])
                        .unwrap(),
                ),
                ("scalarish".into(), Tensor::scalar(0.25)),
            ],
            config_text: "views = 2\n[train]\nsteps = 500\n".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.entries.len(), ckpt.entries.len());
        for ((na, ta), (nb, tb)) in ckpt.entries.iter().zip(&back.entries) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let raw_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let raw_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(raw_a, raw_b, "entry {na} changed bits");
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncated_and_padded_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut padded = bytes.clone();
        padded.push(0);
        std::fs::write(&path, &padded).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        let ckpt = Checkpoint {
            entries: vec![],
            config_text: String::new(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.entries.is_empty());
        assert!(back.config_text.is_empty());
    }
}
