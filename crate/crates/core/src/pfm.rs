//! Portable float map (PFM) reading and writing.
//!
//! `Pf` holds one channel, `PF` three; the scale line is written as `-1.0`
//! (negative means little-endian payload) and rows are stored bottom-up, as
//! the format requires. Tensors map to `[H, W]` or `[H, W, 3]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `data` (`[H, W]` → `Pf`, `[H, W, 3]` → `PF`) to `path`.
pub fn write_pfm(path: &Path, data: &Tensor) -> Result<()> {
    let (h, w, c) = match *data.shape() {
        [h, w] => (h, w, 1),
        [h, w, 3] => (h, w, 3),
        ref other => {
            return Err(Error::Format(format!(
                "PFM holds [H, W] or [H, W, 3] tensors, got {other:?}"
            )))
        }
    };
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", if c == 1 { "Pf" } else { "PF" })?;
    writeln!(out, "{w} {h}")?;
    writeln!(out, "-1.0")?;
    for row in (0..h).rev() {
        let line = &data.data()[row * w * c..(row + 1) * w * c];
        let mut bytes = Vec::with_capacity(line.len() * 4);
        for v in line {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PFM header".into()));
    }
    let token = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::Format("non-UTF-8 PFM header".into()))?
        .to_owned();
    // The header ends after exactly one whitespace byte; consume it so `pos`
    // lands on the first payload byte after the last token.
    *pos += 1;
    Ok(token)
}

/// Reads a PFM file into `[H, W]` (for `Pf`) or `[H, W, 3]` (for `PF`).
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0;
    let kind = header_token(&bytes, &mut pos)?;
    let channels = match kind.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("not a PFM file (header {other:?})"))),
    };
    let parse = |t: String| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::Format(format!("bad PFM extent {t:?}")))
    };
    let w = parse(header_token(&bytes, &mut pos)?)?;
    let h = parse(header_token(&bytes, &mut pos)?)?;
    let scale: f32 = header_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale == 0.0 {
        return Err(Error::Format("PFM scale must be nonzero".into()));
    }
    let little_endian = scale < 0.0;
    let count = h * w * channels;
    let payload = bytes
        .get(pos..pos + count * 4)
        .ok_or_else(|| Error::Format("PFM payload shorter than its extents".into()))?;
    let magnitude = scale.abs();
    let mut data = vec![0.0f32; count];
    for (i, quad) in payload.chunks_exact(4).enumerate() {
        let raw = [quad[0], quad[1], quad[2], quad[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Rows are stored bottom-up.
        let row = i / (w * channels);
        let within = i % (w * channels);
        data[(h - 1 - row) * w * channels + within] = v * magnitude;
    }
    let shape = if channels == 1 {
        vec![h, w]
    } else {
        vec![h, w, 3]
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gray_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.pfm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = Tensor::random_uniform(&[5, 7], 0.1, 9.0, &mut rng);
        write_pfm(&path, &map).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.shape(), map.shape());
        assert_eq!(back.data(), map.data());
    }

    #[test]
    fn color_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.pfm");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::random_uniform(&[4, 6, 3], 0.0, 1.0, &mut rng);
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.pfm");
        let map = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_pfm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        let first = f32::from_le_bytes(payload[0..4].try_into().unwrap());
        // The file starts with the image's bottom row.
        assert_eq!(first, 3.0);
    }

    #[test]
    fn big_endian_positive_scale_files_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n2.0\n".to_vec();
        for v in [0.5f32, -1.25] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let map = read_pfm(&path).unwrap();
        assert_eq!(map.shape(), &[1, 2]);
        assert_eq!(map.data(), &[1.0, -2.5]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"P6\n2 2\n255\n").unwrap();
        assert!(read_pfm(&path).is_err());
        std::fs::write(&path, b"Pf\n4 4\n-1.0\nshort").unwrap();
        assert!(read_pfm(&path).is_err());
    }
}
