//! Mask persistence: 16-bit binary PGM (P5, big-endian samples) with a JSON
//! sidecar `<path>.json` carrying the metric geometry. The quantization is
//! 1/65535, so persisted masks are lossless for display and training
//! checkpoints but not bit-exact; in-process code passes `WeightMask`
//! values directly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::WeightMask;

const MAX_VAL: f64 = 65535.0;

#[derive(Serialize, Deserialize)]
struct MaskMeta {
    pixel_size: f64,
    width: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn save_mask_pgm(mask: &WeightMask, path: &Path) -> Result<()> {
    let w = mask.width();
    let mut buf = Vec::with_capacity(32 + 2 * w * w);
    write!(buf, "P5\n{w} {w}\n65535\n")?;
    for v in mask.values() {
        let q = (v * MAX_VAL).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf)?;
    let meta = MaskMeta {
        pixel_size: mask.pixel_size(),
        width: w,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Data(format!("mask metadata serialization failed: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_mask_pgm(path: &Path) -> Result<WeightMask> {
    let bytes = fs::read(path)?;
    let meta: MaskMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?).map_err(|e| {
        Error::Data(format!(
            "mask sidecar {}: {e}",
            sidecar_path(path).display()
        ))
    })?;

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed, followed by a single whitespace byte.
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!(
                "{}: truncated PGM header, missing {what}",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P5" {
        return Err(Error::Data(format!(
            "{}: expected binary PGM magic P5, got {magic}",
            path.display()
        )));
    }
    let parse = |what: &str, s: String| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: bad PGM {what} {s}", path.display())))
    };
    let width = parse("width", token("width")?)?;
    let height = parse("height", token("height")?)?;
    let maxval = parse("maxval", token("maxval")?)?;
    if width != height {
        return Err(Error::Data(format!(
            "{}: masks are square, got {width}x{height}",
            path.display()
        )));
    }
    if maxval != 65535 {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PGM (maxval 65535), got {maxval}",
            path.display()
        )));
    }
    if width != meta.width {
        return Err(Error::Data(format!(
            "{}: PGM width {width} disagrees with sidecar width {}",
            path.display(),
            meta.width
        )));
    }
    pos += 1; // single whitespace after maxval
    let expected = 2 * width * width;
    let data = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| Error::Data(format!("{}: truncated PGM pixel data", path.display())))?;
    let values = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / MAX_VAL)
        .collect();
    WeightMask::new(values, width, meta.pixel_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_survive_a_save_load_cycle_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..49).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let mask = WeightMask::new(values, 7, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        save_mask_pgm(&mask, &path).unwrap();
        let loaded = load_mask_pgm(&path).unwrap();
        assert_eq!(loaded.width(), 7);
        assert_eq!(loaded.pixel_size(), 0.25);
        for (a, b) in mask.values().iter().zip(loaded.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0, "{a} vs {b}");
        }
    }

    #[test]
    fn binary_masks_roundtrip_exactly() {
        let mask = WeightMask::new(vec![0.0, 1.0, 1.0, 0.0], 2, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("binary.pgm");
        save_mask_pgm(&mask, &path).unwrap();
        assert_eq!(load_mask_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn missing_sidecars_and_corrupt_headers_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P5\n2 2\n65535\n\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(load_mask_pgm(&path).is_err());

        let mask = WeightMask::filled(0.5, 2, 1.0).unwrap();
        save_mask_pgm(&mask, &path).unwrap();
        std::fs::write(&path, b"P2\n2 2\n65535\n0 0 0 0").unwrap();
        let err = load_mask_pgm(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
