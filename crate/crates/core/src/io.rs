//! File plumbing: atomic writes, heatmap export, digests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
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

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn heatmap_dims(map: &Tensor<f32>) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::shape("heatmap", format!("expected [H,W], got {s:?}"))),
    }
}

/// Binary 8-bit PGM (P5). Values are clamped to `[0, 1]` and stored as
/// `round(255 · v)`.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = heatmap_dims(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(map: &Tensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(map)?)
}

/// Parse a P5 file written by [`encode_pgm`] back into `[0, 1]` values.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad PGM header field `{s}`")))
    };
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::format(path, "only 8-bit P5 PGM is supported"));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::format(path, "truncated PGM body"))?;
    Tensor::new([h, w], body.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Raw little-endian `f32` dump with no header.
pub fn write_raw(map: &Tensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &map.to_le_bytes())
}

pub fn read_raw(path: &Path, height: usize, width: usize) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != height * width * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", height * width * 4, bytes.len()),
        ));
    }
    Tensor::from_le_bytes([height, width], &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_gives_zero_pgm() {
        let bytes = encode_pgm(&Tensor::zeros([3, 5])).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 11 + 15);
    }

    #[test]
    fn raw_and_pgm_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::from_fn([4, 6], |i| i as f32 / 23.0);
        let raw = dir.path().join("m.raw");
        write_raw(&map, &raw).unwrap();
        assert!(read_raw(&raw, 4, 6).unwrap().bits_eq(&map));
        assert!(read_raw(&raw, 5, 6).is_err());
        let pgm = dir.path().join("m.pgm");
        write_pgm(&map, &pgm).unwrap();
        let back = read_pgm(&pgm).unwrap();
        assert!(back.max_abs_diff(&map) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"hello");
        assert!(!dir.path().join("nested/out.txt.tmp").exists());
    }
}
