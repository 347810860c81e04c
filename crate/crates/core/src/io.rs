//! Binary PGM (P5, maxval 255) images and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layout::quantize;
use crate::numerics::{Real, Tensor};

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Encodes a `[H, W]` image with values in `[0, 1]`; out-of-range values are
/// clamped and each pixel rounds to the nearest of 256 levels.
pub fn encode_pgm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let [h, w] = image.shape() else {
        return Err(Error::InvalidArgument(format!(
            "PGM needs a 2-D image, got shape {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        let q: f64 = quantize(v.as_f64());
        (q * 255.0).round() as u8
    }));
    Ok(out)
}

/// Decodes a binary PGM with maxval 255 into `[H, W]` values `k / 255`.
pub fn decode_pgm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("malformed header number"))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            w * h,
            raster.len()
        )));
    }
    let data = raster
        .iter()
        .map(|&b| T::from_f64(f64::from(b) / 255.0))
        .collect();
    Tensor::new(vec![h, w], data)
}

pub fn write_pgm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_pgm(image)?)
}

pub fn read_pgm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_lossless_on_levels() {
        let data: Vec<f32> = (0..=255u8).map(|k| f32::from(k) / 255.0).collect();
        let img = Tensor::new(vec![16, 16], data).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        let back: Tensor<f32> = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn quantization_error_within_one_level() {
        let img = Tensor::new(vec![1, 4], vec![0.1234f64, 0.5, 0.999, 0.0001]).unwrap();
        let back: Tensor<f64> = decode_pgm(&encode_pgm(&img).unwrap(), Path::new("x")).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let ok = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img: Tensor<f32> = decode_pgm(ok, Path::new("x")).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(decode_pgm::<f32>(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(decode_pgm::<f32>(b"P5\n2 2\n255\n\x00", Path::new("x")).is_err());
        assert!(decode_pgm::<f32>(b"P5\n1 1\n65535\n\x00\x00", Path::new("x")).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
