//! Tensor dumps, image output, and CSV helpers.
//!
//! A tensor dump is `<name>.bin` (little-endian f32, row-major) plus a
//! sidecar `<name>.toml` manifest carrying name, dtype, and shape.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TensorManifest {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

pub fn write_tensor(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(dir.join(format!("{name}.bin")), bytes)?;
    let manifest = TensorManifest {
        name: name.to_string(),
        dtype: "f32".to_string(),
        shape: t.shape().to_vec(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(format!("{name}.toml")), text)?;
    Ok(())
}

pub fn read_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    let text = fs::read_to_string(dir.join(format!("{name}.toml")))?;
    let manifest: TensorManifest =
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bytes = fs::read(dir.join(format!("{name}.bin")))?;
    let n: usize = manifest.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "tensor {name}: expected {} bytes, found {}",
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::from_vec(manifest.shape, data))
}

/// Write a `[1, h, w]` or `[h, w]` tensor as a binary PGM (P5), mapping model
/// space [-1, 1] to pixel values 0..=255.
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("pgm expects single-channel image, got {s:?}"))),
    };
    let mut out = Vec::new();
    write!(out, "P5\n{w} {h}\n255\n")?;
    for &v in t.data() {
        let p = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(p);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a `[3, h, w]` tensor as a binary PPM (P6) with the same mapping.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape(format!("ppm expects [3,h,w], got {s:?}"))),
    };
    let mut out = Vec::new();
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = t.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i];
            out.push((((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write rows of a CSV file with a header. All values use `.` as the decimal
/// separator (Rust float formatting).
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_dump_roundtrip() {
        let dir = std::env::temp_dir().join("frdiff-io-test");
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 0.25, 3.0, -0.125, 7.5]);
        write_tensor(&dir, "x", &t).unwrap();
        let back = read_tensor(&dir, "x").unwrap();
        assert_eq!(back.shape(), t.shape());
        // values chosen exactly representable in f32
        assert!(back.bit_eq(&t));
    }
}
