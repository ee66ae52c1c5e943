//! Importer for NumPy `.npy` arrays (format version 1.0).
//!
//! Lets externally prepared corruption benchmarks feed the harness. Only the
//! cases the harness can consume are accepted: C-order, dtype `<f4`, `<f8`,
//! or `|u1`. Unsigned byte data is rescaled to `[0, 1]` (255 → 1.0).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Reads a `.npy` file into a tensor.
pub fn npy_import(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != NPY_MAGIC {
        return Err(Error::format("not an npy file (bad magic)"));
    }
    let mut version = [0u8; 2];
    read_exact(&mut r, &mut version, "version")?;
    if version != [1, 0] {
        return Err(Error::format(format!(
            "unsupported npy version {}.{}",
            version[0], version[1]
        )));
    }
    let mut len_bytes = [0u8; 2];
    read_exact(&mut r, &mut len_bytes, "header length")?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header = String::from_utf8(header_bytes)
        .map_err(|_| Error::format("npy header is not UTF-8"))?;

    let descr = quoted_value(&header, "descr")?;
    let fortran = bare_value(&header, "fortran_order")?;
    if fortran == "True" {
        return Err(Error::format("unsupported layout: fortran_order=True"));
    }
    if fortran != "False" {
        return Err(Error::format(format!(
            "malformed npy header (fortran_order = {fortran:?})"
        )));
    }
    let dims = shape_value(&header)?;
    let n: usize = dims.iter().product();

    let data = match descr.as_str() {
        "<f4" => {
            let mut payload = vec![0u8; n * 4];
            read_exact(&mut r, &mut payload, "f4 payload")?;
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        }
        "<f8" => {
            let mut payload = vec![0u8; n * 8];
            read_exact(&mut r, &mut payload, "f8 payload")?;
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                .collect()
        }
        "|u1" | "u1" => {
            let mut payload = vec![0u8; n];
            read_exact(&mut r, &mut payload, "u1 payload")?;
            payload.iter().map(|&b| b as f64 / 255.0).collect()
        }
        other => {
            return Err(Error::format(format!("unsupported npy dtype {other:?}")));
        }
    };
    Tensor::new(dims, data)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated npy file ({what})")))
}

/// Value of `'key': '...'` in the header dict.
fn quoted_value(header: &str, key: &str) -> Result<String> {
    let rest = after_key(header, key)?;
    let rest = rest.trim_start();
    let mut chars = rest.chars();
    if chars.next() != Some('\'') {
        return Err(Error::format(format!(
            "malformed npy header (expected quoted {key})"
        )));
    }
    let inner: String = chars.take_while(|&c| c != '\'').collect();
    Ok(inner)
}

/// Value of `'key': Ident` in the header dict.
fn bare_value(header: &str, key: &str) -> Result<String> {
    let rest = after_key(header, key)?;
    let value: String = rest
        .trim_start()
        .chars()
        .take_while(|&c| c != ',' && c != '}' && !c.is_whitespace())
        .collect();
    Ok(value)
}

fn shape_value(header: &str) -> Result<Vec<usize>> {
    let rest = after_key(header, "shape")?;
    let rest = rest.trim_start();
    if !rest.starts_with('(') {
        return Err(Error::format("malformed npy header (shape is not a tuple)"));
    }
    let inner = &rest[1..rest
        .find(')')
        .ok_or_else(|| Error::format("malformed npy header (unclosed shape)"))?];
    let mut dims = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let d: usize = part
            .parse()
            .map_err(|_| Error::format(format!("malformed npy shape entry {part:?}")))?;
        dims.push(d);
    }
    Ok(dims)
}

fn after_key<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let at = header
        .find(&pat)
        .ok_or_else(|| Error::format(format!("malformed npy header (missing {key})")))?;
    let rest = &header[at + pat.len()..];
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::format(format!("malformed npy header (missing : after {key})")))?;
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_npy(descr: &str, fortran: bool, shape: &str, payload: &[u8]) -> std::path::PathBuf {
        let dir = Box::leak(Box::new(tempfile::tempdir().unwrap()));
        let path = dir.path().join("a.npy");
        let mut header = format!(
            "{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape}, }}",
            if fortran { "True" } else { "False" }
        );
        // Pad to a multiple of 16 (magic+version+len+header), newline-terminated.
        let base = 6 + 2 + 2;
        while (base + header.len() + 1) % 16 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"\x93NUMPY\x01\x00").unwrap();
        f.write_all(&(header.len() as u16).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(payload).unwrap();
        path
    }

    #[test]
    fn f32_shape_2x3() {
        let values: Vec<f32> = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = write_npy("<f4", false, "(2, 3)", &payload);
        let t = npy_import(&path).unwrap();
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.data()[5], 5.0);
    }

    #[test]
    fn u8_rescales_to_unit_interval() {
        let path = write_npy("|u1", false, "(4,)", &[0, 51, 204, 255]);
        let t = npy_import(&path).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[3], 1.0);
        assert!((t.data()[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fortran_order_rejected() {
        let path = write_npy("<f4", true, "(1,)", &[0; 4]);
        let err = npy_import(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported layout"), "{err}");
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let path = write_npy("<i8", false, "(1,)", &[0; 8]);
        assert!(npy_import(&path)
            .unwrap_err()
            .to_string()
            .contains("unsupported npy dtype"));
    }

    #[test]
    fn f64_payload_reads_exactly() {
        let values = [1.5f64, -2.25, 1.0 / 3.0];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = write_npy("<f8", false, "(3,)", &payload);
        let t = npy_import(&path).unwrap();
        assert_eq!(t.data(), &values);
    }

    #[test]
    fn truncated_payload_rejected() {
        let path = write_npy("<f4", false, "(8,)", &[0; 16]);
        assert!(npy_import(&path)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }
}
