//! Named-tensor archive used for model checkpoints.
//!
//! Layout:
//!
//! ```text
//! PADDYSPEC-CKPT 1
//! meta <key> <value...>
//! tensor <name> f32 <d0,d1,...> <byte offset into blob>
//! end
//! <little-endian f32 blob>
//! ```
//!
//! Tensors are always stored as 32-bit floats regardless of the in-memory
//! precision. Offsets are relative to the first byte after the `end` line.

use std::io::{BufRead, Write};

use crate::error::{NnError, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &str = "PADDYSPEC-CKPT 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_archive<T: Element, W: Write>(
    mut w: W,
    meta: &[(String, String)],
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut header = format!("{MAGIC}\n");
    for (k, v) in meta {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(bad(format!("invalid metadata entry {k:?}")));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(bad(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} f32 {} {offset}\n", dims.join(",")));
        offset += t.len() * 4;
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(offset);
    for (_, t) in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_archive<R: BufRead>(mut r: R) -> Result<Archive> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let mut meta = Vec::new();
    let mut entries = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unterminated header"));
        }
        let l = line.trim_end_matches('\n');
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = l.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, dtype, dims, offset] = parts.as_slice() else {
                return Err(bad(format!("malformed tensor line {l:?}")));
            };
            if *dtype != "f32" {
                return Err(bad(format!("unsupported dtype {dtype}")));
            }
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape {dims:?}")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset:?}")))?;
            entries.push((name.to_string(), shape, offset));
        } else {
            return Err(bad(format!("unexpected header line {l:?}")));
        }
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let bytes = blob
            .get(offset..offset + n * 4)
            .ok_or_else(|| bad(format!("tensor {name} extends past end of blob")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Archive { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_bits() {
        let a = Tensor::<f32>::from_f64(&[2, 3], &[1.0, -0.5, 3.25, 1e-7, -9.0, 0.1]).unwrap();
        let b = Tensor::<f32>::scalar(42.0);
        let meta = vec![("epoch".to_string(), "3".to_string()), ("note".to_string(), "two words".to_string())];
        let mut buf = Vec::new();
        write_archive(&mut buf, &meta, &[("a".to_string(), &a), ("b".to_string(), &b)]).unwrap();
        let back = read_archive(buf.as_slice()).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.tensor("a").unwrap(), &a);
        assert_eq!(back.tensor("b").unwrap(), &b);
        let text = String::from_utf8_lossy(&buf);
        assert!(text.contains("tensor a f32 2,3 0\ntensor b f32 1 24\nend\n"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let a = Tensor::<f32>::zeros(&[4]);
        let mut buf = Vec::new();
        write_archive(&mut buf, &[], &[("a".to_string(), &a)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_archive(buf.as_slice()).is_err());
    }
}
