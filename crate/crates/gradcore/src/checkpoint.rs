//! Weight checkpoints.
//!
//! Layout: one line of JSON header terminated by `\n`, followed by the raw
//! little-endian `f32` data of every tensor. Header offsets are byte offsets
//! into the data section.
//!
//! ```text
//! {"format":"gradcore-weights","version":1,"dtype":"f32le","tensors":[{"name":"conv1.weight","shape":[8,1,3,3],"offset":0},...]}
//! <raw bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT: &str = "gradcore-weights";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(graph: &Graph<T>, mut out: W) -> Result<()> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(graph.params().len());
    for p in graph.params() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        offset += 4 * p.value.len() as u64;
    }
    let header = Header { format: FORMAT.into(), version: 1, dtype: "f32le".into(), tensors };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in graph.params() {
        for &v in p.value.data() {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint into `graph`, requiring the exact parameter set and
/// shapes of the graph.
pub fn read_checkpoint<T: Scalar, R: Read>(graph: &mut Graph<T>, input: R) -> Result<Header> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| GradError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.dtype != "f32le" {
        return Err(GradError::Checkpoint(format!("unsupported format {} / {}", header.format, header.dtype)));
    }
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    if header.tensors.len() != graph.params().len() {
        return Err(GradError::Checkpoint(format!(
            "checkpoint has {} tensors, graph has {}",
            header.tensors.len(),
            graph.params().len()
        )));
    }
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for p in graph.params() {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| GradError::Checkpoint(format!("missing tensor `{}`", p.name)))?;
        if entry.shape != p.value.shape() {
            return Err(GradError::Checkpoint(format!(
                "tensor `{}` has shape {:?}, graph expects {:?}",
                p.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * len;
        if end > data.len() {
            return Err(GradError::Checkpoint(format!("tensor `{}` runs past end of file", p.name)));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        loaded.push(Tensor::new(entry.shape.clone(), values)?);
    }
    graph.restore(&loaded)?;
    Ok(header)
}

pub fn save<T: Scalar>(graph: &Graph<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(graph, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(graph: &mut Graph<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| GradError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(graph, file).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::ops::OpKind;

    fn graph(seed: u64, width: usize) -> Graph<f32> {
        let mut b = GraphBuilder::<f32>::new(seed);
        let x = b.input(&[1, 4, 4]);
        let c = b
            .node("c", OpKind::Conv2d { out_channels: width, kernel: 3, stride: 1, padding: 1, bias: true }, &[x])
            .unwrap();
        let n = b.node("n", OpKind::BatchNorm { eps: 1e-5, momentum: 0.9 }, &[c]).unwrap();
        b.finish(n).unwrap()
    }

    #[test]
    fn round_trip_restores_values() {
        let src = graph(1, 2);
        let mut buf = Vec::new();
        write_checkpoint(&src, &mut buf).unwrap();
        let mut dst = graph(2, 2);
        assert_ne!(dst.snapshot(), src.snapshot());
        let header = read_checkpoint(&mut dst, buf.as_slice()).unwrap();
        assert_eq!(dst.snapshot(), src.snapshot());
        assert_eq!(header.tensors[0].offset, 0);
        assert_eq!(header.tensors[1].offset, 4 * 2 * 9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let src = graph(1, 2);
        let mut buf = Vec::new();
        write_checkpoint(&src, &mut buf).unwrap();
        let mut dst = graph(1, 3);
        let err = read_checkpoint(&mut dst, buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn missing_file_is_an_error() {
        let mut g = graph(0, 1);
        assert!(load(&mut g, "/nonexistent/weights.ckpt").is_err());
    }
}
