//! On-disk dataset directories.
//!
//! ```text
//! meta.json     {"num_nodes": .., "feature_dim": .., "num_classes": ..}
//! edges.tsv     one "src<TAB>dst" pair of node ids per line
//! features.f32  num_nodes * feature_dim little-endian f32, row-major
//! labels.u32    num_nodes little-endian u32
//! masks.u8      num_nodes bytes: 0 none, 1 train, 2 val, 3 test
//! ```
//!
//! Edges are symmetrized on load. Blank lines and lines starting with `#`
//! in `edges.tsv` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::linalg::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Meta {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(path, e.to_string()))
}

fn expect_len(path: &Path, bytes: &[u8], want: usize) -> Result<()> {
    if bytes.len() != want {
        return Err(Error::load(
            path,
            format!("expected {want} bytes, found {} (mismatch at offset {})", bytes.len(), want.min(bytes.len())),
        ));
    }
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join("meta.json");
    let bytes = read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::load(&path, e.to_string()))
}

fn parse_edges(path: &Path, text: &str, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |reason: String| Error::load(path, format!("line {}: {reason}", i + 1));
        let mut cols = line.split('\t');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(at(format!("expected two tab-separated columns, got {line:?}")));
        };
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| at(format!("bad node id {s:?}: {e}")));
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= num_nodes || v >= num_nodes {
            return Err(at(format!("edge ({u}, {v}) has an endpoint >= num_nodes {num_nodes}")));
        }
        edges.push((u, v));
        if u != v {
            edges.push((v, u));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let meta = load_meta(dir)?;
    let Meta { num_nodes: n, feature_dim: d, num_classes } = meta;

    let path = dir.join("edges.tsv");
    let text = String::from_utf8(read(&path)?)
        .map_err(|e| Error::load(&path, format!("not UTF-8 at offset {}", e.utf8_error().valid_up_to())))?;
    let edges = parse_edges(&path, &text, n)?;

    let path = dir.join("features.f32");
    let bytes = read(&path)?;
    expect_len(&path, &bytes, n * d * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect::<Vec<_>>();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::load(&path, format!("non-finite value at offset {}", i * 4)));
    }
    let features = DenseMatrix::from_vec(n, d, data)?;

    let path = dir.join("labels.u32");
    let bytes = read(&path)?;
    expect_len(&path, &bytes, n * 4)?;
    let mut labels = Vec::with_capacity(n);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let y = u32::from_le_bytes(c.try_into().unwrap()) as usize;
        if y >= num_classes {
            return Err(Error::load(&path, format!("label {y} >= num_classes {num_classes} at offset {}", i * 4)));
        }
        labels.push(y);
    }

    let path = dir.join("masks.u8");
    let bytes = read(&path)?;
    expect_len(&path, &bytes, n)?;
    let splits = bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| Split::from_code(b).ok_or_else(|| Error::load(&path, format!("mask code {b} at offset {i}"))))
        .collect::<Result<Vec<_>>>()?;

    Graph::new(n, edges, features, labels, num_classes, splits)
        .map_err(|e| Error::load(dir, e.to_string()))
}

/// Writes `g` in the directory format; features are narrowed to f32.
pub fn save_dataset(g: &Graph, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = Meta { num_nodes: g.num_nodes, feature_dim: g.feature_dim(), num_classes: g.num_classes };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut tsv = String::new();
    for &(u, v) in &g.edges {
        tsv.push_str(&format!("{u}\t{v}\n"));
    }
    fs::write(dir.join("edges.tsv"), tsv)?;
    let feats: Vec<u8> = g.features.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    fs::write(dir.join("features.f32"), feats)?;
    let labels: Vec<u8> = g.labels.iter().flat_map(|&y| (y as u32).to_le_bytes()).collect();
    fs::write(dir.join("labels.u32"), labels)?;
    let masks: Vec<u8> = g.splits.iter().map(|s| s.code()).collect();
    fs::write(dir.join("masks.u8"), masks)?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_symmetrized_and_deduplicated() {
        let e = parse_edges(Path::new("edges.tsv"), "0\t1\n1\t0\n# note\n\n2\t2\n", 3).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn dangling_endpoint_names_line() {
        let err = parse_edges(Path::new("edges.tsv"), "0\t1\n0\t7\n", 3).unwrap_err().to_string();
        assert!(err.contains("edges.tsv") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn malformed_line() {
        assert!(parse_edges(Path::new("e"), "0 1\n", 3).is_err());
        assert!(parse_edges(Path::new("e"), "0\t1\t2\n", 3).is_err());
        assert!(parse_edges(Path::new("e"), "0\tx\n", 3).is_err());
    }
}
