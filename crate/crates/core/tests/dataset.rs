use std::fs;
use std::path::{Path, PathBuf};

use halobit::dataset::{load_dataset, save_dataset};
use halobit::graph::{normalize_adjacency, Split};
use halobit::linalg::{CsrMatrix, DenseMatrix};
use halobit::sbm::{generate_sbm, SbmSpec};
use halobit::Error;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy4")
}

fn copy_fixture(dst: &Path) {
    for f in ["meta.json", "edges.tsv", "features.f32", "labels.u32", "masks.u8"] {
        fs::copy(fixture().join(f), dst.join(f)).unwrap();
    }
}

#[test]
fn toy_fixture_field_by_field() {
    let g = load_dataset(fixture()).unwrap();
    assert_eq!(g.num_nodes, 4);
    assert_eq!(g.num_classes, 2);
    assert_eq!(g.edges, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]);
    assert_eq!(g.features, DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -2.0]]));
    assert_eq!(g.labels, vec![0, 1, 1, 0]);
    assert_eq!(g.splits, vec![Split::Train, Split::Val, Split::Test, Split::None]);

    // path graph degrees with self-loops are 2, 3, 3, 2
    let a = normalize_adjacency(&g);
    let s6 = 1.0 / 6f64.sqrt();
    let want = DenseMatrix::from_rows(&[
        [0.5, s6, 0.0, 0.0],
        [s6, 1.0 / 3.0, 1.0 / 3.0, 0.0],
        [0.0, 1.0 / 3.0, 1.0 / 3.0, s6],
        [0.0, 0.0, s6, 0.5],
    ]);
    assert_eq!(a.to_dense(), want);
}

#[test]
fn empty_edges_give_identity() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(dir.path().join("edges.tsv"), "").unwrap();
    let meta = r#"{"num_nodes": 3, "feature_dim": 2, "num_classes": 2}"#;
    fs::write(dir.path().join("meta.json"), meta).unwrap();
    fs::write(dir.path().join("features.f32"), [0u8; 24]).unwrap();
    fs::write(dir.path().join("labels.u32"), [0u8; 12]).unwrap();
    fs::write(dir.path().join("masks.u8"), [1u8, 1, 1]).unwrap();
    let g = load_dataset(dir.path()).unwrap();
    assert!(g.edges.is_empty());
    assert_eq!(normalize_adjacency(&g), CsrMatrix::identity(3));
}

fn load_err(dir: &Path) -> String {
    match load_dataset(dir) {
        Err(e @ Error::Load { .. }) => e.to_string(),
        other => panic!("expected a load error, got {other:?}"),
    }
}

#[test]
fn label_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let mut labels = fs::read(dir.path().join("labels.u32")).unwrap();
    labels[8] = 2;
    fs::write(dir.path().join("labels.u32"), labels).unwrap();
    let msg = load_err(dir.path());
    assert!(msg.contains("labels.u32") && msg.contains("offset 8"), "{msg}");
}

#[test]
fn size_mismatch_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(dir.path().join("features.f32"), [0u8; 30]).unwrap();
    let msg = load_err(dir.path());
    assert!(msg.contains("features.f32") && msg.contains("32"), "{msg}");

    copy_fixture(dir.path());
    fs::remove_file(dir.path().join("masks.u8")).unwrap();
    assert!(load_err(dir.path()).contains("masks.u8"));
}

#[test]
fn dangling_edge_and_bad_mask() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::write(dir.path().join("edges.tsv"), "0\t1\n3\t4\n").unwrap();
    let msg = load_err(dir.path());
    assert!(msg.contains("edges.tsv") && msg.contains("line 2"), "{msg}");

    copy_fixture(dir.path());
    fs::write(dir.path().join("masks.u8"), [1u8, 0, 7, 0]).unwrap();
    let msg = load_err(dir.path());
    assert!(msg.contains("masks.u8") && msg.contains("offset 2"), "{msg}");
}

#[test]
fn save_then_load_sbm() {
    let g = generate_sbm(&SbmSpec { nodes_per_community: 10, seed: 4, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&g, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    let mut edges = g.edges.clone();
    edges.sort_unstable();
    assert_eq!(back.edges, edges);
    assert_eq!(back.labels, g.labels);
    assert_eq!(back.splits, g.splits);
    let narrowed: Vec<f64> = g.features.data().iter().map(|&x| f64::from(x as f32)).collect();
    assert_eq!(back.features.data(), &narrowed[..]);
}
