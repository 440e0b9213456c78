#![allow(dead_code)]

use halobit::codec::QuantConfig;
use halobit::graph::{
    build_partitions, normalize_adjacency, partition_nodes, Graph, NormalizeOptions, Partition, Split, Strategy,
};
use halobit::linalg::{matmul, softmax_cross_entropy, spmm, DenseMatrix};
use halobit::sbm::{generate_sbm, SbmSpec};
use halobit::trainer::{serial_forward, train, MetricsRecord, ModelConfig, TrainConfig, TrainMode, TrainOutcome};

pub fn sbm(nodes_per_community: usize, seed: u64) -> Graph {
    generate_sbm(&SbmSpec { nodes_per_community, seed, ..Default::default() }).unwrap()
}

pub fn split(g: &Graph, model: &ModelConfig, n: usize, strategy: Strategy) -> Vec<Partition> {
    let agg = model.aggregation(g, NormalizeOptions::default());
    let plan = partition_nodes(g, n, strategy, 11).unwrap();
    build_partitions(g, &agg, &plan).unwrap()
}

pub fn gcn_partitions(g: &Graph, n: usize) -> Vec<Partition> {
    let plan = partition_nodes(g, n, Strategy::Contiguous, 0).unwrap();
    build_partitions(g, &normalize_adjacency(g), &plan).unwrap()
}

pub fn gcn(g: &Graph, hidden: &[usize]) -> ModelConfig {
    let mut widths = vec![g.feature_dim()];
    widths.extend_from_slice(hidden);
    widths.push(g.num_classes);
    ModelConfig::gcn(widths)
}

pub fn config(model: ModelConfig, mode: TrainMode, bits: u8, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(model, mode, QuantConfig::new(bits).unwrap(), epochs);
    c.seed = seed;
    c
}

pub fn run(g: &Graph, parts: &[Partition], cfg: &TrainConfig) -> TrainOutcome {
    train(g, parts, cfg, NormalizeOptions::default()).unwrap()
}

/// Largest elementwise |a - b| / max(|a|, |b|), with exact equality (incl.
/// both zero) counting as 0.
pub fn max_rel_diff(a: &[DenseMatrix], b: &[DenseMatrix]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&u, &v) in x.data().iter().zip(y.data()) {
            if u != v {
                worst = worst.max((u - v).abs() / u.abs().max(v.abs()));
            }
        }
    }
    worst
}

/// [`max_rel_diff`] with the denominator floored at `floor * max|a|`, so
/// entries that are zero up to rounding compare on an absolute scale.
pub fn max_rel_diff_floored(a: &[DenseMatrix], b: &[DenseMatrix], floor: f64) -> f64 {
    let top = a.iter().flat_map(|m| m.data()).fold(0f64, |acc, v| acc.max(v.abs()));
    let mut worst = 0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&u, &v) in x.data().iter().zip(y.data()) {
            worst = worst.max((u - v).abs() / u.abs().max(v.abs()).max(floor * top));
        }
    }
    worst
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Metrics with wall time zeroed, for exact replay comparisons.
pub fn timeless(m: &[MetricsRecord]) -> Vec<MetricsRecord> {
    m.iter().cloned().map(|r| MetricsRecord { wall_ms: 0.0, ..r }).collect()
}

pub fn tiny_graph(n: usize, classes: usize) -> Graph {
    // ring plus chords, features from a fixed pattern
    let mut edges = Vec::new();
    for v in 0..n {
        for u in [(v + 1) % n, (v + 3) % n] {
            edges.push((v, u));
            edges.push((u, v));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let x = DenseMatrix::from_vec(n, 3, (0..n * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
    let labels = (0..n).map(|v| v % classes).collect();
    let splits = (0..n).map(|v| if v % 4 == 3 { Split::Test } else { Split::Train }).collect();
    Graph::new(n, edges, x, labels, classes, splits).unwrap()
}

pub fn serial_loss(g: &Graph, model: &ModelConfig, w: &[DenseMatrix]) -> f64 {
    let agg = model.aggregation(g, NormalizeOptions::default());
    let logits = serial_forward(model, w, &agg, &g.features, None).unwrap();
    let mask = g.mask(Split::Train);
    softmax_cross_entropy(&logits, &g.labels, &mask, g.count(Split::Train) as f64).unwrap().0
}

/// Signs of every hidden preactivation in the serial GCN forward pass.
fn relu_pattern(g: &Graph, model: &ModelConfig, w: &[DenseMatrix]) -> Vec<bool> {
    let agg = model.aggregation(g, NormalizeOptions::default());
    let mut h = g.features.clone();
    let mut signs = Vec::new();
    for wl in &w[..w.len() - 1] {
        let z = matmul(&spmm(&agg, &h).unwrap(), wl).unwrap();
        signs.extend(z.data().iter().map(|&v| v > 0.0));
        h = DenseMatrix::from_vec(z.rows(), z.cols(), z.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
    }
    signs
}

/// Five-point central differences of the serial loss. The step starts at
/// 1e-3 and shrinks tenfold until no stencil point crosses a ReLU kink.
pub fn fd_gradients(g: &Graph, model: &ModelConfig, w: &[DenseMatrix]) -> Vec<DenseMatrix> {
    let base = relu_pattern(g, model, w);
    let shifted = |l: usize, i: usize, dx: f64| {
        let mut wp = w.to_vec();
        wp[l].data_mut()[i] += dx;
        wp
    };
    let mut out = w.to_vec();
    for (l, gl) in out.iter_mut().enumerate() {
        for i in 0..gl.data().len() {
            let mut h = 1e-3;
            while [-2.0, -1.0, 1.0, 2.0].iter().any(|k| relu_pattern(g, model, &shifted(l, i, k * h)) != base) {
                h /= 10.0;
                assert!(h > 1e-9, "layer {} entry {i} sits on a kink", l + 1);
            }
            let f = |k: f64| serial_loss(g, model, &shifted(l, i, k * h));
            gl.data_mut()[i] = (8.0 * (f(1.0) - f(-1.0)) - (f(2.0) - f(-2.0))) / (12.0 * h);
        }
    }
    out
}
