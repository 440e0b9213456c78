//! Stochastic block model graphs for desk-scale experiments.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::linalg::DenseMatrix;
use crate::rng::{RngStream, StreamKey, StreamKind};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SbmSpec {
    pub nodes_per_community: usize,
    pub communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            nodes_per_community: 125,
            communities: 4,
            p_in: 0.15,
            p_out: 0.01,
            dim: 32,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SbmSpec {
    pub fn num_nodes(&self) -> usize {
        self.nodes_per_community * self.communities
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.nodes_per_community == 0 {
            errs.push("sbm: n must be positive".to_string());
        }
        if self.communities == 0 {
            errs.push("sbm: k must be positive".to_string());
        }
        if self.dim == 0 {
            errs.push("sbm: d must be positive".to_string());
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            errs.push(format!("sbm: need 0 <= p_out < p_in <= 1, got p_in={} p_out={}", self.p_in, self.p_out));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(format!("sbm: noise must be finite and >= 0, got {}", self.noise));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Parses `sbm:k=4,n=125,p_in=0.15,p_out=0.01,d=32,noise=1,seed=0`; every
/// key is optional.
impl FromStr for SbmSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("sbm")
            .ok_or_else(|| Error::Config(format!("synthetic spec {s:?} must start with \"sbm\"")))?;
        let body = body.strip_prefix(':').unwrap_or(body);
        let mut spec = SbmSpec::default();
        let mut errs = Vec::new();
        for item in body.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let Some((k, v)) = item.split_once('=') else {
                errs.push(format!("sbm: expected key=value, got {item:?}"));
                continue;
            };
            let bad = |e: &dyn std::fmt::Display| format!("sbm: bad value for {k}: {v:?} ({e})");
            let res = match k.trim() {
                "k" => v.parse().map(|x| spec.communities = x).map_err(|e| bad(&e)),
                "n" => v.parse().map(|x| spec.nodes_per_community = x).map_err(|e| bad(&e)),
                "p_in" => v.parse().map(|x| spec.p_in = x).map_err(|e| bad(&e)),
                "p_out" => v.parse().map(|x| spec.p_out = x).map_err(|e| bad(&e)),
                "d" => v.parse().map(|x| spec.dim = x).map_err(|e| bad(&e)),
                "noise" => v.parse().map(|x| spec.noise = x).map_err(|e| bad(&e)),
                "seed" => v.parse().map(|x| spec.seed = x).map_err(|e| bad(&e)),
                other => Err(format!("sbm: unknown key {other:?}")),
            };
            if let Err(e) = res {
                errs.push(e);
            }
        }
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        Ok(spec)
    }
}

/// Nodes are numbered community by community; each unordered pair is joined
/// with probability `p_in` or `p_out` and stored in both directions.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.num_nodes();
    let k = spec.communities;
    let labels: Vec<usize> = (0..n).map(|v| v / spec.nodes_per_community).collect();

    let mut rng = RngStream::new(StreamKey::new(spec.seed, StreamKind::Synthetic));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.uniform() < p {
                edges.push((u, v));
                edges.push((v, u));
            }
        }
    }

    let mut features = DenseMatrix::zeros(n, spec.dim);
    for v in 0..n {
        for (j, x) in features.row_mut(v).iter_mut().enumerate() {
            let signal = if j % k == labels[v] { 1.0 } else { 0.0 };
            let z: f64 = rng.sample(StandardNormal);
            *x = signal + spec.noise * z;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut splits = vec![Split::Test; n];
    for (i, &v) in order.iter().enumerate() {
        if i < n_train {
            splits[v] = Split::Train;
        } else if i < n_train + n_val {
            splits[v] = Split::Val;
        }
    }
    Graph::new(n, edges, features, labels, k, splits)
}
