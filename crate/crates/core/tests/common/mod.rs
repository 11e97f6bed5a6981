#![allow(dead_code)]

use std::path::PathBuf;

use edgeproc::arith::Real;
use edgeproc::engine::Network;
use edgeproc::rng::SplitMix64;
use edgeproc::topology::{JunctionDims, TopologySpec};

/// `MNIST_DIR`, else the workspace `data/mnist` directory.
pub fn mnist_dir() -> PathBuf {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    assert!(
        dir.join("train-images-idx3-ubyte").exists(),
        "MNIST not found in {}; run scripts/fetch-mnist.sh or set MNIST_DIR",
        dir.display()
    );
    dir
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// A small random topology with integral fan-ins.
pub fn random_topology(rng: &mut SplitMix64) -> TopologySpec {
    loop {
        let layers = 2 + rng.index(3);
        let sizes: Vec<usize> = (0..layers).map(|_| 1 + rng.index(12)).collect();
        let mut fan_outs = Vec::new();
        for w in sizes.windows(2) {
            let options: Vec<usize> = (1..=w[1]).filter(|&d| (w[0] * d) % w[1] == 0 && w[0] * d / w[1] <= w[0]).collect();
            fan_outs.push(options[rng.index(options.len())]);
        }
        if let Ok(spec) = TopologySpec::new(&sizes, &fan_outs) {
            return spec;
        }
    }
}

/// Random junction dimensions and a z satisfying every hardware constraint.
pub fn random_hardware_junction(rng: &mut SplitMix64) -> (JunctionDims, usize) {
    loop {
        let fan_in = divisors(16)[rng.index(5)];
        let z = fan_in * (1 + rng.index(8));
        let n_in = z * (1 + rng.index(6));
        let fan_out = 1 + rng.index(6);
        let n_out = n_in * fan_out / fan_in;
        if fan_in > n_in || fan_out > n_out {
            continue;
        }
        let spec = TopologySpec::new(&[n_in, n_out], &[fan_out]).unwrap();
        return (spec.junction(0), z);
    }
}

/// Dense masked-matrix model of a real-valued network.
#[derive(Debug, Clone)]
pub struct Dense {
    /// `w[j][o][i]`, zero where there is no edge.
    pub w: Vec<Vec<Vec<f64>>>,
    pub mask: Vec<Vec<Vec<bool>>>,
    pub b: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Dense {
    pub fn from_network(net: &Network<Real>) -> Self {
        let mut w = Vec::new();
        let mut mask = Vec::new();
        let mut b = Vec::new();
        for junction in net.junctions() {
            let dims = junction.map().dims();
            let mut wj = vec![vec![0.0; dims.n_in]; dims.n_out];
            let mut mj = vec![vec![false; dims.n_in]; dims.n_out];
            for e in 0..dims.edges {
                let o = e / dims.fan_in;
                let s = junction.map().sources()[e] as usize;
                assert!(!mj[o][s], "parallel edge");
                mj[o][s] = true;
                wj[o][s] = junction.weights().get(e);
            }
            w.push(wj);
            mask.push(mj);
            b.push(junction.biases().to_vec());
        }
        Self { w, mask, b }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (wj, bj) in self.w.iter().zip(&self.b) {
            let prev = acts.last().unwrap();
            let a = wj
                .iter()
                .zip(bj)
                .map(|(row, &bias)| sigmoid(row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>() + bias))
                .collect();
            acts.push(a);
        }
        acts
    }

    /// Deltas of layers `1..=J` (index `k - 1`).
    pub fn backward(&self, acts: &[Vec<f64>], target: &[f64]) -> Vec<Vec<f64>> {
        let jn = self.w.len();
        let mut deltas = vec![Vec::new(); jn];
        deltas[jn - 1] = acts[jn]
            .iter()
            .zip(target)
            .map(|(a, t)| (a - t) * a * (1.0 - a))
            .collect();
        for k in (1..jn).rev() {
            let wj = &self.w[k];
            deltas[k - 1] = (0..acts[k].len())
                .map(|i| {
                    let a = acts[k][i];
                    let sum: f64 = (0..wj.len()).map(|o| wj[o][i] * deltas[k][o]).sum();
                    sum * a * (1.0 - a)
                })
                .collect();
        }
        deltas
    }

    pub fn update(&mut self, acts: &[Vec<f64>], deltas: &[Vec<f64>], lr: f64, biases: bool) {
        for j in 0..self.w.len() {
            for o in 0..self.w[j].len() {
                for i in 0..self.w[j][o].len() {
                    if self.mask[j][o][i] {
                        self.w[j][o][i] -= lr * deltas[j][o] * acts[j][i];
                    }
                }
                if biases {
                    self.b[j][o] -= lr * deltas[j][o];
                }
            }
        }
    }

    pub fn loss(&self, x: &[f64], target: &[f64]) -> f64 {
        let acts = self.forward(x);
        acts.last().unwrap().iter().zip(target).map(|(a, t)| 0.5 * (a - t) * (a - t)).sum()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.unit_f64()).collect()
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; n];
    t[k % n] = 1.0;
    t
}

/// `L(p) - L(m)` for two networks differing in a few parameters, evaluated
/// by carrying the activation difference forward so nothing cancels.
pub fn loss_difference(p: &Dense, m: &Dense, x: &[f64], target: &[f64]) -> f64 {
    let mut ap = x.to_vec();
    let mut am = x.to_vec();
    let mut da = vec![0.0; x.len()];
    for j in 0..p.w.len() {
        let n = p.w[j].len();
        let (mut np, mut nm, mut nd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for o in 0..n {
            let (wp, wm) = (&p.w[j][o], &m.w[j][o]);
            let zp = wp.iter().zip(&ap).map(|(w, a)| w * a).sum::<f64>() + p.b[j][o];
            let zm = wm.iter().zip(&am).map(|(w, a)| w * a).sum::<f64>() + m.b[j][o];
            let dz = (0..wp.len()).map(|i| wp[i] * da[i] + (wp[i] - wm[i]) * am[i]).sum::<f64>() + (p.b[j][o] - m.b[j][o]);
            let (ep, em) = ((-zp).exp(), (-zm).exp());
            np.push(1.0 / (1.0 + ep));
            nm.push(1.0 / (1.0 + em));
            nd.push(-em * (-dz).exp_m1() / ((1.0 + ep) * (1.0 + em)));
        }
        (ap, am, da) = (np, nm, nd);
    }
    (0..da.len()).map(|k| 0.5 * da[k] * (ap[k] + am[k] - 2.0 * target[k])).sum()
}

/// Derivative at 0 by Richardson-extrapolated central differences, accurate
/// to O(h^4). `diff(h)` must return `f(h) - f(-h)`.
pub fn numeric_derivative(diff: impl Fn(f64) -> f64, h: f64) -> f64 {
    let central = |h: f64| diff(h) / (2.0 * h);
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

fn perturbed_difference(d: &Dense, h: f64, bump: impl Fn(&mut Dense, f64), x: &[f64], y: &[f64]) -> f64 {
    let (mut p, mut m) = (d.clone(), d.clone());
    bump(&mut p, h);
    bump(&mut m, -h);
    loss_difference(&p, &m, x, y)
}

/// Loss gradient of dense weight `w[j][o][i]` by finite differences.
pub fn numeric_weight_gradient(d: &Dense, j: usize, o: usize, i: usize, x: &[f64], y: &[f64]) -> f64 {
    numeric_derivative(|h| perturbed_difference(d, h, |n, h| n.w[j][o][i] += h, x, y), 1e-3)
}

pub fn numeric_bias_gradient(d: &Dense, j: usize, o: usize, x: &[f64], y: &[f64]) -> f64 {
    numeric_derivative(|h| perturbed_difference(d, h, |n, h| n.b[j][o] += h, x, y), 1e-3)
}
