//! Edge interleavers: the deterministic permutation that decides which
//! preceding-layer neuron feeds each edge of a junction.
//!
//! Edges are numbered in natural order, `e = c * z + l` for cycle `c` and
//! lane `l`, and edge `e` always feeds succeeding neuron `e / fan_in`. The
//! interleaver only chooses the *source* of each edge.
//!
//! Hardware mode builds a clash-free table for z-wide banks where neuron `i`
//! lives in memory `i % z` at address `i / z`: lane `l` of cycle `c` reads
//! memory `(l + c) % z`, and the address read from each memory over the `C`
//! cycles is an independently shuffled copy of every address repeated
//! `fan_out` times. Functional mode has no memory model and only guarantees
//! balance and the absence of parallel edges.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};
use crate::topology::{JunctionDims, TopologySpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterleaverError {
    #[error("inconsistent junction dimensions: {0}")]
    DimensionMismatch(String),
    #[error("hardware constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("could not remove parallel edges within {0} swap attempts")]
    GenerationFailure(usize),
    #[error("malformed interleaver table: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterleaverMode {
    Hardware,
    Functional,
}

impl fmt::Display for InterleaverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterleaverMode::Hardware => "hardware",
            InterleaverMode::Functional => "functional",
        })
    }
}

impl FromStr for InterleaverMode {
    type Err = InterleaverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hardware" => Ok(InterleaverMode::Hardware),
            "functional" => Ok(InterleaverMode::Functional),
            other => Err(InterleaverError::Malformed(format!("unknown mode {other:?}"))),
        }
    }
}

/// Per-junction source table, `source[c * z + l]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterleaverMap {
    dims: JunctionDims,
    z: usize,
    seed: u64,
    mode: InterleaverMode,
    source: Vec<u32>,
}

fn check_dims(dims: &JunctionDims, z: usize) -> Result<(), InterleaverError> {
    let JunctionDims {
        n_in,
        n_out,
        fan_in,
        fan_out,
        edges,
    } = *dims;
    if n_in == 0 || n_out == 0 || fan_in == 0 || fan_out == 0 || z == 0 {
        return Err(InterleaverError::DimensionMismatch(
            "all dimensions and z must be positive".into(),
        ));
    }
    if n_in * fan_out != n_out * fan_in || edges != n_in * fan_out {
        return Err(InterleaverError::DimensionMismatch(format!(
            "{n_in} x {fan_out} != {n_out} x {fan_in} (edges {edges})"
        )));
    }
    if fan_out > n_out || fan_in > n_in {
        return Err(InterleaverError::DimensionMismatch(format!(
            "fan-out {fan_out} / fan-in {fan_in} force parallel edges"
        )));
    }
    if edges % z != 0 {
        return Err(InterleaverError::ConstraintViolation(format!(
            "z={z} does not divide {edges} edges"
        )));
    }
    Ok(())
}

impl InterleaverMap {
    /// Generates the table for one junction. Identical arguments always give
    /// an identical table.
    pub fn generate(
        dims: JunctionDims,
        z: usize,
        seed: u64,
        mode: InterleaverMode,
    ) -> Result<Self, InterleaverError> {
        check_dims(&dims, z)?;
        let source = match mode {
            InterleaverMode::Hardware => hardware_table(&dims, z, seed)?,
            InterleaverMode::Functional => functional_table(&dims, seed)?,
        };
        Ok(Self {
            dims,
            z,
            seed,
            mode,
            source,
        })
    }

    /// Wraps an explicit table. Only the shape and index ranges are checked;
    /// use [`InterleaverMap::verify`] for the structural properties.
    pub fn from_table(
        dims: JunctionDims,
        z: usize,
        seed: u64,
        mode: InterleaverMode,
        source: Vec<u32>,
    ) -> Result<Self, InterleaverError> {
        check_dims(&dims, z)?;
        if source.len() != dims.edges {
            return Err(InterleaverError::Malformed(format!(
                "expected {} entries, got {}",
                dims.edges,
                source.len()
            )));
        }
        if let Some(bad) = source.iter().find(|&&s| s as usize >= dims.n_in) {
            return Err(InterleaverError::Malformed(format!(
                "source {bad} out of range for {} neurons",
                dims.n_in
            )));
        }
        Ok(Self {
            dims,
            z,
            seed,
            mode,
            source,
        })
    }

    pub fn dims(&self) -> JunctionDims {
        self.dims
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn cycles(&self) -> usize {
        self.dims.edges / self.z
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> InterleaverMode {
        self.mode
    }

    /// Sources of all edges in natural order.
    pub fn sources(&self) -> &[u32] {
        &self.source
    }

    /// Sources read during cycle `c`.
    pub fn row(&self, c: usize) -> &[u32] {
        &self.source[c * self.z..(c + 1) * self.z]
    }

    pub fn source(&self, cycle: usize, lane: usize) -> usize {
        self.source[cycle * self.z + lane] as usize
    }

    /// Succeeding neuron fed by edge `e`.
    pub fn target(&self, edge: usize) -> usize {
        edge / self.dims.fan_in
    }

    pub fn verify(&self) -> VerificationReport {
        verify(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "interleaver v1 {} {} {} {} {} {} {}\n",
            self.dims.n_in,
            self.dims.n_out,
            self.dims.fan_in,
            self.dims.fan_out,
            self.z,
            self.seed,
            self.mode
        );
        for c in 0..self.cycles() {
            let line: Vec<String> = self.row(c).iter().map(|s| s.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, InterleaverError> {
        let bad = |msg: &str| InterleaverError::Malformed(msg.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty input"))?
            .split_whitespace()
            .collect();
        if header.len() != 9 || header[0] != "interleaver" || header[1] != "v1" {
            return Err(bad("header must be `interleaver v1 N_in N_out d_in d_out z seed mode`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (n_in, n_out, fan_in, fan_out, z) = (
            num(header[2])?,
            num(header[3])?,
            num(header[4])?,
            num(header[5])?,
            num(header[6])?,
        );
        let seed: u64 = header[7].parse().map_err(|_| bad("bad seed"))?;
        let mode: InterleaverMode = header[8].parse()?;
        let dims = JunctionDims {
            n_in,
            n_out,
            fan_in,
            fan_out,
            edges: n_in * fan_out,
        };
        let mut source = Vec::with_capacity(dims.edges);
        for (c, line) in lines.enumerate() {
            let before = source.len();
            for tok in line.split_whitespace() {
                source.push(tok.parse::<u32>().map_err(|_| bad("non-numeric source"))?);
            }
            if source.len() - before != z {
                return Err(InterleaverError::Malformed(format!(
                    "row {c} has {} entries, expected {z}",
                    source.len() - before
                )));
            }
        }
        Self::from_table(dims, z, seed, mode, source)
    }
}

fn hardware_table(dims: &JunctionDims, z: usize, seed: u64) -> Result<Vec<u32>, InterleaverError> {
    if z % dims.fan_in != 0 {
        return Err(InterleaverError::ConstraintViolation(format!(
            "fan-in {} does not divide z={z}",
            dims.fan_in
        )));
    }
    if dims.n_in % z != 0 {
        return Err(InterleaverError::ConstraintViolation(format!(
            "z={z} does not divide {} preceding neurons",
            dims.n_in
        )));
    }
    let cycles = dims.edges / z;
    let depth = dims.n_in / z;
    // Address sequence read from each memory column, one per cycle.
    let columns: Vec<Vec<u32>> = (0..z)
        .map(|m| {
            let mut addrs: Vec<u32> = (0..depth as u32)
                .flat_map(|a| std::iter::repeat_n(a, dims.fan_out))
                .collect();
            SplitMix64::new(derive_seed(seed, m as u64)).shuffle(&mut addrs);
            addrs
        })
        .collect();
    debug_assert!(columns.iter().all(|col| col.len() == cycles));

    let mut source = Vec::with_capacity(dims.edges);
    for c in 0..cycles {
        for l in 0..z {
            let m = (l + c) % z;
            source.push(columns[m][c] * z as u32 + m as u32);
        }
    }
    Ok(source)
}

fn functional_table(dims: &JunctionDims, seed: u64) -> Result<Vec<u32>, InterleaverError> {
    let fan_in = dims.fan_in;
    let n_in = dims.n_in;

    if fan_in == n_in {
        // Every window must hold every source exactly once.
        let mut source = Vec::with_capacity(dims.edges);
        for o in 0..dims.n_out {
            let mut window: Vec<u32> = (0..n_in as u32).collect();
            SplitMix64::new(derive_seed(seed, o as u64)).shuffle(&mut window);
            source.extend(window);
        }
        return Ok(source);
    }

    let mut source: Vec<u32> = (0..n_in as u32)
        .flat_map(|s| std::iter::repeat_n(s, dims.fan_out))
        .collect();
    SplitMix64::new(derive_seed(seed, 0)).shuffle(&mut source);

    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    let budget = 100 * dims.edges;
    let mut attempts = 0usize;
    // mark[s] == o + 1 when source s already appears in window o.
    let mut mark = vec![0usize; n_in];
    for o in 0..dims.n_out {
        let stamp = o + 1;
        let start = o * fan_in;
        for p in start..start + fan_in {
            let v = source[p] as usize;
            if mark[v] != stamp {
                mark[v] = stamp;
                continue;
            }
            // Duplicate: swap with a random position in another window that
            // keeps both windows free of repeats.
            loop {
                attempts += 1;
                if attempts > budget {
                    return Err(InterleaverError::GenerationFailure(budget));
                }
                let q = rng.index(dims.edges);
                let other = q / fan_in;
                if other == o {
                    continue;
                }
                let w = source[q] as usize;
                if mark[w] == stamp {
                    continue;
                }
                let other_window = &source[other * fan_in..(other + 1) * fan_in];
                if other_window.iter().any(|&s| s as usize == v) {
                    continue;
                }
                source.swap(p, q);
                mark[w] = stamp;
                break;
            }
        }
    }
    Ok(source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClashExample {
    pub cycle: usize,
    pub lanes: (usize, usize),
    pub memory: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelEdgeExample {
    pub neuron: usize,
    pub source: usize,
    /// Edges (natural-order indices) that repeat the source.
    pub edges: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceExample {
    pub neuron: usize,
    pub count: usize,
    pub expected: usize,
}

/// Result of checking an interleaver table. Verification never fails; it
/// reports the first counterexample of each property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub mode: InterleaverMode,
    pub balanced: bool,
    pub no_parallel_edges: bool,
    pub clash_free: bool,
    pub balance_counterexample: Option<BalanceExample>,
    pub parallel_counterexample: Option<ParallelEdgeExample>,
    pub clash_counterexample: Option<ClashExample>,
}

impl VerificationReport {
    /// Clash-freedom is only required of hardware-mode tables.
    pub fn passed(&self) -> bool {
        self.balanced
            && self.no_parallel_edges
            && (self.clash_free || self.mode == InterleaverMode::Functional)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(f, "balanced: {}", self.balanced)?;
        if let Some(b) = self.balance_counterexample {
            writeln!(
                f,
                "  neuron {} appears {} times, expected {}",
                b.neuron, b.count, b.expected
            )?;
        }
        writeln!(f, "no-parallel-edges: {}", self.no_parallel_edges)?;
        if let Some(p) = self.parallel_counterexample {
            writeln!(
                f,
                "  neuron {} receives source {} on edges {} and {}",
                p.neuron, p.source, p.edges.0, p.edges.1
            )?;
        }
        write!(f, "clash-free: {}", self.clash_free)?;
        if let Some(c) = self.clash_counterexample {
            write!(
                f,
                "\n  cycle {} lanes {} and {} both read memory {}",
                c.cycle, c.lanes.0, c.lanes.1, c.memory
            )?;
        }
        Ok(())
    }
}

pub fn verify(map: &InterleaverMap) -> VerificationReport {
    let dims = map.dims;
    let z = map.z;

    let mut counts = vec![0usize; dims.n_in];
    for &s in &map.source {
        counts[s as usize] += 1;
    }
    let balance_counterexample = counts
        .iter()
        .enumerate()
        .find(|(_, &c)| c != dims.fan_out)
        .map(|(neuron, &count)| BalanceExample {
            neuron,
            count,
            expected: dims.fan_out,
        });

    let mut parallel_counterexample = None;
    let mut first_edge = vec![usize::MAX; dims.n_in];
    let mut stamp = vec![usize::MAX; dims.n_in];
    'outer: for o in 0..dims.n_out {
        for e in o * dims.fan_in..(o + 1) * dims.fan_in {
            let s = map.source[e] as usize;
            if stamp[s] == o {
                parallel_counterexample = Some(ParallelEdgeExample {
                    neuron: o,
                    source: s,
                    edges: (first_edge[s], e),
                });
                break 'outer;
            }
            stamp[s] = o;
            first_edge[s] = e;
        }
    }

    let mut clash_counterexample = None;
    let mut lane_of = vec![usize::MAX; z];
    let mut seen_cycle = vec![usize::MAX; z];
    'cycles: for c in 0..map.cycles() {
        for (l, &s) in map.row(c).iter().enumerate() {
            let m = s as usize % z;
            if seen_cycle[m] == c {
                clash_counterexample = Some(ClashExample {
                    cycle: c,
                    lanes: (lane_of[m], l),
                    memory: m,
                });
                break 'cycles;
            }
            seen_cycle[m] = c;
            lane_of[m] = l;
        }
    }

    VerificationReport {
        mode: map.mode,
        balanced: balance_counterexample.is_none(),
        no_parallel_edges: parallel_counterexample.is_none(),
        clash_free: clash_counterexample.is_none(),
        balance_counterexample,
        parallel_counterexample,
        clash_counterexample,
    }
}

/// Fraction of (input neuron, output neuron) pairs joined by at least one
/// directed path through the interleaved junctions.
pub fn spatial_spread(spec: &TopologySpec, maps: &[InterleaverMap]) -> f64 {
    assert_eq!(maps.len(), spec.junctions(), "one map per junction");
    let n0 = spec.layer_sizes()[0];
    let words = n0.div_ceil(64);

    // reach[i] is the bitset of input neurons with a path to neuron i.
    let mut reach = vec![0u64; n0 * words];
    for i in 0..n0 {
        reach[i * words + i / 64] |= 1 << (i % 64);
    }
    for map in maps {
        let dims = map.dims();
        let mut next = vec![0u64; dims.n_out * words];
        for (e, &s) in map.sources().iter().enumerate() {
            let o = e / dims.fan_in;
            let s = s as usize;
            for w in 0..words {
                next[o * words + w] |= reach[s * words + w];
            }
        }
        reach = next;
    }
    let n_last = *spec.layer_sizes().last().unwrap();
    let connected: u64 = reach.iter().map(|w| w.count_ones() as u64).sum();
    connected as f64 / (n0 * n_last) as f64
}
