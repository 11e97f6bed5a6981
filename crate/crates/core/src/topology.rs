//! Network structure: layer sizes, pre-specified fan-outs and everything
//! derived from them (fan-ins, per-junction edge counts, connectivity), plus
//! the divisibility checks that decide whether a junction can be mapped onto
//! z-wide banked memories.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("a network needs at least two layers, got {0}")]
    TooFewLayers(usize),
    #[error("expected {expected} fan-outs for {layers} layers, got {got}")]
    FanOutCount {
        layers: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer} has zero neurons")]
    EmptyLayer { layer: usize },
    #[error("junction {junction} has zero fan-out")]
    ZeroFanOut { junction: usize },
    #[error("junction {junction}: fan-out {fan_out} exceeds succeeding layer size {n_out}")]
    FanOutTooLarge {
        junction: usize,
        fan_out: usize,
        n_out: usize,
    },
    #[error("junction {junction}: {n_in} x {fan_out} edges do not divide evenly over {n_out} neurons")]
    NonIntegerFanIn {
        junction: usize,
        n_in: usize,
        fan_out: usize,
        n_out: usize,
    },
}

/// Shape of one junction (1-based index `j` in the public API, the edges
/// between layer `j-1` and layer `j`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JunctionDims {
    pub n_in: usize,
    pub n_out: usize,
    pub fan_out: usize,
    pub fan_in: usize,
    pub edges: usize,
}

impl JunctionDims {
    pub fn is_fully_connected(&self) -> bool {
        self.fan_out == self.n_out
    }
}

/// A validated sparse multilayer topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologySpec {
    layer_sizes: Vec<usize>,
    fan_outs: Vec<usize>,
    fan_ins: Vec<usize>,
    edge_counts: Vec<usize>,
}

impl TopologySpec {
    /// Builds a topology from layer sizes and per-junction fan-outs. Fan-ins
    /// are derived and must come out integral; nothing is rounded.
    pub fn new(layer_sizes: &[usize], fan_outs: &[usize]) -> Result<Self, TopologyError> {
        if layer_sizes.len() < 2 {
            return Err(TopologyError::TooFewLayers(layer_sizes.len()));
        }
        if fan_outs.len() != layer_sizes.len() - 1 {
            return Err(TopologyError::FanOutCount {
                layers: layer_sizes.len(),
                expected: layer_sizes.len() - 1,
                got: fan_outs.len(),
            });
        }
        if let Some(layer) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(TopologyError::EmptyLayer { layer });
        }

        let mut fan_ins = Vec::with_capacity(fan_outs.len());
        let mut edge_counts = Vec::with_capacity(fan_outs.len());
        for (idx, &fan_out) in fan_outs.iter().enumerate() {
            let junction = idx + 1;
            let (n_in, n_out) = (layer_sizes[idx], layer_sizes[idx + 1]);
            if fan_out == 0 {
                return Err(TopologyError::ZeroFanOut { junction });
            }
            if fan_out > n_out {
                return Err(TopologyError::FanOutTooLarge {
                    junction,
                    fan_out,
                    n_out,
                });
            }
            let edges = n_in * fan_out;
            if edges % n_out != 0 {
                return Err(TopologyError::NonIntegerFanIn {
                    junction,
                    n_in,
                    fan_out,
                    n_out,
                });
            }
            fan_ins.push(edges / n_out);
            edge_counts.push(edges);
        }

        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            fan_outs: fan_outs.to_vec(),
            fan_ins,
            edge_counts,
        })
    }

    /// Fully connected network with the given layer sizes.
    pub fn fully_connected(layer_sizes: &[usize]) -> Result<Self, TopologyError> {
        let fan_outs: Vec<usize> = layer_sizes.iter().skip(1).copied().collect();
        Self::new(layer_sizes, &fan_outs)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn fan_outs(&self) -> &[usize] {
        &self.fan_outs
    }

    pub fn fan_ins(&self) -> &[usize] {
        &self.fan_ins
    }

    pub fn edge_counts(&self) -> &[usize] {
        &self.edge_counts
    }

    /// Number of junctions (layer count minus one).
    pub fn junctions(&self) -> usize {
        self.fan_outs.len()
    }

    /// Dimensions of junction `j` (0-based here, unlike the 1-based error
    /// messages).
    pub fn junction(&self, j: usize) -> JunctionDims {
        JunctionDims {
            n_in: self.layer_sizes[j],
            n_out: self.layer_sizes[j + 1],
            fan_out: self.fan_outs[j],
            fan_in: self.fan_ins[j],
            edges: self.edge_counts[j],
        }
    }

    pub fn total_edges(&self) -> usize {
        self.edge_counts.iter().sum()
    }

    /// Edge count of the fully connected network with the same layer sizes.
    pub fn dense_edges(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Network-wide connectivity: total edges over fully connected edges.
    pub fn connectivity(&self) -> f64 {
        self.total_edges() as f64 / self.dense_edges() as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.connectivity()
    }

    pub fn is_fully_connected(&self) -> bool {
        self.total_edges() == self.dense_edges()
    }

    /// Largest fan-in across junctions, used to size wide accumulators.
    pub fn max_fan_in(&self) -> usize {
        self.fan_ins.iter().copied().max().unwrap_or(1)
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "layers={} fanouts={}",
            join(&self.layer_sizes),
            join(&self.fan_outs)
        )
    }
}

/// Cycles needed to stream `edges` edges through `z` parallel lanes.
pub fn cycles_per_junction(edges: usize, z: usize) -> usize {
    assert!(z >= 1, "degree of parallelism must be at least 1");
    edges.div_ceil(z)
}

/// Per-junction degree of parallelism and clock for timing estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareConfig {
    pub z_list: Vec<usize>,
    pub clock_hz: f64,
}

impl HardwareConfig {
    pub fn new(z_list: Vec<usize>, clock_hz: f64) -> Self {
        Self { z_list, clock_hz }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JunctionCheck {
    /// 1-based junction index.
    pub junction: usize,
    pub z: usize,
    pub cycles: usize,
    /// z divides the edge count.
    pub z_divides_edges: bool,
    /// fan-in divides z, so every weight row covers whole succeeding neurons.
    pub fan_in_divides_z: bool,
    /// z divides the preceding layer size, so the activation bank has
    /// integral depth.
    pub z_divides_layer: bool,
}

impl JunctionCheck {
    pub fn passed(&self) -> bool {
        self.z >= 1 && self.z_divides_edges && self.fan_in_divides_z && self.z_divides_layer
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.z == 0 {
            out.push(format!("junction {}: z must be at least 1", self.junction));
            return out;
        }
        if !self.z_divides_edges {
            out.push(format!(
                "junction {}: z={} does not divide the edge count",
                self.junction, self.z
            ));
        }
        if !self.fan_in_divides_z {
            out.push(format!(
                "junction {}: fan-in does not divide z={}",
                self.junction, self.z
            ));
        }
        if !self.z_divides_layer {
            out.push(format!(
                "junction {}: z={} does not divide the preceding layer size",
                self.junction, self.z
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub junctions: Vec<JunctionCheck>,
    /// All junctions take the same number of cycles.
    pub balanced: bool,
    /// Structural problems not tied to a single junction.
    pub errors: Vec<String>,
}

impl ValidationReport {
    /// True when every hard check passes. An unbalanced pipeline is only a
    /// warning and does not affect this.
    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.junctions.iter().all(JunctionCheck::passed)
    }

    pub fn cycles(&self) -> Vec<usize> {
        self.junctions.iter().map(|c| c.cycles).collect()
    }

    pub fn warnings(&self) -> Vec<String> {
        if self.balanced || self.junctions.is_empty() {
            Vec::new()
        } else {
            vec![format!(
                "unbalanced pipeline: per-junction cycles {:?}",
                self.cycles()
            )]
        }
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = self.errors.clone();
        for check in &self.junctions {
            out.extend(check.failures());
        }
        out
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for check in &self.junctions {
            writeln!(
                f,
                "junction {}: z={} cycles={} z|E={} d_in|z={} z|N_prev={}",
                check.junction,
                check.z,
                check.cycles,
                check.z_divides_edges,
                check.fan_in_divides_z,
                check.z_divides_layer
            )?;
        }
        for msg in self.failures() {
            writeln!(f, "error: {msg}")?;
        }
        for msg in self.warnings() {
            writeln!(f, "warning: {msg}")?;
        }
        write!(f, "balanced: {}", self.balanced)
    }
}

/// Checks a degree-of-parallelism assignment against a topology. Never
/// panics; every problem is reported in the returned value.
pub fn validate_hardware(spec: &TopologySpec, hw: &HardwareConfig) -> ValidationReport {
    let mut errors = Vec::new();
    if hw.z_list.len() != spec.junctions() {
        errors.push(format!(
            "expected {} z values, got {}",
            spec.junctions(),
            hw.z_list.len()
        ));
    }
    let junctions: Vec<JunctionCheck> = hw
        .z_list
        .iter()
        .take(spec.junctions())
        .enumerate()
        .map(|(j, &z)| {
            let dims = spec.junction(j);
            if z == 0 {
                return JunctionCheck {
                    junction: j + 1,
                    z,
                    cycles: 0,
                    z_divides_edges: false,
                    fan_in_divides_z: false,
                    z_divides_layer: false,
                };
            }
            JunctionCheck {
                junction: j + 1,
                z,
                cycles: cycles_per_junction(dims.edges, z),
                z_divides_edges: dims.edges % z == 0,
                fan_in_divides_z: z % dims.fan_in == 0,
                z_divides_layer: dims.n_in % z == 0,
            }
        })
        .collect();
    let balanced = junctions.windows(2).all(|w| w[0].cycles == w[1].cycles);
    ValidationReport {
        junctions,
        balanced,
        errors,
    }
}
