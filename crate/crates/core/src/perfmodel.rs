//! Analytical throughput model for the junction pipeline.
//!
//! With every junction busy on a different input, one input leaves the
//! pipeline every `max_j ceil(E_j / z_j)` cycles, so that bottleneck sets the
//! time per training image.

use std::fmt;

use thiserror::Error;

use crate::topology::cycles_per_junction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("baseline time must be positive, got {0}")]
    Baseline(f64),
}

/// Per-junction edge budget: connectivity fractions or explicit counts.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeBudget {
    Connectivity(Vec<f64>),
    Counts(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfScenario {
    pub layer_sizes: Vec<usize>,
    pub edges: EdgeBudget,
    pub z_list: Vec<usize>,
    pub clock_hz: f64,
    pub images_per_epoch: u64,
    pub epochs: u64,
}

impl PerfScenario {
    fn junctions(&self) -> usize {
        self.layer_sizes.len().saturating_sub(1)
    }

    /// Edge counts, `round(rho_j * N_{j-1} * N_j)` when given as fractions.
    pub fn edge_counts(&self) -> Result<Vec<usize>, PerfError> {
        let jn = self.junctions();
        match &self.edges {
            EdgeBudget::Counts(c) => {
                if c.len() != jn {
                    return Err(PerfError::Invalid(format!("{} edge counts for {jn} junctions", c.len())));
                }
                Ok(c.clone())
            }
            EdgeBudget::Connectivity(rho) => {
                if rho.len() != jn {
                    return Err(PerfError::Invalid(format!(
                        "{} connectivity values for {jn} junctions",
                        rho.len()
                    )));
                }
                rho.iter()
                    .zip(self.layer_sizes.windows(2))
                    .map(|(&r, w)| {
                        if !(r > 0.0 && r <= 1.0) {
                            return Err(PerfError::Invalid(format!("connectivity {r} outside (0, 1]")));
                        }
                        Ok((r * (w[0] * w[1]) as f64).round() as usize)
                    })
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<(), PerfError> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(PerfError::Invalid("need at least two non-empty layers".into()));
        }
        if self.z_list.len() != self.junctions() || self.z_list.contains(&0) {
            return Err(PerfError::Invalid(format!(
                "need {} positive z values, got {:?}",
                self.junctions(),
                self.z_list
            )));
        }
        if !(self.clock_hz > 0.0) {
            return Err(PerfError::Invalid(format!("clock {} Hz", self.clock_hz)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfReport {
    pub edge_counts: Vec<usize>,
    pub junction_cycles: Vec<usize>,
    pub cycles_per_image: usize,
    /// Seconds.
    pub time_per_image: f64,
    pub epoch_time: f64,
    pub total_time: f64,
}

pub fn estimate(s: &PerfScenario) -> Result<PerfReport, PerfError> {
    s.validate()?;
    let edge_counts = s.edge_counts()?;
    let junction_cycles: Vec<usize> = edge_counts
        .iter()
        .zip(&s.z_list)
        .map(|(&e, &z)| cycles_per_junction(e, z))
        .collect();
    let cycles_per_image = junction_cycles.iter().copied().max().unwrap_or(0);
    let time_per_image = cycles_per_image as f64 / s.clock_hz;
    let epoch_time = time_per_image * s.images_per_epoch as f64;
    Ok(PerfReport {
        edge_counts,
        junction_cycles,
        cycles_per_image,
        time_per_image,
        epoch_time,
        total_time: epoch_time * s.epochs as f64,
    })
}

/// How many times faster than a baseline taking `baseline_seconds`.
pub fn speedup(report: &PerfReport, baseline_seconds: f64) -> Result<f64, PerfError> {
    if !(baseline_seconds > 0.0) {
        return Err(PerfError::Baseline(baseline_seconds));
    }
    Ok(baseline_seconds / report.total_time)
}

/// Operations in flight at steady state: FF, BP and UP in each of the
/// `junctions` junctions.
pub fn pipeline_parallelism(junctions: usize) -> usize {
    assert!(junctions >= 1);
    3 * junctions
}

impl fmt::Display for PerfReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "junction  edges        cycles")?;
        for (j, (e, c)) in self.edge_counts.iter().zip(&self.junction_cycles).enumerate() {
            writeln!(f, "{:<9} {:<12} {}", j + 1, e, c)?;
        }
        writeln!(f, "cycles/image     {}", self.cycles_per_image)?;
        writeln!(f, "time/image       {:.3} us", self.time_per_image * 1e6)?;
        writeln!(f, "epoch time       {:.3} s", self.epoch_time)?;
        write!(
            f,
            "total time       {:.1} s ({:.4} h)",
            self.total_time,
            self.total_time / 3600.0
        )
    }
}

impl PerfReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("junction,edges,cycles\n");
        for (j, (e, c)) in self.edge_counts.iter().zip(&self.junction_cycles).enumerate() {
            out.push_str(&format!("{},{},{}\n", j + 1, e, c));
        }
        out.push_str(&format!(
            "# cycles_per_image={} time_per_image_s={:e} epoch_time_s={:e} total_time_s={:e}\n",
            self.cycles_per_image, self.time_per_image, self.epoch_time, self.total_time
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alexnet_fc() -> PerfScenario {
        PerfScenario {
            layer_sizes: vec![1728, 4096, 4096, 1000],
            edges: EdgeBudget::Connectivity(vec![0.0625; 3]),
            z_list: vec![256; 3],
            clock_hz: 250e6,
            images_per_epoch: 1_200_000,
            epochs: 90,
        }
    }

    #[test]
    fn alexnet_fc_estimate() {
        let r = estimate(&alexnet_fc()).unwrap();
        assert_eq!(r.edge_counts, vec![442_368, 1_048_576, 256_000]);
        assert_eq!(r.junction_cycles, vec![1728, 4096, 1000]);
        assert_eq!(r.cycles_per_image, 4096);
        assert!((r.time_per_image - 16.384e-6).abs() < 1e-12);
        assert!((r.total_time / 3600.0 - 0.4915).abs() < 1e-3);
        let s = speedup(&r, 0.72 * 86400.0).unwrap();
        assert!((s - 35.16).abs() < 0.01, "{s}");
    }

    #[test]
    fn speedup_properties() {
        let r = estimate(&alexnet_fc()).unwrap();
        assert_eq!(speedup(&r, r.total_time).unwrap(), 1.0);
        let full = speedup(&r, 1000.0).unwrap();
        let half = speedup(&r, 500.0).unwrap();
        assert!((full / 2.0 - half).abs() < 1e-12);
        assert!(speedup(&r, 0.0).is_err());
        assert!(speedup(&r, -1.0).is_err());
    }

    #[test]
    fn full_parallelism_is_one_cycle() {
        let s = PerfScenario {
            layer_sizes: vec![8, 4],
            edges: EdgeBudget::Counts(vec![32]),
            z_list: vec![32],
            clock_hz: 1.0,
            images_per_epoch: 1,
            epochs: 1,
        };
        assert_eq!(estimate(&s).unwrap().cycles_per_image, 1);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = alexnet_fc();
        s.z_list = vec![256, 0, 256];
        assert!(estimate(&s).is_err());
        let mut s = alexnet_fc();
        s.edges = EdgeBudget::Connectivity(vec![0.0625, 1.5, 0.0625]);
        assert!(estimate(&s).is_err());
        let mut s = alexnet_fc();
        s.edges = EdgeBudget::Counts(vec![1, 2]);
        assert!(estimate(&s).is_err());
    }

    #[test]
    fn parallelism() {
        assert_eq!(pipeline_parallelism(1), 3);
        assert_eq!(pipeline_parallelism(2), 6);
        assert_eq!(pipeline_parallelism(3), 9);
    }
}
