//! Plain-text checkpoints.
//!
//! ```text
//! netckpt v1
//! layers=1024,64,16 fanouts=8,8
//! fmt fx10:3.7
//! seed <init seed>
//! step <pipeline step>
//! junction 1
//! bank v1 <z> <depth> <fmt>
//! <depth rows of z values>
//! bias <count>
//! <count values>
//! junction 2
//! ...
//! ```
//!
//! Real values are written in Rust's shortest round-trip form and fixed-point
//! values as raw integers, so a reload is bit-exact.

use std::fmt::Write as _;

use crate::arith::Arith;
use crate::engine::{EngineError, Network};
use crate::memory_bank::BankedMemory;

fn err(msg: impl Into<String>) -> EngineError {
    EngineError::Checkpoint(msg.into())
}

/// Dumps a bank row-major under a `bank v1 z D fmt` header.
pub fn write_bank<A: Arith>(arith: &A, bank: &BankedMemory<A::Value>, out: &mut String) {
    let _ = writeln!(out, "bank v1 {} {} {}", bank.z(), bank.depth(), arith.label());
    for row in 0..bank.depth() {
        let line: Vec<String> = bank
            .read_natural(row)
            .expect("row in range")
            .iter()
            .map(|&v| arith.encode(v))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

/// Parses a bank written by [`write_bank`], consuming its lines.
pub fn read_bank<'a, A: Arith>(
    arith: &A,
    lines: &mut impl Iterator<Item = &'a str>,
) -> Result<BankedMemory<A::Value>, EngineError> {
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| err("missing bank header"))?
        .split_whitespace()
        .collect();
    if header.len() != 5 || header[0] != "bank" || header[1] != "v1" {
        return Err(err(format!("bad bank header {header:?}")));
    }
    let z: usize = header[2].parse().map_err(|_| err("bad bank width"))?;
    let depth: usize = header[3].parse().map_err(|_| err("bad bank depth"))?;
    if header[4] != arith.label() {
        return Err(err(format!(
            "bank format {} does not match {}",
            header[4],
            arith.label()
        )));
    }
    if z == 0 {
        return Err(err("bank width must be positive"));
    }
    let mut bank = BankedMemory::new(z, depth, arith.zero());
    for row in 0..depth {
        let line = lines.next().ok_or_else(|| err("truncated bank"))?;
        let values = parse_values(arith, line)?;
        bank.write_natural(row, &values)
            .map_err(|e| err(format!("bank row {row}: {e}")))?;
    }
    Ok(bank)
}

fn parse_values<A: Arith>(arith: &A, line: &str) -> Result<Vec<A::Value>, EngineError> {
    line.split_whitespace()
        .map(|tok| arith.decode(tok).ok_or_else(|| err(format!("bad value {tok:?}"))))
        .collect()
}

fn expect_line<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    key: &str,
) -> Result<&'a str, EngineError> {
    let line = lines.next().ok_or_else(|| err(format!("missing {key} line")))?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| err(format!("expected {key:?}, found {line:?}")))
}

impl<A: Arith> Network<A> {
    pub fn to_checkpoint(&self, step: u64) -> String {
        let arith = self.arith();
        let mut out = String::new();
        let _ = writeln!(out, "netckpt v1");
        let _ = writeln!(out, "{}", self.spec());
        let _ = writeln!(out, "fmt {}", arith.label());
        let _ = writeln!(out, "seed {}", self.options().init_seed);
        let _ = writeln!(out, "step {step}");
        for (j, junction) in self.junctions().iter().enumerate() {
            let _ = writeln!(out, "junction {}", j + 1);
            write_bank(arith, junction.weights(), &mut out);
            let _ = writeln!(out, "bias {}", junction.biases().len());
            let line: Vec<String> = junction.biases().iter().map(|&b| arith.encode(b)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Restores weights and biases from a checkpoint of a network with the
    /// same topology, number format and bank geometry. Returns the stored
    /// step.
    pub fn load_checkpoint(&mut self, text: &str) -> Result<u64, EngineError> {
        let mut lines = text.lines();
        if lines.next() != Some("netckpt v1") {
            return Err(err("missing `netckpt v1` header"));
        }
        let topo = lines.next().ok_or_else(|| err("missing topology line"))?;
        if topo != self.spec().to_string() {
            return Err(err(format!(
                "topology {topo:?} does not match {:?}",
                self.spec().to_string()
            )));
        }
        let fmt = expect_line(&mut lines, "fmt")?;
        if fmt != self.arith().label() {
            return Err(err(format!("format {fmt} does not match {}", self.arith().label())));
        }
        expect_line(&mut lines, "seed")?
            .parse::<u64>()
            .map_err(|_| err("bad seed"))?;
        let step: u64 = expect_line(&mut lines, "step")?
            .parse()
            .map_err(|_| err("bad step"))?;

        let arith = self.arith().clone();
        let mut restored = Vec::new();
        for j in 0..self.junctions().len() {
            let idx: usize = expect_line(&mut lines, "junction")?
                .parse()
                .map_err(|_| err("bad junction index"))?;
            if idx != j + 1 {
                return Err(err(format!("expected junction {}, found {idx}", j + 1)));
            }
            let bank = read_bank(&arith, &mut lines)?;
            let current = self.junctions()[j].weights();
            if bank.z() != current.z() || bank.depth() != current.depth() {
                return Err(err(format!(
                    "junction {}: bank geometry {}x{} does not match {}x{}",
                    j + 1,
                    bank.z(),
                    bank.depth(),
                    current.z(),
                    current.depth()
                )));
            }
            let count: usize = expect_line(&mut lines, "bias")?
                .parse()
                .map_err(|_| err("bad bias count"))?;
            let biases = parse_values(&arith, lines.next().unwrap_or(""))?;
            if count != self.junctions()[j].biases().len() || biases.len() != count {
                return Err(err(format!("junction {}: bias count mismatch", j + 1)));
            }
            restored.push((bank, biases));
        }
        for (junction, (bank, biases)) in self.junctions_mut().iter_mut().zip(restored) {
            *junction.weights_mut() = bank;
            junction.biases_mut().copy_from_slice(&biases);
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{Fixed, Real};
    use crate::engine::{build_maps, NetOptions};
    use crate::topology::{HardwareConfig, TopologySpec};

    fn nets() -> (Network<Real>, Network<Fixed>) {
        let spec = TopologySpec::new(&[16, 8, 4], &[2, 2]).unwrap();
        let hw = HardwareConfig::new(vec![8, 4], 1.0);
        let maps = build_maps(&spec, Some(&hw), 5).unwrap();
        let opts = NetOptions {
            banked: true,
            init_seed: 9,
            ..NetOptions::default()
        };
        (
            Network::new(Real, spec.clone(), maps.clone(), opts).unwrap(),
            Network::new(Fixed("fx12:3.9".parse().unwrap()), spec, maps, opts).unwrap(),
        )
    }

    #[test]
    fn real_round_trip_is_bit_exact() {
        let (mut net, _) = nets();
        let x = vec![0.25; 16];
        let y = vec![1.0, 0.0, 0.0, 0.0];
        net.run_sequential(&x, &y).unwrap();
        let text = net.to_checkpoint(17);
        assert!(text.starts_with("netckpt v1\nlayers=16,8,4 fanouts=2,2\nfmt f64\n"));

        let mut other = nets().0;
        assert_eq!(other.load_checkpoint(&text).unwrap(), 17);
        for (a, b) in net.junctions().iter().zip(other.junctions()) {
            assert_eq!(a.weights(), b.weights());
            assert_eq!(a.biases(), b.biases());
        }
        assert_eq!(other.to_checkpoint(17), text);
    }

    #[test]
    fn fixed_round_trip_and_format_mismatch() {
        let (real, mut fixed) = nets();
        let text = fixed.to_checkpoint(0);
        assert!(text.contains("bank v1 8 4 fx12:3.9"));
        let before = fixed.clone();
        fixed.load_checkpoint(&text).unwrap();
        assert_eq!(fixed.junctions()[0].weights(), before.junctions()[0].weights());
        assert!(fixed.load_checkpoint(&real.to_checkpoint(0)).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (mut net, _) = nets();
        let text = net.to_checkpoint(3);
        let cut: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(net.load_checkpoint(&cut).is_err());
        assert!(net.load_checkpoint("hello").is_err());
    }
}
