//! z-wide banked memories.
//!
//! A bank is `z` independent memories of `depth` cells each. Item `i` lives
//! in memory `i % z` at address `i / z`, so the cells are stored row-major and
//! the flat index of an item is the item index itself. A *natural* access
//! reads one address across all memories; a *permuted* access touches one
//! cell in each of up to `z` memories at arbitrary addresses and fails with a
//! clash if two accesses hit the same memory.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BankError {
    #[error("address {address} out of bounds for depth {depth}")]
    OutOfBounds { address: usize, depth: usize },
    #[error("memory {memory} out of bounds for {z} memories")]
    NoSuchMemory { memory: usize, z: usize },
    #[error("clash: memory {0} accessed twice in one cycle")]
    Clash(usize),
    #[error("expected {expected} values, got {got}")]
    Width { expected: usize, got: usize },
    #[error("queue slot for input {wanted} holds {found:?}: overwritten before its last read")]
    QueueOverwritten { wanted: u64, found: Option<u64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankedMemory<T> {
    z: usize,
    depth: usize,
    cells: Vec<T>,
}

/// What a permuted access does at each `(memory, address)` pair.
pub enum PermutedOp<'a, T> {
    Read,
    /// `cell = combine(cell, value)` for the value in the same lane.
    ReadModifyWrite {
        values: &'a [T],
        combine: &'a dyn Fn(T, T) -> T,
    },
}

impl<T: Copy> BankedMemory<T> {
    pub fn new(z: usize, depth: usize, fill: T) -> Self {
        assert!(z >= 1, "a bank needs at least one memory");
        Self {
            z,
            depth,
            cells: vec![fill; z * depth],
        }
    }

    /// Bank just deep enough to hold `items`, padded with `fill`.
    pub fn from_items(z: usize, items: &[T], fill: T) -> Self {
        let depth = items.len().div_ceil(z);
        let mut bank = Self::new(z, depth, fill);
        bank.cells[..items.len()].copy_from_slice(items);
        bank
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn capacity(&self) -> usize {
        self.cells.len()
    }

    /// All cells in item order.
    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [T] {
        &mut self.cells
    }

    pub fn get(&self, item: usize) -> T {
        self.cells[item]
    }

    pub fn set(&mut self, item: usize, value: T) {
        self.cells[item] = value;
    }

    /// `(memory, address)` holding `item`.
    pub fn location(&self, item: usize) -> (usize, usize) {
        (item % self.z, item / self.z)
    }

    fn check_row(&self, row: usize) -> Result<(), BankError> {
        if row >= self.depth {
            return Err(BankError::OutOfBounds {
                address: row,
                depth: self.depth,
            });
        }
        Ok(())
    }

    /// Cell `row` of every memory, in lane order.
    pub fn read_natural(&self, row: usize) -> Result<&[T], BankError> {
        self.check_row(row)?;
        Ok(&self.cells[row * self.z..(row + 1) * self.z])
    }

    pub fn write_natural(&mut self, row: usize, values: &[T]) -> Result<(), BankError> {
        self.check_row(row)?;
        if values.len() != self.z {
            return Err(BankError::Width {
                expected: self.z,
                got: values.len(),
            });
        }
        self.cells[row * self.z..(row + 1) * self.z].copy_from_slice(values);
        Ok(())
    }

    pub fn row_mut(&mut self, row: usize) -> Result<&mut [T], BankError> {
        self.check_row(row)?;
        Ok(&mut self.cells[row * self.z..(row + 1) * self.z])
    }

    /// One-cycle access to at most one cell per memory. Returns the values
    /// read (before any modification), in the order of `pairs`. Nothing is
    /// written unless every pair is valid and clash-free.
    pub fn access_permuted(
        &mut self,
        pairs: &[(usize, usize)],
        op: PermutedOp<'_, T>,
    ) -> Result<Vec<T>, BankError> {
        let mut used = vec![false; self.z];
        for &(memory, address) in pairs {
            if memory >= self.z {
                return Err(BankError::NoSuchMemory { memory, z: self.z });
            }
            self.check_row(address)?;
            if std::mem::replace(&mut used[memory], true) {
                return Err(BankError::Clash(memory));
            }
        }
        let read: Vec<T> = pairs
            .iter()
            .map(|&(m, a)| self.cells[a * self.z + m])
            .collect();
        if let PermutedOp::ReadModifyWrite { values, combine } = op {
            if values.len() != pairs.len() {
                return Err(BankError::Width {
                    expected: pairs.len(),
                    got: values.len(),
                });
            }
            for (&(m, a), &v) in pairs.iter().zip(values) {
                let cell = &mut self.cells[a * self.z + m];
                *cell = combine(*cell, v);
            }
        }
        Ok(read)
    }

    /// Item-indexed permuted read used by the engine's inner loops. The
    /// guard performs the clash check when enabled.
    pub fn gather(
        &self,
        items: &[u32],
        out: &mut Vec<T>,
        guard: &mut ClashGuard,
    ) -> Result<(), BankError> {
        guard.check(self.z, items)?;
        out.clear();
        for &i in items {
            let i = i as usize;
            if i >= self.cells.len() {
                return Err(BankError::OutOfBounds {
                    address: i / self.z,
                    depth: self.depth,
                });
            }
            out.push(self.cells[i]);
        }
        Ok(())
    }
}

/// Clash detector reused across cycles. Disabled guards only count accesses,
/// which is how functional-mode (unbanked) junctions run.
#[derive(Debug, Clone, Default)]
pub struct ClashGuard {
    enabled: bool,
    stamp: Vec<u64>,
    cycle: u64,
    accesses: u64,
}

impl ClashGuard {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Permuted cycles checked so far.
    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    /// Fails if two items in one cycle map to the same memory of a `z`-wide
    /// bank.
    pub fn check(&mut self, z: usize, items: &[u32]) -> Result<(), BankError> {
        self.accesses += 1;
        if !self.enabled {
            return Ok(());
        }
        if self.stamp.len() < z {
            self.stamp.resize(z, 0);
        }
        self.cycle += 1;
        for &i in items {
            let m = i as usize % z;
            if self.stamp[m] == self.cycle {
                return Err(BankError::Clash(m));
            }
            self.stamp[m] = self.cycle;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueKind {
    Activation,
    Derivative,
}

/// Slots needed to hold a layer's per-input values from production to last
/// use under the junction pipeline. `junctions` is the junction count and
/// `layer` the 0-based layer index, which must be below `junctions`.
pub fn queue_depth(junctions: usize, layer: usize, kind: QueueKind) -> usize {
    assert!(layer < junctions, "layer {layer} has no queue in a {junctions}-junction network");
    match (kind, layer) {
        (QueueKind::Activation, 0) => 2 * junctions + 1,
        (QueueKind::Activation, k) => 2 * junctions - 2 * k + 1,
        (QueueKind::Derivative, 0) => 0,
        (QueueKind::Derivative, k) => 2 * junctions - 2 * k,
    }
}

/// Ring of per-input bank snapshots. Input `i` occupies slot `i % depth`;
/// reading an input whose slot has since been reused is an error, which is
/// how a too-shallow queue surfaces.
#[derive(Debug, Clone)]
pub struct QueueBank<T> {
    tags: Vec<Option<u64>>,
    slots: Vec<BankedMemory<T>>,
}

impl<T: Copy> QueueBank<T> {
    pub fn new(depth: usize, z: usize, items: usize, fill: T) -> Self {
        let rows = items.div_ceil(z);
        Self {
            tags: vec![None; depth],
            slots: (0..depth).map(|_| BankedMemory::new(z, rows, fill)).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.slots.len()
    }

    pub fn write(&mut self, input: u64, values: &[T]) {
        let slot = (input % self.depth() as u64) as usize;
        self.slots[slot].cells_mut()[..values.len()].copy_from_slice(values);
        self.tags[slot] = Some(input);
    }

    pub fn read(&self, input: u64) -> Result<&BankedMemory<T>, BankError> {
        let slot = (input % self.depth() as u64) as usize;
        match self.tags[slot] {
            Some(tag) if tag == input => Ok(&self.slots[slot]),
            found => Err(BankError::QueueOverwritten {
                wanted: input,
                found,
            }),
        }
    }

    pub fn clear(&mut self) {
        self.tags.iter_mut().for_each(|t| *t = None);
    }
}
