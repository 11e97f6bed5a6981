//! Edge-processing execution of feedforward (FF), backpropagation (BP) and
//! weight update (UP) over interleaved sparse junctions, and the junction
//! pipeline that runs all three operations of every junction at once on
//! different training inputs.
//!
//! Each junction streams its edges through `z` lanes for `C = E / z` cycles.
//! In cycle `c` it reads weight row `c` in natural order and touches the
//! preceding layer's activation (or delta) bank in permuted order at the
//! sources the interleaver assigns to that row.
//!
//! Weight memories are write-first: when UP writes a row in the same cycle
//! that FF and BP read it, the readers see the new value. Everything else a
//! step produces (activations, derivatives, deltas) becomes visible at the
//! next step.

use thiserror::Error;

use crate::arith::Arith;
use crate::interleaver::{InterleaverError, InterleaverMap, InterleaverMode};
use crate::memory_bank::{queue_depth, BankError, BankedMemory, ClashGuard, QueueBank, QueueKind};
use crate::rng::{derive_seed, SplitMix64};
use crate::topology::{validate_hardware, HardwareConfig, TopologySpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Interleaver(#[from] InterleaverError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("hardware configuration rejected: {0}")]
    Hardware(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0} distinct weight rows touched in one cycle")]
    RowLimit(usize),
}

/// Generates one interleaver per junction. With a hardware config the maps
/// are clash-free for the given z values; without one they are functional
/// maps with one succeeding neuron per cycle.
pub fn build_maps(
    spec: &TopologySpec,
    hw: Option<&HardwareConfig>,
    seed: u64,
) -> Result<Vec<InterleaverMap>, EngineError> {
    if let Some(hw) = hw {
        let report = validate_hardware(spec, hw);
        if !report.passed() {
            return Err(EngineError::Hardware(report.failures().join("; ")));
        }
    }
    (0..spec.junctions())
        .map(|j| {
            let dims = spec.junction(j);
            let stream = derive_seed(seed, j as u64);
            let map = match hw {
                Some(hw) => {
                    InterleaverMap::generate(dims, hw.z_list[j], stream, InterleaverMode::Hardware)?
                }
                None => {
                    InterleaverMap::generate(dims, dims.fan_in, stream, InterleaverMode::Functional)?
                }
            };
            Ok(map)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetOptions {
    /// Enforce banked-memory constraints and clash checks.
    pub banked: bool,
    pub biases: bool,
    pub learning_rate: f64,
    pub init_seed: u64,
}

impl Default for NetOptions {
    fn default() -> Self {
        Self {
            banked: false,
            biases: true,
            learning_rate: 0.1,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub steps: u64,
    pub cycles: u64,
    /// Scheduled FF/BP/UP operations on real (non-bubble) inputs.
    pub ops: u64,
    pub max_rows_per_cycle: usize,
}

/// Weights, biases and interleaver of one junction. Row `r` of the weight
/// bank holds edges `r*z .. r*z + z - 1`.
#[derive(Debug, Clone)]
pub struct Junction<A: Arith> {
    map: InterleaverMap,
    weights: BankedMemory<A::Value>,
    biases: Vec<A::Value>,
}

impl<A: Arith> Junction<A> {
    pub fn map(&self) -> &InterleaverMap {
        &self.map
    }

    pub fn weights(&self) -> &BankedMemory<A::Value> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BankedMemory<A::Value> {
        &mut self.weights
    }

    pub fn biases(&self) -> &[A::Value] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [A::Value] {
        &mut self.biases
    }

    pub fn cycles(&self) -> usize {
        self.map.cycles()
    }

    fn fan_in(&self) -> usize {
        self.map.dims().fan_in
    }

    fn check_len(what: &str, got: usize, expected: usize) -> Result<(), EngineError> {
        if got != expected {
            return Err(EngineError::Shape(format!(
                "{what}: expected {expected} values, got {got}"
            )));
        }
        Ok(())
    }

    fn ff_start(&self, arith: &A) -> Vec<A::Acc> {
        self.biases
            .iter()
            .map(|&b| arith.acc_add(arith.acc_zero(), b))
            .collect()
    }

    fn ff_cycle(
        &self,
        arith: &A,
        c: usize,
        a_prev: &BankedMemory<A::Value>,
        acc: &mut [A::Acc],
        buf: &mut Vec<A::Value>,
        guard: &mut ClashGuard,
    ) -> Result<(), EngineError> {
        let row = self.weights.read_natural(c)?;
        a_prev.gather(self.map.row(c), buf, guard)?;
        let fan_in = self.fan_in();
        let base = c * self.map.z();
        for (l, (&w, &a)) in row.iter().zip(buf.iter()).enumerate() {
            let o = (base + l) / fan_in;
            acc[o] = arith.acc_mac(acc[o], w, a);
        }
        Ok(())
    }

    fn ff_finish(&self, arith: &A, acc: &[A::Acc]) -> (Vec<A::Value>, Vec<A::Value>) {
        let act: Vec<A::Value> = acc
            .iter()
            .map(|&s| arith.sigmoid(arith.acc_finish(s)))
            .collect();
        let deriv = act.iter().map(|&a| arith.sigmoid_deriv(a)).collect();
        (act, deriv)
    }

    /// Feedforward through the junction: returns the succeeding layer's
    /// activations and their sigmoid derivatives.
    pub fn ff(
        &self,
        arith: &A,
        a_prev: &BankedMemory<A::Value>,
        guard: &mut ClashGuard,
    ) -> Result<(Vec<A::Value>, Vec<A::Value>), EngineError> {
        if a_prev.capacity() < self.map.dims().n_in {
            return Err(EngineError::Shape(format!(
                "ff input bank holds {} values, junction reads {}",
                a_prev.capacity(),
                self.map.dims().n_in
            )));
        }
        let mut acc = self.ff_start(arith);
        let mut buf = Vec::with_capacity(self.map.z());
        for c in 0..self.cycles() {
            self.ff_cycle(arith, c, a_prev, &mut acc, &mut buf, guard)?;
        }
        Ok(self.ff_finish(arith, &acc))
    }

    fn bp_cycle(
        &self,
        arith: &A,
        c: usize,
        delta_next: &[A::Value],
        acc: &mut [A::Acc],
        guard: &mut ClashGuard,
    ) -> Result<(), EngineError> {
        let row = self.weights.read_natural(c)?;
        let sources = self.map.row(c);
        // Read-modify-write of the preceding layer's delta bank.
        guard.check(self.map.z(), sources)?;
        let fan_in = self.fan_in();
        let base = c * self.map.z();
        for (l, (&w, &s)) in row.iter().zip(sources).enumerate() {
            let o = (base + l) / fan_in;
            let s = s as usize;
            acc[s] = arith.acc_mac(acc[s], w, delta_next[o]);
        }
        Ok(())
    }

    fn bp_finish(&self, arith: &A, acc: &[A::Acc], deriv_prev: &[A::Value]) -> Vec<A::Value> {
        acc.iter()
            .zip(deriv_prev)
            .map(|(&s, &d)| arith.mul(arith.acc_finish(s), d))
            .collect()
    }

    /// Backpropagation: `delta_prev = (W^T delta_next) * deriv_prev`.
    pub fn bp(
        &self,
        arith: &A,
        delta_next: &[A::Value],
        deriv_prev: &[A::Value],
        guard: &mut ClashGuard,
    ) -> Result<Vec<A::Value>, EngineError> {
        let dims = self.map.dims();
        Self::check_len("bp delta", delta_next.len(), dims.n_out)?;
        Self::check_len("bp derivative", deriv_prev.len(), dims.n_in)?;
        let mut acc = vec![arith.acc_zero(); dims.n_in];
        for c in 0..self.cycles() {
            self.bp_cycle(arith, c, delta_next, &mut acc, guard)?;
        }
        Ok(self.bp_finish(arith, &acc, deriv_prev))
    }

    #[allow(clippy::too_many_arguments)]
    fn up_cycle(
        &mut self,
        arith: &A,
        c: usize,
        delta_next: &[A::Value],
        a_prev: &BankedMemory<A::Value>,
        lr: A::Value,
        buf: &mut Vec<A::Value>,
        guard: &mut ClashGuard,
    ) -> Result<(), EngineError> {
        a_prev.gather(self.map.row(c), buf, guard)?;
        let fan_in = self.fan_in();
        let base = c * self.map.z();
        let row = self.weights.row_mut(c)?;
        for (l, (w, &a)) in row.iter_mut().zip(buf.iter()).enumerate() {
            let o = (base + l) / fan_in;
            *w = arith.sgd(*w, lr, delta_next[o], a);
        }
        Ok(())
    }

    fn up_biases(&mut self, arith: &A, delta_next: &[A::Value], lr: A::Value) {
        for (b, &d) in self.biases.iter_mut().zip(delta_next) {
            *b = arith.sgd_bias(*b, lr, d);
        }
    }

    /// Weight (and optionally bias) update from the succeeding layer's
    /// deltas and the preceding layer's activations.
    pub fn up(
        &mut self,
        arith: &A,
        delta_next: &[A::Value],
        a_prev: &BankedMemory<A::Value>,
        lr: A::Value,
        update_biases: bool,
        guard: &mut ClashGuard,
    ) -> Result<(), EngineError> {
        Self::check_len("up delta", delta_next.len(), self.map.dims().n_out)?;
        if update_biases {
            self.up_biases(arith, delta_next, lr);
        }
        let mut buf = Vec::with_capacity(self.map.z());
        for c in 0..self.cycles() {
            self.up_cycle(arith, c, delta_next, a_prev, lr, &mut buf, guard)?;
        }
        Ok(())
    }
}

/// Quadratic-cost output delta, `(a - target) * deriv` elementwise.
pub fn output_delta<A: Arith>(
    arith: &A,
    act: &[A::Value],
    target: &[A::Value],
    deriv: &[A::Value],
) -> Result<Vec<A::Value>, EngineError> {
    if act.len() != target.len() || act.len() != deriv.len() {
        return Err(EngineError::Shape(format!(
            "output delta over {} activations, {} targets, {} derivatives",
            act.len(),
            target.len(),
            deriv.len()
        )));
    }
    Ok(act
        .iter()
        .zip(target)
        .zip(deriv)
        .map(|((&a, &t), &d)| arith.output_delta(a, t, d))
        .collect())
}

/// Half the squared error over all outputs.
pub fn quadratic_loss<A: Arith>(arith: &A, act: &[A::Value], target: &[A::Value]) -> f64 {
    act.iter()
        .zip(target)
        .map(|(&a, &t)| {
            let d = arith.to_real(a) - arith.to_real(t);
            0.5 * d * d
        })
        .sum()
}

/// All junctions of a network plus the arithmetic and learning rate.
#[derive(Debug, Clone)]
pub struct Network<A: Arith> {
    arith: A,
    spec: TopologySpec,
    junctions: Vec<Junction<A>>,
    options: NetOptions,
    lr: A::Value,
    guard: ClashGuard,
    stats: EngineStats,
}

impl<A: Arith> Network<A> {
    pub fn new(
        arith: A,
        spec: TopologySpec,
        maps: Vec<InterleaverMap>,
        options: NetOptions,
    ) -> Result<Self, EngineError> {
        if maps.len() != spec.junctions() {
            return Err(EngineError::Shape(format!(
                "{} maps for {} junctions",
                maps.len(),
                spec.junctions()
            )));
        }
        for (j, map) in maps.iter().enumerate() {
            if map.dims() != spec.junction(j) {
                return Err(EngineError::Shape(format!(
                    "map for junction {} has dims {:?}, topology has {:?}",
                    j + 1,
                    map.dims(),
                    spec.junction(j)
                )));
            }
        }
        if options.banked {
            let hw = HardwareConfig::new(maps.iter().map(|m| m.z()).collect(), 0.0);
            let report = validate_hardware(&spec, &hw);
            if !report.passed() {
                return Err(EngineError::Hardware(report.failures().join("; ")));
            }
            if let Some(j) = maps.iter().position(|m| m.mode() != InterleaverMode::Hardware) {
                return Err(EngineError::Hardware(format!(
                    "junction {} uses a functional interleaver",
                    j + 1
                )));
            }
        }

        let junctions = maps
            .into_iter()
            .enumerate()
            .map(|(j, map)| {
                let dims = map.dims();
                let mut rng = SplitMix64::new(derive_seed(options.init_seed, j as u64));
                let r = (3.0 / dims.fan_in as f64).sqrt();
                let init: Vec<A::Value> = (0..dims.edges)
                    .map(|_| arith.from_real(rng.symmetric(r)))
                    .collect();
                Junction {
                    weights: BankedMemory::from_items(map.z(), &init, arith.zero()),
                    biases: vec![arith.zero(); dims.n_out],
                    map,
                }
            })
            .collect();

        Ok(Self {
            lr: arith.from_real(options.learning_rate),
            guard: ClashGuard::new(options.banked),
            arith,
            spec,
            junctions,
            options,
            stats: EngineStats::default(),
        })
    }

    pub fn arith(&self) -> &A {
        &self.arith
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn options(&self) -> &NetOptions {
        &self.options
    }

    pub fn junctions(&self) -> &[Junction<A>] {
        &self.junctions
    }

    pub fn junctions_mut(&mut self) -> &mut [Junction<A>] {
        &mut self.junctions
    }

    pub fn learning_rate(&self) -> A::Value {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.options.learning_rate = lr;
        self.lr = self.arith.from_real(lr);
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    /// Permuted-order cycles issued so far (clash-checked when banked).
    pub fn permuted_accesses(&self) -> u64 {
        self.guard.accesses()
    }

    /// Width of the bank holding layer `k`: the z of the junction that
    /// reads it in permuted order.
    pub fn layer_bank_z(&self, k: usize) -> usize {
        self.junctions.get(k).map_or(1, |j| j.map.z())
    }

    pub fn layer_bank(&self, k: usize, values: &[A::Value]) -> BankedMemory<A::Value> {
        BankedMemory::from_items(self.layer_bank_z(k), values, self.arith.zero())
    }

    pub fn quantize_input(&self, x: &[f64]) -> Vec<A::Value> {
        x.iter().map(|&v| self.arith.from_real(v)).collect()
    }

    fn check_input(&self, input: &[A::Value]) -> Result<(), EngineError> {
        let n0 = self.spec.layer_sizes()[0];
        if input.len() != n0 {
            return Err(EngineError::Shape(format!(
                "input has {} values, network expects {n0}",
                input.len()
            )));
        }
        Ok(())
    }

    fn check_target(&self, target: &[A::Value]) -> Result<(), EngineError> {
        let nl = *self.spec.layer_sizes().last().unwrap();
        if target.len() != nl {
            return Err(EngineError::Shape(format!(
                "target has {} values, network has {nl} outputs",
                target.len()
            )));
        }
        Ok(())
    }

    /// Full feedforward pass. Returns the activations and derivatives of
    /// every layer (layer 0's derivatives are empty).
    pub fn forward_all(
        &mut self,
        input: &[A::Value],
    ) -> Result<(Vec<Vec<A::Value>>, Vec<Vec<A::Value>>), EngineError> {
        self.check_input(input)?;
        let mut acts = vec![input.to_vec()];
        let mut derivs = vec![Vec::new()];
        for j in 0..self.junctions.len() {
            let bank = self.layer_bank(j, &acts[j]);
            let (a, d) = self.junctions[j].ff(&self.arith, &bank, &mut self.guard)?;
            acts.push(a);
            derivs.push(d);
        }
        Ok((acts, derivs))
    }

    pub fn forward(&mut self, input: &[A::Value]) -> Result<Vec<A::Value>, EngineError> {
        Ok(self.forward_all(input)?.0.pop().unwrap())
    }

    /// Deltas of layers `1..=J` for one input, with the weights untouched.
    /// Index `k - 1` holds layer `k`.
    pub fn backward(
        &mut self,
        acts: &[Vec<A::Value>],
        derivs: &[Vec<A::Value>],
        target: &[A::Value],
    ) -> Result<Vec<Vec<A::Value>>, EngineError> {
        self.check_target(target)?;
        let jn = self.junctions.len();
        let mut deltas = vec![Vec::new(); jn];
        deltas[jn - 1] = output_delta(&self.arith, &acts[jn], target, &derivs[jn])?;
        for j in (1..jn).rev() {
            // Junction j+1 (index j) produces the delta of layer j.
            deltas[j - 1] =
                self.junctions[j].bp(&self.arith, &deltas[j], &derivs[j], &mut self.guard)?;
        }
        Ok(deltas)
    }

    /// One plain SGD step: full FF, then full BP, then UP of every junction.
    /// Returns the quadratic loss before the update.
    pub fn run_sequential(
        &mut self,
        input: &[A::Value],
        target: &[A::Value],
    ) -> Result<f64, EngineError> {
        let (acts, derivs) = self.forward_all(input)?;
        let deltas = self.backward(&acts, &derivs, target)?;
        let loss = quadratic_loss(&self.arith, &acts[self.junctions.len()], target);
        for j in 0..self.junctions.len() {
            let bank = self.layer_bank(j, &acts[j]);
            self.junctions[j].up(
                &self.arith,
                &deltas[j],
                &bank,
                self.lr,
                self.options.biases,
                &mut self.guard,
            )?;
        }
        let cycles: u64 = self.junctions.iter().map(|j| j.cycles() as u64).sum();
        self.stats.steps += 1;
        self.stats.cycles += 3 * cycles;
        self.stats.ops += 3 * self.junctions.len() as u64;
        self.stats.max_rows_per_cycle = self.stats.max_rows_per_cycle.max(1);
        Ok(loss)
    }

    /// Index of the largest of the first `classes` outputs; ties go to the
    /// lowest index.
    pub fn predict(&mut self, input: &[A::Value], classes: usize) -> Result<usize, EngineError> {
        let out = self.forward(input)?;
        Ok(argmax(
            out.iter().take(classes).map(|&v| self.arith.to_real(v)),
        ))
    }
}

fn distinct_rows(touched: &[Option<usize>]) -> usize {
    let mut rows: Vec<usize> = touched.iter().flatten().copied().collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Position of the first maximum.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Inputs handled by junction `j` at one pipeline step. `None` marks a slot
/// before the start of the input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JunctionOps {
    pub ff: Option<u64>,
    pub bp: Option<u64>,
    pub up: Option<u64>,
}

/// Global step counter of the junction pipeline. Input `i` enters at step
/// `i`; at step `t` junction `j` (1-based) of `J` does FF on input
/// `t - (j - 1)`, BP on `t - (2J - j)` and UP on `t - (2J - j + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineState {
    pub t: u64,
    pub junctions: usize,
}

impl PipelineState {
    pub fn new(junctions: usize) -> Self {
        Self { t: 0, junctions }
    }

    pub fn ops(&self, j: usize) -> JunctionOps {
        assert!((1..=self.junctions).contains(&j), "junction {j} out of range");
        let jn = self.junctions as u64;
        let j = j as u64;
        let back = |lag: u64| self.t.checked_sub(lag);
        JunctionOps {
            ff: back(j - 1),
            bp: back(2 * jn - j),
            up: back(2 * jn - j + 1),
        }
    }
}

/// What one pipeline step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<V> {
    pub step: u64,
    /// FF/BP/UP slots that carried a real input (junction 1's BP slot
    /// included even though it computes nothing).
    pub ops: usize,
    pub cycles: usize,
    pub max_rows_per_cycle: usize,
    /// Input whose FF reached the output layer this step, with its loss and
    /// outputs.
    pub output: Option<(u64, f64, Vec<V>)>,
    /// Input whose last update (junction 1 UP) ran this step.
    pub retired: Option<u64>,
}

/// Queue memories and schedule for pipelined training of a [`Network`].
#[derive(Debug, Clone)]
pub struct Pipeline<A: Arith> {
    state: PipelineState,
    /// `acts[k]` holds layer `k` for `k < J`.
    acts: Vec<QueueBank<A::Value>>,
    /// `derivs[k]` holds layer `k` derivatives for `1 <= k < J`.
    derivs: Vec<Option<QueueBank<A::Value>>>,
    /// `deltas[k]` holds layer `k` deltas for `1 <= k <= J`.
    deltas: Vec<Option<QueueBank<A::Value>>>,
    targets: QueueBank<A::Value>,
    /// Ring remembering which recent steps fed a real input.
    fed: Vec<Option<u64>>,
}

impl<A: Arith> Pipeline<A> {
    pub fn new(net: &Network<A>) -> Self {
        let jn = net.junctions.len();
        let sizes = net.spec.layer_sizes();
        let zero = net.arith.zero();
        let acts = (0..jn)
            .map(|k| {
                QueueBank::new(
                    queue_depth(jn, k, QueueKind::Activation),
                    net.layer_bank_z(k),
                    sizes[k],
                    zero,
                )
            })
            .collect();
        let derivs = (0..jn)
            .map(|k| {
                (k >= 1).then(|| {
                    QueueBank::new(
                        queue_depth(jn, k, QueueKind::Derivative),
                        net.layer_bank_z(k),
                        sizes[k],
                        zero,
                    )
                })
            })
            .collect();
        // Deltas are produced at the end of one step and read during the
        // next two.
        let deltas = (0..=jn)
            .map(|k| (k >= 1).then(|| QueueBank::new(2, net.layer_bank_z(k), sizes[k], zero)))
            .collect();
        Self {
            state: PipelineState::new(jn),
            acts,
            derivs,
            deltas,
            targets: QueueBank::new(jn, 1, sizes[jn], zero),
            fed: vec![None; 2 * jn + 1],
        }
    }

    /// Same as [`Pipeline::new`] but with explicit activation queue depths,
    /// for exercising the overwrite detection.
    pub fn with_activation_depths(net: &Network<A>, depths: &[usize]) -> Self {
        let mut p = Self::new(net);
        let sizes = net.spec.layer_sizes();
        for (k, &d) in depths.iter().enumerate() {
            p.acts[k] = QueueBank::new(d, net.layer_bank_z(k), sizes[k], net.arith.zero());
        }
        p
    }

    pub fn state(&self) -> PipelineState {
        self.state
    }

    fn is_real(&self, input: Option<u64>) -> Option<u64> {
        let i = input?;
        let slot = (i % self.fed.len() as u64) as usize;
        (self.fed[slot] == Some(i)).then_some(i)
    }

    /// Advances the pipeline by one step, feeding `next` (input, target) or a
    /// bubble.
    pub fn step(
        &mut self,
        net: &mut Network<A>,
        next: Option<(&[A::Value], &[A::Value])>,
    ) -> Result<StepReport<A::Value>, EngineError> {
        let jn = net.junctions.len();
        let t = self.state.t;
        let ring = self.fed.len() as u64;
        match next {
            Some((x, y)) => {
                net.check_input(x)?;
                net.check_target(y)?;
                self.acts[0].write(t, x);
                self.targets.write(t, y);
                self.fed[(t % ring) as usize] = Some(t);
            }
            None => self.fed[(t % ring) as usize] = None,
        }

        let Network {
            arith,
            junctions,
            options,
            lr,
            guard,
            stats,
            ..
        } = net;
        let lr = *lr;

        let mut report = StepReport {
            step: t,
            ops: 0,
            cycles: 0,
            max_rows_per_cycle: 0,
            output: None,
            retired: None,
        };
        let mut new_acts = Vec::new();
        let mut new_deltas = Vec::new();
        let mut buf = Vec::new();

        for j in 1..=jn {
            let ops = self.state.ops(j);
            let ff = self.is_real(ops.ff);
            let bp = self.is_real(ops.bp);
            let up = self.is_real(ops.up);
            report.ops += ff.is_some() as usize + bp.is_some() as usize + up.is_some() as usize;
            if ff.is_none() && bp.is_none() && up.is_none() {
                continue;
            }
            let junction = &mut junctions[j - 1];

            let up_inputs = match up {
                Some(i) => Some((
                    self.deltas[j].as_ref().unwrap().read(i)?.cells(),
                    self.acts[j - 1].read(i)?,
                )),
                None => None,
            };
            // Junction 1's BP slot is scheduled but has nothing to produce.
            let bp_inputs = match bp {
                Some(i) if j > 1 => Some((
                    i,
                    self.deltas[j].as_ref().unwrap().read(i)?.cells(),
                    self.derivs[j - 1].as_ref().unwrap().read(i)?.cells(),
                )),
                _ => None,
            };
            let ff_inputs = match ff {
                Some(i) => Some((i, self.acts[j - 1].read(i)?)),
                None => None,
            };

            if let (Some((delta, _)), true) = (up_inputs, options.biases) {
                junction.up_biases(arith, delta, lr);
            }
            let mut ff_acc = ff_inputs.map(|_| junction.ff_start(arith));
            let mut bp_acc = bp_inputs.map(|_| vec![arith.acc_zero(); junction.map.dims().n_in]);

            let cycles = junction.cycles();
            let mut rows = 0;
            for c in 0..cycles {
                let touched = [up.map(|_| c), bp_inputs.map(|_| c), ff.map(|_| c)];
                rows = rows.max(distinct_rows(&touched));
                if let Some((delta, a_prev)) = up_inputs {
                    junction.up_cycle(arith, c, delta, a_prev, lr, &mut buf, guard)?;
                }
                if let (Some((_, delta, _)), Some(acc)) = (bp_inputs, bp_acc.as_mut()) {
                    junction.bp_cycle(arith, c, delta, acc, guard)?;
                }
                if let (Some((_, a_prev)), Some(acc)) = (ff_inputs, ff_acc.as_mut()) {
                    junction.ff_cycle(arith, c, a_prev, acc, &mut buf, guard)?;
                }
            }
            if rows > 2 {
                return Err(EngineError::RowLimit(rows));
            }
            report.max_rows_per_cycle = report.max_rows_per_cycle.max(rows);
            report.cycles = report.cycles.max(cycles);

            if let (Some((i, _)), Some(acc)) = (ff_inputs, ff_acc) {
                let (a, d) = junction.ff_finish(arith, &acc);
                if j == jn {
                    let target = &self.targets.read(i)?.cells()[..a.len()];
                    let delta = output_delta(arith, &a, target, &d)?;
                    let loss = quadratic_loss(arith, &a, target);
                    new_deltas.push((jn, i, delta));
                    report.output = Some((i, loss, a));
                } else {
                    new_acts.push((j, i, a, d));
                }
            }
            if let (Some((i, _, deriv)), Some(acc)) = (bp_inputs, bp_acc) {
                let n_in = junction.map.dims().n_in;
                let delta = junction.bp_finish(arith, &acc, &deriv[..n_in]);
                new_deltas.push((j - 1, i, delta));
            }
            if j == 1 {
                report.retired = up;
            }
        }

        for (k, i, a, d) in new_acts {
            self.acts[k].write(i, &a);
            if let Some(q) = self.derivs[k].as_mut() {
                q.write(i, &d);
            }
        }
        for (k, i, delta) in new_deltas {
            self.deltas[k].as_mut().unwrap().write(i, &delta);
        }

        stats.steps += 1;
        stats.cycles += report.cycles as u64;
        stats.ops += report.ops as u64;
        stats.max_rows_per_cycle = stats.max_rows_per_cycle.max(report.max_rows_per_cycle);
        self.state.t += 1;
        Ok(report)
    }

    /// Feeds bubbles until every in-flight input has been retired.
    pub fn flush(&mut self, net: &mut Network<A>) -> Result<Vec<StepReport<A::Value>>, EngineError> {
        let jn = net.junctions.len();
        (0..2 * jn).map(|_| self.step(net, None)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{Fixed, Real};

    fn tiny_net(weights: &[f64]) -> Network<Real> {
        let spec = TopologySpec::new(&[2, 1], &[1]).unwrap();
        let map = InterleaverMap::from_table(
            spec.junction(0),
            2,
            0,
            InterleaverMode::Functional,
            vec![0, 1],
        )
        .unwrap();
        let mut net = Network::new(Real, spec, vec![map], NetOptions::default()).unwrap();
        net.junctions_mut()[0]
            .weights_mut()
            .cells_mut()
            .copy_from_slice(weights);
        net
    }

    #[test]
    fn ff_scalar_example() {
        let mut net = tiny_net(&[0.5, -0.25]);
        let (acts, derivs) = net.forward_all(&[1.0, 0.5]).unwrap();
        let pre: f64 = 0.5 * 1.0 - 0.25 * 0.5;
        assert_eq!(pre, 0.375);
        let a = 1.0 / (1.0 + (-pre).exp());
        assert_eq!(acts[1][0], a);
        assert!((acts[1][0] - 0.5926666).abs() < 1e-6);
        assert!((derivs[1][0] - 0.24141).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_give_half() {
        let spec = TopologySpec::new(&[6, 4], &[2]).unwrap();
        let maps = build_maps(&spec, Some(&HardwareConfig::new(vec![6], 1.0)), 3).unwrap();
        let mut net = Network::new(
            Real,
            spec,
            maps,
            NetOptions {
                banked: true,
                ..NetOptions::default()
            },
        )
        .unwrap();
        net.junctions_mut()[0].weights_mut().cells_mut().fill(0.0);
        let out = net.forward(&[0.3, 0.1, 0.9, 0.2, 0.5, 0.7]).unwrap();
        assert_eq!(out, vec![0.5; 4]);
    }

    #[test]
    fn output_delta_scalars() {
        assert_eq!(output_delta(&Real, &[0.8], &[0.0], &[0.16]).unwrap(), vec![0.8 * 0.16]);
        assert!((0.8f64 * 0.16 - 0.128).abs() < 1e-15);
        assert_eq!(output_delta(&Real, &[0.3, 0.7], &[0.3, 0.7], &[0.2, 0.2]).unwrap(), vec![0.0, 0.0]);
        assert!(output_delta(&Real, &[0.3], &[0.3, 0.7], &[0.2]).is_err());
    }

    #[test]
    fn single_edge_bp_and_up() {
        let spec = TopologySpec::new(&[1, 1], &[1]).unwrap();
        let maps = build_maps(&spec, None, 0).unwrap();
        let mut net = Network::new(Real, spec, maps, NetOptions::default()).unwrap();
        net.junctions_mut()[0].weights_mut().set(0, 1.0);
        let j = &net.junctions()[0];
        let mut guard = ClashGuard::new(false);
        let d = j.bp(&Real, &[0.2], &[0.25], &mut guard).unwrap();
        assert_eq!(d, vec![1.0 * 0.2 * 0.25]);

        let bank = BankedMemory::from_items(1, &[0.5], 0.0);
        let mut j = j.clone();
        j.up(&Real, &[0.2], &bank, 0.5, false, &mut guard).unwrap();
        assert!((j.weights().get(0) - 0.95).abs() < 1e-15);
        j.up(&Real, &[0.0], &bank, 0.5, true, &mut guard).unwrap();
        assert!((j.weights().get(0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let spec = TopologySpec::new(&[4, 3, 2], &[3, 2]).unwrap();
        let maps = build_maps(&spec, None, 1).unwrap();
        let opts = NetOptions {
            learning_rate: 0.0,
            ..NetOptions::default()
        };
        let mut net = Network::new(Real, spec, maps, opts).unwrap();
        let before = net.clone();
        net.run_sequential(&[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0]).unwrap();
        for (a, b) in net.junctions().iter().zip(before.junctions()) {
            assert_eq!(a.weights(), b.weights());
            assert_eq!(a.biases(), b.biases());
        }
    }

    #[test]
    fn schedule_matches_worked_example() {
        // J = 2: when junction 1 does FF on n+2, junction 2 does FF n+1,
        // BP n, UP n-1 and junction 1 does BP n-1, UP n-2.
        let n = 10;
        let p = PipelineState {
            t: n + 2,
            junctions: 2,
        };
        assert_eq!(
            p.ops(1),
            JunctionOps {
                ff: Some(n + 2),
                bp: Some(n - 1),
                up: Some(n - 2)
            }
        );
        assert_eq!(
            p.ops(2),
            JunctionOps {
                ff: Some(n + 1),
                bp: Some(n),
                up: Some(n - 1)
            }
        );
        let early = PipelineState { t: 1, junctions: 2 };
        assert_eq!(early.ops(1).bp, None);
        assert_eq!(early.ops(2).ff, Some(0));
    }

    #[test]
    fn banked_network_rejects_bad_geometry() {
        let spec = TopologySpec::new(&[6, 4], &[2]).unwrap();
        let maps = build_maps(&spec, None, 0).unwrap();
        let opts = NetOptions {
            banked: true,
            ..NetOptions::default()
        };
        // z = fan-in = 3 passes the divisibility checks, but the table is
        // not a hardware interleaver.
        assert!(matches!(
            Network::new(Real, spec.clone(), maps, opts),
            Err(EngineError::Hardware(_))
        ));
        assert!(build_maps(&spec, Some(&HardwareConfig::new(vec![4], 1.0)), 0).is_err());
    }

    #[test]
    fn fixed_network_runs() {
        let fmt = "fx10:3.7".parse().unwrap();
        let spec = TopologySpec::new(&[8, 4, 2], &[2, 2]).unwrap();
        let hw = HardwareConfig::new(vec![4, 4], 1.0);
        let maps = build_maps(&spec, Some(&hw), 0).unwrap();
        let opts = NetOptions {
            banked: true,
            learning_rate: 0.5,
            ..NetOptions::default()
        };
        let mut net = Network::new(Fixed(fmt), spec, maps, opts).unwrap();
        let x = net.quantize_input(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        let y = net.quantize_input(&[1.0, 0.0]);
        let loss = net.run_sequential(&x, &y).unwrap();
        assert!(loss > 0.0);
    }
}
