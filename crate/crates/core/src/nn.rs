//! Named parameters, initialization and the per-pass forward context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Gradients, Mode, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered collection of named tensors for a block or a whole network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn cast<S: Scalar>(&self) -> ParamStore<S> {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
            .collect();
        ParamStore { entries }
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Trainable scalars whose names start with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|e| e.trainable && e.name.starts_with(prefix)).map(|e| e.value.numel()).sum()
    }

    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>]) {
        for u in updates {
            let m = T::from_f64_lossy(u.momentum);
            let one_m = T::from_f64_lossy(1.0 - u.momentum);
            for (r, &b) in self.entries[u.mean.0].value.data_mut().iter_mut().zip(&u.batch.mean) {
                *r = m * *r + one_m * b;
            }
            for (r, &b) in self.entries[u.var.0].value.data_mut().iter_mut().zip(&u.batch.var) {
                *r = m * *r + one_m * b;
            }
        }
    }

    /// Replaces every value from `other`; names and shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::InvalidArgument(format!("store sizes differ: {} vs {}", self.len(), other.len())));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::ParamMismatch {
                    name: dst.name.clone(),
                    expected: dst.value.dims().to_vec(),
                    found: src.value.dims().to_vec(),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvParams {
    pub fn param_count(&self) -> usize {
        conv_param_count(self.cin, self.cout, self.kernel)
    }
}

pub fn conv_param_count(cin: usize, cout: usize, kernel: usize) -> usize {
    cin * cout * kernel * kernel + cout
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub fn bn_param_count(channels: usize) -> usize {
    2 * channels
}

/// Deterministic parameter construction: He-uniform conv weights, zero
/// biases, unit gamma, zero beta, running mean 0 and variance 1.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn conv<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> ConvParams {
        let fan_in = (cin * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let n = cout * cin * kernel * kernel;
        let data: Vec<T> = (0..n).map(|_| T::from_f64_lossy(self.rng.random_range(-limit..limit))).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec([cout, cin, kernel, kernel], data).expect("sized above"),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), true);
        ConvParams { weight, bias, cin, cout, kernel }
    }

    pub fn bn<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str, channels: usize) -> BnParams {
        BnParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), false),
            channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { momentum: 0.99, eps: 1e-3 }
    }
}

/// Pending running-statistics update from one train-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchStats<T>,
    pub momentum: f64,
}

/// Shape of a named intermediate feature map, recorded during forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub label: String,
    pub shape: Shape,
}

/// State for one forward pass: the tape, parameter bindings, dropout RNG,
/// pending batch-norm updates and the shape trace.
pub struct Context<'a, T> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bn: BnConfig,
    bound: Vec<Option<Var>>,
    rng: ChaCha8Rng,
    updates: Vec<RunningUpdate<T>>,
    trace: Vec<TraceEntry>,
}

impl<'a, T: Scalar> Context<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode, bn: BnConfig, dropout_seed: u64) -> Self {
        Context {
            tape,
            store,
            mode,
            bn,
            bound: vec![None; store.len()],
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            updates: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Uses `vars` (one per store entry, in order) instead of fresh leaves.
    pub fn bind_all(&mut self, vars: &[Var]) -> Result<()> {
        if vars.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!("expected {} bindings, got {}", self.store.len(), vars.len())));
        }
        self.bound = vars.iter().copied().map(Some).collect();
        Ok(())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Stride-1 convolution with "same" padding.
    pub fn conv(&mut self, x: Var, p: &ConvParams) -> Result<Var> {
        let w = self.param(p.weight);
        let b = self.param(p.bias);
        self.tape.conv2d(x, w, Some(b), 1, Padding::Same)
    }

    pub fn bn(&mut self, x: Var, p: &BnParams) -> Result<Var> {
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        match self.mode {
            Mode::Train => {
                let (y, batch) = self.tape.batchnorm_train(x, gamma, beta, self.bn.eps)?;
                self.updates.push(RunningUpdate {
                    mean: p.running_mean,
                    var: p.running_var,
                    batch,
                    momentum: self.bn.momentum,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.store.get(p.running_mean).value.data();
                let rv = self.store.get(p.running_var).value.data();
                self.tape.batchnorm_eval(x, gamma, beta, rm, rv, self.bn.eps)
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.tape.relu(x)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.mode, &mut self.rng)
    }

    pub fn record(&mut self, label: impl Into<String>, v: Var) {
        let shape = self.tape.shape(v).clone();
        self.trace.push(TraceEntry { label: label.into(), shape });
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        std::mem::take(&mut self.trace)
    }

    pub fn take_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.updates)
    }

    /// Gradient per store entry; zeros for trainable entries the loss did
    /// not reach, `None` for running statistics.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.store
            .entries()
            .iter()
            .zip(&self.bound)
            .map(|(e, b)| {
                if !e.trainable {
                    return None;
                }
                Some(match b {
                    Some(v) => grads.wrt(*v),
                    None => Tensor::zeros(e.value.dims().to_vec()),
                })
            })
            .collect()
    }

    /// Trainable entries that received no gradient signal at all.
    pub fn unreached_params(&self, grads: &Gradients<T>) -> Vec<String> {
        self.store
            .entries()
            .iter()
            .zip(&self.bound)
            .filter(|(e, _)| e.trainable)
            .filter(|(_, b)| match b {
                Some(v) => grads.get(*v).is_none_or(|g| g.iter().all(|x| *x == T::zero())),
                None => true,
            })
            .map(|(e, _)| e.name.clone())
            .collect()
    }
}
