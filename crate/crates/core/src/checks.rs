//! Gradient-check suite over every primitive, every block and the whole
//! network.
//!
//! Primitives and blocks are checked with analytic gradients in `f32` and
//! central differences replayed in `f64`, so the measured error is that of
//! the backward rules rather than `f32` cancellation in the difference
//! quotient. The network is checked natively in `f32` in eval mode and in
//! `f64` in train mode with a smaller step (see [`check_network`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, OpKind, Padding, Tape, Var};
use crate::blocks::{Block, BlockKind, BlockOptions, DecoderBlockParams, StageOrder};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_wide, GradCheckConfig, GradCheckReport, Probe, Sampling};
use crate::model::{DiceLossProbe, Model, ModelSpec};
use crate::nn::{BnConfig, Context, Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-3;
pub const BLOCK_TOLERANCE: f64 = 1e-3;
pub const NETWORK_TOLERANCE: f64 = 5e-2;
pub const STEP: f64 = 1e-3;
const BN_EPS: f64 = 1e-3;
const DROPOUT_RATE: f64 = 0.5;

pub const OPS: [&str; 13] = [
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "sigmoid",
    "concat",
    "add",
    "mul",
    "dropout",
    "sum",
    "dice_loss",
];

pub const BLOCKS: [&str; 4] = ["block_co", "block_identity", "block_multires", "block_decoder"];

pub const NETWORK: [&str; 3] = ["network_train_f32", "network_eval_f32", "network_train_f64"];

/// Every check name the suite knows.
pub fn all_checks() -> Vec<&'static str> {
    OPS.iter().chain(&BLOCKS).chain(&NETWORK).copied().collect()
}

/// Geometry of one random primitive case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Second channel count: conv outputs, second concat input.
    pub c2: usize,
    /// Odd conv kernel side.
    pub kernel: usize,
    pub stride: usize,
    /// Explicit conv padding; `None` means "same".
    pub pad: Option<usize>,
}

impl CaseShape {
    pub fn random(rng: &mut impl Rng) -> Self {
        let kernel = [1, 3, 5][rng.random_range(0..3)];
        let same = rng.random_bool(0.5);
        CaseShape {
            n: rng.random_range(1..=2),
            c: rng.random_range(1..=3),
            h: rng.random_range(2..=6),
            w: rng.random_range(2..=6),
            c2: rng.random_range(1..=3),
            kernel,
            stride: if same { 1 } else { rng.random_range(1..=2) },
            pad: if same { None } else { Some(rng.random_range(0..=kernel / 2 + 1)) },
        }
    }

    fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn even_dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h.div_ceil(2) * 2, self.w.div_ceil(2) * 2]
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: impl Into<Vec<usize>>, lo: f32, hi: f32) -> Tensor<f32> {
    let dims = dims.into();
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// One primitive with its constant operands.
enum OpProbe {
    Conv { stride: usize, padding: Padding },
    MaxPool,
    Upsample,
    BnTrain,
    BnEval { mean: Vec<f32>, var: Vec<f32> },
    Relu,
    Sigmoid,
    Concat,
    Add,
    Mul,
    Dropout { seed: u64 },
    Sum,
    Dice { target: Tensor<f32> },
}

impl Probe for OpProbe {
    fn eval<S: Scalar>(&self, t: &mut Tape<S>, v: &[Var]) -> Result<Var> {
        let cast = |xs: &[f32]| xs.iter().map(|&x| S::from_f64_lossy(x as f64)).collect::<Vec<S>>();
        match self {
            OpProbe::Conv { stride, padding } => t.conv2d(v[0], v[1], Some(v[2]), *stride, *padding),
            OpProbe::MaxPool => t.maxpool2d(v[0]),
            OpProbe::Upsample => t.upsample2x(v[0]),
            OpProbe::BnTrain => Ok(t.batchnorm_train(v[0], v[1], v[2], BN_EPS)?.0),
            OpProbe::BnEval { mean, var } => t.batchnorm_eval(v[0], v[1], v[2], &cast(mean), &cast(var), BN_EPS),
            OpProbe::Relu => Ok(t.relu(v[0])),
            OpProbe::Sigmoid => Ok(t.sigmoid(v[0])),
            OpProbe::Concat => t.concat_channels(&[v[0], v[1]]),
            OpProbe::Add => t.add(v[0], v[1]),
            OpProbe::Mul => t.mul(v[0], v[1]),
            OpProbe::Dropout { seed } => t.dropout(v[0], DROPOUT_RATE, Mode::Train, &mut ChaCha8Rng::seed_from_u64(*seed)),
            OpProbe::Sum => Ok(t.sum(v[0])),
            OpProbe::Dice { target } => t.dice_loss(v[0], &target.cast(), 1.0),
        }
    }
}

/// Result of one random case.
#[derive(Clone, Debug)]
pub struct CaseResult {
    /// Error against the `f64` finite-difference reference.
    pub wide: GradCheckReport,
    /// Error against `f32` finite differences, for information.
    pub native: GradCheckReport,
}

fn build_op(op: &str, shape: &CaseShape, rng: &mut ChaCha8Rng) -> Result<(OpProbe, Vec<Tensor<f32>>)> {
    let x = |rng: &mut ChaCha8Rng| uniform(rng, shape.dims(), -1.0, 1.0);
    Ok(match op {
        "conv2d" => {
            let padding = shape.pad.map_or(Padding::Same, Padding::Explicit);
            let stride = if shape.pad.is_none() { 1 } else { shape.stride };
            let pad = shape.pad.unwrap_or(shape.kernel / 2);
            // Grow the image so the kernel always fits.
            let h = shape.h.max(shape.kernel.saturating_sub(2 * pad));
            let w = shape.w.max(shape.kernel.saturating_sub(2 * pad));
            let xs = uniform(rng, [shape.n, shape.c, h, w], -1.0, 1.0);
            let wt = uniform(rng, [shape.c2, shape.c, shape.kernel, shape.kernel], -1.0, 1.0);
            let b = uniform(rng, [shape.c2], -0.5, 0.5);
            (OpProbe::Conv { stride, padding }, vec![xs, wt, b])
        }
        "maxpool2d" => (OpProbe::MaxPool, vec![uniform(rng, shape.even_dims(), -1.0, 1.0)]),
        "upsample2x" => (OpProbe::Upsample, vec![x(rng)]),
        "batchnorm_train" | "batchnorm_eval" => {
            let mut dims = shape.dims();
            if dims[0] * dims[2] * dims[3] < 4 {
                dims[2] = 2;
                dims[3] = 2;
            }
            let xs = uniform(rng, dims, -1.0, 1.0);
            let gamma = uniform(rng, [shape.c], 0.5, 1.5);
            let beta = uniform(rng, [shape.c], -0.5, 0.5);
            let probe = if op == "batchnorm_train" {
                OpProbe::BnTrain
            } else {
                let mean = (0..shape.c).map(|_| rng.random_range(-0.3..0.3)).collect();
                let var = (0..shape.c).map(|_| rng.random_range(0.5..1.5)).collect();
                OpProbe::BnEval { mean, var }
            };
            (probe, vec![xs, gamma, beta])
        }
        "relu" => (OpProbe::Relu, vec![x(rng)]),
        "sigmoid" => (OpProbe::Sigmoid, vec![uniform(rng, shape.dims(), -4.0, 4.0)]),
        "concat" => {
            let a = x(rng);
            let b = uniform(rng, [shape.n, shape.c2, shape.h, shape.w], -1.0, 1.0);
            (OpProbe::Concat, vec![a, b])
        }
        "add" => (OpProbe::Add, vec![x(rng), x(rng)]),
        "mul" => (OpProbe::Mul, vec![x(rng), x(rng)]),
        "dropout" => (OpProbe::Dropout { seed: rng.random() }, vec![x(rng)]),
        "sum" => (OpProbe::Sum, vec![x(rng)]),
        "dice_loss" => {
            let pred = uniform(rng, shape.dims(), 0.05, 0.95);
            let n = pred.numel();
            let target = Tensor::from_vec(shape.dims(), (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect())?;
            (OpProbe::Dice { target }, vec![pred])
        }
        _ => return Err(Error::InvalidArgument(format!("unknown primitive `{op}`; known: {}", OPS.join(", ")))),
    })
}

/// Checks one random primitive case.
pub fn check_op_case(op: &str, shape: &CaseShape, seed: u64, fault: Option<OpKind>) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (probe, inputs) = build_op(op, shape, &mut rng)?;
    let config = GradCheckConfig::<f32> {
        step: STEP,
        seed,
        sampling: Sampling::All,
        fault,
        skip_branch_changes: true,
        ..Default::default()
    };
    let wide = grad_check_wide(&probe, &inputs, &config)?;
    let native = grad_check(|t: &mut Tape<f32>, v: &[Var]| probe.eval(t, v), &inputs, &config)?;
    Ok(CaseResult { wide, native })
}

/// Summary of one named check across its cases.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
    /// Worst error with the finite differences taken in `f32` as well, when
    /// that differs from the deciding measurement.
    pub native_max_rel_err: Option<f64>,
    pub tolerance: f64,
    /// How the deciding error was measured.
    pub method: &'static str,
}

impl CheckOutcome {
    /// Within tolerance, with at least a quarter of the sampled entries
    /// compared (the rest straddle a kink).
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.checked > 0 && 3 * self.checked >= self.excluded
    }

    pub fn line(&self) -> String {
        let native = self.native_max_rel_err.map(|e| format!(", f32-difference reference {e:.2e}")).unwrap_or_default();
        format!(
            "{:<20} {:<4} max rel err {:.2e} (tol {:.0e}, {}; {} case(s), {} entries, {} excluded{native})",
            self.name,
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.method,
            self.cases,
            self.checked,
            self.excluded
        )
    }
}

fn excluded(r: &GradCheckReport) -> usize {
    r.inputs.iter().map(|i| i.excluded).sum()
}

/// `cases` random cases of one primitive.
pub fn check_op(op: &str, cases: usize, seed: u64, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome {
        name: op.to_string(),
        cases,
        checked: 0,
        excluded: 0,
        max_rel_err: 0.0,
        native_max_rel_err: Some(0.0),
        tolerance: OP_TOLERANCE,
        method: "f32 analytic vs f64 differences, h=1e-3",
    };
    for _ in 0..cases {
        let shape = CaseShape::random(&mut rng);
        let r = check_op_case(op, &shape, rng.random(), fault)?;
        out.checked += r.wide.checked();
        out.excluded += excluded(&r.wide);
        out.max_rel_err = out.max_rel_err.max(r.wide.max_rel_err());
        out.native_max_rel_err = out.native_max_rel_err.map(|e| e.max(r.native.max_rel_err()));
    }
    Ok(out)
}

/// A block with its own parameters, as a function of its input(s) and
/// every trainable parameter, in train mode.
pub struct BlockProbe {
    store: ParamStore<f32>,
    unit: BlockUnit,
    seed: u64,
    pub mode: Mode,
}

enum BlockUnit {
    Plain(Block),
    Decoder(DecoderBlockParams),
}

impl BlockProbe {
    /// `name` is one of [`BLOCKS`]. Inputs are `1×cin×8×8`; the decoder
    /// takes a `1×cin×4×4` deeper input and two `8×8` skips.
    pub fn new(name: &str, cin: usize, filters: usize, seed: u64) -> Result<(Self, Vec<Tensor<f32>>)> {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let opts = BlockOptions { alpha: 1.67, order: StageOrder::ActThenNorm };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
        let (unit, inputs) = match name {
            "block_co" | "block_identity" | "block_multires" => {
                let kind = match name {
                    "block_co" => BlockKind::Co,
                    "block_identity" => BlockKind::Identity,
                    _ => BlockKind::MultiRes,
                };
                let block = Block::new(kind, &mut init, &mut store, "b", cin, filters, opts)?;
                (BlockUnit::Plain(block), vec![uniform(&mut rng, [1, cin, 8, 8], -1.0, 1.0)])
            }
            "block_decoder" => {
                let skips = [cin, cin + 1];
                let dec = DecoderBlockParams::new(&mut init, &mut store, "d", cin, &skips, BlockKind::Co, filters, opts)?;
                let inputs = vec![
                    uniform(&mut rng, [1, cin, 4, 4], -1.0, 1.0),
                    uniform(&mut rng, [1, skips[0], 8, 8], -1.0, 1.0),
                    uniform(&mut rng, [1, skips[1], 8, 8], -1.0, 1.0),
                ];
                (BlockUnit::Decoder(dec), inputs)
            }
            _ => return Err(Error::InvalidArgument(format!("unknown block `{name}`; known: {}", BLOCKS.join(", ")))),
        };
        let mut all = inputs;
        all.extend(store.entries().iter().filter(|e| e.trainable).map(|e| e.value.clone()));
        Ok((BlockProbe { store, unit, seed, mode: Mode::Train }, all))
    }

    fn data_inputs(&self) -> usize {
        match self.unit {
            BlockUnit::Plain(_) => 1,
            BlockUnit::Decoder(_) => 3,
        }
    }
}

impl Probe for BlockProbe {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var> {
        let store = self.store.cast::<S>();
        let k = self.data_inputs();
        let mut params = inputs[k..].iter().copied();
        let vars: Vec<Var> = store
            .entries()
            .iter()
            .map(|e| if e.trainable { params.next().expect("one input per parameter") } else { tape.constant(e.value.clone()) })
            .collect();
        let mut ctx = Context::new(tape, &store, self.mode, BnConfig::default(), self.seed);
        ctx.bind_all(&vars)?;
        match &self.unit {
            BlockUnit::Plain(b) => b.forward(&mut ctx, inputs[0]),
            BlockUnit::Decoder(d) => d.forward(&mut ctx, inputs[0], Some(inputs[1]), Some(inputs[2])),
        }
    }
}

/// `cases` random instances of one block, 1×Cin×8×8, train mode.
pub fn check_block(name: &str, cases: usize, seed: u64, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome {
        name: name.to_string(),
        cases,
        checked: 0,
        excluded: 0,
        max_rel_err: 0.0,
        native_max_rel_err: Some(0.0),
        tolerance: BLOCK_TOLERANCE,
        method: "f32 analytic vs f64 differences, h=1e-3",
    };
    for _ in 0..cases {
        // MultiRes stage widths are F·α/6, F·α/3 and F·α/2, so small F empties a stage.
        let filters = if name == "block_multires" { rng.random_range(4..=6) } else { rng.random_range(2..=4) };
        let cin = rng.random_range(1..=3);
        let case_seed = rng.random();
        let (probe, inputs) = BlockProbe::new(name, cin, filters, case_seed)?;
        let config = GradCheckConfig::<f32> {
            step: STEP,
            seed: case_seed,
            sampling: Sampling::Total(60),
            fault,
            skip_branch_changes: true,
            ..Default::default()
        };
        let wide = grad_check_wide(&probe, &inputs, &config)?;
        let native = grad_check(|t: &mut Tape<f32>, v: &[Var]| probe.eval(t, v), &inputs, &config)?;
        out.checked += wide.checked();
        out.excluded += excluded(&wide);
        out.max_rel_err = out.max_rel_err.max(wide.max_rel_err());
        out.native_max_rel_err = out.native_max_rel_err.map(|e| e.max(native.max_rel_err()));
    }
    Ok(out)
}

/// Random `1×1×size×size` image and binary target with a square lesion.
pub fn network_probe_data<T: Scalar>(size: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = (0..size * size).map(|_| T::from_f64_lossy(rng.random_range(0.0..1.0))).collect();
    let q = size / 4;
    let target = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            if (q..3 * q).contains(&y) && (q..3 * q).contains(&x) { T::one() } else { T::zero() }
        })
        .collect();
    (
        Tensor::from_vec([1, 1, size, size], image).expect("sized"),
        Tensor::from_vec([1, 1, size, size], target).expect("sized"),
    )
}

/// Dice loss of the full default network on a 1×1×32×32 probe,
/// differentiated with respect to `samples` randomly chosen parameters.
///
/// `network_train_f32` is the training graph (batch statistics, dropout)
/// in `f32` with h=1e-3; `network_eval_f32` the inference graph. With
/// hundreds of thousands of ReLUs, a 1e-3 step on one weight often flips
/// some unit, so entries whose step changes a branch are skipped.
/// `network_train_f64` repeats the training graph in `f64` with h=1e-6.
pub fn check_network(name: &str, samples: usize, seed: u64, fault: Option<OpKind>) -> Result<CheckOutcome> {
    match name {
        "network_train_f32" => network_check::<f32>(name, Mode::Train, STEP, samples, seed, fault)
            .map(|o| CheckOutcome { method: "f32 analytic and differences, train mode, h=1e-3", ..o }),
        "network_eval_f32" => network_check::<f32>(name, Mode::Eval, STEP, samples, seed, fault)
            .map(|o| CheckOutcome { method: "f32 analytic and differences, eval mode, h=1e-3", ..o }),
        "network_train_f64" => network_check::<f64>(name, Mode::Train, 1e-6, samples, seed, fault)
            .map(|o| CheckOutcome { method: "f64 analytic and differences, train mode, h=1e-6", ..o }),
        _ => Err(Error::InvalidArgument(format!("unknown network check `{name}`; known: {}", NETWORK.join(", ")))),
    }
}

fn network_check<T: Scalar>(
    name: &str,
    mode: Mode,
    step: f64,
    samples: usize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<CheckOutcome> {
    let spec = ModelSpec { seed, ..ModelSpec::default() }.with_input_size(32, 32);
    let model = Model::<T>::build(spec)?;
    let (image, target) = network_probe_data::<T>(32, seed);
    let probe = DiceLossProbe { model: &model, image, target, mode, dropout_seed: seed, smooth: 1.0 };
    let config = GradCheckConfig::<T> {
        step,
        seed,
        sampling: Sampling::Total(samples),
        fault,
        skip_branch_changes: true,
        ..Default::default()
    };
    let r = grad_check(|t: &mut Tape<T>, v: &[Var]| probe.eval(t, v), &probe.inputs(), &config)?;
    Ok(network_outcome(name, &r))
}

fn network_outcome(name: &str, r: &GradCheckReport) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        cases: 1,
        checked: r.checked(),
        excluded: excluded(r),
        max_rel_err: r.max_rel_err(),
        native_max_rel_err: None,
        tolerance: NETWORK_TOLERANCE,
        method: "",
    }
}

/// Runs the named check, or every check when `only` is `None`.
pub fn run_suite(only: Option<&str>, cases: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let names: Vec<&str> = match only {
        Some(n) if all_checks().contains(&n) => vec![n],
        Some(n) => {
            return Err(Error::InvalidArgument(format!("unknown check `{n}`; known: {}", all_checks().join(", "))));
        }
        None => all_checks(),
    };
    names
        .into_iter()
        .map(|n| {
            if OPS.contains(&n) {
                check_op(n, cases, seed, fault)
            } else if BLOCKS.contains(&n) {
                check_block(n, cases.div_ceil(10), seed, fault)
            } else {
                check_network(n, 60, seed, fault)
            }
        })
        .collect()
}
