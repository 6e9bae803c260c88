//! Central finite-difference gradient checking.
//!
//! The function under test maps input leaves to an output node. A random
//! projection `L = Σ wᵢ·outᵢ` (fixed by `seed`) turns any output into a
//! scalar; scalar outputs use `w = 1`. Numeric derivatives are formed as
//! `Σ wᵢ (out⁺ᵢ − out⁻ᵢ) / (h⁺ + h⁻)` in `f64`, where `h±` are the steps
//! actually realised after rounding the perturbed input.
//!
//! [`grad_check`] evaluates the finite differences in the same precision as
//! the analytic pass. In 32-bit, rounding of the forward outputs puts a noise
//! floor of roughly `1e-4` absolute on each numeric derivative.
//! [`grad_check_wide`] keeps the analytic gradients in `T` but replays the
//! function in `f64` for the finite differences, which removes that floor
//! without changing the step.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which input entries get a numeric derivative.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    All,
    /// At most this many entries per input.
    PerInput(usize),
    /// This many entries drawn uniformly over all scalars of all inputs.
    Total(usize),
}

pub struct GradCheckConfig<'a, T> {
    pub step: f64,
    /// Denominator floor for the relative error `|a−n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
    pub sampling: Sampling,
    /// Returns true for `(input, entry, value)` triples to leave out, e.g.
    /// inputs sitting on a ReLU kink.
    pub exclude: Option<&'a dyn Fn(usize, usize, T) -> bool>,
    /// Corrupts the backward rule of one op kind on the analytic pass.
    pub fault: Option<OpKind>,
    /// Leaves out entries whose ±step perturbation changes a ReLU sign or a
    /// max-pool argmax anywhere in the graph, where the difference quotient
    /// straddles a kink.
    pub skip_branch_changes: bool,
}

impl<T: Scalar> Default for GradCheckConfig<'_, T> {
    fn default() -> Self {
        GradCheckConfig { step: T::FD_STEP, floor: 1e-2, seed: 0x5eed, sampling: Sampling::All, exclude: None, fault: None, skip_branch_changes: false }
    }
}

/// A function that can be recorded on a tape of any precision.
pub trait Probe {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    /// Entry index of the worst error, if any entry was checked.
    pub worst_entry: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Output values and the branch signature of one evaluation.
fn evaluate<S, F>(f: &F, inputs: &[Tensor<S>]) -> Result<(Vec<f64>, u64)>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).data().iter().map(|v| v.as_f64()).collect(), tape.branch_signature()))
}

/// Finite differences in the precision of `inputs`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], config: &GradCheckConfig<'_, T>) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check(&f, &f, inputs, config)
}

/// Analytic gradients in `T`, finite differences replayed in `f64`.
pub fn grad_check_wide<T, P>(probe: &P, inputs: &[Tensor<T>], config: &GradCheckConfig<'_, T>) -> Result<GradCheckReport>
where
    T: Scalar,
    P: Probe,
{
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    check(&|t: &mut Tape<T>, v: &[Var]| probe.eval(t, v), &|t: &mut Tape<f64>, v: &[Var]| probe.eval(t, v), &wide, config)
}

fn check<T, S, F, G>(
    analytic_fn: &F,
    numeric_fn: &G,
    numeric_inputs: &[Tensor<S>],
    config: &GradCheckConfig<'_, T>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    S: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor<T>> = numeric_inputs.iter().map(Tensor::cast).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // analytic pass
    let mut tape = Tape::new();
    if let Some(kind) = config.fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = analytic_fn(&mut tape, &vars)?;
    let out_shape = tape.shape(out).clone();
    let weights: Vec<T> = if out_shape.numel() == 1 {
        vec![T::one()]
    } else {
        (0..out_shape.numel()).map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).collect()
    };
    let w = tape.constant(Tensor::from_vec(out_shape.0.clone(), weights.clone())?);
    let projected = tape.mul(out, w)?;
    let loss = tape.sum(projected);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let selected: Vec<Vec<usize>> = match config.sampling {
        Sampling::All => inputs.iter().map(|t| (0..t.numel()).collect()).collect(),
        Sampling::PerInput(k) => inputs
            .iter()
            .map(|t| {
                let mut idx = if t.numel() <= k { (0..t.numel()).collect() } else { sample(&mut rng, t.numel(), k).into_vec() };
                idx.sort_unstable();
                idx
            })
            .collect(),
        Sampling::Total(k) => {
            let total: usize = inputs.iter().map(|t| t.numel()).sum();
            if total == 0 {
                return Err(Error::InvalidArgument("grad_check: no input entries".into()));
            }
            let mut per: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
            let mut flat = sample(&mut rng, total, k.min(total)).into_vec();
            flat.sort_unstable();
            let mut offset = 0;
            let mut input = 0;
            for g in flat {
                while g >= offset + inputs[input].numel() {
                    offset += inputs[input].numel();
                    input += 1;
                }
                per[input].push(g - offset);
            }
            per
        }
    };

    let base_branch = if config.skip_branch_changes { Some(evaluate(numeric_fn, numeric_inputs)?.1) } else { None };
    let mut work: Vec<Tensor<S>> = numeric_inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, entries) in selected.iter().enumerate() {
        let mut report = InputReport {
            input: i,
            max_rel_err: 0.0,
            worst_entry: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            checked: 0,
            excluded: 0,
        };
        for &j in entries {
            if config.exclude.is_some_and(|ex| ex(i, j, inputs[i].data()[j])) {
                report.excluded += 1;
                continue;
            }
            let x0 = numeric_inputs[i].data()[j];
            let xp = S::from_f64_lossy(x0.as_f64() + config.step);
            let xm = S::from_f64_lossy(x0.as_f64() - config.step);
            work[i].data_mut()[j] = xp;
            let (plus, branch_plus) = evaluate(numeric_fn, &work)?;
            work[i].data_mut()[j] = xm;
            let (minus, branch_minus) = evaluate(numeric_fn, &work)?;
            work[i].data_mut()[j] = x0;
            if base_branch.is_some_and(|b| b != branch_plus || b != branch_minus) {
                report.excluded += 1;
                continue;
            }
            let diff: f64 =
                plus.iter().zip(&minus).zip(&weights).map(|((p, m), w)| w.as_f64() * (p - m)).sum();
            let numeric = diff / (xp.as_f64() - xm.as_f64());
            let a = analytic[i].data()[j].as_f64();
            let err = relative_error(a, numeric, config.floor);
            if !err.is_finite() {
                return Err(Error::InvalidArgument(format!("grad_check: non-finite error at input {i} entry {j}")));
            }
            report.checked += 1;
            if report.worst_entry.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_entry = Some(j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Padding;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    struct ConvProbe;

    impl Probe for ConvProbe {
        fn eval<S: Scalar>(&self, t: &mut Tape<S>, v: &[Var]) -> Result<Var> {
            t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)
        }
    }

    fn conv_inputs() -> [Tensor<f32>; 3] {
        let x = rand_tensor([1, 2, 5, 5], 1);
        let w = rand_tensor([3, 2, 3, 3], 2);
        let b = Tensor::from_vec([3], vec![0.1f32, -0.2, 0.3]).unwrap();
        [x, w, b]
    }

    #[test]
    fn conv_passes_in_f32_with_wide_reference() {
        let report = grad_check_wide(&ConvProbe, &conv_inputs(), &GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn conv_passes_natively_in_f64() {
        let inputs: Vec<Tensor<f64>> = conv_inputs().iter().map(Tensor::cast).collect();
        let report = grad_check(|t, v| ConvProbe.eval(t, v), &inputs, &GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn relu_kink_excluded() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![0.0f64, 0.5, -0.5, 0.0]).unwrap();
        let exclude = |_: usize, _: usize, v: f64| v.abs() < 1e-6;
        let config = GradCheckConfig { exclude: Some(&exclude), ..Default::default() };
        let report = grad_check(|t, v| Ok(t.relu(v[0])), &[x], &config).unwrap();
        assert_eq!(report.inputs[0].excluded, 2);
        assert_eq!(report.inputs[0].checked, 2);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = rand_tensor([1, 1, 4, 4], 9).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
        let config = GradCheckConfig { fault: Some(OpKind::Relu), ..Default::default() };
        let report = grad_check(|t, v| Ok(t.relu(v[0])), &[x], &config).unwrap();
        assert!(!report.passes(1e-3));
        assert!(report.max_rel_err() > 0.4);
    }

    #[test]
    fn total_sampling_picks_requested_count() {
        let a = rand_tensor([1, 1, 3, 3], 4);
        let b = rand_tensor([1, 1, 2, 2], 5);
        let config = GradCheckConfig { sampling: Sampling::Total(6), ..Default::default() };
        let report = grad_check(|t, v| {
            let p = t.maxpool2d(v[1])?;
            let s1 = t.sum(v[0]);
            let s2 = t.sum(p);
            t.add(s1, s2)
        }, &[a, b], &config)
        .unwrap();
        assert_eq!(report.checked(), 6);
    }
}
