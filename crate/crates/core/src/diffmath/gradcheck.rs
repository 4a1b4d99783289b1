use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Maximum relative error per input between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

/// Gradient of the scalar program `f` with respect to each input, by reverse mode.
pub fn analytic_gradients<F>(f: F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.detached(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            Tensor::raw(t.shape().to_vec(), g)
        })
        .collect())
}

/// Central-difference gradient `(f(x+h) − f(x−h)) / 2h` for every input element.
pub fn numeric_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.detached())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
        }
        grads.push(Tensor::raw(inputs[i].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Smallest step [`refined_numeric_gradients`] halves down to.
pub const MIN_STEP: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct RefinedGradients {
    pub grads: Vec<Tensor>,
    /// Elements whose estimate needed a step below the initial one.
    pub refined: usize,
    /// Elements whose estimates still disagreed at [`MIN_STEP`].
    pub unresolved: usize,
}

/// Central differences with per-element step halving: starting from `step`,
/// the step halves until two consecutive estimates agree within `agreement`
/// (relative, `max(1, ·)` denominator). A relu kink closer than `h` to the
/// evaluation point biases the estimate at `h` but not at steps below its
/// distance. Inputs with `selected[i] == false` get zeros.
pub fn refined_numeric_gradients<F>(
    f: F,
    inputs: &[Tensor],
    selected: &[bool],
    step: f64,
    agreement: f64,
) -> Result<RefinedGradients>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.detached())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    let mut central = |i: usize, k: usize, h: f64| -> Result<f64> {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[k] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[k] = orig;
        Ok((plus - minus) / (2.0 * h))
    };
    let (mut refined, mut unresolved) = (0, 0);
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        if selected.get(i).copied().unwrap_or(false) {
            for (k, gk) in g.iter_mut().enumerate() {
                let mut h = step;
                let mut coarse = central(i, k, h)?;
                loop {
                    let fine = central(i, k, h / 2.0)?;
                    let gap = (coarse - fine).abs() / 1f64.max(coarse.abs()).max(fine.abs());
                    *gk = fine;
                    if gap <= agreement {
                        break;
                    }
                    h /= 2.0;
                    if h < MIN_STEP {
                        unresolved += 1;
                        break;
                    }
                    coarse = fine;
                }
                if h < step {
                    refined += 1;
                }
            }
        }
        grads.push(Tensor::raw(input.shape().to_vec(), g));
    }
    Ok(RefinedGradients { grads, refined, unresolved })
}

/// Relative error with a `max(1, |a|, |n|)` denominator, maximized per input.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tolerance: f64) -> GradCheckReport {
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
                .fold(0.0, f64::max)
        })
        .collect();
    GradCheckReport {
        max_rel_error,
        tolerance,
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, step)?;
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}
