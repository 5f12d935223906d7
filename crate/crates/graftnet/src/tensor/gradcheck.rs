//! Finite-difference verification of the tape's backward pass, always in f64.
//! Builders are closures so the same harness checks single ops and whole
//! model composites. Callers are responsible for picking inputs away from
//! kinks (relu/abs/clamp corners) — central differences straddle them.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{GraftError, Result};
use crate::rng::SplitMix64;

/// Central-difference step. Small enough for ~1e-10 truncation error in f64,
/// large enough to stay clear of rounding noise.
pub const H: f64 = 1e-5;

/// Relative error metric used everywhere: |a - n| / max(1, |a|, |n|).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

fn eval<B>(build: &B, inputs: &[Tensor<f64>]) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(GraftError::Autodiff(format!(
            "grad_check target must be scalar, got {:?}",
            tape.value(loss).shape()
        )));
    }
    Ok(tape.value(loss).data()[0])
}

/// Checks every element of every input. Returns the max relative error
/// between analytic and central-difference gradients.
pub fn grad_check<B>(build: B, inputs: &[Tensor<f64>]) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> =
        inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_elements(build, inputs, &all)
}

/// Checks ~`per_tensor` randomly chosen elements of each input; used for
/// composites too large to sweep exhaustively.
pub fn grad_check_sampled<B>(
    build: B,
    inputs: &[Tensor<f64>],
    per_tensor: usize,
    rng: &mut SplitMix64,
) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= per_tensor {
                (0..n).collect()
            } else {
                // sample distinct indices
                let mut chosen: Vec<usize> = Vec::with_capacity(per_tensor);
                while chosen.len() < per_tensor {
                    let ix = rng.below(n);
                    if !chosen.contains(&ix) {
                        chosen.push(ix);
                    }
                }
                chosen
            }
        })
        .collect();
    grad_check_elements(build, inputs, &picks)
}

fn grad_check_elements<B>(
    build: B,
    inputs: &[Tensor<f64>],
    elements: &[Vec<usize>],
) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(GraftError::Autodiff(format!(
            "grad_check target must be scalar, got {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // numeric passes
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, idxs) in elements.iter().enumerate() {
        for &j in idxs {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + H;
            let fp = eval(&build, &work)?;
            work[ti].data_mut()[j] = orig - H;
            let fm = eval(&build, &work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let e = rel_err(analytic[ti][j], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    Ok(worst)
}
