//! Shared test oracles.

#![allow(dead_code)]

pub mod cases;

use iagan_core::rng::{normal_vec, rng_from_seed, derive_seed};
use iagan_core::tensor::{Tape, Tensor, Var};
use iagan_core::Result;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
pub const REL_FLOOR: f64 = 1e-5;

/// Largest tolerated disagreement between the forward and backward
/// one-sided quotients before the stencil is deemed to straddle a kink.
pub const KINK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub coords: usize,
    /// Coordinates whose stencil crossed a non-differentiable point.
    pub skipped: usize,
    pub worst: String,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut rng, n)).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element carries a distinct weight. The 1/√n scaling keeps the
/// loss, and with it the round-off of the difference quotient, at O(1).
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(tape.shape(out), derive_seed(seed, "projection"));
    let k = 1.0 / (r.len() as f64).sqrt();
    let r = Tensor::new(r.shape().to_vec(), r.data().iter().map(|v| v * k).collect())?;
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum_all(p)
}

fn loss_value<F>(f: &F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let l = project(&mut tape, out, seed).expect("projection");
    tape.data(l)[0]
}

/// Compares the tape gradient of `sum(R ⊙ f(inputs))` with central finite
/// differences. Inputs with more than `max_coords` elements are checked on a
/// seeded random subset of coordinates.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, seed: u64, max_coords: usize) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let loss = project(&mut tape, out, seed).expect("projection");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();

    let base = loss_value(&f, inputs, seed);
    let mut rng = rng_from_seed(derive_seed(seed, "coords"));
    let mut report = GradReport { max_rel: 0.0, max_abs: 0.0, coords: 0, skipped: 0, worst: String::new() };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let len = inputs[i].len();
        let mut order: Vec<usize> = (0..len).collect();
        if len > max_coords {
            iagan_core::rng::shuffle(&mut rng, &mut order);
        }
        let mut checked = 0;
        for j in order {
            if checked == max_coords {
                break;
            }
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_EPS;
            let up = loss_value(&f, &work, seed);
            work[i].data_mut()[j] = orig - FD_EPS;
            let down = loss_value(&f, &work, seed);
            work[i].data_mut()[j] = orig;
            let forward = (up - base) / FD_EPS;
            let backward = (base - down) / FD_EPS;
            if (forward - backward).abs() > KINK_TOL * forward.abs().max(backward.abs()).max(REL_FLOOR) {
                report.skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[i][j];
            let rel = rel_error(a, numeric);
            report.coords += 1;
            report.max_abs = report.max_abs.max((a - numeric).abs());
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("input {i} coord {j}: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}

/// Prints one acceptance line and returns whether it passed.
pub fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
