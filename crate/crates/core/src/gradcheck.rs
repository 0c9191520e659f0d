//! Central finite-difference gradient checking.
//!
//! Independent of the tape: the oracle only evaluates a scalar function at
//! perturbed inputs.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct Report {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries left out because the difference stencil straddles a kink.
    pub skipped: usize,
}

pub const DEFAULT_FLOOR: f64 = 1e-3;

/// Compares two gradients entrywise, skipping entries where `mask` is false.
pub fn compare(analytic: &[f64], numeric: &[f64], mask: Option<&[bool]>) -> Report {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = Report { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
    for i in 0..analytic.len() {
        if mask.is_some_and(|m| !m[i]) {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let e = relative_error(analytic[i], numeric[i], DEFAULT_FLOOR);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = e;
            report.worst_index = i;
        }
    }
    report
}

/// Entries where the central differences at `h` and `h / 10` disagree by
/// more than this are treated as non-smooth: a relu sign flip or a pooling
/// argmax change happened inside the stencil.
pub const KINK_TOLERANCE: f64 = 1e-3;

/// Checks every input of a scalar-valued tape program against central
/// differences, returning one report per input.
pub fn check_program<F>(inputs: &[Tensor<f64>], program: F) -> Vec<Report>
where
    F: Fn(&mut crate::Tape<f64>, &[crate::Var]) -> crate::tensor::Result<crate::Var>,
{
    use crate::Tape;
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = program(&mut tape, &vars).expect("program runs");
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect();
    drop(tape);

    (0..inputs.len())
        .map(|which| {
            let eval = |probe: &Tensor<f64>| {
                let mut t = Tape::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| t.constant(if i == which { probe.clone() } else { x.clone() }))
                    .collect();
                let out = program(&mut t, &vars).expect("program runs");
                t.value(out).item()
            };
            let numeric = numeric_gradient(&inputs[which], DEFAULT_STEP, &eval);
            let fine = numeric_gradient(&inputs[which], DEFAULT_STEP / 10.0, &eval);
            let smooth: Vec<bool> = numeric
                .data()
                .iter()
                .zip(fine.data())
                .map(|(&a, &b)| relative_error(a, b, DEFAULT_FLOOR) <= KINK_TOLERANCE)
                .collect();
            compare(analytic[which].data(), numeric.data(), Some(&smooth))
        })
        .collect()
}
