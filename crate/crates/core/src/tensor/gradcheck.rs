//! Central-difference gradient verification.

use super::{Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements skipped because the function has a kink within `eps`
    /// (max-pool or max-selection ties, ReLU at zero).
    pub masked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of the scalar graph `f` against central
/// differences with step `eps` for every element of every input.
///
/// An element is masked when either the central estimates at `eps` and
/// `eps / 2` disagree, or the one-sided slopes differ by an amount that does
/// not shrink with the step. Both only happen near non-differentiable points.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let f0 = tape.scalar(out);

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                probe[k].data_mut()[i] = x + delta;
                let v = eval(&f, &probe);
                probe[k].data_mut()[i] = x;
                v
            };
            let (p1, m1) = (at(eps)?, at(-eps)?);
            let (p2, m2) = (at(eps / 2.0)?, at(-eps / 2.0)?);
            let c1 = (p1 - m1) / (2.0 * eps);
            let c2 = (p2 - m2) / eps;
            let j1 = (p1 + m1 - 2.0 * f0).abs() / eps;
            let j2 = (p2 + m2 - 2.0 * f0).abs() / (eps / 2.0);
            let scale = c1.abs().max(c2.abs()).max(1e-8);
            let central_disagree = (c1 - c2).abs() > 1e-6 * scale + 1e-9;
            let slope_jump = j2 > 1e-6 * c2.abs().max(1.0) && j2 > 0.75 * j1;
            if central_disagree || slope_jump {
                report.masked += 1;
                continue;
            }
            let a = analytic[i];
            let err = (a - c1).abs() / a.abs().max(c1.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
