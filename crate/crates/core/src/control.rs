//! Policies: baselines, solver-backed feedbacks, glued regime-local feedbacks
//! and perturbations, plus the policy/solve iteration shared by both solvers.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::adjoint::AdjointSolution;
use crate::error::{Error, Result};
use crate::hamiltonian::{project_control, ControlModel};
use crate::model::ProblemSpec;
use crate::regime::Regime;
use crate::riccati::RiccatiSolution;
use crate::simulate::{simulate_training_set, summarize, PathSet};

/// Time profile of a perturbation direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Constant,
    /// Raised cosine centered at `center` with half-width `width`.
    Bump { center: f64, width: f64 },
}

impl Shape {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Shape::Constant => 1.0,
            Shape::Bump { center, width } => {
                let d = (t - center).abs();
                if d >= width {
                    0.0
                } else {
                    0.5 * (1.0 + (PI * d / width).cos())
                }
            }
        }
    }
}

/// Open-loop direction δ(t) added to a policy's output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    /// Node receiving the perturbation; `None` perturbs every surviving node.
    pub node: Option<usize>,
    pub shape: Shape,
    /// Sign and size of the direction; the magnitude h multiplies it.
    pub scale: f64,
}

impl Perturbation {
    pub fn value(&self, t: f64) -> f64 {
        self.scale * self.shape.value(t)
    }

    pub fn label(&self) -> String {
        let node = self.node.map_or("all".to_string(), |i| (i + 1).to_string());
        let shape = match self.shape {
            Shape::Constant => "const".to_string(),
            Shape::Bump { center, .. } => format!("bump@{center:?}"),
        };
        let sign = if self.scale < 0.0 { "-" } else { "+" };
        format!("{sign}{shape}[{node}]")
    }
}

/// Twenty directions: both signs of a constant and of nine raised-cosine bumps
/// centered at T·k/10 with half-width T/10.
pub fn standard_directions(horizon: f64, scale: f64) -> Vec<Perturbation> {
    let mut shapes = vec![Shape::Constant];
    for k in 1..=9 {
        shapes.push(Shape::Bump { center: horizon * k as f64 / 10.0, width: horizon / 10.0 });
    }
    let mut out = Vec::with_capacity(20);
    for s in shapes {
        for sign in [1.0, -1.0] {
            out.push(Perturbation { node: None, shape: s, scale: sign * scale });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub enum Policy {
    Zero,
    Constant(Vec<f64>),
    /// a_i = gain_i x_i + offset_i.
    Affine { gain: Vec<f64>, offset: Vec<f64> },
    /// a = P x − φ from the recursive Riccati tables.
    Riccati(Arc<RiccatiSolution>),
    /// a = argmin_a H(·, a, Ŷ) with Ŷ the adjoint continuation estimate.
    Adjoint(Arc<AdjointSolution>),
    /// Regime-local feedback solved without continuation values.
    Glued(Arc<Policy>),
    Perturbed { base: Arc<Policy>, direction: Perturbation, h: f64 },
    /// weight·new + (1 − weight)·old, both projected.
    Blend { new: Arc<Policy>, old: Arc<Policy>, weight: f64 },
}

impl Policy {
    pub fn zero() -> Policy {
        Policy::Zero
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Zero => "zero",
            Policy::Constant(_) => "constant",
            Policy::Affine { .. } => "affine",
            Policy::Riccati(_) => "riccati_feedback",
            Policy::Adjoint(_) => "adjoint_feedback",
            Policy::Glued(_) => "glued",
            Policy::Perturbed { .. } => "perturbed",
            Policy::Blend { .. } => "blend",
        }
    }

    pub fn perturbed(self: &Arc<Policy>, direction: Perturbation, h: f64) -> Policy {
        Policy::Perturbed { base: Arc::clone(self), direction, h }
    }

    /// Control at grid step `m` in `regime`, projected onto the box, with
    /// defaulted components 0.
    pub fn control_into(&self, spec: &ProblemSpec, regime: &Regime, m: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Policy::Zero => out.iter_mut().for_each(|a| *a = 0.0),
            Policy::Constant(c) => out.copy_from_slice(c),
            Policy::Affine { gain, offset } => {
                for i in 0..out.len() {
                    out[i] = gain[i] * x[i] + offset[i];
                }
            }
            Policy::Riccati(sol) => sol.feedback_into(regime, m, x, out)?,
            Policy::Adjoint(sol) => sol.feedback_into(spec, regime, m, x, out)?,
            Policy::Glued(inner) => inner.control_into(spec, regime, m, x, out)?,
            Policy::Perturbed { base, direction, h } => {
                base.control_into(spec, regime, m, x, out)?;
                let d = h * direction.value(spec.time(m));
                for (i, a) in out.iter_mut().enumerate() {
                    if direction.node.is_none_or(|k| k == i) {
                        *a += d;
                    }
                }
            }
            Policy::Blend { new, old, weight } => {
                new.control_into(spec, regime, m, x, out)?;
                let mut buf = [0.0f64; 16];
                let prev = &mut buf[..out.len()];
                old.control_into(spec, regime, m, x, prev)?;
                for (a, b) in out.iter_mut().zip(prev.iter()) {
                    *a = weight * *a + (1.0 - weight) * b;
                }
            }
        }
        project_control(spec, regime, out);
        Ok(())
    }
}

/// Feedback value of `policy` at (regime, t, x).
pub fn feedback(policy: &Policy, spec: &ProblemSpec, regime: &Regime, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if spec.tree().id(regime).is_none() {
        return Err(Error::UncoveredRegime(format!("regime {regime} is not active")));
    }
    let mut out = vec![0.0; spec.n];
    policy.control_into(spec, regime, spec.step_of(t).min(spec.steps() - 1), x, &mut out)?;
    Ok(out)
}

/// Glued policy from a solution solved with terminal values ∂_x G only.
pub fn build_glued(standalone: Policy) -> Result<Policy> {
    let stitched = match &standalone {
        Policy::Riccati(s) => s.stitched,
        Policy::Adjoint(s) => s.stitched,
        _ => return Err(Error::Contract("glued policies need a solver-backed feedback".into())),
    };
    if stitched {
        return Err(Error::Contract("glued policy built from a stitched solution".into()));
    }
    Ok(Policy::Glued(Arc::new(standalone)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardRound {
    pub round: usize,
    /// Mean organic training cost of the policy that generated this round's paths.
    pub cost: f64,
    pub std_error: f64,
    /// sup |α_new − α_old| / (1 + sup |α_new|) over training states.
    pub policy_change: f64,
}

/// Alternate simulate → solve → feedback, starting from the zero policy. With
/// damping below 1 the returned solution's own feedback is the last undamped
/// iterate, which coincides with the blended policy at the fixed point.
pub(crate) fn iterate<S>(
    model: &dyn ControlModel,
    solve: impl Fn(&PathSet) -> Result<S>,
    to_policy: impl Fn(Arc<S>) -> Policy,
) -> Result<(Arc<S>, Vec<PicardRound>)> {
    let spec = model.spec();
    let mut policy = Arc::new(Policy::Zero);
    let theta = spec.solver.picard_damping;
    let mut rounds: Vec<PicardRound> = Vec::new();
    let mut last: Option<Arc<S>> = None;
    for r in 0..spec.solver.max_picard.max(1) {
        let set = simulate_training_set(model, &policy)?;
        let costs: Vec<f64> = set.organic().map(|p| p.total_cost()).collect();
        let (cost, std_error) = summarize(&costs);
        let sol = Arc::new(solve(&set)?);
        let fresh = to_policy(Arc::clone(&sol));
        let next = if theta < 1.0 && r > 0 {
            Arc::new(Policy::Blend { new: Arc::new(fresh), old: Arc::clone(&policy), weight: theta })
        } else {
            Arc::new(fresh)
        };
        let policy_change = policy_change(spec, &set, &policy, &next)?;
        rounds.push(PicardRound { round: r + 1, cost, std_error, policy_change });
        policy = next;
        last = Some(sol);
        let stop = match spec.solver.picard_tol {
            Some(tol) => policy_change <= tol,
            None => r >= 1 && rounds[r - 1].cost - cost <= std_error,
        };
        if stop {
            break;
        }
    }
    Ok((last.expect("at least one round"), rounds))
}

fn policy_change(spec: &ProblemSpec, set: &PathSet, old: &Policy, new: &Policy) -> Result<f64> {
    let n = spec.n;
    let per_path: Vec<Result<(f64, f64)>> = set
        .paths
        .par_iter()
        .filter(|p| !p.synthetic)
        .map(|p| {
            let mut a0 = vec![0.0; n];
            let mut a1 = vec![0.0; n];
            let (mut diff, mut size) = (0.0f64, 0.0f64);
            for step in p.start_step..p.end_step().min(spec.steps()) {
                let regime = p.regime_at(step);
                if regime.is_terminal() {
                    break;
                }
                let x = p.state(step);
                old.control_into(spec, &regime, step, x, &mut a0)?;
                new.control_into(spec, &regime, step, x, &mut a1)?;
                for i in 0..n {
                    diff = diff.max((a1[i] - a0[i]).abs());
                    size = size.max(a1[i].abs());
                }
            }
            Ok((diff, size))
        })
        .collect();
    let (mut diff, mut size) = (0.0f64, 0.0f64);
    for r in per_path {
        let (d, s) = r?;
        diff = diff.max(d);
        size = size.max(s);
    }
    Ok(diff / (1.0 + size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bumps_are_localized() {
        let s = Shape::Bump { center: 0.5, width: 0.1 };
        assert_eq!(s.value(0.5), 1.0);
        assert_eq!(s.value(0.6), 0.0);
        assert!((s.value(0.55) - 0.5).abs() < 1e-12);
        assert_eq!(standard_directions(1.0, 1.0).len(), 20);
    }
}
