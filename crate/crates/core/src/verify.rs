//! Maximum-principle checks: the variational inequality for the control,
//! the convexity hypotheses, perturbation optimality and paired policy
//! comparisons under common random numbers.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::adjoint::{bsde_residual, solve_adjoint, tower_samples, AdjointSolution};
use crate::backward::{RegimeTables, StitchCheck};
use crate::control::{Perturbation, Policy};
use crate::error::Result;
use crate::hamiltonian::{ControlModel, HamiltonianInput};
use crate::model::{num, ProblemSpec};
use crate::regime::Regime;
use crate::rng::{NoiseStream, StreamDomain, StreamKey};
use crate::simulate::{path_costs, simulate_keyed, simulate_training_set, summarize, PathSet, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub check: String,
    pub instance: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n_samples: usize,
}

impl ReportRow {
    pub fn new(check: impl Into<String>, instance: &str, statistic: f64, threshold: f64, pass: bool, n_samples: usize) -> ReportRow {
        ReportRow { check: check.into(), instance: instance.to_string(), statistic, threshold, pass, n_samples }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationReport {
    pub rows: Vec<ReportRow>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = ReportRow>) {
        self.rows.extend(rows);
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "check,instance,statistic,threshold,pass,n_samples")?;
        for r in &self.rows {
            writeln!(
                out,
                "\"{}\",\"{}\",{},{},{},{}",
                r.check.replace('"', "'"),
                r.instance.replace('"', "'"),
                num(r.statistic),
                num(r.threshold),
                r.pass,
                r.n_samples
            )?;
        }
        Ok(())
    }
}

/// Trial controls α̃ for the variational inequality.
#[derive(Clone, Debug, PartialEq)]
pub enum Trials {
    /// α̃ = ᾱ ± scale·e_i: the local form of the inequality for unbounded A.
    Relative { scale: f64 },
    /// α̃ with component i replaced by the box's lower end, upper end and
    /// midpoint (coordinate corners and midpoints of A).
    BoxPoints,
    /// Explicit constant controls.
    Fixed(Vec<Vec<f64>>),
}

/// Default trials: box points when bounded, otherwise unit vectors scaled by
/// the mean cross-sectional state spread (at least 1).
pub fn default_trials(spec: &ProblemSpec, paths: &[Trajectory]) -> Trials {
    if spec.is_bounded() {
        return Trials::BoxPoints;
    }
    let mut acc = Vec::new();
    for m in (0..spec.steps()).step_by((spec.steps() / 10).max(1)) {
        let xs: Vec<f64> = paths
            .iter()
            .filter(|p| p.start_step <= m && m <= p.end_step())
            .flat_map(|p| p.state(m).to_vec())
            .collect();
        if xs.len() > 1 {
            acc.push(summarize(&xs).1 * (xs.len() as f64).sqrt());
        }
    }
    let scale = if acc.is_empty() { 1.0 } else { acc.iter().sum::<f64>() / acc.len() as f64 };
    Trials::Relative { scale: scale.max(1.0) }
}

/// Root mean square of the continuation-fit residuals over all tables.
pub fn regression_residual_norm(tables: &[RegimeTables]) -> f64 {
    let (mut ss, mut k) = (0.0, 0usize);
    for rt in tables {
        for t in rt.steps.iter().flatten() {
            for (c, r) in t.cont_rms.iter().enumerate() {
                if !t.cont[c].is_empty() {
                    ss += r * r;
                    k += 1;
                }
            }
        }
    }
    if k == 0 {
        0.0
    } else {
        (ss / k as f64).sqrt()
    }
}

/// Variational inequality ⟨∂_a H(ᾱ), ᾱ − α̃⟩ ≤ tol along evaluation paths of
/// `policy`, with y = Ŷ and z = Z from an adjoint solved under `policy`.
pub fn check_necessary(
    model: &dyn ControlModel,
    policy: &Policy,
    adjoint: &AdjointSolution,
    trials: &Trials,
    count: usize,
    instance: &str,
) -> Result<Vec<ReportRow>> {
    let spec = model.spec();
    let n = spec.n;
    let tol = (5.0 * regression_residual_norm(&adjoint.tables)).max(1e-3);
    let ntrials = match trials {
        Trials::Relative { .. } => 2 * n,
        Trials::BoxPoints => 3 * n,
        Trials::Fixed(v) => v.len(),
    };
    let per_path: Vec<Result<(Vec<f64>, f64, usize)>> = (0..count as u64)
        .into_par_iter()
        .map(|id| {
            let p = simulate_keyed(model, policy, StreamKey::new(spec.mc.seed, StreamDomain::Evaluation, id), true)?;
            let mut worst = vec![f64::NEG_INFINITY; ntrials];
            let (mut abs_g, mut k) = (0.0, 0usize);
            if !p.valid {
                return Ok((worst, abs_g, k));
            }
            let mut g = vec![0.0; n];
            for m in p.start_step..p.end_step().min(spec.steps()) {
                let regime = p.regime_at(m);
                if regime.is_terminal() {
                    break;
                }
                let x = p.state(m);
                let a = p.control(m);
                let table = adjoint.table(&regime, m)?;
                let y: Vec<f64> = (0..n).map(|i| table.eval(&table.cont[i], x).0).collect();
                let z: Vec<f64> = (0..n).map(|i| table.eval(&table.z[i], x).0).collect();
                let input = HamiltonianInput { regime, t: spec.time(m), x, a, y: &y, z: &z };
                model.grad_a_hamiltonian(&input, &mut g);
                for i in regime.survivor_iter() {
                    abs_g += g[i].abs();
                    k += 1;
                }
                let mut ti = 0;
                let mut push = |v: f64, ti: &mut usize| {
                    worst[*ti] = worst[*ti].max(v);
                    *ti += 1;
                };
                match trials {
                    Trials::Relative { scale } => {
                        for i in 0..n {
                            for sign in [1.0, -1.0] {
                                let v = if regime.is_defaulted(i) { 0.0 } else { -sign * scale * g[i] };
                                push(v, &mut ti);
                            }
                        }
                    }
                    Trials::BoxPoints => {
                        for i in 0..n {
                            let b = spec.bound(i);
                            let mid = if b.is_unbounded() { a[i] } else { 0.5 * (b.lo.max(-1e300) + b.hi.min(1e300)) };
                            for target in [b.lo, b.hi, mid] {
                                let v = if regime.is_defaulted(i) || !target.is_finite() { 0.0 } else { g[i] * (a[i] - target) };
                                push(v, &mut ti);
                            }
                        }
                    }
                    Trials::Fixed(list) => {
                        for alt in list {
                            let mut v = 0.0;
                            for i in regime.survivor_iter() {
                                v += g[i] * (a[i] - alt[i]);
                            }
                            push(v, &mut ti);
                        }
                    }
                }
            }
            Ok((worst, abs_g, k))
        })
        .collect();
    let mut worst = vec![f64::NEG_INFINITY; ntrials];
    let (mut abs_g, mut k) = (0.0, 0usize);
    for r in per_path {
        let (w, a, kk) = r?;
        for (o, v) in worst.iter_mut().zip(w) {
            *o = o.max(v);
        }
        abs_g += a;
        k += kk;
    }
    let stat = worst.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rows = vec![ReportRow::new("necessary_inequality", instance, stat, tol, stat <= tol, k)];
    if !spec.is_bounded() {
        let mean = if k == 0 { 0.0 } else { abs_g / k as f64 };
        rows.push(ReportRow::new("necessary_mean_abs_grad_a", instance, mean, tol, mean <= tol, k));
    }
    Ok(rows)
}

fn uniform_stream(seed: u64) -> impl FnMut() -> f64 {
    let mut s = NoiseStream::new(StreamKey::new(seed, StreamDomain::HeldOut, 1 << 48), 1);
    s.seek(0);
    move || s.next_draw().uniform
}

/// Convexity of G and H by midpoint sampling, and the argmin property of the
/// Hamiltonian minimizer on a control grid.
pub fn check_sufficient_conditions(model: &dyn ControlModel, sample_count: usize, instance: &str) -> Vec<ReportRow> {
    let spec = model.spec();
    let n = spec.n;
    let mut u = uniform_stream(spec.mc.seed);
    let radius = spec
        .x0
        .iter()
        .map(|x| x.abs())
        .fold(1.0, f64::max)
        * 2.0;
    let tree = spec.tree();
    let mut rows = Vec::new();
    let mut worst_g = f64::NEG_INFINITY;
    let mut worst_h = f64::NEG_INFINITY;
    let mut worst_arg = 0.0f64;
    let mut samples = 0;
    let draw = |u: &mut dyn FnMut() -> f64, r: &Regime, scale: f64| -> Vec<f64> {
        (0..n).map(|i| if r.is_defaulted(i) { 0.0 } else { scale * (2.0 * u() - 1.0) }).collect()
    };
    for &regime in tree.active() {
        for _ in 0..sample_count {
            samples += 1;
            let t = spec.horizon * u();
            let v: Vec<f64> = (0..n)
                .map(|i| if regime.is_defaulted(i) { 0.0 } else { model.barrier(&regime, t, i) })
                .collect();
            let mut x1 = draw(&mut u, &regime, radius);
            let mut x2 = draw(&mut u, &regime, radius);
            for i in 0..n {
                x1[i] += v[i];
                x2[i] += v[i];
            }
            let xm: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 0.5 * (a + b)).collect();
            let (g1, g2, gm) = (
                model.terminal_cost(&regime, t, &x1),
                model.terminal_cost(&regime, t, &x2),
                model.terminal_cost(&regime, t, &xm),
            );
            let scale = 1.0 + g1.abs() + g2.abs();
            worst_g = worst_g.max((gm - 0.5 * (g1 + g2)) / scale);

            let a1 = draw(&mut u, &regime, radius);
            let a2 = draw(&mut u, &regime, radius);
            let am: Vec<f64> = a1.iter().zip(&a2).map(|(a, b)| 0.5 * (a + b)).collect();
            let y = draw(&mut u, &regime, radius);
            let z = draw(&mut u, &regime, radius);
            let h = |x: &[f64], a: &[f64]| model.hamiltonian(&HamiltonianInput { regime, t, x, a, y: &y, z: &z });
            let (h1, h2, hm) = (h(&x1, &a1), h(&x2, &a2), h(&xm, &am));
            let scale = 1.0 + h1.abs() + h2.abs();
            worst_h = worst_h.max((hm - 0.5 * (h1 + h2)) / scale);

            let mut astar = vec![0.0; n];
            let zeros = vec![0.0; n];
            model.minimize_hamiltonian(&HamiltonianInput { regime, t, x: &x1, a: &zeros, y: &y, z: &z }, &mut astar);
            for i in regime.survivor_iter() {
                let b = spec.bound(i);
                let lim = 2.0 * y.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0;
                let (lo, hi) = (b.lo.max(-lim), b.hi.min(lim));
                let step = (hi - lo) / 1000.0;
                let mut best = (f64::INFINITY, lo);
                let mut trial = astar.clone();
                for k in 0..=1000 {
                    trial[i] = lo + step * k as f64;
                    let val = h(&x1, &trial);
                    if val < best.0 {
                        best = (val, trial[i]);
                    }
                }
                if step > 0.0 {
                    worst_arg = worst_arg.max((best.1 - astar[i]).abs() / step);
                }
            }
        }
    }
    let tol = 1e-12;
    rows.push(ReportRow::new("convexity_G", instance, worst_g, tol, worst_g <= tol, samples));
    rows.push(ReportRow::new("convexity_H", instance, worst_h, tol, worst_h <= tol, samples));
    // Distance to the grid minimizer in units of the grid step.
    rows.push(ReportRow::new("argmin_H", instance, worst_arg, 1.0, worst_arg <= 1.0, samples));
    rows
}

/// Paired difference J(b) − J(a) under common random numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_diff: f64,
    pub std_error: f64,
    pub count: usize,
}

pub fn compare(model: &dyn ControlModel, a: &Policy, b: &Policy, count: usize) -> Result<Comparison> {
    let ca = path_costs(model, a, StreamDomain::Evaluation, count)?;
    let cb = path_costs(model, b, StreamDomain::Evaluation, count)?;
    Ok(paired(&ca, &cb))
}

fn paired(ca: &[Option<f64>], cb: &[Option<f64>]) -> Comparison {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    let mut d = Vec::new();
    for (a, b) in ca.iter().zip(cb) {
        if let (Some(a), Some(b)) = (a, b) {
            xa.push(*a);
            xb.push(*b);
            d.push(b - a);
        }
    }
    let (mean_diff, std_error) = summarize(&d);
    Comparison { mean_a: summarize(&xa).0, mean_b: summarize(&xb).0, mean_diff, std_error, count: d.len() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationRow {
    pub direction: Perturbation,
    pub h: f64,
    /// J(policy + hδ) − J(policy), paired.
    pub diff: f64,
    pub std_error: f64,
    pub count: usize,
}

impl PerturbationRow {
    pub fn pass(&self) -> bool {
        self.diff >= -2.0 * self.std_error
    }
}

pub fn perturbation_test(
    model: &dyn ControlModel,
    policy: &Arc<Policy>,
    directions: &[Perturbation],
    magnitudes: &[f64],
    count: usize,
) -> Result<Vec<PerturbationRow>> {
    let base = path_costs(model, policy, StreamDomain::Evaluation, count)?;
    let mut rows = Vec::new();
    for d in directions {
        for &h in magnitudes {
            let pert = policy.perturbed(*d, h);
            let c = path_costs(model, &pert, StreamDomain::Evaluation, count)?;
            let cmp = paired(&base, &c);
            rows.push(PerturbationRow { direction: *d, h, diff: cmp.mean_diff, std_error: cmp.std_error, count: cmp.count });
        }
    }
    Ok(rows)
}

/// Partition and freezing invariants on simulated paths: one regime per grid
/// point consistent with the segments, and defaulted components of states and
/// controls exactly 0.
pub fn check_partition(paths: &[Trajectory]) -> (usize, usize) {
    let mut violations = 0;
    let mut points = 0;
    for p in paths {
        for (r, regime) in p.regimes.iter().enumerate() {
            let step = p.start_step + r;
            points += 1;
            let covering = p
                .segments
                .iter()
                .filter(|s| s.regime == *regime && s.entry_step <= step && (step < s.exit_step || s.exit_step == step))
                .count();
            if covering == 0 && !regime.is_terminal() {
                violations += 1;
            }
            for k in regime.defaulted() {
                if p.state(step)[k] != 0.0 || p.control(step)[k] != 0.0 {
                    violations += 1;
                }
            }
        }
        let mut last = 0.0;
        for e in &p.defaults {
            if e.time < last {
                violations += 1;
            }
            last = e.time;
        }
    }
    (violations, points)
}

/// Stitching rows: the worst ratio of residual to tolerance over all switches.
pub fn stitch_rows(stitches: &[StitchCheck], name: &str, instance: &str) -> ReportRow {
    let worst = stitches
        .iter()
        .map(|s| if s.tolerance > 0.0 { s.rms_residual / s.tolerance } else { 0.0 })
        .fold(0.0, f64::max);
    let pass = stitches.iter().all(StitchCheck::pass);
    ReportRow::new(name, instance, worst, 1.0, pass, stitches.iter().map(|s| s.count).sum())
}

/// Solve the adjoint on training paths simulated under `policy`.
pub fn adjoint_under(model: &dyn ControlModel, policy: &Policy) -> Result<(AdjointSolution, PathSet)> {
    let set = simulate_training_set(model, policy)?;
    let sol = solve_adjoint(model, &set, true)?;
    Ok((sol, set))
}

/// Tower-property row: |mean(Y_{m+1} − Ŷ_m)| ≤ 3 stderr on held-out paths.
pub fn tower_row(model: &dyn ControlModel, sol: &AdjointSolution, policy: &Policy, count: usize, instance: &str) -> Result<ReportRow> {
    let s = tower_samples(model, sol, policy, count)?;
    let (mean, se) = summarize(&s);
    Ok(ReportRow::new("tower_property", instance, mean.abs(), 3.0 * se, mean.abs() <= 3.0 * se + 1e-12, s.len()))
}

pub fn bsde_row(model: &dyn ControlModel, sol: &AdjointSolution, policy: &Policy, count: usize, instance: &str) -> Result<ReportRow> {
    let r = bsde_residual(model, sol, policy, count)?;
    Ok(ReportRow::new("bsde_residual_mean", instance, r.mean, f64::INFINITY, r.mean.is_finite(), r.samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::LqModel;
    use crate::model::{load_spec_with, LoadOptions};

    fn spec(gamma: f64) -> ProblemSpec {
        load_spec_with(
            &format!(
                "n = 2\nhorizon = 1\nx0 = [1, 1]\n[mc]\nnum_paths = 16\ndt = 0.1\nseed = 4\n\
                 [regime.\"\"]\nmu = [0.1, 0.2]\nb = [0, 0]\nsigma = [0.1, 0]\nnu = [0.2, 0.2]\nv = [-3, -3]\ngamma = [{gamma:?}, 1]\n"
            ),
            LoadOptions { allow_negative_gamma: true },
        )
        .unwrap()
    }

    #[test]
    fn convexity_holds_and_negative_probe_fails() {
        let s = spec(1.0);
        let rows = check_sufficient_conditions(&LqModel::new(&s), 100, "t");
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
        let s = spec(-1.0);
        let rows = check_sufficient_conditions(&LqModel::new(&s), 100, "t");
        assert!(!rows[0].pass);
    }

    #[test]
    fn identical_policies_compare_to_zero() {
        let s = spec(1.0);
        let c = compare(&LqModel::new(&s), &Policy::Zero, &Policy::Zero, 16).unwrap();
        assert_eq!(c.mean_diff, 0.0);
        assert_eq!(c.std_error, 0.0);
    }

    #[test]
    fn zero_magnitude_perturbation_is_exact() {
        let s = spec(1.0);
        let p = Arc::new(Policy::Affine { gain: vec![-0.5, -0.5], offset: vec![0.1, 0.0] });
        let rows = perturbation_test(&LqModel::new(&s), &p, &crate::control::standard_directions(1.0, 1.0)[..2], &[0.0], 16).unwrap();
        for r in rows {
            assert_eq!(r.diff, 0.0);
        }
    }
}
