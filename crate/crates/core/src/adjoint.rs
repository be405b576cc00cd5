//! Adjoint BSDE system solved backward over the regime tree by regression
//! Monte Carlo:
//!
//!   Ŷ_m = E[Y_{m+1} | X_m],  Z_m = E[Y_{m+1} ΔW_m | X_m] / Δt,
//!   Y_m = Ŷ_m + Δt ∂_x H(t_m, X_m, a_m, Ŷ_m, Z_m),
//!
//! with exit values ∂_x G of the exited regime plus, at a default, the
//! realized child's Y at the same time and state.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::backward::{sweep, GeneratorArgs, RegimeTables, Scheme, StepTable, StitchCheck, TerminalArgs};
use crate::control::{iterate, PicardRound, Policy};
use crate::error::{Error, Result};
use crate::hamiltonian::{ControlModel, HamiltonianInput};
use crate::model::{num, ProblemSpec};
use crate::regime::Regime;
use crate::rng::{StreamDomain, StreamKey};
use crate::simulate::{simulate_keyed, PathSet};

#[derive(Clone, Debug)]
pub struct AdjointSolution {
    pub n: usize,
    pub steps: usize,
    pub horizon: f64,
    pub tables: Vec<RegimeTables>,
    pub stitches: Vec<StitchCheck>,
    /// Picard history; empty for a single solve.
    pub rounds: Vec<PicardRound>,
    /// False when exit values omit the child's Y (glued construction).
    pub stitched: bool,
    active: Vec<Regime>,
}

/// Y and diagonal Z at a point; `extrapolated` marks states outside the
/// sampled hull of the design.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointValue {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub extrapolated: bool,
}

/// Solve under the policy that generated `paths`.
pub fn solve_adjoint(model: &dyn ControlModel, paths: &PathSet, stitched: bool) -> Result<AdjointSolution> {
    let spec = model.spec();
    let n = spec.n;
    let terminal = |args: &TerminalArgs, out: &mut [f64]| {
        if args.cost_applied {
            model.terminal_gradient(&args.regime, args.t, args.x, out);
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(child) = args.child {
            for i in 0..out.len() {
                out[i] += child[i];
            }
        }
    };
    let generator = |args: &GeneratorArgs, out: &mut [f64]| {
        let input = HamiltonianInput {
            regime: args.regime,
            t: args.t,
            x: args.x,
            a: args.a,
            y: args.cont,
            z: args.z,
        };
        let mut buf = [0.0f64; 16];
        let g = &mut buf[..n];
        model.grad_x_hamiltonian(&input, g);
        let dt = spec.dt();
        for i in 0..n {
            out[i] = args.cont[i] + dt * g[i];
        }
    };
    let scheme = Scheme { cpn: 1, stitch: stitched, terminal: &terminal, generator: &generator };
    let sw = sweep(spec, paths, &scheme)?;
    Ok(AdjointSolution {
        n,
        steps: spec.steps(),
        horizon: spec.horizon,
        tables: sw.tables,
        stitches: sw.stitches,
        rounds: Vec::new(),
        stitched,
        active: spec.tree().active().to_vec(),
    })
}

/// Policy iteration: start from α ≡ 0, simulate training paths, solve, and
/// switch to the adjoint feedback, until the solver settings stop it.
pub fn solve_adjoint_picard(model: &dyn ControlModel, stitched: bool) -> Result<AdjointSolution> {
    let (sol, rounds) = iterate(model, |set| solve_adjoint(model, set, stitched), Policy::Adjoint)?;
    let mut sol = Arc::try_unwrap(sol).unwrap_or_else(|a| (*a).clone());
    sol.rounds = rounds;
    Ok(sol)
}

impl AdjointSolution {
    fn id(&self, regime: &Regime) -> Option<usize> {
        self.active.binary_search(regime).ok()
    }

    pub fn table(&self, regime: &Regime, m: usize) -> Result<&StepTable> {
        let id = self
            .id(regime)
            .ok_or_else(|| Error::UncoveredRegime(format!("regime {regime} is not active")))?;
        self.tables[id]
            .nearest(m)
            .ok_or_else(|| Error::UncoveredRegime(format!("regime {regime} has no solved step")))
    }

    pub fn regime_tables(&self, regime: &Regime) -> Option<&RegimeTables> {
        self.id(regime).map(|id| &self.tables[id])
    }

    /// Continuation estimate Ŷ_m(x) = E[Y_{m+1} | X_m = x].
    pub fn continuation(&self, regime: &Regime, m: usize, x: &[f64]) -> Result<Vec<f64>> {
        let table = self.table(regime, m)?;
        Ok((0..self.n).map(|i| table.eval(&table.cont[i], x).0).collect())
    }

    /// Minimizer of the LQ Hamiltonian at y = Ŷ_m(x): a = proj(−Ŷ).
    pub(crate) fn feedback_into(&self, spec: &ProblemSpec, regime: &Regime, m: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let table = self.table(regime, m)?;
        for i in 0..self.n {
            out[i] = if table.cont[i].is_empty() { 0.0 } else { spec.bound(i).project(-table.eval(&table.cont[i], x).0) };
        }
        Ok(())
    }

    /// Feedback gain −∂a_i/∂x_i = ∂Ŷ_i/∂x_i at x. Where the design has no
    /// spread in x_i the slope is read from Z_i = ∂Y_i/∂x_i · Σ_ii instead.
    pub fn gain(&self, spec: &ProblemSpec, regime: &Regime, m: usize, x: &[f64], node: usize) -> Result<f64> {
        let table = self.table(regime, m)?;
        if table.basis.components.contains(&node) {
            return Ok(table.slope(&table.cont[node], x, node));
        }
        let id = spec.tree().id(regime).expect("active regime");
        let c = spec.snapshot(id, node, spec.time(m));
        let s = c.sigma * x[node] + c.nu;
        if s == 0.0 {
            return Err(Error::Contract(format!("gain of node {} at step {m} is not identifiable", node + 1)));
        }
        Ok(table.eval(&table.z[node], x).0 / s)
    }
}

/// Y and diagonal Z of `regime` at time t and state x.
pub fn evaluate_adjoint(sol: &AdjointSolution, regime: &Regime, t: f64, x: &[f64]) -> Result<AdjointValue> {
    if !(0.0..=sol.horizon).contains(&t) {
        return Err(Error::Contract(format!("t = {t} outside [0, {}]", sol.horizon)));
    }
    let m = ((t / sol.horizon * sol.steps as f64 + 1e-9).floor() as usize).min(sol.steps - 1);
    let table = sol.table(regime, m)?;
    let mut extrapolated = false;
    let mut y = vec![0.0; sol.n];
    let mut z = vec![0.0; sol.n];
    for i in 0..sol.n {
        if regime.is_defaulted(i) {
            continue;
        }
        let (v, e) = table.eval(&table.value[i], x);
        y[i] = v;
        z[i] = table.eval(&table.z[i], x).0;
        extrapolated |= e;
    }
    Ok(AdjointValue { y, z, extrapolated })
}

/// Mean absolute discrete BSDE residual |Y_m − Y_{m+1} − Δt ∂_x H + Z_m ΔW_m|
/// over surviving components of held-out paths, on steps without a default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsdeResidual {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn bsde_residual(model: &dyn ControlModel, sol: &AdjointSolution, policy: &Policy, count: usize) -> Result<BsdeResidual> {
    let spec = model.spec();
    let n = spec.n;
    let steps = spec.steps();
    let dt = spec.dt();
    let sqdt = dt.sqrt();
    let per_path: Vec<Result<Vec<f64>>> = (0..count as u64)
        .into_par_iter()
        .map(|id| {
            let p = simulate_keyed(model, policy, StreamKey::new(spec.mc.seed, StreamDomain::HeldOut, id), true)?;
            let mut out = Vec::new();
            if !p.valid {
                return Ok(out);
            }
            let mut g = vec![0.0; n];
            let mut gt = vec![0.0; n];
            for m in p.start_step..p.end_step().min(steps) {
                let regime = p.regime_at(m);
                if regime.is_terminal() || p.regime_at(m + 1) != regime {
                    continue;
                }
                let t = spec.time(m);
                let x = p.state(m);
                let x1 = p.state(m + 1);
                let cur = evaluate_adjoint(sol, &regime, t, x)?;
                let y1 = if m + 1 == steps {
                    model.terminal_gradient(&regime, spec.horizon, x1, &mut gt);
                    gt.clone()
                } else {
                    evaluate_adjoint(sol, &regime, spec.time(m + 1), x1)?.y
                };
                let input = HamiltonianInput { regime, t, x, a: p.control(m), y: &cur.y, z: &cur.z };
                model.grad_x_hamiltonian(&input, &mut g);
                let w = p.noise(m);
                for i in regime.survivor_iter() {
                    out.push((cur.y[i] - y1[i] - dt * g[i] + cur.z[i] * sqdt * w[i]).abs());
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_path {
        all.extend(r?);
    }
    if all.is_empty() {
        return Err(Error::Simulation("no held-out samples for the residual".into()));
    }
    let (mean, std_error) = crate::simulate::summarize(&all);
    Ok(BsdeResidual { mean, std_error, samples: all.len() })
}

/// Tower-property sample: Y_{m+1}(X_{m+1}) − Ŷ_m(X_m) on held-out paths.
pub fn tower_samples(model: &dyn ControlModel, sol: &AdjointSolution, policy: &Policy, count: usize) -> Result<Vec<f64>> {
    let spec = model.spec();
    let steps = spec.steps();
    let per_path: Vec<Result<Vec<f64>>> = (0..count as u64)
        .into_par_iter()
        .map(|id| {
            let p = simulate_keyed(model, policy, StreamKey::new(spec.mc.seed, StreamDomain::HeldOut, id), true)?;
            let mut out = Vec::new();
            if !p.valid {
                return Ok(out);
            }
            for m in p.start_step..p.end_step().min(steps - 1) {
                let regime = p.regime_at(m);
                if regime.is_terminal() || p.regime_at(m + 1) != regime {
                    continue;
                }
                let c = sol.continuation(&regime, m, p.state(m))?;
                let y1 = evaluate_adjoint(sol, &regime, spec.time(m + 1), p.state(m + 1))?.y;
                for i in regime.survivor_iter() {
                    out.push(y1[i] - c[i]);
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_path {
        all.extend(r?);
    }
    Ok(all)
}

/// Largest pathwise gap between an exit value used at a default and the
/// child's fitted Y at the post-default state.
pub fn max_stitch_residual(sol: &AdjointSolution) -> f64 {
    sol.stitches.iter().map(|s| s.max_residual).fold(0.0, f64::max)
}

pub fn write_adjoint_csv(spec: &ProblemSpec, sol: &AdjointSolution, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "regime,t,node,basis_index,coeff,coeff_z")?;
    for rt in &sol.tables {
        for (m, table) in rt.steps.iter().enumerate() {
            let Some(table) = table else { continue };
            for i in rt.regime.survivor_iter() {
                for k in 0..table.basis.len() {
                    writeln!(
                        out,
                        "\"{}\",{},{},{},{},{}",
                        rt.regime.key(),
                        num(spec.time(m)),
                        i + 1,
                        k,
                        num(table.value[i][k]),
                        num(table.z[i][k])
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Per (regime, step, node) diagnostics.
pub fn write_adjoint_diag_csv(spec: &ProblemSpec, sol: &AdjointSolution, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "regime,t,node,rows,degree,condition,rms_y,rms_continuation,rms_z,visits,synthetic,low_confidence")?;
    for rt in &sol.tables {
        for (m, table) in rt.steps.iter().enumerate() {
            let Some(table) = table else { continue };
            for i in rt.regime.survivor_iter() {
                writeln!(
                    out,
                    "\"{}\",{},{},{},{},{},{},{},{},{},{},{}",
                    rt.regime.key(),
                    num(spec.time(m)),
                    i + 1,
                    table.rows,
                    table.basis.degree(),
                    num(table.condition),
                    num(table.value_rms[i]),
                    num(table.cont_rms[i]),
                    num(table.z_rms[i]),
                    rt.visits,
                    rt.synthetic,
                    rt.low_confidence
                )?;
            }
        }
    }
    Ok(())
}

/// Basis terms and standardization, so `adjoint.csv` can be evaluated
/// outside this crate: term k is Π_j u_j^{e_kj} with u_j = (x_j − mean_j)/scale_j,
/// x_j clamped to [lo_j, hi_j] and extended linearly beyond.
pub fn write_basis_csv(spec: &ProblemSpec, tables: &[RegimeTables], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "regime,t,basis_index,term,node,mean,scale,lo,hi")?;
    for rt in tables {
        for (m, table) in rt.steps.iter().enumerate() {
            let Some(table) = table else { continue };
            let b = &table.basis;
            for (k, e) in b.exponents.iter().enumerate() {
                let mut term = String::new();
                for (j, &p) in e.iter().enumerate() {
                    if p > 0 {
                        if !term.is_empty() {
                            term.push('*');
                        }
                        term.push_str(&format!("u_{}", b.components[j] + 1));
                        if p > 1 {
                            term.push_str(&format!("^{p}"));
                        }
                    }
                }
                if term.is_empty() {
                    term.push('1');
                }
                writeln!(out, "\"{}\",{},{},{},,,,,", rt.regime.key(), num(spec.time(m)), k, term)?;
            }
            for (j, &c) in b.components.iter().enumerate() {
                writeln!(
                    out,
                    "\"{}\",{},,,{},{},{},{},{}",
                    rt.regime.key(),
                    num(spec.time(m)),
                    c + 1,
                    num(b.mean[j]),
                    num(b.scale[j]),
                    num(b.lo[j]),
                    num(b.hi[j])
                )?;
            }
        }
    }
    Ok(())
}
