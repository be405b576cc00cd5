//! Recursive Riccati BSDE system for the LQ instance.
//!
//! Per regime and surviving node the adjoint is parameterized as
//! −Y_i = P_i X_i − φ_i, which turns the adjoint system into
//!
//!   −dP = (2μP + P² + σ²P + 2σZᴾ − γ) dt − Zᴾ dW,
//!   −dφ = ((P + μ)φ + σZ^φ − h) dt − Z^φ dW,   h = γv + Pb + νZᴾ + σνP,
//!
//! with exit rows P = −γ, φ = −γv where the node's own cost ends, and
//! P = P_child − γ, φ = φ_child − γv where it survives into the child.
//! The optimal feedback is a = P x − φ.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::backward::{sweep, GeneratorArgs, RegimeTables, Scheme, StepTable, StitchCheck, TerminalArgs};
use crate::control::{iterate, PicardRound, Policy};
use crate::error::{Error, Result};
use crate::hamiltonian::ControlModel;
use crate::model::{num, ProblemSpec};
use crate::regime::Regime;
use crate::adjoint::{evaluate_adjoint, AdjointSolution};
use crate::simulate::{summarize, PathSet, SegmentExit, Trajectory};

pub const BLOW_UP: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub n: usize,
    pub steps: usize,
    pub horizon: f64,
    /// Channels 2i (P_i) and 2i + 1 (φ_i) per table.
    pub tables: Vec<RegimeTables>,
    pub stitches: Vec<StitchCheck>,
    pub rounds: Vec<PicardRound>,
    pub stitched: bool,
    pub paper_generators: bool,
    bounds: Vec<crate::model::ControlBound>,
    active: Vec<Regime>,
}

/// P, φ and their martingale integrands at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiccatiValue {
    pub p: f64,
    pub phi: f64,
    pub zp: f64,
    pub zphi: f64,
}

/// Solve under the policy that generated `paths`. `stitched = false` drops
/// the child terms from the exit rows (glued construction).
pub fn solve_riccati_tree(spec: &ProblemSpec, paths: &PathSet, stitched: bool) -> Result<RiccatiSolution> {
    let n = spec.n;
    let printed = spec.solver.paper_generators;
    let dt = spec.dt();
    let tree = spec.tree();
    let terminal = |args: &TerminalArgs, out: &mut [f64]| {
        let id = tree.id(&args.regime).expect("active regime");
        let deepest = args.regime.size() + 1 == n;
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in args.regime.survivor_iter() {
            let c = spec.snapshot(id, i, args.t);
            let (mut p, mut phi) = (0.0, 0.0);
            if args.cost_applied {
                if printed && deepest {
                    p = 1.0;
                    phi = -c.v;
                } else if printed {
                    p = c.gamma;
                    phi = -c.gamma * c.v;
                } else {
                    p = -c.gamma;
                    phi = -c.gamma * c.v;
                }
            }
            if let Some(child) = args.child {
                if printed {
                    p -= child[2 * i];
                } else {
                    p += child[2 * i];
                }
                phi += child[2 * i + 1];
            }
            out[2 * i] = p;
            out[2 * i + 1] = phi;
        }
    };
    let generator = |args: &GeneratorArgs, out: &mut [f64]| {
        let id = tree.id(&args.regime).expect("active regime");
        let deepest = args.regime.size() + 1 == n;
        for i in args.regime.survivor_iter() {
            let c = spec.snapshot(id, i, args.t);
            let (p, phi) = (args.cont[2 * i], args.cont[2 * i + 1]);
            let (zp, zphi) = (args.z[2 * i], args.z[2 * i + 1]);
            let (fp, fphi) = if !printed {
                let h = c.gamma * c.v + p * c.b + c.nu * zp + c.sigma * c.nu * p;
                (
                    2.0 * c.mu * p + p * p + c.sigma * c.sigma * p + 2.0 * c.sigma * zp - c.gamma,
                    (p + c.mu) * phi + c.sigma * zphi - h,
                )
            } else if deepest {
                let h = c.v + c.sigma * c.nu * p + zp * c.nu + p * c.b;
                (
                    p * p + c.sigma * c.sigma * p + 2.0 * zp * c.sigma - 1.0,
                    (p - c.mu) * phi + c.sigma * zphi - h,
                )
            } else {
                let h = zp * c.nu + p * c.nu + c.gamma * c.v + c.sigma * c.nu * p;
                (
                    -p * p + c.sigma * c.sigma * p + 2.0 * zp * c.sigma - c.gamma,
                    (c.mu - p) * phi + c.sigma * zphi - h,
                )
            };
            out[2 * i] = p + dt * fp;
            out[2 * i + 1] = phi + dt * fphi;
        }
    };
    let scheme = Scheme { cpn: 2, stitch: stitched, terminal: &terminal, generator: &generator };
    let sw = sweep(spec, paths, &scheme)?;
    for rt in &sw.tables {
        for (m, table) in rt.steps.iter().enumerate() {
            let Some(table) = table else { continue };
            for i in rt.regime.survivor_iter() {
                let p = table.value_mean[2 * i];
                if !p.is_finite() || p.abs() > BLOW_UP {
                    return Err(Error::RiccatiBlowUp { regime: rt.regime.key(), node: i + 1, t: spec.time(m), value: p });
                }
            }
        }
    }
    Ok(RiccatiSolution {
        n,
        steps: spec.steps(),
        horizon: spec.horizon,
        tables: sw.tables,
        stitches: sw.stitches,
        rounds: Vec::new(),
        stitched,
        paper_generators: printed,
        bounds: (0..n).map(|i| spec.bound(i)).collect(),
        active: tree.active().to_vec(),
    })
}

/// Policy iteration with the Riccati feedback, starting from α ≡ 0.
pub fn solve_riccati(model: &dyn ControlModel, stitched: bool) -> Result<RiccatiSolution> {
    let spec = model.spec();
    let (sol, rounds) = iterate(model, |set| solve_riccati_tree(spec, set, stitched), Policy::Riccati)?;
    let mut sol = Arc::try_unwrap(sol).unwrap_or_else(|a| (*a).clone());
    sol.rounds = rounds;
    Ok(sol)
}

impl RiccatiSolution {
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

    /// P, φ, Zᴾ, Z^φ of node `i` at grid step m and state x (zeros when defaulted).
    pub fn value(&self, regime: &Regime, m: usize, x: &[f64], i: usize) -> Result<RiccatiValue> {
        if regime.is_defaulted(i) {
            return Ok(RiccatiValue { p: 0.0, phi: 0.0, zp: 0.0, zphi: 0.0 });
        }
        let t = self.table(regime, m)?;
        Ok(RiccatiValue {
            p: t.eval(&t.value[2 * i], x).0,
            phi: t.eval(&t.value[2 * i + 1], x).0,
            zp: t.eval(&t.z[2 * i], x).0,
            zphi: t.eval(&t.z[2 * i + 1], x).0,
        })
    }

    pub(crate) fn feedback_into(&self, regime: &Regime, m: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let t = self.table(regime, m)?;
        for i in 0..self.n {
            out[i] = if regime.is_defaulted(i) {
                0.0
            } else {
                let p = t.eval(&t.value[2 * i], x).0;
                let phi = t.eval(&t.value[2 * i + 1], x).0;
                self.bounds[i].project(p * x[i] - phi)
            };
        }
        Ok(())
    }

    /// Exit value (P, φ) per channel for segment `s` of a path, rebuilt from
    /// the tables of the realized child.
    fn exit_row(&self, spec: &ProblemSpec, path: &Trajectory, s: usize) -> Result<Vec<f64>> {
        let n = spec.n;
        let seg = &path.segments[s];
        let id = spec.tree().id(&seg.regime).expect("active regime");
        let steps = spec.steps();
        let applied = seg.entry_step < seg.exit_step || seg.exit_step < steps;
        let t = spec.time(seg.exit_step);
        let mut out = vec![0.0; 2 * n];
        for i in seg.regime.survivor_iter() {
            if applied {
                let c = spec.snapshot(id, i, t);
                out[2 * i] = -c.gamma;
                out[2 * i + 1] = -c.gamma * c.v;
            }
        }
        if self.stitched && matches!(seg.exit, SegmentExit::Default(_)) {
            if let Some(child) = path.segments.get(s + 1) {
                let add = if child.entry_step == child.exit_step {
                    self.exit_row(spec, path, s + 1)?
                } else {
                    let x = path.state(child.entry_step);
                    let mut v = vec![0.0; 2 * n];
                    for i in child.regime.survivor_iter() {
                        let r = self.value(&child.regime, child.entry_step, x, i)?;
                        v[2 * i] = r.p;
                        v[2 * i + 1] = r.phi;
                    }
                    v
                };
                for i in child.regime.survivor_iter() {
                    out[2 * i] += add[2 * i];
                    out[2 * i + 1] += add[2 * i + 1];
                }
            }
        }
        Ok(out)
    }
}

/// Monte Carlo value of φ_i at time t in `regime` from the Γ representation
///
///   φ(t) = Γ(t)⁻¹ E_t[Γ(τ)φ(τ) − ∫_t^τ Γ h ds],  dΓ = Γ[(P + μ)dt + σ dW],
///
/// averaged over the paths sitting in the regime at t, next to the regression
/// φ averaged over the same paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiCheck {
    pub closed_form: f64,
    pub std_error: f64,
    pub regression: f64,
    pub count: usize,
    /// Smallest Γ met along the sampled paths.
    pub min_gamma: f64,
}

pub fn phi_closed_form(
    spec: &ProblemSpec,
    sol: &RiccatiSolution,
    regime: &Regime,
    node: usize,
    t: f64,
    paths: &[Trajectory],
) -> Result<PhiCheck> {
    if sol.paper_generators {
        return Err(Error::Contract("the Γ representation is implemented for the re-derived generators".into()));
    }
    let id = spec
        .tree()
        .id(regime)
        .ok_or_else(|| Error::Contract(format!("regime {regime} is not active")))?;
    if regime.is_defaulted(node) {
        return Err(Error::Contract(format!("node {} is defaulted in {regime}", node + 1)));
    }
    let m0 = spec.step_of(t).min(spec.steps() - 1);
    let dt = spec.dt();
    let sqdt = dt.sqrt();
    let samples: Vec<Result<Option<(f64, f64, f64)>>> = paths
        .par_iter()
        .map(|path| {
            let Some(s) = path
                .segments
                .iter()
                .position(|g| g.regime == *regime && g.entry_step <= m0 && m0 < g.exit_step)
            else {
                return Ok(None);
            };
            let seg = &path.segments[s];
            let mut log_gamma = 0.0f64;
            let mut min_gamma = 1.0f64;
            let mut integral = 0.0;
            for k in m0..seg.exit_step {
                let x = path.state(k);
                let tk = spec.time(k);
                let c = spec.snapshot(id, node, tk);
                let r = sol.value(regime, k, x, node)?;
                let h = c.gamma * c.v + r.p * c.b + c.nu * r.zp + c.sigma * c.nu * r.p;
                let a = r.p + c.mu;
                let g = log_gamma.exp();
                let w = if (a * dt).abs() < 1e-12 { dt } else { ((a * dt).exp() - 1.0) / a };
                integral += g * h * w;
                log_gamma += (a - 0.5 * c.sigma * c.sigma) * dt + c.sigma * sqdt * path.noise(k)[node];
                min_gamma = min_gamma.min(log_gamma.exp());
            }
            let exit = sol.exit_row(spec, path, s)?;
            let sample = log_gamma.exp() * exit[2 * node + 1] - integral;
            let reg = sol.value(regime, m0, path.state(m0), node)?.phi;
            Ok(Some((sample, reg, min_gamma)))
        })
        .collect();
    let mut cf = Vec::new();
    let mut reg = Vec::new();
    let mut min_gamma = f64::INFINITY;
    for r in samples {
        if let Some((a, b, g)) = r? {
            cf.push(a);
            reg.push(b);
            min_gamma = min_gamma.min(g);
        }
    }
    if cf.is_empty() {
        return Err(Error::Contract(format!("no path is in regime {regime} at t = {t}")));
    }
    let (closed_form, std_error) = summarize(&cf);
    let (regression, _) = summarize(&reg);
    Ok(PhiCheck { closed_form, std_error, regression, count: cf.len(), min_gamma })
}

/// Per (regime, node) agreement of P x − φ with −Y.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCheckRow {
    pub regime: Regime,
    pub node: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub mean_abs_y: f64,
    pub samples: usize,
}

pub fn crosscheck_vs_adjoint(
    spec: &ProblemSpec,
    riccati: &RiccatiSolution,
    adjoint: &AdjointSolution,
    paths: &[Trajectory],
) -> Result<Vec<CrossCheckRow>> {
    let tree = spec.tree();
    let n = spec.n;
    let per_path: Vec<Result<Vec<(usize, usize, f64, f64)>>> = paths
        .par_iter()
        .filter(|p| !p.synthetic)
        .map(|p| {
            let mut out = Vec::new();
            for m in p.start_step..p.end_step().min(spec.steps()) {
                let regime = p.regime_at(m);
                let Some(id) = tree.id(&regime) else { break };
                let x = p.state(m);
                let y = evaluate_adjoint(adjoint, &regime, spec.time(m), x)?.y;
                for i in 0..n {
                    let r = riccati.value(&regime, m, x, i)?;
                    let d = (r.p * x[i] - r.phi + y[i]).abs();
                    out.push((id, i, d, y[i].abs()));
                }
            }
            Ok(out)
        })
        .collect();
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); tree.len() * n];
    for r in per_path {
        for (id, i, d, y) in r? {
            let a = &mut acc[id * n + i];
            a.0 = a.0.max(d);
            a.1 += d;
            a.2 += y;
            a.3 += 1;
        }
    }
    let mut rows = Vec::new();
    for id in 0..tree.len() {
        let regime = tree.regime(id);
        for i in 0..n {
            let a = acc[id * n + i];
            if a.3 == 0 {
                continue;
            }
            rows.push(CrossCheckRow {
                regime,
                node: i,
                max_abs: a.0,
                mean_abs: a.1 / a.3 as f64,
                mean_abs_y: a.2 / a.3 as f64,
                samples: a.3,
            });
        }
    }
    Ok(rows)
}

pub fn write_riccati_csv(spec: &ProblemSpec, sol: &RiccatiSolution, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "regime,node,t,P_mean,phi_mean,ZP_mean,Zphi_mean")?;
    for rt in &sol.tables {
        for i in rt.regime.survivor_iter() {
            for (m, table) in rt.steps.iter().enumerate() {
                let Some(table) = table else { continue };
                writeln!(
                    out,
                    "\"{}\",{},{},{},{},{},{}",
                    rt.regime.key(),
                    i + 1,
                    num(spec.time(m)),
                    num(table.value_mean[2 * i]),
                    num(table.value_mean[2 * i + 1]),
                    num(table.z_mean[2 * i]),
                    num(table.z_mean[2 * i + 1])
                )?;
            }
        }
    }
    Ok(())
}
