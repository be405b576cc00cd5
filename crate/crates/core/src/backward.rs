//! Backward regression sweep over the regime tree, shared by the adjoint and
//! Riccati solvers.
//!
//! A scheme carries `cpn` scalar channels per node (Y for the adjoint; P and φ
//! for Riccati). Regimes are processed deepest first. Inside a regime, every
//! path segment starts from its exit value (terminal row plus, when stitching,
//! the realized child's entry value on that path) and is stepped back on the
//! grid with
//!
//!   ĉ = E[c_{m+1} | X_m],  z = E[(c_{m+1} − ĉ) ΔW | X_m] / Δt,
//!   c_m = generator(t_m, X_m, a_m, ĉ, z),
//!
//! where the conditional expectations are regressions over the segments alive
//! at step m.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::regime::Regime;
use crate::regression::{dot, Basis, Design};
use crate::simulate::{PathSet, SegmentExit, Trajectory};

/// Regression tables of one (regime, step).
#[derive(Clone, Debug)]
pub struct StepTable {
    pub basis: Basis,
    pub rows: usize,
    pub condition: f64,
    /// Per channel: coefficients of the new value c_m (empty when defaulted).
    pub value: Vec<Vec<f64>>,
    /// Per channel: coefficients of the continuation ĉ = E[c_{m+1} | X_m].
    pub cont: Vec<Vec<f64>>,
    /// Per channel: coefficients of z.
    pub z: Vec<Vec<f64>>,
    pub value_rms: Vec<f64>,
    pub cont_rms: Vec<f64>,
    pub z_rms: Vec<f64>,
    /// Per channel: averages over the design rows.
    pub value_mean: Vec<f64>,
    pub z_mean: Vec<f64>,
}

impl StepTable {
    /// Evaluate a coefficient vector at `x`; the flag marks extrapolation.
    pub fn eval(&self, coeffs: &[f64], x: &[f64]) -> (f64, bool) {
        if coeffs.is_empty() {
            return (0.0, false);
        }
        let nb = self.basis.len();
        if nb <= 32 {
            let mut f = [0.0f64; 32];
            let out = self.basis.features(x, &mut f[..nb]);
            return (dot(&f[..nb], coeffs), out);
        }
        let mut f = vec![0.0; nb];
        let out = self.basis.features(x, &mut f);
        (dot(&f, coeffs), out)
    }

    /// Derivative of the fitted function with respect to `node` at `x`.
    pub fn slope(&self, coeffs: &[f64], x: &[f64], node: usize) -> f64 {
        if coeffs.is_empty() {
            return 0.0;
        }
        let mut g = vec![0.0; self.basis.len()];
        self.basis.gradient_features(x, node, &mut g);
        dot(&g, coeffs)
    }
}

#[derive(Clone, Debug)]
pub struct RegimeTables {
    pub regime: Regime,
    /// One entry per grid step 0..M; `None` where no path was in the regime.
    pub steps: Vec<Option<StepTable>>,
    /// Organic training paths taking at least one step in the regime.
    pub visits: usize,
    pub low_confidence: bool,
    pub synthetic: bool,
}

impl RegimeTables {
    /// Table at step m, or the nearest solved step (later one on ties).
    pub fn nearest(&self, m: usize) -> Option<&StepTable> {
        let m = m.min(self.steps.len().saturating_sub(1));
        if let Some(t) = self.steps.get(m).and_then(Option::as_ref) {
            return Some(t);
        }
        for d in 1..self.steps.len() {
            if let Some(t) = self.steps.get(m + d).and_then(Option::as_ref) {
                return Some(t);
            }
            if d <= m {
                if let Some(t) = self.steps[m - d].as_ref() {
                    return Some(t);
                }
            }
        }
        None
    }

    pub fn is_solved(&self) -> bool {
        self.steps.iter().any(Option::is_some)
    }
}

/// Stitching residuals for one (child regime, entry step, channel): the exit
/// value used by the parent against the child's fitted table at the
/// post-default state.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchCheck {
    pub parent: Regime,
    pub child: Regime,
    pub step: usize,
    pub channel: usize,
    pub count: usize,
    pub rms_residual: f64,
    pub max_residual: f64,
    /// 5 × the child's fit residual at that step, plus a relative rounding floor.
    pub tolerance: f64,
}

impl StitchCheck {
    pub fn pass(&self) -> bool {
        self.rms_residual <= self.tolerance
    }
}

pub(crate) struct TerminalArgs<'a> {
    pub regime: Regime,
    pub t: f64,
    /// Pre-freeze exit state.
    pub x: &'a [f64],
    /// Whether the exit carries a terminal cost (false for regimes entered at T).
    pub cost_applied: bool,
    /// Entry values of the realized child, when stitching.
    pub child: Option<&'a [f64]>,
}

pub(crate) struct GeneratorArgs<'a> {
    pub regime: Regime,
    pub t: f64,
    pub x: &'a [f64],
    pub a: &'a [f64],
    pub cont: &'a [f64],
    pub z: &'a [f64],
}

pub(crate) type TerminalFn<'a> = dyn Fn(&TerminalArgs, &mut [f64]) + Sync + 'a;
pub(crate) type GeneratorFn<'a> = dyn Fn(&GeneratorArgs, &mut [f64]) + Sync + 'a;

pub(crate) struct Scheme<'a> {
    pub cpn: usize,
    pub stitch: bool,
    pub terminal: &'a TerminalFn<'a>,
    pub generator: &'a GeneratorFn<'a>,
}

pub(crate) struct Sweep {
    pub tables: Vec<RegimeTables>,
    pub stitches: Vec<StitchCheck>,
}

struct SegRef {
    path: usize,
    seg: usize,
    entry: usize,
    exit: usize,
}

pub(crate) fn sweep(spec: &ProblemSpec, set: &PathSet, scheme: &Scheme) -> Result<Sweep> {
    let n = spec.n;
    let cpn = scheme.cpn;
    let ch = n * cpn;
    let steps = spec.steps();
    let dt = spec.dt();
    let sqdt = dt.sqrt();
    let tree = spec.tree();
    let paths: &[Trajectory] = &set.paths;

    let mut by_regime: Vec<Vec<SegRef>> = (0..tree.len()).map(|_| Vec::new()).collect();
    for (p, path) in paths.iter().enumerate() {
        for (s, seg) in path.segments.iter().enumerate() {
            let id = tree.id(&seg.regime).expect("segments are active regimes");
            by_regime[id].push(SegRef { path: p, seg: s, entry: seg.entry_step, exit: seg.exit_step });
        }
    }
    let mut entry_vals: Vec<Vec<Vec<f64>>> =
        paths.iter().map(|p| vec![Vec::new(); p.segments.len()]).collect();

    let threshold = spec.mc.num_paths / 10;
    let mut tables: Vec<RegimeTables> = (0..tree.len())
        .map(|id| RegimeTables {
            regime: tree.regime(id),
            steps: vec![None; steps],
            visits: set.visits.get(id).copied().unwrap_or(0),
            low_confidence: set.visits.get(id).copied().unwrap_or(0) < threshold,
            synthetic: set.synthetic_regimes.get(id).copied().unwrap_or(false),
        })
        .collect();
    let mut stitch_acc: Vec<((usize, usize, usize), Vec<f64>, usize)> = Vec::new();

    for id in tree.backward_order() {
        let regime = tree.regime(id);
        let survivors = regime.survivors();
        let segs = &by_regime[id];
        if segs.is_empty() {
            continue;
        }
        let mut next = vec![0.0; segs.len() * ch];
        for (j, sr) in segs.iter().enumerate() {
            let path = &paths[sr.path];
            let seg = &path.segments[sr.seg];
            let child_vals = match seg.exit {
                SegmentExit::Default(_) if scheme.stitch => path
                    .segments
                    .get(sr.seg + 1)
                    .map(|_| entry_vals[sr.path][sr.seg + 1].as_slice()),
                _ => None,
            };
            let args = TerminalArgs {
                regime,
                t: spec.time(seg.exit_step),
                x: &seg.exit_state,
                cost_applied: seg.entry_step < seg.exit_step || seg.exit_step < steps,
                child: child_vals,
            };
            let out = &mut next[j * ch..(j + 1) * ch];
            (scheme.terminal)(&args, out);
            zero_defaulted(&regime, cpn, out);
            if let (Some(child), Some(cseg)) = (child_vals, path.segments.get(sr.seg + 1)) {
                if cseg.entry_step < cseg.exit_step {
                    let cid = tree.id(&cseg.regime).expect("active child");
                    stitch_acc.push(((id, cid, seg.exit_step), child.to_vec(), sr.path));
                }
            }
            if sr.entry == sr.exit {
                entry_vals[sr.path][sr.seg] = out.to_vec();
            }
        }

        for m in (0..steps).rev() {
            let rows: Vec<usize> = (0..segs.len()).filter(|&j| segs[j].entry <= m && m < segs[j].exit).collect();
            if rows.is_empty() {
                continue;
            }
            let s = survivors.len();
            let mut points = vec![0.0; rows.len() * s];
            for (r, &j) in rows.iter().enumerate() {
                let x = paths[segs[j].path].state(m);
                for (l, &i) in survivors.iter().enumerate() {
                    points[r * s + l] = x[i];
                }
            }
            let design = Design::build(&points, &survivors, spec.mc.basis_degree, spec.mc.ridge)
                .map_err(|message| Error::Regression { regime: regime.key(), step: m, message })?;
            let nr = rows.len();
            let mut cont_vals = vec![0.0; nr * ch];
            let mut z_vals = vec![0.0; nr * ch];
            let mut table = StepTable {
                basis: design.basis.clone(),
                rows: nr,
                condition: design.condition,
                value: vec![Vec::new(); ch],
                cont: vec![Vec::new(); ch],
                z: vec![Vec::new(); ch],
                value_rms: vec![0.0; ch],
                cont_rms: vec![0.0; ch],
                z_rms: vec![0.0; ch],
                value_mean: vec![0.0; ch],
                z_mean: vec![0.0; ch],
            };
            for &i in &survivors {
                for q in 0..cpn {
                    let c = i * cpn + q;
                    let target: Vec<f64> = rows.iter().map(|&j| next[j * ch + c]).collect();
                    let fit = design.fit(&target);
                    let zt: Vec<f64> = rows
                        .iter()
                        .enumerate()
                        .map(|(r, &j)| (target[r] - fit.fitted[r]) * paths[segs[j].path].noise(m)[i] / sqdt)
                        .collect();
                    let zfit = design.fit(&zt);
                    for r in 0..nr {
                        cont_vals[r * ch + c] = fit.fitted[r];
                        z_vals[r * ch + c] = zfit.fitted[r];
                    }
                    table.cont[c] = fit.coeffs;
                    table.cont_rms[c] = fit.rms;
                    table.z_mean[c] = mean(&zfit.fitted);
                    table.z[c] = zfit.coeffs;
                    table.z_rms[c] = zfit.rms;
                }
            }
            let t = spec.time(m);
            let mut new_vals = vec![0.0; nr * ch];
            new_vals.par_chunks_mut(ch).zip(rows.par_iter()).enumerate().for_each(|(r, (out, &j))| {
                    let path = &paths[segs[j].path];
                    let args = GeneratorArgs {
                        regime,
                        t,
                        x: path.state(m),
                        a: path.control(m),
                        cont: &cont_vals[r * ch..(r + 1) * ch],
                        z: &z_vals[r * ch..(r + 1) * ch],
                    };
                    (scheme.generator)(&args, out);
                    zero_defaulted(&regime, cpn, out);
                });
            for &i in &survivors {
                for q in 0..cpn {
                    let c = i * cpn + q;
                    let target: Vec<f64> = (0..nr).map(|r| new_vals[r * ch + c]).collect();
                    let fit = design.fit(&target);
                    table.value[c] = fit.coeffs;
                    table.value_rms[c] = fit.rms;
                    table.value_mean[c] = mean(&target);
                }
            }
            for (r, &j) in rows.iter().enumerate() {
                next[j * ch..(j + 1) * ch].copy_from_slice(&new_vals[r * ch..(r + 1) * ch]);
            }
            tables[id].steps[m] = Some(table);
        }
        for (j, sr) in segs.iter().enumerate() {
            if sr.entry < sr.exit {
                entry_vals[sr.path][sr.seg] = next[j * ch..(j + 1) * ch].to_vec();
            }
        }
    }

    let stitches = collect_stitches(spec, paths, &tables, &stitch_acc, cpn);
    Ok(Sweep { tables, stitches })
}

fn collect_stitches(
    spec: &ProblemSpec,
    paths: &[Trajectory],
    tables: &[RegimeTables],
    acc: &[((usize, usize, usize), Vec<f64>, usize)],
    cpn: usize,
) -> Vec<StitchCheck> {
    use std::collections::BTreeMap;
    let ch = spec.n * cpn;
    // (parent, child, step) -> per channel (sum sq, max, count, max |value|)
    let mut groups: BTreeMap<(usize, usize, usize), (Vec<f64>, Vec<f64>, usize, Vec<f64>)> = BTreeMap::new();
    for ((pid, cid, step), used, p) in acc {
        let Some(table) = tables[*cid].steps.get(*step).and_then(Option::as_ref) else { continue };
        let x = paths[*p].state(*step);
        let g = groups
            .entry((*pid, *cid, *step))
            .or_insert_with(|| (vec![0.0; ch], vec![0.0; ch], 0, vec![0.0; ch]));
        for c in 0..ch {
            if table.value[c].is_empty() {
                continue;
            }
            let (v, _) = table.eval(&table.value[c], x);
            let d = (used[c] - v).abs();
            g.0[c] += d * d;
            g.1[c] = g.1[c].max(d);
            g.3[c] = g.3[c].max(used[c].abs());
        }
        g.2 += 1;
    }
    let tree = spec.tree();
    let mut out = Vec::new();
    for ((pid, cid, step), (ss, mx, count, scale)) in groups {
        let table = tables[cid].steps[step].as_ref().expect("grouped only with a table");
        for c in 0..ch {
            if table.value[c].is_empty() {
                continue;
            }
            out.push(StitchCheck {
                parent: tree.regime(pid),
                child: tree.regime(cid),
                step,
                channel: c,
                count,
                rms_residual: (ss[c] / count as f64).sqrt(),
                max_residual: mx[c],
                tolerance: 5.0 * table.value_rms[c] + 1e-9 * (1.0 + scale[c]),
            });
        }
    }
    out
}

fn zero_defaulted(regime: &Regime, cpn: usize, out: &mut [f64]) {
    for k in 0..regime.n() {
        if regime.is_defaulted(k) {
            out[k * cpn..(k + 1) * cpn].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
