//! Euler–Maruyama simulation of the regime-switched controlled SDE with
//! barrier-hitting detection, cost accumulation and Monte Carlo estimates.

use std::io::Write;

use rayon::prelude::*;

use crate::control::Policy;
use crate::error::{Error, Result};
use crate::hamiltonian::{ControlModel, LqModel};
use crate::model::{num, ProblemSpec};
use crate::regime::Regime;
use crate::rng::{NoiseStream, StreamDomain, StreamKey};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SegmentExit {
    /// The named node hit its barrier at the exit step.
    Default(usize),
    /// The horizon was reached.
    Horizon,
}

/// Stay of a path in one regime: grid steps `entry_step..exit_step` are taken
/// in the regime. `entry_step == exit_step` marks a zero-gap stay (a
/// simultaneous hit) or a regime entered exactly at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub regime: Regime,
    pub entry_step: usize,
    pub exit_step: usize,
    pub exit: SegmentExit,
    /// State at exit before any freezing.
    pub exit_state: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefaultEvent {
    pub node: usize,
    pub step: usize,
    pub time: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub key: StreamKey,
    pub synthetic: bool,
    pub n: usize,
    pub start_step: usize,
    /// Row-major states, one row per grid point from `start_step` to `end_step`.
    pub states: Vec<f64>,
    /// Controls per grid point (the last row is 0: no control acts after the end).
    pub controls: Vec<f64>,
    /// Standard normal draws per step (one row fewer than `states`).
    pub noise: Vec<f64>,
    /// Active regime per grid point.
    pub regimes: Vec<Regime>,
    /// Running cost accumulated up to each grid point.
    pub cumulative_running: Vec<f64>,
    pub segments: Vec<Segment>,
    pub defaults: Vec<DefaultEvent>,
    pub running_cost: f64,
    pub terminal_cost: f64,
    pub valid: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn end_step(&self) -> usize {
        self.start_step + self.len() - 1
    }

    pub fn state(&self, step: usize) -> &[f64] {
        let r = step - self.start_step;
        &self.states[r * self.n..(r + 1) * self.n]
    }

    pub fn control(&self, step: usize) -> &[f64] {
        let r = step - self.start_step;
        &self.controls[r * self.n..(r + 1) * self.n]
    }

    /// Standard normals driving the step from `step` to `step + 1`.
    pub fn noise(&self, step: usize) -> &[f64] {
        let r = step - self.start_step;
        &self.noise[r * self.n..(r + 1) * self.n]
    }

    pub fn regime_at(&self, step: usize) -> Regime {
        self.regimes[step - self.start_step]
    }

    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }

    /// Ordered (switch time, regime) pairs starting with the initial regime.
    pub fn timeline(&self, spec: &ProblemSpec) -> Vec<(f64, Regime)> {
        let mut out = vec![(spec.time(self.start_step), self.segments[0].regime)];
        let mut r = self.segments[0].regime;
        for e in &self.defaults {
            r = r.apply_default(e.node).expect("recorded default is new");
            out.push((e.time, r));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub num_paths: usize,
    pub invalid: usize,
}

/// Simulated paths on the spec's grid.
#[derive(Clone, Debug)]
pub struct PathSet {
    pub paths: Vec<Trajectory>,
    pub invalid: usize,
    /// Per active regime: true when its design relies on fan-out paths.
    pub synthetic_regimes: Vec<bool>,
    /// Per active regime: number of organic paths that take at least one step in it.
    pub visits: Vec<usize>,
}

impl PathSet {
    pub fn organic(&self) -> impl Iterator<Item = &Trajectory> {
        self.paths.iter().filter(|p| !p.synthetic)
    }
}

struct Outcome {
    traj: Trajectory,
}

/// Simulate one path from `(start_step, state, regime)`.
#[allow(clippy::too_many_arguments)]
fn run_path(
    model: &dyn ControlModel,
    policy: &Policy,
    key: StreamKey,
    start_step: usize,
    init: &[f64],
    init_regime: Regime,
    record: bool,
    synthetic: bool,
) -> Result<Outcome> {
    let spec = model.spec();
    let n = spec.n;
    let steps = spec.steps();
    let dt = spec.dt();
    let sqdt = dt.sqrt();
    let bridge = spec.mc.bridge_correction;

    let mut stream = NoiseStream::new(key, n);
    stream.seek(start_step);
    let mut x = init.to_vec();
    let mut regime = init_regime;
    for (i, xi) in x.iter_mut().enumerate() {
        if regime.is_defaulted(i) {
            *xi = 0.0;
        }
    }
    let mut a = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut hits: Vec<usize> = Vec::with_capacity(n);

    let mut traj = Trajectory {
        key,
        synthetic,
        n,
        start_step,
        states: Vec::new(),
        controls: Vec::new(),
        noise: Vec::new(),
        regimes: Vec::new(),
        cumulative_running: Vec::new(),
        segments: Vec::new(),
        defaults: Vec::new(),
        running_cost: 0.0,
        terminal_cost: 0.0,
        valid: true,
    };
    if record {
        let cap = (steps - start_step + 1) * n;
        traj.states.reserve(cap);
        traj.controls.reserve(cap);
        traj.noise.reserve(cap);
    }
    let mut running = CompensatedSum::default();
    let mut terminal = CompensatedSum::default();
    let mut entry = start_step;
    let mut m = start_step;
    let mut ended_terminal = false;

    while m < steps {
        let t = spec.time(m);
        policy.control_into(spec, &regime, m, &x, &mut a)?;
        let l = model.running_cost(&regime, t, &x, &a);
        if record {
            traj.states.extend_from_slice(&x);
            traj.controls.extend_from_slice(&a);
            traj.regimes.push(regime);
            traj.cumulative_running.push(running.value());
        }
        running.add(l * dt);
        model.drift(&regime, t, &x, &a, &mut drift);
        model.diffusion(&regime, t, &x, &a, &mut diff);
        let t1 = spec.time(m + 1);
        hits.clear();
        for i in 0..n {
            let d = stream.next_draw();
            z[i] = d.normal;
            if regime.is_defaulted(i) {
                next[i] = 0.0;
                continue;
            }
            next[i] = x[i] + drift[i] * dt + diff[i] * sqdt * d.normal;
            let v0 = model.barrier(&regime, t, i);
            let v1 = model.barrier(&regime, t1, i);
            let (g0, g1) = (x[i] - v0, next[i] - v1);
            let mut hit = g0 * g1 <= 0.0;
            if !hit && bridge && diff[i] != 0.0 {
                let p = (-2.0 * g0 * g1 / (diff[i] * diff[i] * dt)).exp();
                hit = d.uniform < p;
            }
            if hit {
                hits.push(i);
            }
        }
        if record {
            traj.noise.extend_from_slice(&z);
        }
        if next.iter().any(|v| !v.is_finite()) || !l.is_finite() {
            traj.valid = false;
            return Ok(Outcome { traj });
        }
        m += 1;
        std::mem::swap(&mut x, &mut next);
        if hits.is_empty() {
            if m == steps {
                terminal.add(model.terminal_cost(&regime, t1, &x));
                traj.segments.push(Segment {
                    regime,
                    entry_step: entry,
                    exit_step: m,
                    exit: SegmentExit::Horizon,
                    exit_state: x.clone(),
                });
            }
            continue;
        }
        for (h, &k) in hits.iter().enumerate() {
            // The first hit closes a regime entered strictly earlier; later
            // hits close zero-gap regimes entered at t1, which carry a cost
            // only when t1 precedes the horizon.
            if h == 0 || m < steps {
                terminal.add(model.terminal_cost(&regime, t1, &x));
            }
            traj.segments.push(Segment {
                regime,
                entry_step: entry,
                exit_step: m,
                exit: SegmentExit::Default(k),
                exit_state: x.clone(),
            });
            traj.defaults.push(DefaultEvent { node: k, step: m, time: t1 });
            x[k] = 0.0;
            regime = regime.apply_default(k)?;
            entry = m;
        }
        if regime.is_terminal() {
            ended_terminal = true;
            break;
        }
        if m == steps {
            traj.segments.push(Segment {
                regime,
                entry_step: m,
                exit_step: m,
                exit: SegmentExit::Horizon,
                exit_state: x.clone(),
            });
        }
    }
    let _ = ended_terminal;
    if record {
        traj.states.extend_from_slice(&x);
        traj.controls.extend(std::iter::repeat_n(0.0, n));
        traj.regimes.push(regime);
        traj.cumulative_running.push(running.value());
    }
    traj.running_cost = running.value();
    traj.terminal_cost = terminal.value();
    Ok(Outcome { traj })
}

/// Simulate the path with the given id from the root at t = 0.
pub fn simulate_path(spec: &ProblemSpec, policy: &Policy, path_id: u64) -> Result<Trajectory> {
    let key = StreamKey::new(spec.mc.seed, StreamDomain::Evaluation, path_id);
    simulate_keyed(&LqModel::new(spec), policy, key, true)
}

pub fn simulate_keyed(
    model: &dyn ControlModel,
    policy: &Policy,
    key: StreamKey,
    record: bool,
) -> Result<Trajectory> {
    let spec = model.spec();
    let root = Regime::root(spec.n);
    Ok(run_path(model, policy, key, 0, &spec.x0, root, record, false)?.traj)
}

/// Simulate from an arbitrary grid step, state and regime.
pub fn simulate_from(
    model: &dyn ControlModel,
    policy: &Policy,
    key: StreamKey,
    start_step: usize,
    state: &[f64],
    regime: Regime,
) -> Result<Trajectory> {
    if regime.is_terminal() || start_step >= model.spec().steps() {
        return Err(Error::Contract("simulate_from needs an active regime before the horizon".into()));
    }
    Ok(run_path(model, policy, key, start_step, state, regime, true, key.domain == StreamDomain::Synthetic)?.traj)
}

/// Simulate `count` paths with ids `0..count` in the given stream domain.
pub fn simulate_paths(
    model: &dyn ControlModel,
    policy: &Policy,
    domain: StreamDomain,
    count: usize,
) -> Result<PathSet> {
    let spec = model.spec();
    let seed = spec.mc.seed;
    let results: Vec<Result<Trajectory>> = (0..count as u64)
        .into_par_iter()
        .map(|id| simulate_keyed(model, policy, StreamKey::new(seed, domain, id), true))
        .collect();
    let mut paths = Vec::with_capacity(count);
    let mut invalid = 0;
    for r in results {
        let p = r?;
        if p.valid {
            paths.push(p);
        } else {
            invalid += 1;
        }
    }
    let tree = spec.tree();
    let mut set = PathSet {
        paths,
        invalid,
        synthetic_regimes: vec![false; tree.len()],
        visits: vec![0; tree.len()],
    };
    set.visits = count_visits(spec, &set.paths);
    Ok(set)
}

fn count_visits(spec: &ProblemSpec, paths: &[Trajectory]) -> Vec<usize> {
    let tree = spec.tree();
    let mut visits = vec![0; tree.len()];
    for p in paths {
        for s in &p.segments {
            if s.entry_step < s.exit_step {
                if let Some(id) = tree.id(&s.regime) {
                    visits[id] += 1;
                }
            }
        }
    }
    visits
}

/// Training paths: organic paths from the root plus fan-out paths for every
/// active regime that no organic path enters. Fan-out paths start from states
/// where a path sits in a parent regime, with the missing node forced to
/// default there, and use their own noise streams.
pub fn simulate_training_set(model: &dyn ControlModel, policy: &Policy) -> Result<PathSet> {
    let spec = model.spec();
    let mut set = simulate_paths(model, policy, StreamDomain::Training, spec.mc.num_paths)?;
    if set.paths.is_empty() {
        return Err(Error::Simulation("every training path is invalid".into()));
    }
    let tree = spec.tree();
    let mut all_visits = set.visits.clone();
    let fan = (spec.mc.num_paths / 10).max(32);
    for id in 0..tree.len() {
        if all_visits[id] > 0 {
            continue;
        }
        let regime = tree.regime(id);
        let Some((parent, k)) = regime
            .defaulted()
            .into_iter()
            .map(|k| (regime.parents().into_iter().find(|p| !p.is_defaulted(k)).unwrap(), k))
            .filter_map(|(p, k)| tree.id(&p).map(|pid| (pid, k)))
            .max_by(|a, b| all_visits[a.0].cmp(&all_visits[b.0]).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        let parent_regime = tree.regime(parent);
        let mut sites: Vec<(usize, usize)> = Vec::new();
        for (pi, p) in set.paths.iter().enumerate() {
            for s in &p.segments {
                if s.regime == parent_regime {
                    for step in s.entry_step..s.exit_step.min(spec.steps() - 1) {
                        sites.push((pi, step));
                    }
                }
            }
        }
        if sites.is_empty() {
            continue;
        }
        let count = fan;
        let seed = spec.mc.seed;
        let new: Vec<Result<Trajectory>> = (0..count)
            .into_par_iter()
            .map(|j| {
                let (pi, step) = sites[j * sites.len() / count];
                let mut state = set.paths[pi].state(step).to_vec();
                state[k] = 0.0;
                let key = StreamKey::new(seed, StreamDomain::Synthetic, ((regime.bits() as u64) << 32) | j as u64);
                simulate_from(model, policy, key, step, &state, regime)
            })
            .collect();
        for r in new {
            let p = r?;
            if !p.valid {
                set.invalid += 1;
                continue;
            }
            for s in &p.segments {
                if s.entry_step < s.exit_step {
                    if let Some(sid) = tree.id(&s.regime) {
                        all_visits[sid] += 1;
                    }
                }
            }
            set.paths.push(p);
        }
        set.synthetic_regimes[id] = true;
    }
    Ok(set)
}

/// Per-path total cost, `None` for invalid paths, over ids `0..count`.
pub fn path_costs(
    model: &dyn ControlModel,
    policy: &Policy,
    domain: StreamDomain,
    count: usize,
) -> Result<Vec<Option<f64>>> {
    let seed = model.spec().mc.seed;
    (0..count as u64)
        .into_par_iter()
        .map(|id| {
            let p = simulate_keyed(model, policy, StreamKey::new(seed, domain, id), false)?;
            Ok(p.valid.then(|| p.total_cost()))
        })
        .collect()
}

/// Mean and standard error of a sample, summed in order.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut s = CompensatedSum::default();
    for &v in values {
        s.add(v);
    }
    let mean = s.value() / k as f64;
    if k < 2 {
        return (mean, 0.0);
    }
    let mut q = CompensatedSum::default();
    for &v in values {
        q.add((v - mean) * (v - mean));
    }
    let var = q.value() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

/// Cost estimate over `mc.num_paths` evaluation paths.
pub fn estimate_cost(spec: &ProblemSpec, policy: &Policy) -> Result<CostEstimate> {
    estimate_cost_with(&LqModel::new(spec), policy, StreamDomain::Evaluation, spec.mc.num_paths)
}

pub fn estimate_cost_with(
    model: &dyn ControlModel,
    policy: &Policy,
    domain: StreamDomain,
    count: usize,
) -> Result<CostEstimate> {
    let costs = path_costs(model, policy, domain, count)?;
    let valid: Vec<f64> = costs.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Simulation("every path is invalid".into()));
    }
    let (mean, std_error) = summarize(&valid);
    Ok(CostEstimate { mean, std_error, num_paths: valid.len(), invalid: count - valid.len() })
}

/// `paths.csv`: one row per grid point of every organic path.
pub fn write_paths_csv(spec: &ProblemSpec, paths: &PathSet, out: &mut dyn Write) -> std::io::Result<()> {
    let n = spec.n;
    let mut header = String::from("path_id,t,regime");
    for i in 1..=n {
        header.push_str(&format!(",x_{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",a_{i}"));
    }
    header.push_str(",running_cost\n");
    out.write_all(header.as_bytes())?;
    let mut line = String::new();
    for p in paths.organic() {
        for r in 0..p.len() {
            let step = p.start_step + r;
            line.clear();
            line.push_str(&p.key.path_id.to_string());
            line.push(',');
            line.push_str(&num(spec.time(step)));
            line.push_str(",\"");
            line.push_str(&p.regimes[r].key());
            line.push('"');
            for v in p.state(step) {
                line.push(',');
                line.push_str(&num(*v));
            }
            for v in p.control(step) {
                line.push(',');
                line.push_str(&num(*v));
            }
            line.push(',');
            line.push_str(&num(p.cumulative_running[r]));
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_spec;

    fn spec_n1(x0: f64, mu: f64, b: f64, sigma: f64, nu: f64, v: f64, dt: f64) -> ProblemSpec {
        load_spec(&format!(
            "n = 1\nhorizon = 1\nx0 = [{x0:?}]\n[mc]\nnum_paths = 4\ndt = {dt:?}\nseed = 9\n\
             [regime.\"\"]\nmu = [{mu:?}]\nb = [{b:?}]\nsigma = [{sigma:?}]\nnu = [{nu:?}]\nv = [{v:?}]\ngamma = [1]\n"
        ))
        .unwrap()
    }

    #[test]
    fn drift_only_path_hits_at_one() {
        let spec = spec_n1(1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.01);
        let p = simulate_path(&spec, &Policy::zero(), 0).unwrap();
        for (r, step) in (0..p.len()).zip(0..) {
            let want = (1.0 - spec.time(step)).max(0.0);
            assert!((p.states[r] - want).abs() < 1e-9 || p.regimes[r].is_terminal());
        }
        assert_eq!(p.defaults.len(), 1);
        assert!((p.defaults[0].time - 1.0).abs() <= spec.dt() + 1e-12);
        assert!(p.regimes.last().unwrap().is_terminal());
        assert_eq!(*p.states.last().unwrap(), 0.0);
    }

    #[test]
    fn constant_path_costs() {
        let spec = spec_n1(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.01);
        let p = simulate_path(&spec, &Policy::zero(), 0).unwrap();
        assert!(p.defaults.is_empty());
        assert!((p.running_cost - 0.5).abs() < 1e-12);
        assert!((p.terminal_cost - 0.5).abs() < 1e-12);
        let est = estimate_cost(&spec, &Policy::zero()).unwrap();
        assert!((est.mean - 1.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn zero_instance_costs_nothing() {
        let spec = load_spec(
            "n = 1\nhorizon = 1\nx0 = [0]\n[mc]\nnum_paths = 5\ndt = 0.1\nseed = 1\n\
             [regime.\"\"]\nmu = [0]\nb = [0]\nsigma = [0]\nnu = [0]\nv = [1e-3]\ngamma = [1]\n",
        )
        .unwrap();
        // Barrier must differ from x0; with v = 1e-3 the cost is γ/2·v²·(T + 1).
        let est = estimate_cost(&spec, &Policy::zero()).unwrap();
        assert!((est.mean - 1e-6).abs() < 1e-15, "{}", est.mean);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn two_node_hit_freezes_component() {
        let spec = load_spec(
            "n = 2\nhorizon = 1\nx0 = [0.2, 3]\n[mc]\nnum_paths = 64\ndt = 0.01\nseed = 5\n\
             [regime.\"\"]\nmu = [0, 0]\nb = [-1, 0]\nsigma = [0, 0]\nnu = [0.3, 0.3]\nv = [0, 0]\ngamma = [1, 1]\n",
        )
        .unwrap();
        let model = LqModel::new(&spec);
        let set = simulate_paths(&model, &Policy::zero(), StreamDomain::Training, 64).unwrap();
        let p = set
            .paths
            .iter()
            .find(|p| p.defaults.len() == 1 && p.defaults[0].node == 0)
            .expect("some path realizes a hit of node 1 only");
        let tl = p.timeline(&spec);
        assert_eq!(tl[0], (0.0, Regime::root(2)));
        assert_eq!(tl[1].1.key(), "1");
        let hit = p.defaults[0].step;
        for step in hit..=p.end_step() {
            assert_eq!(p.state(step)[0], 0.0);
            assert_eq!(p.control(step)[0], 0.0);
        }
    }

    #[test]
    fn simultaneous_hits_become_zero_gap_stays() {
        let spec = load_spec(
            "n = 2\nhorizon = 1\nx0 = [0.5, 0.5]\n[mc]\nnum_paths = 1\ndt = 0.1\nseed = 5\n\
             [regime.\"\"]\nmu = [0, 0]\nb = [-1, -1]\nsigma = [0, 0]\nnu = [0, 0]\nv = [0, 0]\ngamma = [1, 1]\n",
        )
        .unwrap();
        let p = simulate_path(&spec, &Policy::zero(), 0).unwrap();
        assert_eq!(p.defaults.len(), 2);
        assert_eq!(p.defaults[0].node, 0);
        assert_eq!(p.defaults[1].node, 1);
        assert_eq!(p.defaults[0].step, p.defaults[1].step);
        assert_eq!(p.segments.len(), 2);
        assert_eq!(p.segments[1].entry_step, p.segments[1].exit_step);
        assert_eq!(p.segments[1].regime.key(), "1");
        // Root exit cost plus the zero-gap regime {1} cost at the same state.
        let x = p.segments[0].exit_state[1];
        let g_root = 0.5 * (p.segments[0].exit_state[0].powi(2) + x * x);
        let g_one = 0.5 * x * x;
        assert!((p.terminal_cost - g_root - g_one).abs() < 1e-12);
    }

    #[test]
    fn summarize_matches_two_pass() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let (m, se) = summarize(&xs);
        assert_eq!(m, 3.5);
        let var = xs.iter().map(|x| (x - 3.5f64).powi(2)).sum::<f64>() / 3.0;
        assert!((se - (var / 4.0).sqrt()).abs() < 1e-15);
    }
}
