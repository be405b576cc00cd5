//! Problem specification: configuration parsing, validation, coefficient lookup
//! with regime inheritance, and the canonical configuration writer.
//!
//! Configuration layout (TOML):
//!
//! ```toml
//! n = 2
//! horizon = 1.0
//! x0 = [1.0, 1.0]
//! control_bounds = [[-1.0, 1.0], [-inf, inf]]   # optional
//!
//! [mc]
//! num_paths = 20000
//! dt = 0.01
//! seed = 7
//!
//! [regime.""]          # root: one entry per surviving node, ascending
//! mu = [-0.2, -0.2]
//! b = [0.0, 0.0]
//! sigma = [0.0, 0.0]
//! nu = [0.3, 0.3]
//! v = [0.0, 0.0]
//! gamma = [1.0, 1.0]
//!
//! [regime."1"]         # optional override; missing keys are inherited
//! mu = [{ breaks = [0.5], values = [0.1, 0.2] }]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::regime::{Regime, RegimeTree, MAX_NODES};

/// Right-continuous piecewise-constant function of time.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstant {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn constant(value: f64) -> PiecewiseConstant {
        PiecewiseConstant { breaks: Vec::new(), values: vec![value] }
    }

    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<PiecewiseConstant> {
        if values.len() != breaks.len() + 1 {
            return Err(Error::Contract(format!(
                "{} breakpoints need {} values, got {}",
                breaks.len(),
                breaks.len() + 1,
                values.len()
            )));
        }
        Ok(PiecewiseConstant { breaks, values })
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_constant(&self) -> bool {
        self.breaks.is_empty()
    }

    pub fn value_at(&self, t: f64) -> f64 {
        if self.breaks.is_empty() {
            return self.values[0];
        }
        let k = self.breaks.partition_point(|&b| b <= t);
        self.values[k]
    }
}

/// Names of the per-node coefficient keys, in canonical (sorted) order.
pub const COEFFICIENT_KEYS: [&str; 6] = ["b", "gamma", "mu", "nu", "sigma", "v"];

const B: usize = 0;
const GAMMA: usize = 1;
const MU: usize = 2;
const NU: usize = 3;
const SIGMA: usize = 4;
const V: usize = 5;

/// Coefficients declared by one `[regime."..."]` section. Each present key holds
/// one function per survivor of that regime, in ascending node order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RegimeBlock {
    entries: [Option<Vec<PiecewiseConstant>>; 6],
}

impl RegimeBlock {
    pub fn get(&self, key: &str) -> Option<&[PiecewiseConstant]> {
        let k = COEFFICIENT_KEYS.iter().position(|&c| c == key)?;
        self.entries[k].as_deref()
    }
}

/// Resolved coefficient functions for one surviving node of one regime.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeCoefficients {
    pub mu: PiecewiseConstant,
    pub b: PiecewiseConstant,
    pub sigma: PiecewiseConstant,
    pub nu: PiecewiseConstant,
    pub v: PiecewiseConstant,
    pub gamma: PiecewiseConstant,
}

impl NodeCoefficients {
    pub fn at(&self, t: f64) -> CoefficientSnapshot {
        CoefficientSnapshot {
            mu: self.mu.value_at(t),
            b: self.b.value_at(t),
            sigma: self.sigma.value_at(t),
            nu: self.nu.value_at(t),
            v: self.v.value_at(t),
            gamma: self.gamma.value_at(t),
        }
    }
}

/// Coefficient values of one node at one time.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CoefficientSnapshot {
    pub mu: f64,
    pub b: f64,
    pub sigma: f64,
    pub nu: f64,
    pub v: f64,
    pub gamma: f64,
}

/// Snapshot of a regime's coefficients at time `t`, survivors only.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeCoefficients {
    pub regime: Regime,
    pub t: f64,
    pub nodes: Vec<(usize, CoefficientSnapshot)>,
}

impl RegimeCoefficients {
    pub fn node(&self, i: usize) -> Option<&CoefficientSnapshot> {
        self.nodes.iter().find(|(k, _)| *k == i).map(|(_, c)| c)
    }
}

/// Closed control interval; infinite ends mean unbounded on that side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlBound {
    pub lo: f64,
    pub hi: f64,
}

impl ControlBound {
    pub const UNBOUNDED: ControlBound = ControlBound { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn project(&self, a: f64) -> f64 {
        a.clamp(self.lo, self.hi)
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo == f64::NEG_INFINITY && self.hi == f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloConfig {
    pub num_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub basis_degree: usize,
    pub ridge: f64,
    pub bridge_correction: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Maximum number of policy/adjoint rounds.
    pub max_picard: usize,
    /// When set, rounds stop once the relative policy change falls below this
    /// value; otherwise they stop when the training cost stops decreasing by
    /// more than one standard error.
    pub picard_tol: Option<f64>,
    /// Use the Riccati drivers and terminal rows exactly as printed in the
    /// source derivation instead of the re-derived ones.
    pub paper_generators: bool,
    /// Relaxation weight θ in (0, 1]: each round's policy is θ·(new feedback)
    /// + (1 − θ)·(previous policy).
    pub picard_damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_picard: 5, picard_tol: None, paper_generators: false, picard_damping: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Accept negative cost weights. Only useful for building non-convex probes.
    pub allow_negative_gamma: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub n: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub control_bounds: Option<Vec<ControlBound>>,
    pub mc: MonteCarloConfig,
    pub solver: SolverConfig,
    declared: BTreeMap<Regime, RegimeBlock>,
    tree: RegimeTree,
    resolved: Vec<Vec<Option<NodeCoefficients>>>,
    steps: usize,
    options_negative_gamma: bool,
}

impl PartialEq for RegimeTree {
    fn eq(&self, other: &Self) -> bool {
        self.n() == other.n()
    }
}

pub fn load_spec(source: &str) -> Result<ProblemSpec> {
    load_spec_with(source, LoadOptions::default())
}

pub fn load_spec_with(source: &str, options: LoadOptions) -> Result<ProblemSpec> {
    let table: Table = source.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| source[..s.start.min(source.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse { line, message: e.message().trim().to_string() }
    })?;
    parse_table(&table, options)
}

fn reject_unknown(table: &Table, prefix: &str, allowed: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::validation(format!("{prefix}{key}"), "unknown key"));
        }
    }
    Ok(())
}

fn get_f64(v: &Value, key: &str) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::validation(key, "expected a number")),
    }
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::validation(key, "expected a non-negative integer")),
    }
}

fn get_f64_array(v: &Value, key: &str) -> Result<Vec<f64>> {
    match v {
        Value::Array(a) => a.iter().map(|x| get_f64(x, key)).collect(),
        _ => Err(Error::validation(key, "expected an array of numbers")),
    }
}

fn required<'a>(table: &'a Table, key: &str, full: &str) -> Result<&'a Value> {
    table.get(key).ok_or_else(|| Error::validation(full, "required key missing"))
}

fn parse_function(v: &Value, key: &str, horizon: f64) -> Result<PiecewiseConstant> {
    let f = match v {
        Value::Table(t) => {
            reject_unknown(t, &format!("{key}."), &["breaks", "values"])?;
            let breaks = get_f64_array(required(t, "breaks", key)?, key)?;
            let values = get_f64_array(required(t, "values", key)?, key)?;
            if values.len() != breaks.len() + 1 {
                return Err(Error::validation(key, "need exactly one more value than breakpoints"));
            }
            for w in breaks.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::validation(key, "breakpoints must be strictly increasing"));
                }
            }
            if breaks.iter().any(|&b| !(0.0..=horizon).contains(&b)) {
                return Err(Error::validation(key, "breakpoints must lie in [0, horizon]"));
            }
            PiecewiseConstant { breaks, values }
        }
        other => PiecewiseConstant::constant(get_f64(other, key)?),
    };
    if f.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(key, "coefficient values must be finite"));
    }
    Ok(f)
}

fn parse_block(
    table: &Table,
    regime: &Regime,
    key_prefix: &str,
    horizon: f64,
) -> Result<RegimeBlock> {
    reject_unknown(table, key_prefix, &COEFFICIENT_KEYS)?;
    let survivors = regime.survivors().len();
    let mut block = RegimeBlock::default();
    for (slot, name) in COEFFICIENT_KEYS.iter().enumerate() {
        let Some(value) = table.get(*name) else { continue };
        let key = format!("{key_prefix}{name}");
        let Value::Array(items) = value else {
            return Err(Error::validation(key, "expected one entry per surviving node"));
        };
        if items.len() != survivors {
            return Err(Error::validation(
                key,
                format!("expected {survivors} entries (one per surviving node), got {}", items.len()),
            ));
        }
        let funcs = items
            .iter()
            .map(|v| parse_function(v, &key, horizon))
            .collect::<Result<Vec<_>>>()?;
        block.entries[slot] = Some(funcs);
    }
    Ok(block)
}

fn parse_table(table: &Table, options: LoadOptions) -> Result<ProblemSpec> {
    reject_unknown(table, "", &["n", "horizon", "x0", "control_bounds", "mc", "solver", "regime"])?;
    let n = get_usize(required(table, "n", "n")?, "n")?;
    if n == 0 || n > MAX_NODES {
        return Err(Error::validation("n", format!("must be in 1..={MAX_NODES}")));
    }
    let horizon = get_f64(required(table, "horizon", "horizon")?, "horizon")?;
    let x0 = get_f64_array(required(table, "x0", "x0")?, "x0")?;

    let control_bounds = match table.get("control_bounds") {
        None => None,
        Some(Value::Array(rows)) => {
            let mut out = Vec::with_capacity(rows.len());
            for row in rows {
                let pair = get_f64_array(row, "control_bounds")?;
                if pair.len() != 2 {
                    return Err(Error::validation("control_bounds", "each entry must be [lo, hi]"));
                }
                out.push(ControlBound { lo: pair[0], hi: pair[1] });
            }
            Some(out)
        }
        Some(_) => return Err(Error::validation("control_bounds", "expected an array of [lo, hi] pairs")),
    };

    let mc_table = match required(table, "mc", "mc")? {
        Value::Table(t) => t,
        _ => return Err(Error::validation("mc", "expected a section")),
    };
    reject_unknown(
        mc_table,
        "mc.",
        &["num_paths", "dt", "seed", "basis_degree", "ridge", "bridge_correction"],
    )?;
    let seed = match required(mc_table, "seed", "mc.seed")? {
        Value::Integer(i) if *i >= 0 => *i as u64,
        _ => return Err(Error::validation("mc.seed", "expected an integer in [0, 2^63)")),
    };
    let mc = MonteCarloConfig {
        num_paths: get_usize(required(mc_table, "num_paths", "mc.num_paths")?, "mc.num_paths")?,
        dt: get_f64(required(mc_table, "dt", "mc.dt")?, "mc.dt")?,
        seed,
        basis_degree: match mc_table.get("basis_degree") {
            Some(v) => get_usize(v, "mc.basis_degree")?,
            None => 2,
        },
        ridge: match mc_table.get("ridge") {
            Some(v) => get_f64(v, "mc.ridge")?,
            None => 1e-8,
        },
        bridge_correction: match mc_table.get("bridge_correction") {
            Some(Value::Boolean(b)) => *b,
            Some(_) => return Err(Error::validation("mc.bridge_correction", "expected a boolean")),
            None => false,
        },
    };

    let mut solver = SolverConfig::default();
    if let Some(v) = table.get("solver") {
        let Value::Table(t) = v else {
            return Err(Error::validation("solver", "expected a section"));
        };
        reject_unknown(t, "solver.", &["max_picard", "picard_tol", "paper_generators", "picard_damping"])?;
        if let Some(v) = t.get("max_picard") {
            solver.max_picard = get_usize(v, "solver.max_picard")?;
        }
        if let Some(v) = t.get("picard_tol") {
            solver.picard_tol = Some(get_f64(v, "solver.picard_tol")?);
        }
        if let Some(v) = t.get("picard_damping") {
            solver.picard_damping = get_f64(v, "solver.picard_damping")?;
        }
        match t.get("paper_generators") {
            Some(Value::Boolean(b)) => solver.paper_generators = *b,
            Some(_) => return Err(Error::validation("solver.paper_generators", "expected a boolean")),
            None => {}
        }
    }

    let regime_table = match required(table, "regime", "regime")? {
        Value::Table(t) => t,
        _ => return Err(Error::validation("regime", "expected sections keyed by defaulted set")),
    };
    let mut declared = BTreeMap::new();
    for (key, value) in regime_table {
        let prefix = format!("regime.\"{key}\".");
        let regime = Regime::parse_key(n, key)
            .map_err(|e| Error::validation(format!("regime.\"{key}\""), e.to_string()))?;
        if regime.is_terminal() {
            return Err(Error::validation(
                format!("regime.\"{key}\""),
                "a regime in which every node has defaulted has no dynamics and takes no coefficients",
            ));
        }
        let Value::Table(t) = value else {
            return Err(Error::validation(format!("regime.\"{key}\""), "expected a section"));
        };
        if horizon.is_finite() && horizon > 0.0 {
            declared.insert(regime, parse_block(t, &regime, &prefix, horizon)?);
        }
    }

    ProblemSpec::assemble(n, horizon, x0, control_bounds, mc, solver, declared, options)
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n: usize,
        horizon: f64,
        x0: Vec<f64>,
        control_bounds: Option<Vec<ControlBound>>,
        mc: MonteCarloConfig,
        solver: SolverConfig,
        declared: BTreeMap<Regime, RegimeBlock>,
        options: LoadOptions,
    ) -> Result<ProblemSpec> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::validation("horizon", "must be finite and > 0"));
        }
        if x0.len() != n {
            return Err(Error::validation("x0", format!("expected {n} entries, got {}", x0.len())));
        }
        if x0.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("x0", "entries must be finite"));
        }
        if let Some(bounds) = &control_bounds {
            if bounds.len() != n {
                return Err(Error::validation(
                    "control_bounds",
                    format!("expected {n} entries, got {}", bounds.len()),
                ));
            }
            for (i, b) in bounds.iter().enumerate() {
                if b.lo.is_nan() || b.hi.is_nan() || b.lo > b.hi || b.lo == f64::INFINITY || b.hi == f64::NEG_INFINITY {
                    return Err(Error::validation(
                        "control_bounds",
                        format!("entry {} must be a non-empty interval [lo, hi]", i + 1),
                    ));
                }
            }
        }
        if mc.num_paths == 0 {
            return Err(Error::validation("mc.num_paths", "must be >= 1"));
        }
        if !(mc.dt.is_finite() && mc.dt > 0.0) {
            return Err(Error::validation("mc.dt", "must be > 0"));
        }
        if mc.dt > horizon {
            return Err(Error::validation("mc.dt", "must not exceed horizon"));
        }
        if mc.basis_degree > 3 {
            return Err(Error::validation("mc.basis_degree", "must be 0, 1, 2 or 3"));
        }
        if !(mc.ridge.is_finite() && mc.ridge >= 0.0) {
            return Err(Error::validation("mc.ridge", "must be >= 0"));
        }
        if solver.max_picard == 0 {
            return Err(Error::validation("solver.max_picard", "must be >= 1"));
        }
        if let Some(tol) = solver.picard_tol {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::validation("solver.picard_tol", "must be > 0"));
            }
        }
        if !(solver.picard_damping > 0.0 && solver.picard_damping <= 1.0) {
            return Err(Error::validation("solver.picard_damping", "must lie in (0, 1]"));
        }

        let root = Regime::root(n);
        let Some(root_block) = declared.get(&root) else {
            return Err(Error::validation("regime.\"\"", "root regime section is required"));
        };
        for (slot, name) in COEFFICIENT_KEYS.iter().enumerate() {
            if root_block.entries[slot].is_none() {
                return Err(Error::validation(format!("regime.\"\".{name}"), "required key missing"));
            }
        }

        let tree = RegimeTree::new(n);
        let mut resolved = Vec::with_capacity(tree.len());
        for &regime in tree.active() {
            let mut per_node = vec![None; n];
            for i in regime.survivor_iter() {
                let pick = |slot: usize| resolve(&declared, &regime, i, slot);
                per_node[i] = Some(NodeCoefficients {
                    mu: pick(MU),
                    b: pick(B),
                    sigma: pick(SIGMA),
                    nu: pick(NU),
                    v: pick(V),
                    gamma: pick(GAMMA),
                });
            }
            resolved.push(per_node);
        }

        for (&regime, block) in &declared {
            if let Some(gammas) = &block.entries[GAMMA] {
                for g in gammas {
                    if !options.allow_negative_gamma && g.values.iter().any(|&x| x < 0.0) {
                        return Err(Error::validation(
                            format!("regime.\"{}\".gamma", regime.key()),
                            "cost weights must be >= 0",
                        ));
                    }
                }
            }
        }

        let root_id = tree.id(&root).expect("root is active");
        for i in 0..n {
            let c = resolved[root_id][i].as_ref().expect("root survivors resolved");
            if c.v.value_at(0.0) == x0[i] {
                return Err(Error::validation(
                    "x0",
                    format!("instant default: node {} starts on its barrier", i + 1),
                ));
            }
        }

        let steps = ((horizon / mc.dt) - 1e-9).ceil().max(1.0) as usize;
        Ok(ProblemSpec {
            n,
            horizon,
            x0,
            control_bounds,
            mc,
            solver,
            declared,
            tree,
            resolved,
            steps,
            options_negative_gamma: options.allow_negative_gamma,
        })
    }

    pub fn tree(&self) -> &RegimeTree {
        &self.tree
    }

    pub fn declared(&self) -> &BTreeMap<Regime, RegimeBlock> {
        &self.declared
    }

    /// Number of grid steps M; the grid is uniform with t_M = horizon.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Effective step size horizon / M (at most `mc.dt`).
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        if m >= self.steps {
            self.horizon
        } else {
            self.horizon * m as f64 / self.steps as f64
        }
    }

    /// Grid index of the interval containing `t`.
    pub fn step_of(&self, t: f64) -> usize {
        let m = (t / self.dt() + 1e-9).floor();
        (m.max(0.0) as usize).min(self.steps)
    }

    pub fn bound(&self, i: usize) -> ControlBound {
        self.control_bounds.as_ref().map_or(ControlBound::UNBOUNDED, |b| b[i])
    }

    pub fn is_bounded(&self) -> bool {
        self.control_bounds
            .as_ref()
            .is_some_and(|b| b.iter().any(|c| !c.is_unbounded()))
    }

    pub fn node_coefficients(&self, regime_id: usize, node: usize) -> Option<&NodeCoefficients> {
        self.resolved.get(regime_id)?.get(node)?.as_ref()
    }

    /// Coefficients of a surviving node; panics on a defaulted node.
    pub fn snapshot(&self, regime_id: usize, node: usize, t: f64) -> CoefficientSnapshot {
        self.resolved[regime_id][node]
            .as_ref()
            .expect("coefficients requested for a defaulted node")
            .at(t)
    }

    pub fn coefficients_at(&self, regime: &Regime, t: f64) -> Result<RegimeCoefficients> {
        if regime.n() != self.n {
            return Err(Error::Contract(format!("regime {regime} belongs to a different network size")));
        }
        let id = self
            .tree
            .id(regime)
            .ok_or_else(|| Error::Contract(format!("regime {regime} has no surviving node")))?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Contract(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let nodes = regime.survivors().into_iter().map(|i| (i, self.snapshot(id, i, t))).collect();
        Ok(RegimeCoefficients { regime: *regime, t, nodes })
    }

    /// Copy with command-line overrides applied and re-validated.
    pub fn with_overrides(&self, seed: Option<u64>, paths: Option<usize>, dt: Option<f64>) -> Result<ProblemSpec> {
        let mut mc = self.mc.clone();
        if let Some(s) = seed {
            if s > i64::MAX as u64 {
                return Err(Error::validation("mc.seed", "must fit in a signed 64-bit integer"));
            }
            mc.seed = s;
        }
        if let Some(p) = paths {
            mc.num_paths = p;
        }
        if let Some(d) = dt {
            mc.dt = d;
        }
        self.rebuild(mc, self.solver.clone())
    }

    pub fn with_mc(&self, mc: MonteCarloConfig) -> Result<ProblemSpec> {
        self.rebuild(mc, self.solver.clone())
    }

    pub fn with_solver(&self, solver: SolverConfig) -> Result<ProblemSpec> {
        self.rebuild(self.mc.clone(), solver)
    }

    fn rebuild(&self, mc: MonteCarloConfig, solver: SolverConfig) -> Result<ProblemSpec> {
        ProblemSpec::assemble(
            self.n,
            self.horizon,
            self.x0.clone(),
            self.control_bounds.clone(),
            mc,
            solver,
            self.declared.clone(),
            LoadOptions { allow_negative_gamma: self.options_negative_gamma },
        )
    }

    /// Canonical configuration text: keys sorted, shortest round-trip numbers.
    pub fn emit_spec(&self) -> String {
        let mut s = String::new();
        if let Some(bounds) = &self.control_bounds {
            let items: Vec<String> =
                bounds.iter().map(|b| format!("[{}, {}]", num(b.lo), num(b.hi))).collect();
            let _ = writeln!(s, "control_bounds = [{}]", items.join(", "));
        }
        let _ = writeln!(s, "horizon = {}", num(self.horizon));
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "x0 = {}", num_array(&self.x0));
        let _ = writeln!(s, "\n[mc]");
        let _ = writeln!(s, "basis_degree = {}", self.mc.basis_degree);
        let _ = writeln!(s, "bridge_correction = {}", self.mc.bridge_correction);
        let _ = writeln!(s, "dt = {}", num(self.mc.dt));
        let _ = writeln!(s, "num_paths = {}", self.mc.num_paths);
        let _ = writeln!(s, "ridge = {}", num(self.mc.ridge));
        let _ = writeln!(s, "seed = {}", self.mc.seed);
        let mut blocks: Vec<(String, &RegimeBlock)> =
            self.declared.iter().map(|(r, b)| (r.key(), b)).collect();
        blocks.sort_by(|a, b| a.0.cmp(&b.0));
        for (key, block) in blocks {
            let _ = writeln!(s, "\n[regime.\"{key}\"]");
            for (slot, name) in COEFFICIENT_KEYS.iter().enumerate() {
                if let Some(funcs) = &block.entries[slot] {
                    let items: Vec<String> = funcs.iter().map(emit_function).collect();
                    let _ = writeln!(s, "{name} = [{}]", items.join(", "));
                }
            }
        }
        let _ = writeln!(s, "\n[solver]");
        let _ = writeln!(s, "max_picard = {}", self.solver.max_picard);
        let _ = writeln!(s, "paper_generators = {}", self.solver.paper_generators);
        let _ = writeln!(s, "picard_damping = {}", num(self.solver.picard_damping));
        if let Some(tol) = self.solver.picard_tol {
            let _ = writeln!(s, "picard_tol = {}", num(tol));
        }
        s
    }
}

/// Resolve one coefficient of node `i` in `regime`: the nearest declared
/// ancestor (largest declared subset of the defaulted set) that carries the
/// key wins; ties go to the lexicographically smallest defaulted set.
fn resolve(
    declared: &BTreeMap<Regime, RegimeBlock>,
    regime: &Regime,
    i: usize,
    slot: usize,
) -> PiecewiseConstant {
    let mut best: Option<(&Regime, &Vec<PiecewiseConstant>)> = None;
    for (anc, block) in declared {
        if anc.bits() & !regime.bits() != 0 {
            continue;
        }
        let Some(funcs) = &block.entries[slot] else { continue };
        let better = match best {
            None => true,
            Some((b, _)) => anc.size() > b.size(),
        };
        if better {
            best = Some((anc, funcs));
        }
    }
    let (anc, funcs) = best.expect("root declares every key");
    let pos = anc.survivors().iter().position(|&k| k == i).expect("survivor of descendant");
    funcs[pos].clone()
}

fn emit_function(f: &PiecewiseConstant) -> String {
    if f.is_constant() {
        num(f.values[0])
    } else {
        format!("{{ breaks = {}, values = {} }}", num_array(&f.breaks), num_array(&f.values))
    }
}

fn num_array(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|&x| num(x)).collect();
    format!("[{}]", items.join(", "))
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
n = 1
horizon = 1
x0 = [1]
[mc]
num_paths = 10
dt = 0.1
seed = 3
[regime.""]
mu = [0]
b = [0]
sigma = [0]
nu = [1]
v = [0]
gamma = [1]
"#;

    #[test]
    fn minimal_config() {
        let spec = load_spec(MINIMAL).unwrap();
        assert_eq!(spec.n, 1);
        assert_eq!(spec.tree().len(), 1);
        let c = spec.coefficients_at(&Regime::root(1), 0.0).unwrap();
        assert_eq!(
            c.node(0).copied().unwrap(),
            CoefficientSnapshot { mu: 0.0, b: 0.0, sigma: 0.0, nu: 1.0, v: 0.0, gamma: 1.0 }
        );
        assert_eq!(spec.steps(), 10);
        assert_eq!(spec.time(10), 1.0);
    }

    #[test]
    fn instant_default_rejected() {
        let text = MINIMAL.replace("x0 = [1]", "x0 = [0]");
        let err = load_spec(&text).unwrap_err();
        assert!(err.to_string().contains("instant default"), "{err}");
    }

    #[test]
    fn full_regime_block_rejected() {
        let text = r#"
n = 2
horizon = 1
x0 = [1, 1]
[mc]
num_paths = 10
dt = 0.1
seed = 3
[regime.""]
mu = [0, 0]
b = [0, 0]
sigma = [0, 0]
nu = [1, 1]
v = [0, 0]
gamma = [1, 1]
[regime."1,2"]
mu = []
"#;
        let err = load_spec(text).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("regime.\"1,2\""), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "n = 1\nhorizon = = 1\n";
        match load_spec(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn inheritance_and_piecewise() {
        let text = r#"
n = 3
horizon = 1
x0 = [1, 1, 1]
[mc]
num_paths = 10
dt = 0.1
seed = 3
[regime.""]
mu = [0.1, 0.2, 0.3]
b = [0, 0, 0]
sigma = [0, 0, 0]
nu = [1, 1, 1]
v = [0, 0, 0]
gamma = [1, 1, 1]
[regime."1"]
mu = [{ breaks = [0.5], values = [0.1, 0.2] }, 0.7]
[regime."2"]
mu = [5, 6]
"#;
        let spec = load_spec(text).unwrap();
        let r2 = Regime::parse_key(3, "2").unwrap();
        let c = spec.coefficients_at(&r2, 0.0).unwrap();
        assert_eq!(c.node(0).unwrap().mu, 5.0);
        assert_eq!(c.node(0).unwrap().nu, 1.0);
        let r1 = Regime::parse_key(3, "1").unwrap();
        let node2 = |t| spec.coefficients_at(&r1, t).unwrap().node(1).unwrap().mu;
        assert_eq!(node2(0.49), 0.1);
        assert_eq!(node2(0.5), 0.2);
        // {1,2} has two declared parents of equal depth; {1} wins the tie.
        let r12 = Regime::parse_key(3, "1,2").unwrap();
        assert_eq!(spec.coefficients_at(&r12, 0.0).unwrap().node(2).unwrap().mu, 0.7);
        // {3} only inherits from the root.
        let r3 = Regime::parse_key(3, "3").unwrap();
        assert_eq!(spec.coefficients_at(&r3, 0.0).unwrap().node(0).unwrap().mu, 0.1);
    }

    #[test]
    fn round_trip() {
        let text = r#"
n = 2
horizon = 1.5
x0 = [1, 0.30000000000000004]
control_bounds = [[-0.5, 0.5], [-inf, inf]]
[mc]
num_paths = 10
dt = 0.01
seed = 3
ridge = 1e-10
[regime.""]
mu = [0.1, { breaks = [0.25, 1.0], values = [1, 2, 3e-7] }]
b = [0, 0]
sigma = [0, 0]
nu = [1, 1]
v = [-1e6, 0]
gamma = [1, 2]
[regime."2"]
gamma = [4]
[solver]
picard_tol = 1e-9
picard_damping = 0.5
"#;
        let spec = load_spec(text).unwrap();
        let emitted = spec.emit_spec();
        let again = load_spec(&emitted).unwrap();
        assert_eq!(spec, again);
        assert_eq!(emitted, again.emit_spec());
    }

    #[test]
    fn negative_gamma_needs_opt_in() {
        let text = MINIMAL.replace("gamma = [1]", "gamma = [-1]");
        assert!(load_spec(&text).is_err());
        let opts = LoadOptions { allow_negative_gamma: true };
        assert!(load_spec_with(&text, opts).is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nsead = 4");
        let err = load_spec(&text).unwrap_err();
        assert!(err.to_string().contains("mc.sead"), "{err}");
    }
}
