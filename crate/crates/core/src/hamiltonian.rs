//! The generalized Hamiltonian H = B·y + Σ_i Σ_ii z_ii + L and its gradients.
//!
//! [`ControlModel`] is the seam through which the simulator, the adjoint solver
//! and the verifier see the problem. [`LqModel`] is the built-in linear-quadratic
//! instance backed by a [`ProblemSpec`]; [`CallbackModel`] accepts user-supplied
//! closures for non-LQ dynamics and costs (including control-dependent
//! diffusion), reusing the spec only for structure and barriers.

use crate::model::{ControlBound, ProblemSpec};
use crate::regime::Regime;

/// Arguments of H. `z` holds the diagonal of the n×n martingale integrand;
/// off-diagonal entries never enter because Σ is diagonal.
#[derive(Clone, Copy, Debug)]
pub struct HamiltonianInput<'a> {
    pub regime: Regime,
    pub t: f64,
    pub x: &'a [f64],
    pub a: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

/// Diagonal of a row-major n×n matrix.
pub fn diagonal(z: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| z[i * n + i]).collect()
}

pub trait ControlModel: Sync {
    fn spec(&self) -> &ProblemSpec;

    /// Default barrier of a surviving node.
    fn barrier(&self, regime: &Regime, t: f64, node: usize) -> f64 {
        let spec = self.spec();
        let id = spec.tree().id(regime).expect("active regime");
        spec.snapshot(id, node, t).v
    }

    fn drift(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);

    /// Diagonal of Σ.
    fn diffusion(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);

    fn running_cost(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64]) -> f64;

    fn terminal_cost(&self, regime: &Regime, t: f64, x: &[f64]) -> f64;

    fn terminal_gradient(&self, regime: &Regime, t: f64, x: &[f64], out: &mut [f64]);

    fn grad_x_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]);

    fn grad_a_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]);

    /// Minimizer of a ↦ H(t, x, a, y, z) over the control box; defaulted
    /// components are 0.
    fn minimize_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]);

    fn hamiltonian(&self, input: &HamiltonianInput) -> f64 {
        let n = input.x.len();
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n];
        self.drift(&input.regime, input.t, input.x, input.a, &mut b);
        self.diffusion(&input.regime, input.t, input.x, input.a, &mut s);
        let mut h = self.running_cost(&input.regime, input.t, input.x, input.a);
        for i in 0..n {
            if !input.regime.is_defaulted(i) {
                h += b[i] * input.y[i] + s[i] * input.z[i];
            }
        }
        h
    }
}

/// Linear dynamics B_i = μ_i x_i + b_i + a_i, Σ_ii = σ_i x_i + ν_i and costs
/// L = Σ ½γ_i(x_i − v_i)² + ½a_i², G = Σ ½γ_i(x_i − v_i)² over survivors.
#[derive(Clone, Copy)]
pub struct LqModel<'a> {
    spec: &'a ProblemSpec,
}

impl<'a> LqModel<'a> {
    pub fn new(spec: &'a ProblemSpec) -> LqModel<'a> {
        LqModel { spec }
    }

    fn id(&self, regime: &Regime) -> usize {
        self.spec.tree().id(regime).expect("active regime")
    }
}

impl ControlModel for LqModel<'_> {
    fn spec(&self) -> &ProblemSpec {
        self.spec
    }

    fn drift(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        let id = self.id(regime);
        for i in 0..x.len() {
            out[i] = if regime.is_defaulted(i) {
                0.0
            } else {
                let c = self.spec.snapshot(id, i, t);
                c.mu * x[i] + c.b + a[i]
            };
        }
    }

    fn diffusion(&self, regime: &Regime, t: f64, x: &[f64], _a: &[f64], out: &mut [f64]) {
        let id = self.id(regime);
        for i in 0..x.len() {
            out[i] = if regime.is_defaulted(i) {
                0.0
            } else {
                let c = self.spec.snapshot(id, i, t);
                c.sigma * x[i] + c.nu
            };
        }
    }

    fn running_cost(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64]) -> f64 {
        let id = self.id(regime);
        let mut l = 0.0;
        for i in regime.survivor_iter() {
            let c = self.spec.snapshot(id, i, t);
            let d = x[i] - c.v;
            l += 0.5 * c.gamma * d * d + 0.5 * a[i] * a[i];
        }
        l
    }

    fn terminal_cost(&self, regime: &Regime, t: f64, x: &[f64]) -> f64 {
        let id = self.id(regime);
        let mut g = 0.0;
        for i in regime.survivor_iter() {
            let c = self.spec.snapshot(id, i, t);
            let d = x[i] - c.v;
            g += 0.5 * c.gamma * d * d;
        }
        g
    }

    fn terminal_gradient(&self, regime: &Regime, t: f64, x: &[f64], out: &mut [f64]) {
        let id = self.id(regime);
        for i in 0..x.len() {
            out[i] = if regime.is_defaulted(i) {
                0.0
            } else {
                let c = self.spec.snapshot(id, i, t);
                c.gamma * (x[i] - c.v)
            };
        }
    }

    fn grad_x_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]) {
        let id = self.id(&input.regime);
        for i in 0..input.x.len() {
            out[i] = if input.regime.is_defaulted(i) {
                0.0
            } else {
                let c = self.spec.snapshot(id, i, input.t);
                c.mu * input.y[i] + c.sigma * input.z[i] + c.gamma * (input.x[i] - c.v)
            };
        }
    }

    fn grad_a_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]) {
        for i in 0..input.x.len() {
            out[i] = if input.regime.is_defaulted(i) { 0.0 } else { input.y[i] + input.a[i] };
        }
    }

    fn minimize_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]) {
        for i in 0..input.x.len() {
            out[i] = if input.regime.is_defaulted(i) {
                0.0
            } else {
                self.spec.bound(i).project(-input.y[i])
            };
        }
    }

    fn hamiltonian(&self, input: &HamiltonianInput) -> f64 {
        let id = self.id(&input.regime);
        let mut h = 0.0;
        for i in input.regime.survivor_iter() {
            let c = self.spec.snapshot(id, i, input.t);
            let (x, a) = (input.x[i], input.a[i]);
            let d = x - c.v;
            h += (c.mu * x + c.b + a) * input.y[i]
                + (c.sigma * x + c.nu) * input.z[i]
                + 0.5 * c.gamma * d * d
                + 0.5 * a * a;
        }
        h
    }
}

pub fn hamiltonian(input: &HamiltonianInput, spec: &ProblemSpec) -> f64 {
    LqModel::new(spec).hamiltonian(input)
}

pub fn grad_x_hamiltonian(input: &HamiltonianInput, spec: &ProblemSpec) -> Vec<f64> {
    let mut out = vec![0.0; input.x.len()];
    LqModel::new(spec).grad_x_hamiltonian(input, &mut out);
    out
}

pub fn grad_a_hamiltonian(input: &HamiltonianInput, spec: &ProblemSpec) -> Vec<f64> {
    let mut out = vec![0.0; input.x.len()];
    LqModel::new(spec).grad_a_hamiltonian(input, &mut out);
    out
}

type VecFn = Box<dyn Fn(&Regime, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
type ScalarFn = Box<dyn Fn(&Regime, f64, &[f64], &[f64]) -> f64 + Send + Sync>;
type StateScalarFn = Box<dyn Fn(&Regime, f64, &[f64]) -> f64 + Send + Sync>;
type StateVecFn = Box<dyn Fn(&Regime, f64, &[f64], &mut [f64]) + Send + Sync>;
type HamFn = Box<dyn Fn(&HamiltonianInput, &mut [f64]) + Send + Sync>;

/// User-supplied model. The spec provides n, horizon, x0, barriers and bounds;
/// everything else comes from the closures.
pub struct CallbackModel<'a> {
    pub spec: &'a ProblemSpec,
    pub drift: VecFn,
    pub diffusion: VecFn,
    pub running_cost: ScalarFn,
    pub terminal_cost: StateScalarFn,
    pub terminal_gradient: StateVecFn,
    pub grad_x: HamFn,
    pub grad_a: HamFn,
    pub argmin: HamFn,
}

impl ControlModel for CallbackModel<'_> {
    fn spec(&self) -> &ProblemSpec {
        self.spec
    }
    fn drift(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.drift)(regime, t, x, a, out);
        zero_defaulted(regime, out);
    }
    fn diffusion(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.diffusion)(regime, t, x, a, out);
        zero_defaulted(regime, out);
    }
    fn running_cost(&self, regime: &Regime, t: f64, x: &[f64], a: &[f64]) -> f64 {
        (self.running_cost)(regime, t, x, a)
    }
    fn terminal_cost(&self, regime: &Regime, t: f64, x: &[f64]) -> f64 {
        (self.terminal_cost)(regime, t, x)
    }
    fn terminal_gradient(&self, regime: &Regime, t: f64, x: &[f64], out: &mut [f64]) {
        (self.terminal_gradient)(regime, t, x, out);
        zero_defaulted(regime, out);
    }
    fn grad_x_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]) {
        (self.grad_x)(input, out);
        zero_defaulted(&input.regime, out);
    }
    fn grad_a_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]) {
        (self.grad_a)(input, out);
        zero_defaulted(&input.regime, out);
    }
    fn minimize_hamiltonian(&self, input: &HamiltonianInput, out: &mut [f64]) {
        (self.argmin)(input, out);
        for (i, a) in out.iter_mut().enumerate() {
            *a = if input.regime.is_defaulted(i) { 0.0 } else { self.spec.bound(i).project(*a) };
        }
    }
}

fn zero_defaulted(regime: &Regime, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate() {
        if regime.is_defaulted(i) {
            *v = 0.0;
        }
    }
}

/// Project a control vector onto the box and zero its defaulted components.
pub fn project_control(spec: &ProblemSpec, regime: &Regime, a: &mut [f64]) {
    for (i, ai) in a.iter_mut().enumerate() {
        *ai = if regime.is_defaulted(i) { 0.0 } else { spec.bound(i).project(*ai) };
    }
}

/// Projection onto a box, exposed for the verifier's trial controls.
pub fn project(bound: ControlBound, a: f64) -> f64 {
    bound.project(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_spec;

    fn spec_n1(mu: f64, b: f64, sigma: f64, nu: f64, v: f64, gamma: f64) -> ProblemSpec {
        let text = format!(
            "n = 1\nhorizon = 1\nx0 = [{x0:?}]\n[mc]\nnum_paths = 1\ndt = 0.1\nseed = 1\n\
             [regime.\"\"]\nmu = [{mu:?}]\nb = [{b:?}]\nsigma = [{sigma:?}]\nnu = [{nu:?}]\nv = [{v:?}]\ngamma = [{gamma:?}]\n",
            x0 = v + 1.0
        );
        load_spec(&text).unwrap()
    }

    fn input<'a>(x: &'a [f64], a: &'a [f64], y: &'a [f64], z: &'a [f64]) -> HamiltonianInput<'a> {
        HamiltonianInput { regime: Regime::root(1), t: 0.0, x, a, y, z }
    }

    #[test]
    fn substitution_examples() {
        let spec = spec_n1(0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(hamiltonian(&input(&[1.0], &[2.0], &[3.0], &[0.0]), &spec), 8.5);
        let spec = spec_n1(0.0, 0.0, 0.0, 1.0, 0.0, 1.0);
        assert_eq!(hamiltonian(&input(&[1.0], &[0.0], &[3.0], &[2.0]), &spec), 2.5);
        // x = v, a = 0, σx + ν = 0: only b·y survives.
        let spec = spec_n1(0.0, 0.7, 2.0, -2.0, 1.0, 3.0);
        let h = hamiltonian(&input(&[1.0], &[0.0], &[5.0], &[9.0]), &spec);
        assert!((h - 0.7 * 5.0).abs() < 1e-12, "{h}");
    }

    #[test]
    fn gradient_examples() {
        let spec = spec_n1(0.3, 0.0, 0.1, 0.0, 0.5, 1.0);
        let inp = input(&[1.5], &[2.0], &[2.0], &[4.0]);
        let gx = grad_x_hamiltonian(&inp, &spec);
        assert!((gx[0] - 2.0).abs() < 1e-12);
        let inp = input(&[1.5], &[2.0], &[3.0], &[4.0]);
        assert_eq!(grad_a_hamiltonian(&inp, &spec), vec![5.0]);
        let inp = input(&[1.5], &[-3.0], &[3.0], &[4.0]);
        assert_eq!(grad_a_hamiltonian(&inp, &spec), vec![0.0]);
    }

    #[test]
    fn terminal_gradient_example() {
        let spec = spec_n1(0.0, 0.0, 0.0, 1.0, 0.5, 2.0);
        let mut g = [0.0];
        LqModel::new(&spec).terminal_gradient(&Regime::root(1), 1.0, &[1.5], &mut g);
        assert_eq!(g[0], 2.0);
    }
}
