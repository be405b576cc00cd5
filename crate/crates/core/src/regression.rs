//! Ridge-regularized least squares on total-degree polynomial bases.
//!
//! Each design standardizes the surviving state components by their sample mean
//! and standard deviation, drops components without spread, and lowers the
//! degree when there are too few rows. Evaluation outside the sampled box is
//! extended linearly from the nearest box point, so fitted affine laws keep
//! their slope far from the data instead of following the curvature of noisy
//! higher-order terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const CHUNK: usize = 2048;

/// Polynomial basis over a subset of state components.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    /// Node indices entering the basis.
    pub components: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Sampled range of each component.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Exponent of each component, per term; term 0 is the constant.
    pub exponents: Vec<Vec<u8>>,
}

/// Number of monomials of total degree ≤ d in s variables.
pub fn basis_size(s: usize, d: usize) -> usize {
    let mut c = 1usize;
    for k in 1..=d {
        c = c * (s + k) / k;
    }
    c
}

fn exponents(s: usize, d: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; s]];
    for deg in 1..=d {
        let mut cur = vec![0u8; s];
        push_degree(&mut out, &mut cur, 0, deg);
    }
    out
}

fn push_degree(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        push_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

impl Basis {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.exponents.iter().map(|e| e.iter().map(|&k| k as usize).sum::<usize>()).max().unwrap_or(0)
    }

    fn eval_std(&self, u: &[f64], out: &mut [f64]) {
        for (k, e) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (j, &p) in e.iter().enumerate() {
                for _ in 0..p {
                    v *= u[j];
                }
            }
            out[k] = v;
        }
    }

    /// d term_k / d u_j at standardized point u.
    fn deriv_std(&self, u: &[f64], j: usize, k: usize) -> f64 {
        let e = &self.exponents[k];
        if e[j] == 0 {
            return 0.0;
        }
        let mut v = e[j] as f64;
        for (l, &p) in e.iter().enumerate() {
            let p = if l == j { p - 1 } else { p };
            for _ in 0..p {
                v *= u[l];
            }
        }
        v
    }

    /// Feature vector at the full state `x` (indexed by node). Returns true
    /// when `x` lies outside the sampled box and the linear extension was used.
    pub fn features(&self, x: &[f64], out: &mut [f64]) -> bool {
        let s = self.components.len();
        let mut u = [0.0f64; 16];
        let mut delta = [0.0f64; 16];
        let mut outside = false;
        for (j, &c) in self.components.iter().enumerate() {
            let xc = x[c].clamp(self.lo[j], self.hi[j]);
            if xc != x[c] {
                outside = true;
                delta[j] = (x[c] - xc) / self.scale[j];
            }
            u[j] = (xc - self.mean[j]) / self.scale[j];
        }
        self.eval_std(&u[..s], out);
        if outside {
            for k in 0..self.len() {
                let mut add = 0.0;
                for j in 0..s {
                    if delta[j] != 0.0 {
                        add += self.deriv_std(&u[..s], j, k) * delta[j];
                    }
                }
                out[k] += add;
            }
        }
        outside
    }

    /// Features of the partial derivative with respect to node `node` at `x`
    /// (zero if the node is not a basis component).
    pub fn gradient_features(&self, x: &[f64], node: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let Some(j) = self.components.iter().position(|&c| c == node) else { return };
        let s = self.components.len();
        let mut u = [0.0f64; 16];
        for (l, &c) in self.components.iter().enumerate() {
            u[l] = (x[c].clamp(self.lo[l], self.hi[l]) - self.mean[l]) / self.scale[l];
        }
        for (k, o) in out.iter_mut().enumerate().take(self.len()) {
            *o = self.deriv_std(&u[..s], j, k) / self.scale[j];
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.components
            .iter()
            .enumerate()
            .all(|(j, &c)| x[c] >= self.lo[j] && x[c] <= self.hi[j])
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A factorized regression design for one (regime, step).
pub struct Design {
    pub basis: Basis,
    rows: usize,
    phi: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// (min/max)² of the Cholesky diagonal; 1 is perfectly conditioned.
    pub condition: f64,
}

/// Result of one least-squares fit.
pub struct Fit {
    pub coeffs: Vec<f64>,
    pub fitted: Vec<f64>,
    pub rms: f64,
}

impl Design {
    /// `points` is row-major with one row per sample over `components`
    /// (node indices), `n` is the full state dimension.
    pub fn build(
        points: &[f64],
        components: &[usize],
        max_degree: usize,
        ridge: f64,
    ) -> Result<Design, String> {
        let s_all = components.len();
        let rows = if s_all == 0 { points.len() } else { points.len() / s_all };
        if rows == 0 {
            return Err("no design points".into());
        }
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for (j, &c) in components.iter().enumerate() {
            let col = (0..rows).map(|r| points[r * s_all + j]);
            let m = col.clone().sum::<f64>() / rows as f64;
            let var = col.clone().map(|x| (x - m) * (x - m)).sum::<f64>() / rows as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                kept.push((j, c));
                mean.push(m);
                scale.push(sd);
                lo.push(col.clone().fold(f64::INFINITY, f64::min));
                hi.push(col.fold(f64::NEG_INFINITY, f64::max));
            }
        }
        let s = kept.len();
        let mut degree = if s == 0 { 0 } else { max_degree };
        while degree > 0 && 2 * basis_size(s, degree) > rows {
            degree -= 1;
        }
        let basis = Basis {
            components: kept.iter().map(|&(_, c)| c).collect(),
            mean,
            scale,
            lo,
            hi,
            exponents: exponents(s, degree),
        };
        let nb = basis.len();

        let mut phi = vec![0.0; rows * nb];
        phi.par_chunks_mut(nb * CHUNK).enumerate().for_each(|(ci, block)| {
            let mut u = vec![0.0; s];
            for (r, out) in block.chunks_mut(nb).enumerate() {
                let row = ci * CHUNK + r;
                for (l, &(j, _)) in kept.iter().enumerate() {
                    u[l] = (points[row * s_all + j] - basis.mean[l]) / basis.scale[l];
                }
                basis.eval_std(&u, out);
            }
        });

        let partials: Vec<Vec<f64>> = phi
            .par_chunks(nb * CHUNK)
            .map(|block| {
                let mut g = vec![0.0; nb * nb];
                for row in block.chunks(nb) {
                    for a in 0..nb {
                        let ra = row[a];
                        for b in a..nb {
                            g[a * nb + b] += ra * row[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(nb, nb);
        for g in &partials {
            for a in 0..nb {
                for b in a..nb {
                    gram[(a, b)] += g[a * nb + b];
                }
            }
        }
        for a in 0..nb {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        for a in 1..nb {
            gram[(a, a)] += ridge * rows as f64;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| "rank-deficient design (normal equations not positive definite)".to_string())?;
        let diag: Vec<f64> = (0..nb).map(|k| chol.l_dirty()[(k, k)]).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if dmax > 0.0 { (dmin / dmax).powi(2) } else { 0.0 };
        if condition < 1e-13 {
            return Err(format!("rank-deficient design (condition indicator {condition:e})"));
        }
        Ok(Design { basis, rows, phi, chol, condition })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_features(&self, r: usize) -> &[f64] {
        let nb = self.basis.len();
        &self.phi[r * nb..(r + 1) * nb]
    }

    pub fn fit(&self, target: &[f64]) -> Fit {
        assert_eq!(target.len(), self.rows);
        let nb = self.basis.len();
        let partials: Vec<Vec<f64>> = self
            .phi
            .par_chunks(nb * CHUNK)
            .zip(target.par_chunks(CHUNK))
            .map(|(block, y)| {
                let mut acc = vec![0.0; nb];
                for (row, &yv) in block.chunks(nb).zip(y) {
                    for k in 0..nb {
                        acc[k] += row[k] * yv;
                    }
                }
                acc
            })
            .collect();
        let mut rhs = DVector::<f64>::zeros(nb);
        for p in &partials {
            for k in 0..nb {
                rhs[k] += p[k];
            }
        }
        let sol = self.chol.solve(&rhs);
        let coeffs: Vec<f64> = sol.iter().copied().collect();
        let fitted: Vec<f64> = self
            .phi
            .par_chunks(nb)
            .map(|row| dot(row, &coeffs))
            .collect();
        let ss: f64 = fitted.iter().zip(target).map(|(f, y)| (f - y) * (f - y)).sum();
        let rms = (ss / self.rows as f64).sqrt();
        Fit { coeffs, fitted, rms }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(basis_size(2, 2), 6);
        assert_eq!(basis_size(3, 3), 20);
        assert_eq!(basis_size(0, 3), 1);
        for s in 0..4 {
            for d in 0..4 {
                assert_eq!(exponents(s, d).len(), basis_size(s, d), "s={s} d={d}");
            }
        }
    }

    #[test]
    fn recovers_polynomial() {
        let n = 400;
        let mut pts = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let a = (i as f64 * 0.37).sin() * 2.0 + 5.0;
            let b = (i as f64 * 0.11).cos();
            pts.push(a);
            pts.push(b);
            y.push(1.0 + 2.0 * a - 3.0 * b + 0.5 * a * b);
        }
        let d = Design::build(&pts, &[0, 2], 2, 0.0).unwrap();
        let fit = d.fit(&y);
        assert!(fit.rms < 1e-9, "{}", fit.rms);
        let mut f = vec![0.0; d.basis.len()];
        let x = [5.5, 9.0, 0.25];
        assert!(!d.basis.features(&x, &mut f));
        let want = 1.0 + 2.0 * 5.5 - 3.0 * 0.25 + 0.5 * 5.5 * 0.25;
        assert!((dot(&f, &fit.coeffs) - want).abs() < 1e-9);
        d.basis.gradient_features(&x, 0, &mut f);
        assert!((dot(&f, &fit.coeffs) - (2.0 + 0.5 * 0.25)).abs() < 1e-9);
    }

    #[test]
    fn affine_law_extends_linearly() {
        let pts: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let y: Vec<f64> = pts.iter().map(|x| 3.0 - 2.0 * x).collect();
        let d = Design::build(&pts, &[0], 2, 1e-8).unwrap();
        let fit = d.fit(&y);
        let mut f = vec![0.0; d.basis.len()];
        assert!(d.basis.features(&[-1e5], &mut f));
        let v = dot(&f, &fit.coeffs);
        assert!((v - (3.0 + 2e5)).abs() < 1e-3 * 2e5, "{v}");
    }

    #[test]
    fn degenerate_columns_and_small_samples() {
        let pts = vec![1.0, 1.0, 1.0];
        let d = Design::build(&pts, &[0], 2, 1e-8).unwrap();
        assert_eq!(d.basis.len(), 1);
        let fit = d.fit(&[1.0, 2.0, 3.0]);
        assert!((fit.coeffs[0] - 2.0).abs() < 1e-12);
        let pts = vec![0.0, 1.0, 2.0, 3.0];
        let d = Design::build(&pts, &[0], 3, 1e-8).unwrap();
        assert_eq!(d.basis.degree(), 1);
    }

    #[test]
    fn zero_ridge_collinear_fails() {
        // Two identical columns.
        let pts: Vec<f64> = (0..20).flat_map(|i| [i as f64, i as f64]).collect();
        assert!(Design::build(&pts, &[0, 1], 1, 0.0).is_err());
    }
}
