//! Lowest eigenpairs of a real symmetric tridiagonal matrix.
//!
//! Eigenvalues come from Sturm-sequence bisection, eigenvectors from inverse
//! iteration with a pivoted tridiagonal LU (the LAPACK `stebz`/`stein` pair,
//! specialised to the bottom of the spectrum).

/// Symmetric tridiagonal matrix; `off[i]` couples rows `i` and `i + 1`.
#[derive(Debug, Clone)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert_eq!(off.len() + 1, diag.len(), "off-diagonal must be one shorter");
        SymTridiagonal { diag, off }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Gershgorin interval containing the whole spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        let n = self.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let left = if i > 0 { self.off[i - 1].abs() } else { 0.0 };
            let right = if i + 1 < n { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - left - right);
            hi = hi.max(self.diag[i] + left + right);
        }
        (lo, hi)
    }

    fn pivot_floor(&self) -> f64 {
        let emax = self.off.iter().fold(0.0f64, |m, e| m.max(e * e));
        f64::MIN_POSITIVE * emax.max(1.0)
    }

    /// Number of eigenvalues strictly below `x` (Sturm count).
    pub fn count_below(&self, x: f64) -> usize {
        let floor = self.pivot_floor();
        let mut count = 0;
        let mut q = self.diag[0] - x;
        for i in 0..self.len() {
            if i > 0 {
                q = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / q;
            }
            if q.abs() < floor {
                q = -floor;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// The `m` smallest eigenvalues in ascending order, to full precision.
    pub fn lowest_eigenvalues(&self, m: usize) -> Vec<f64> {
        let (_, ghi) = self.gershgorin();
        self.lowest_eigenvalues_below(m, ghi, 4.0 * f64::EPSILON)
    }

    /// The `m` smallest eigenvalues, all known to lie below `upper`, bisected
    /// to relative width `rel_tol`.
    pub fn lowest_eigenvalues_below(&self, m: usize, upper: f64, rel_tol: f64) -> Vec<f64> {
        let m = m.min(self.len());
        let (glo, ghi) = self.gershgorin();
        let ghi = ghi.min(upper);
        let mut lower = vec![glo; m];
        let mut upper = vec![ghi; m];
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut lo = lower[i];
            let mut hi = upper[i];
            for _ in 0..200 {
                let tol = rel_tol * lo.abs().max(hi.abs()) + f64::MIN_POSITIVE;
                if hi - lo <= tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let c = self.count_below(mid);
                // Every count tightens the brackets of the eigenvalues still to come.
                for idx in i..m {
                    if idx < c {
                        upper[idx] = upper[idx].min(mid);
                    } else {
                        lower[idx] = lower[idx].max(mid);
                    }
                }
                if c > i {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let lambda = 0.5 * (lo + hi);
            for l in lower.iter_mut().skip(i + 1) {
                *l = l.max(lo);
            }
            out.push(lambda);
        }
        out
    }

    /// Eigenvector for the (accurate) eigenvalue estimate `lambda`, unit
    /// Euclidean norm, by inverse iteration.
    pub fn eigenvector(&self, lambda: f64) -> Vec<f64> {
        let lu = ShiftedLu::factor(self, lambda);
        let n = self.len();
        // Deterministic start vector with components in every eigendirection.
        let mut x: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.5 * ((i as f64 * 0.618_033_988_75).fract() - 0.5))
            .collect();
        normalize(&mut x);
        for _ in 0..3 {
            lu.solve(&mut x);
            normalize(&mut x);
        }
        x
    }

    /// `x^T T x` for unit `x`.
    pub fn rayleigh(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        let n = self.len();
        for i in 0..n {
            let mut tx = self.diag[i] * x[i];
            if i > 0 {
                tx += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                tx += self.off[i] * x[i + 1];
            }
            acc += x[i] * tx;
        }
        acc
    }

    /// `T x` written into `out`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.off[i] * x[i + 1];
            }
            out[i] = v;
        }
    }
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
}

/// Pivoted LU of `T - sigma I` (LAPACK `gttrf` layout).
struct ShiftedLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl ShiftedLu {
    fn factor(t: &SymTridiagonal, sigma: f64) -> Self {
        let n = t.len();
        let mut dl = t.off.clone();
        let mut du = t.off.clone();
        let mut d: Vec<f64> = t.diag.iter().map(|v| v - sigma).collect();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        let (glo, ghi) = t.gershgorin();
        let tiny = f64::EPSILON * glo.abs().max(ghi.abs()).max(1.0);
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    d[i] = tiny;
                }
                let fact = dl[i] / d[i];
                dl[i] = fact;
                d[i + 1] -= fact * du[i];
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                swapped[i] = true;
            }
        }
        if d[n - 1] == 0.0 {
            d[n - 1] = tiny;
        }
        ShiftedLu {
            dl,
            d,
            du,
            du2,
            swapped,
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n - 1 {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense Jacobi eigenvalue iteration; an independent oracle for small sizes.
    fn jacobi_eigenvalues(t: &SymTridiagonal) -> Vec<f64> {
        let n = t.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = t.diag[i];
            if i + 1 < n {
                a[i][i + 1] = t.off[i];
                a[i + 1][i] = t.off[i];
            }
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        ev
    }

    fn sample_matrix(n: usize) -> SymTridiagonal {
        let diag = (0..n).map(|i| 2.0 + (i as f64 * 0.37).sin()).collect();
        let off = (0..n - 1).map(|i| -1.0 + 0.3 * (i as f64 * 1.3).cos()).collect();
        SymTridiagonal::new(diag, off)
    }

    #[test]
    fn bisection_matches_dense_oracle() {
        let t = sample_matrix(24);
        let dense = jacobi_eigenvalues(&t);
        let ours = t.lowest_eigenvalues(24);
        for (a, b) in ours.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn laplacian_closed_form() {
        // Dirichlet second difference: eigenvalues 2 - 2 cos(pi j / (n+1)).
        let n = 200;
        let t = SymTridiagonal::new(vec![2.0; n], vec![-1.0; n - 1]);
        let ev = t.lowest_eigenvalues(10);
        for (j, lam) in ev.iter().enumerate() {
            let exact = 2.0 - 2.0 * (std::f64::consts::PI * (j + 1) as f64 / (n + 1) as f64).cos();
            assert!((lam - exact).abs() < 1e-13, "{lam} vs {exact}");
        }
    }

    #[test]
    fn inverse_iteration_residual() {
        let t = sample_matrix(300);
        let ev = t.lowest_eigenvalues(5);
        let mut tx = vec![0.0; 300];
        for lam in ev {
            let x = t.eigenvector(lam);
            t.apply(&x, &mut tx);
            let res: f64 = tx.iter().zip(&x).map(|(a, b)| (a - lam * b).powi(2)).sum::<f64>().sqrt();
            assert!(res < 1e-10, "{res}");
        }
    }

    #[test]
    fn sturm_count_brackets_spectrum() {
        let t = sample_matrix(50);
        let (lo, hi) = t.gershgorin();
        assert_eq!(t.count_below(lo - 1.0), 0);
        assert_eq!(t.count_below(hi + 1.0), 50);
    }
}
