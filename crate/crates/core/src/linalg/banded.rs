use crate::error::{Error, Result};

use super::sparse::CsrMatrix;

/// LU factorization with partial pivoting of a general banded matrix.
///
/// Row `i` keeps columns `i - kl ..= i + ku + kl`; the extra `kl` columns hold
/// fill created by row interchanges.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    u: Vec<f64>,
    l: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "{}x{} matrix is not square",
                n,
                a.ncols()
            )));
        }
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut u = vec![0.0; n * width];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                u[i * width + j + kl - i] = v;
            }
        }
        let mut l = vec![0.0; n * kl.max(1)];
        let mut piv = vec![0usize; n];
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        let at = |i: usize, j: usize| i * width + j + kl - i;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku + kl).min(n - 1);
            let mut p = k;
            let mut best = u[at(k, k)].abs();
            for r in k + 1..=last_row {
                let v = u[at(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > 1e-14 * scale) {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            piv[k] = p;
            if p != k {
                for c in k..=last_col {
                    u.swap(at(k, c), at(p, c));
                }
            }
            let pivot = u[at(k, k)];
            for r in k + 1..=last_row {
                let m = u[at(r, k)] / pivot;
                l[k * kl + (r - k - 1)] = m;
                if m != 0.0 {
                    for c in k + 1..=last_col {
                        u[at(r, c)] -= m * u[at(k, c)];
                    }
                }
            }
        }
        Ok(Self {
            n,
            kl,
            ku,
            width,
            u,
            l,
            piv,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let (n, kl, w) = (self.n, self.kl, self.width);
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            if xk != 0.0 {
                for r in k + 1..=(k + kl).min(n - 1) {
                    x[r] -= self.l[k * kl + (r - k - 1)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + self.ku + kl).min(n - 1);
            let row = &self.u[k * w..(k + 1) * w];
            let mut s = x[k];
            for c in k + 1..=last_col {
                s -= row[c + kl - k] * x[c];
            }
            x[k] = s / row[kl];
        }
    }
}
