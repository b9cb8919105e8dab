//! Decomposition of the multicontinuum space into a slow (explicit) and a
//! fast (implicit) component.
//!
//! The slow component is spanned by mixed bases `Σ_j v_ij φ_j` for
//! `i < i0`. Mixing rows come either from the generalized eigenproblem
//! `Ã v = λ M v` or from an exhaustive search over subsets of the natural
//! basis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DIM;
use crate::linalg::dense_generalized_eig;
use crate::upscale::EffectiveTensors;

/// Largest subset-search dimension.
pub const SUBSET_LIMIT: usize = 12;

/// Largest eigenvalue of the symmetric part of a `2×2` matrix.
pub fn max_eig_2x2(a: [[f64; 2]; 2]) -> f64 {
    let (p, q) = (a[0][0], a[1][1]);
    let r = 0.5 * (a[0][1] + a[1][0]);
    0.5 * (p + q) + (0.25 * (p - q) * (p - q) + r * r).sqrt()
}

/// Eigenvalue of the symmetric part of a `2×2` matrix with the largest
/// magnitude, keeping its sign.
pub fn dominant_eig_2x2(a: [[f64; 2]; 2]) -> f64 {
    let hi = max_eig_2x2(a);
    let lo = a[0][0] + a[1][1] - hi;
    if lo.abs() > hi.abs() {
        lo
    } else {
        hi
    }
}

/// Scalar summary of each directional block `A^{kl}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Largest eigenvalue.
    #[default]
    MaxEig,
    /// Largest-magnitude eigenvalue with its sign.
    Dominant,
}

/// `Ã_kl = maxeig` of the symmetrized directional block `A^{kl}`.
pub fn reduce_tensor(t: &EffectiveTensors) -> DMatrix<f64> {
    reduce_tensor_with(t, Reduction::MaxEig)
}

/// Reduced matrix under the chosen block summary.
pub fn reduce_tensor_with(t: &EffectiveTensors, how: Reduction) -> DMatrix<f64> {
    let n = t.n;
    DMatrix::from_fn(n, n, |k, l| {
        let (x, y) = (t.a_block(k, l), t.a_block(l, k));
        let mut s = [[0.0; 2]; 2];
        for m in 0..DIM {
            for q in 0..DIM {
                s[m][q] = 0.25 * (x[m][q] + x[q][m] + y[m][q] + y[q][m]);
            }
        }
        match how {
            Reduction::MaxEig => max_eig_2x2(s),
            Reduction::Dominant => dominant_eig_2x2(s),
        }
    })
}

/// How per-block `Ã` and `C` are combined into domain matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// The block at the domain center.
    #[default]
    Central,
    /// Entrywise maximum.
    Max,
    /// Entrywise mean.
    Mean,
}

/// Domain-level matrices used to choose the split.
#[derive(Clone, Debug)]
pub struct BlockAggregate {
    pub n: usize,
    pub a_tilde: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub blocks: Vec<EffectiveTensors>,
    pub reduction: Reduction,
    pub aggregation: Aggregation,
}

impl BlockAggregate {
    pub fn new(tensors: &[EffectiveTensors]) -> Result<Self> {
        Self::with_options(tensors, Reduction::default(), Aggregation::default())
    }

    pub fn with_reduction(tensors: &[EffectiveTensors], reduction: Reduction) -> Result<Self> {
        Self::with_options(tensors, reduction, Aggregation::default())
    }

    pub fn with_options(
        tensors: &[EffectiveTensors],
        reduction: Reduction,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Config("no block tensors".into()))?;
        let n = first.n;
        if tensors.iter().any(|t| t.n != n) {
            return Err(Error::Dimension(
                "blocks disagree on continuum count".into(),
            ));
        }
        let count = tensors.len() as f64;
        let (a_tilde, c, m) = if aggregation == Aggregation::Central {
            let side = (tensors.len() as f64).sqrt().round() as usize;
            let t = &tensors[(side / 2) * side + side / 2];
            (reduce_tensor_with(t, reduction), t.c_matrix(), t.m_matrix())
        } else {
            let start = if aggregation == Aggregation::Max {
                f64::NEG_INFINITY
            } else {
                0.0
            };
            let mut a_tilde = DMatrix::from_element(n, n, start);
            let mut c = DMatrix::from_element(n, n, start);
            let mut m = DMatrix::zeros(n, n);
            let combine = |acc: &mut DMatrix<f64>, x: &DMatrix<f64>| {
                if aggregation == Aggregation::Max {
                    acc.zip_apply(x, |a, b| *a = a.max(b))
                } else {
                    *acc += x / count
                }
            };
            for t in tensors {
                combine(&mut a_tilde, &reduce_tensor_with(t, reduction));
                combine(&mut c, &t.c_matrix());
                m += t.m_matrix();
            }
            (a_tilde, c, m / count)
        };
        let m = (&m + m.transpose()) * 0.5;
        if m.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                row: 0,
                pivot: f64::NAN,
            });
        }
        Ok(Self {
            n,
            a_tilde,
            m,
            c,
            blocks: tensors.to_vec(),
            reduction,
            aggregation,
        })
    }
}

/// How the number of slow modes is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// Split at the largest ratio of consecutive eigenvalues if it reaches
    /// `min_ratio`, otherwise keep everything implicit.
    Gap {
        #[serde(default = "default_gap")]
        min_ratio: f64,
    },
    /// Slow modes are those with `λ ≤ cut`.
    Threshold { cut: f64 },
    /// Largest `i0` with `λ_i0 ≤ H²/(C1 τ)`.
    TargetTau { tau: f64, c1: f64, coarse_h: f64 },
}

fn default_gap() -> f64 {
    1e2
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::Gap {
            min_ratio: default_gap(),
        }
    }
}

pub fn select_i0(lambda: &[f64], policy: &SelectionPolicy) -> usize {
    match *policy {
        SelectionPolicy::Gap { min_ratio } => {
            let mut best = (0, 0.0f64);
            for k in 1..lambda.len() {
                let (lo, hi) = (lambda[k - 1], lambda[k]);
                let ratio = if lo > 0.0 {
                    hi / lo
                } else if hi > 0.0 {
                    f64::INFINITY
                } else {
                    1.0
                };
                if ratio > best.1 {
                    best = (k, ratio);
                }
            }
            if best.1 >= min_ratio {
                best.0
            } else {
                0
            }
        }
        SelectionPolicy::Threshold { cut } => lambda.iter().take_while(|&&l| l <= cut).count(),
        SelectionPolicy::TargetTau { tau, c1, coarse_h } => {
            let cut = coarse_h * coarse_h / (c1 * tau);
            lambda.iter().take_while(|&&l| l <= cut).count()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    Spectral,
    Subset,
    Manual,
}

/// Outcome of the mixing inequality for one pair of slow modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingVerdict {
    pub i: usize,
    pub j: usize,
    /// Largest left side over blocks.
    pub lhs: f64,
    /// Right side at the block attaining `lhs - rhs` maximal.
    pub rhs: f64,
    pub pass: bool,
}

/// Chosen decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    /// Spectral eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Spectral eigenvectors as rows, `M`-orthonormal.
    pub eigenvectors: Vec<Vec<f64>>,
    /// Mixing rows actually used, slow rows first.
    pub v: Vec<Vec<f64>>,
    /// `(vᵀ)⁻¹`.
    pub v_hat: Vec<Vec<f64>>,
    pub i0: usize,
    pub method: SplitMethod,
    /// Mixing inequality verdicts for the spectral rows.
    pub verdicts: Vec<MixingVerdict>,
    /// Rate bounding the explicit component: at least `λ_i0` and at least the
    /// slow-span Rayleigh quotient of every block for spectral plans, the
    /// subset value for subset plans, zero when `i0 = 0`.
    pub slow_rate: f64,
    /// Natural indices of the slow subset for subset plans.
    pub subset: Option<Vec<usize>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, c, |i, j| rows[i][j])
}

impl SplitPlan {
    pub fn v_matrix(&self) -> DMatrix<f64> {
        matrix_of(&self.v)
    }

    pub fn v_hat_matrix(&self) -> DMatrix<f64> {
        matrix_of(&self.v_hat)
    }

    /// Indices of explicit split coordinates.
    pub fn explicit(&self) -> std::ops::Range<usize> {
        0..self.i0
    }

    /// Indices of implicit split coordinates.
    pub fn implicit(&self) -> std::ops::Range<usize> {
        self.i0..self.n
    }

    pub fn assumption_holds(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    /// Plan with prescribed mixing rows and split index.
    pub fn manual(v: DMatrix<f64>, i0: usize) -> Result<Self> {
        let n = v.nrows();
        if v.ncols() != n || i0 > n {
            return Err(Error::Dimension(format!(
                "mixing matrix {}x{}, i0 {i0}",
                n,
                v.ncols()
            )));
        }
        let v_hat = dual_matrix(&v)?;
        Ok(Self {
            n,
            eigenvalues: Vec::new(),
            eigenvectors: Vec::new(),
            v: rows_of(&v),
            v_hat: rows_of(&v_hat),
            i0,
            method: SplitMethod::Manual,
            verdicts: Vec::new(),
            slow_rate: 0.0,
            subset: None,
        })
    }

    /// Natural basis, `v = I`.
    pub fn identity(n: usize, i0: usize) -> Result<Self> {
        Self::manual(DMatrix::identity(n, n), i0)
    }
}

/// `v̂ = (vᵀ)⁻¹`.
pub fn dual_matrix(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    let lu = v.transpose().lu();
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::Singular("mixing matrix".into()))?;
    let check = inv.transpose() * v;
    let err = (check - DMatrix::<f64>::identity(n, n)).amax();
    if !(err <= 1e-9) {
        return Err(Error::Singular(format!(
            "mixing matrix inverse residual {err:e}"
        )));
    }
    Ok(inv)
}

/// Evaluate the mixing inequality for every slow pair on every block.
pub fn verify_mixing_assumption(
    blocks: &[EffectiveTensors],
    v: &DMatrix<f64>,
    i0: usize,
    how: Reduction,
) -> Vec<MixingVerdict> {
    let mut out = Vec::new();
    for i in 0..i0 {
        for j in 0..i0 {
            let mut worst: Option<(f64, f64, f64)> = None;
            for t in blocks {
                let (lhs, rhs, scale) = mixing_sides(t, v, i, j, how);
                let gap = (lhs - rhs) / scale.max(f64::MIN_POSITIVE);
                if worst.is_none_or(|w| gap > w.0) {
                    worst = Some((gap, lhs, rhs));
                }
            }
            if let Some((gap, lhs, rhs)) = worst {
                out.push(MixingVerdict {
                    i,
                    j,
                    lhs,
                    rhs,
                    pass: gap <= 1e-9,
                });
            }
        }
    }
    out
}

/// Both sides of the inequality for one block and one pair, plus a scale.
pub fn mixing_sides(
    t: &EffectiveTensors,
    v: &DMatrix<f64>,
    i: usize,
    j: usize,
    how: Reduction,
) -> (f64, f64, f64) {
    let n = t.n;
    let at = reduce_tensor_with(t, how);
    let mut sum = [[0.0; 2]; 2];
    let mut rhs = 0.0;
    let mut scale = 0.0;
    for k in 0..n {
        for l in 0..n {
            let w = v[(i, k)] * v[(j, l)];
            let b = t.a_block(k, l);
            for m in 0..DIM {
                for q in 0..DIM {
                    sum[m][q] += w * b[m][q];
                }
            }
            rhs += w * at[(k, l)];
            scale += (w * at[(k, l)]).abs();
        }
    }
    (max_eig_2x2(sum), rhs, scale)
}

/// Largest Rayleigh quotient of `(Ã_p, M_p)` over the span of the first `i0`
/// rows of `v`, maximized over blocks.
pub fn slow_rate(agg: &BlockAggregate, v: &DMatrix<f64>, i0: usize) -> Result<f64> {
    if i0 == 0 {
        return Ok(0.0);
    }
    let vs = v.rows(0, i0).into_owned();
    let mut best = f64::NEG_INFINITY;
    for t in &agg.blocks {
        let a = &vs * reduce_tensor_with(t, agg.reduction) * vs.transpose();
        let m = &vs * t.m_matrix() * vs.transpose();
        let (lam, _) = dense_generalized_eig(&a, &m)?;
        best = best.max(lam[i0 - 1]);
    }
    Ok(best)
}

/// Eigen-decomposition split with the given selection policy.
pub fn spectral_split(agg: &BlockAggregate, policy: &SelectionPolicy) -> Result<SplitPlan> {
    let (lambda, vecs) = dense_generalized_eig(&agg.a_tilde, &agg.m)?;
    let v = vecs.transpose();
    let lambda: Vec<f64> = lambda.iter().copied().collect();
    let i0 = select_i0(&lambda, policy);
    let v_hat = dual_matrix(&v)?;
    let verdicts = verify_mixing_assumption(&agg.blocks, &v, i0, agg.reduction);
    Ok(SplitPlan {
        n: agg.n,
        eigenvectors: rows_of(&v),
        v: rows_of(&v),
        v_hat: rows_of(&v_hat),
        slow_rate: slow_rate(agg, &v, i0)?.max(if i0 > 0 { lambda[i0 - 1] } else { 0.0 }),
        eigenvalues: lambda,
        i0,
        method: SplitMethod::Spectral,
        verdicts,
        subset: None,
    })
}

/// Largest generalized eigenvalue of the pair restricted to subset `s`,
/// maximized over blocks.
pub fn subset_value(blocks: &[EffectiveTensors], s: &[usize]) -> Result<f64> {
    let d = s.len() * DIM;
    let mut best = f64::NEG_INFINITY;
    for t in blocks {
        let a = DMatrix::from_fn(d, d, |r, c| t.a(s[r / DIM], r % DIM, s[c / DIM], c % DIM));
        let m = DMatrix::from_fn(d, d, |r, c| {
            if r % DIM == c % DIM {
                t.m(s[r / DIM], s[c / DIM])
            } else {
                0.0
            }
        });
        let (lam, _) = dense_generalized_eig(&a, &m)?;
        best = best.max(lam[d - 1]);
    }
    Ok(best)
}

/// Best `i`-element subset of natural indices, ties to the lexicographically
/// smallest.
pub fn subset_split(agg: &BlockAggregate, i: usize) -> Result<(Vec<usize>, f64)> {
    let n = agg.n;
    if n > SUBSET_LIMIT {
        return Err(Error::Config(format!(
            "subset search limited to {SUBSET_LIMIT} continua, got {n}"
        )));
    }
    if i == 0 || i > n {
        return Err(Error::Config(format!("subset size {i} outside 1..={n}")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut s: Vec<usize> = (0..i).collect();
    loop {
        let val = subset_value(&agg.blocks, &s)?;
        if best.as_ref().is_none_or(|b| val < b.1 * (1.0 - 1e-12)) {
            best = Some((s.clone(), val));
        }
        // Next combination in lexicographic order.
        let mut k = i;
        while k > 0 && s[k - 1] == n - i + k - 1 {
            k -= 1;
        }
        if k == 0 {
            break;
        }
        s[k - 1] += 1;
        for t in k..i {
            s[t] = s[t - 1] + 1;
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Plan from a subset: slow rows are the chosen natural basis vectors.
fn subset_plan(spectral: SplitPlan, subset: Vec<usize>, value: f64) -> Result<SplitPlan> {
    let n = spectral.n;
    let rest = (0..n).filter(|k| !subset.contains(k));
    let order: Vec<usize> = subset.iter().copied().chain(rest).collect();
    let v = DMatrix::from_fn(n, n, |r, c| if order[r] == c { 1.0 } else { 0.0 });
    let v_hat = dual_matrix(&v)?;
    Ok(SplitPlan {
        v: rows_of(&v),
        v_hat: rows_of(&v_hat),
        method: SplitMethod::Subset,
        slow_rate: value,
        i0: subset.len(),
        subset: Some(subset),
        ..spectral
    })
}

/// Spectral split, falling back to subset search when the mixing inequality
/// fails for any slow pair.
pub fn plan_split(agg: &BlockAggregate, policy: &SelectionPolicy) -> Result<SplitPlan> {
    let spectral = spectral_split(agg, policy)?;
    if spectral.assumption_holds() {
        return Ok(spectral);
    }
    log::info!(
        "mixing inequality fails, using subset search with i0 = {}",
        spectral.i0
    );
    let (subset, value) = subset_split(agg, spectral.i0)?;
    subset_plan(spectral, subset, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensors_from(
        n: usize,
        a: impl Fn(usize, usize, usize, usize) -> f64,
        m: &DMatrix<f64>,
    ) -> EffectiveTensors {
        let mut t = EffectiveTensors {
            n,
            a: vec![0.0; n * n * 4],
            m: m.iter().copied().collect(),
            c: vec![0.0; n * n],
            bc: vec![0.0; n * n * 2],
            f: vec![0.0; n],
        };
        // nalgebra is column-major; M is symmetric so ordering does not matter.
        for k in 0..n {
            for p in 0..2 {
                for l in 0..n {
                    for q in 0..2 {
                        let idx = t.a_idx(k, p, l, q);
                        t.a[idx] = a(k, p, l, q);
                    }
                }
            }
        }
        t
    }

    /// Random tensor with the pair symmetry and positive semidefinite form.
    fn random_tensors(n: usize, seed: u64) -> EffectiveTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * n;
        let g = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let a = &g * g.transpose();
        let h = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.2..0.2));
        let m = DMatrix::identity(n, n) + &h * h.transpose();
        tensors_from(n, |k, p, l, q| a[(2 * k + p, 2 * l + q)], &m)
    }

    #[test]
    fn reduce_examples() {
        let m = DMatrix::identity(2, 2);
        let t = tensors_from(2, |k, p, l, q| if k == l && p == q { 1.0 } else { 0.0 }, &m);
        assert!((reduce_tensor(&t) - DMatrix::identity(2, 2)).amax() < 1e-15);
        let t = tensors_from(
            1,
            |_, p, _, q| match (p, q) {
                (0, 0) => 3.0,
                (1, 1) => 7.0,
                _ => 0.0,
            },
            &DMatrix::identity(1, 1),
        );
        assert_eq!(reduce_tensor(&t)[(0, 0)], 7.0);
        for seed in 0..10 {
            let t = random_tensors(3, seed);
            let r = reduce_tensor(&t);
            for k in 0..3 {
                for l in 0..3 {
                    let b = t.a_block(k, l);
                    let s = DMatrix::from_fn(2, 2, |p, q| 0.5 * (b[p][q] + b[q][p]));
                    let oracle = s.symmetric_eigenvalues().max();
                    assert!((r[(k, l)] - oracle).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gap_and_threshold_policies() {
        let gap = SelectionPolicy::default();
        assert_eq!(select_i0(&[10.7, 87.4, 7.31e6], &gap), 2);
        assert_eq!(select_i0(&[1.0, 1.0, 1.0], &gap), 0);
        let tau = SelectionPolicy::TargetTau {
            tau: 1.0,
            c1: 1.0,
            coarse_h: 1e3f64.sqrt(),
        };
        assert_eq!(select_i0(&[16.6, 279.0, 5.39e5, 8.70e6], &tau), 2);
        assert_eq!(
            select_i0(&[1.0, 5.0], &SelectionPolicy::Threshold { cut: 0.5 }),
            0
        );
        assert_eq!(
            select_i0(&[1.0, 5.0], &SelectionPolicy::Threshold { cut: 10.0 }),
            2
        );
    }

    #[test]
    fn identity_pair_has_no_split() {
        let m = DMatrix::identity(3, 3);
        let t = tensors_from(3, |k, p, l, q| if k == l && p == q { 1.0 } else { 0.0 }, &m);
        let agg = BlockAggregate::new(&[t]).unwrap();
        let plan = spectral_split(&agg, &SelectionPolicy::default()).unwrap();
        assert_eq!(plan.i0, 0);
        assert!(plan.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert!(plan.verdicts.is_empty());
    }

    #[test]
    fn spectral_rows_are_m_orthonormal() {
        for seed in 0..5 {
            let agg = BlockAggregate::new(&[random_tensors(4, seed), random_tensors(4, seed + 50)])
                .unwrap();
            let plan = spectral_split(&agg, &SelectionPolicy::default()).unwrap();
            let v = plan.v_matrix();
            let g = &v * &agg.m * v.transpose();
            assert!((g - DMatrix::<f64>::identity(4, 4)).amax() < 1e-9);
            let vh = plan.v_hat_matrix();
            assert!((vh.transpose() * &v - DMatrix::<f64>::identity(4, 4)).amax() < 1e-9);
            assert!(plan.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn dual_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(dual_matrix(&i).unwrap(), i);
        let r = nalgebra::Rotation2::new(0.3).into_inner();
        let r = DMatrix::from_fn(2, 2, |a, b| r[(a, b)]);
        assert!((dual_matrix(&r).unwrap() - &r).amax() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let vh = dual_matrix(&v).unwrap();
        assert!((vh.transpose() * v - i).amax() < 1e-10);
        assert!(dual_matrix(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mixing_verdict_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let t = random_tensors(3, seed);
            let v = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let verdicts =
                verify_mixing_assumption(std::slice::from_ref(&t), &v, 2, Reduction::MaxEig);
            assert_eq!(verdicts.len(), 4);
            for vd in &verdicts {
                // Direct contraction.
                let mut s = DMatrix::<f64>::zeros(2, 2);
                let mut rhs = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        let b = DMatrix::from_fn(2, 2, |p, q| t.a(k, p, l, q));
                        s += &b * (v[(vd.i, k)] * v[(vd.j, l)]);
                        let bs = (&b + b.transpose()) * 0.5;
                        let c =
                            (bs + DMatrix::from_fn(2, 2, |p, q| {
                                0.5 * (t.a(l, p, k, q) + t.a(l, q, k, p))
                            })) * 0.5;
                        rhs += v[(vd.i, k)] * v[(vd.j, l)] * c.symmetric_eigenvalues().max();
                    }
                }
                let lhs = ((&s + s.transpose()) * 0.5).symmetric_eigenvalues().max();
                assert!((lhs - vd.lhs).abs() < 1e-10);
                assert!((rhs - vd.rhs).abs() < 1e-10);
                assert_eq!(
                    vd.pass,
                    lhs <= rhs + 1e-9 * rhs.abs().max(1e-300) || lhs <= rhs
                );
            }
        }
        // Block-diagonal tensor with nonnegative rows: equality.
        let t = tensors_from(
            2,
            |k, p, l, q| {
                if k == l {
                    [[2.0, 0.5], [0.5, 1.0]][p][q] * (k + 1) as f64
                } else {
                    0.0
                }
            },
            &DMatrix::identity(2, 2),
        );
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let vd = verify_mixing_assumption(&[t], &v, 2, Reduction::MaxEig);
        assert!(vd.iter().all(|x| x.pass));
        assert!(verify_mixing_assumption(&[], &v, 0, Reduction::MaxEig).is_empty());
    }

    #[test]
    fn subset_matches_enumeration() {
        for seed in 0..5 {
            let t = random_tensors(3, 100 + seed);
            let agg = BlockAggregate::new(std::slice::from_ref(&t)).unwrap();
            for i in 1..=3 {
                let (s, val) = subset_split(&agg, i).unwrap();
                // Oracle: max Rayleigh quotient via M^{-1/2} A M^{-1/2}.
                let subsets: Vec<Vec<usize>> = match i {
                    1 => vec![vec![0], vec![1], vec![2]],
                    2 => vec![vec![0, 1], vec![0, 2], vec![1, 2]],
                    _ => vec![vec![0, 1, 2]],
                };
                let vals: Vec<f64> = subsets
                    .iter()
                    .map(|s| {
                        let d = 2 * s.len();
                        let a =
                            DMatrix::from_fn(d, d, |r, c| t.a(s[r / 2], r % 2, s[c / 2], c % 2));
                        let m = DMatrix::from_fn(d, d, |r, c| {
                            if r % 2 == c % 2 {
                                t.m(s[r / 2], s[c / 2])
                            } else {
                                0.0
                            }
                        });
                        let e = m.symmetric_eigen();
                        let isq = &e.eigenvectors
                            * DMatrix::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x.sqrt()))
                            * e.eigenvectors.transpose();
                        (&isq * a * &isq).symmetric_eigenvalues().max()
                    })
                    .collect();
                let k = (0..vals.len())
                    .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
                    .unwrap();
                assert_eq!(s, subsets[k]);
                assert!((val - vals[k]).abs() <= 1e-9 * vals[k].abs());
            }
        }
        let one = BlockAggregate::new(&[random_tensors(1, 0)]).unwrap();
        assert_eq!(subset_split(&one, 1).unwrap().0, vec![0]);
    }

    #[test]
    fn eigenvalues_scale_with_coefficient() {
        let t = random_tensors(3, 11);
        let mut s = t.clone();
        s.a.iter_mut().for_each(|x| *x *= 7.0);
        let p = spectral_split(
            &BlockAggregate::new(&[t]).unwrap(),
            &SelectionPolicy::default(),
        )
        .unwrap();
        let q = spectral_split(
            &BlockAggregate::new(&[s]).unwrap(),
            &SelectionPolicy::default(),
        )
        .unwrap();
        for (a, b) in p.eigenvalues.iter().zip(&q.eigenvalues) {
            assert!((7.0 * a - b).abs() <= 1e-10 * b.abs());
        }
        for (r, w) in p.v.iter().zip(&q.v) {
            let d: f64 = r.iter().zip(w).map(|(x, y)| x * y).sum::<f64>().abs();
            let n: f64 = r.iter().map(|x| x * x).sum::<f64>();
            assert!((d - n).abs() < 1e-8 * n);
        }
    }

    #[test]
    fn fallback_produces_valid_plan() {
        // Strongly coupled off-diagonal blocks make mixed rows violate the
        // inequality.
        let m = DMatrix::identity(2, 2);
        let t = tensors_from(
            2,
            |k, p, l, q| {
                let base = [[1.0, 0.0], [0.0, 1.0]][p][q];
                match (k, l) {
                    (0, 0) => base,
                    (1, 1) => 1e4 * base,
                    _ => [[0.0, 50.0], [-50.0, 0.0]][p][q] + 0.9 * base,
                }
            },
            &m,
        );
        let agg = BlockAggregate::new(&[t]).unwrap();
        let plan = plan_split(&agg, &SelectionPolicy::default()).unwrap();
        assert_eq!(plan.i0, 1);
        assert!(!plan.verdicts.is_empty());
        if !plan.assumption_holds() {
            assert_eq!(plan.method, SplitMethod::Subset);
            assert_eq!(plan.subset.as_deref(), Some(&[0][..]));
        }
        let v = plan.v_matrix();
        assert!(
            (plan.v_hat_matrix().transpose() * v - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12
        );
    }
}
