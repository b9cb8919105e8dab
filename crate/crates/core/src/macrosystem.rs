//! Coarse macroscopic system in split coordinates and its time steppers.
//!
//! Unknowns are coarse Q1 nodal values of every split coordinate at interior
//! coarse nodes (zero trace on ∂Ω), interleaved as `node · N + mode`. Modes
//! `0..i0` form the explicit component, the rest the implicit one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assembly::{q1_directional, q1_mass, Q1_STIFFNESS};
use crate::error::{Error, Result};
use crate::geometry::{MeshHierarchy, DIM};
use crate::linalg::{
    dense_generalized_eig, extreme_generalized_eigenvalue, lanczos_max, BandedLu, CsrMatrix,
    Extreme, SkylineCholesky, TripletMatrix, DENSE_LIMIT,
};
use crate::split::{matrix_of, SplitPlan};
use crate::upscale::EffectiveTensors;

/// Per-block tensors expressed in split coordinates.
pub fn split_tensors(t: &EffectiveTensors, v: &DMatrix<f64>) -> EffectiveTensors {
    let n = t.n;
    let mm = v * t.m_matrix() * v.transpose();
    let cc = v * t.c_matrix() * v.transpose();
    let mut a = vec![0.0; n * DIM * n * DIM];
    for i in 0..n {
        for j in 0..n {
            for m in 0..DIM {
                for q in 0..DIM {
                    let mut s = 0.0;
                    for k in 0..n {
                        for l in 0..n {
                            s += v[(i, k)] * v[(j, l)] * t.a(k, m, l, q);
                        }
                    }
                    a[((i * DIM + m) * n + j) * DIM + q] = s;
                }
            }
        }
    }
    let mut bc = vec![0.0; n * DIM * n];
    for i in 0..n {
        for m in 0..DIM {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        s += v[(i, k)] * v[(j, l)] * t.bc(k, m, l);
                    }
                }
                bc[(i * DIM + m) * n + j] = s;
            }
        }
    }
    let f = (0..n)
        .map(|i| (0..n).map(|k| v[(i, k)] * t.f[k]).sum())
        .collect();
    let sym = |x: DMatrix<f64>| {
        let s = (&x + x.transpose()) * 0.5;
        s.transpose().iter().copied().collect::<Vec<f64>>()
    };
    EffectiveTensors {
        n,
        a,
        m: sym(mm),
        c: sym(cc),
        bc,
        f,
    }
}

/// Interior coarse Q1 nodes of the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseSpace {
    pub coarse_n: usize,
}

impl CoarseSpace {
    pub fn num_nodes(&self) -> usize {
        let m = self.coarse_n.saturating_sub(1);
        m * m
    }

    pub fn h(&self) -> f64 {
        1.0 / self.coarse_n as f64
    }

    /// Interior index of coarse node `(i, j)`, if interior.
    pub fn node(&self, i: usize, j: usize) -> Option<usize> {
        let n = self.coarse_n;
        (i > 0 && j > 0 && i < n && j < n).then(|| (i - 1) + (j - 1) * (n - 1))
    }

    pub fn node_ij(&self, k: usize) -> (usize, usize) {
        let m = self.coarse_n - 1;
        (k % m + 1, k / m + 1)
    }

    /// Corner nodes of block `(bx, by)` in counterclockwise order from the
    /// lower left.
    pub fn element(&self, bx: usize, by: usize) -> [Option<usize>; 4] {
        [
            self.node(bx, by),
            self.node(bx + 1, by),
            self.node(bx + 1, by + 1),
            self.node(bx, by + 1),
        ]
    }
}

/// Assembled macroscopic system.
#[derive(Clone, Debug)]
pub struct MacroSystem {
    pub space: CoarseSpace,
    pub n: usize,
    pub i0: usize,
    pub mass: CsrMatrix,
    pub stiff: CsrMatrix,
    pub react: CsrMatrix,
    pub load: Vec<f64>,
    /// Split-coordinate tensors per block.
    pub tensors: Vec<EffectiveTensors>,
}

/// Which component of the split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    /// Fast modes, treated implicitly.
    Implicit,
    /// Slow modes, treated explicitly.
    Explicit,
}

impl MacroSystem {
    pub fn dim(&self) -> usize {
        self.space.num_nodes() * self.n
    }

    pub fn dof(&self, node: usize, mode: usize) -> usize {
        node * self.n + mode
    }

    pub fn is_explicit(&self, dof: usize) -> bool {
        dof % self.n < self.i0
    }

    pub fn dofs(&self, c: Component) -> Vec<usize> {
        (0..self.dim())
            .filter(|&d| self.is_explicit(d) == (c == Component::Explicit))
            .collect()
    }

    /// `(same-component part, cross-component part)` of a matrix.
    fn split_by_component(&self, a: &CsrMatrix) -> (CsrMatrix, CsrMatrix) {
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..a.nrows() {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if self.is_explicit(i) == self.is_explicit(j) {
                    same.push((i, j, v));
                } else {
                    cross.push((i, j, v));
                }
            }
        }
        let n = a.nrows();
        (
            CsrMatrix::from_triplets(n, n, &same),
            CsrMatrix::from_triplets(n, n, &cross),
        )
    }

    /// Columns of `a` belonging to component `c`, others zeroed.
    fn columns(&self, a: &CsrMatrix, c: Component) -> CsrMatrix {
        let want = c == Component::Explicit;
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if self.is_explicit(j) == want {
                    t.push((i, j, v));
                }
            }
        }
        CsrMatrix::from_triplets(a.nrows(), a.ncols(), &t)
    }

    /// Restriction of `a` to the dofs of component `c`.
    pub fn component_block(&self, a: &CsrMatrix, row: Component, col: Component) -> CsrMatrix {
        a.select(&self.dofs(row), &self.dofs(col))
    }
}

/// Assemble the coarse system from per-block tensors in natural coordinates.
pub fn assemble_macro(
    mesh: &MeshHierarchy,
    tensors: &[EffectiveTensors],
    plan: &SplitPlan,
) -> Result<MacroSystem> {
    let nb = mesh.num_blocks();
    if tensors.len() != nb {
        return Err(Error::Config(format!(
            "tensors for {} of {nb} blocks",
            tensors.len()
        )));
    }
    let n = plan.n;
    if tensors.iter().any(|t| t.n != n) {
        return Err(Error::Dimension(format!(
            "plan has {n} continua, tensors disagree"
        )));
    }
    let v = matrix_of(&plan.v);
    let split: Vec<EffectiveTensors> = tensors.iter().map(|t| split_tensors(t, &v)).collect();
    let space = CoarseSpace {
        coarse_n: mesh.coarse_n(),
    };
    let h = space.h();
    let dim = space.num_nodes() * n;
    let mass_el = q1_mass(h);
    let dir: Vec<[[f64; 4]; 4]> = (0..DIM * DIM)
        .map(|mn| q1_directional(mn / DIM, mn % DIM))
        .collect();
    let mut tm = TripletMatrix::with_capacity(dim, dim, nb * 16 * n * n);
    let mut ta = TripletMatrix::with_capacity(dim, dim, nb * 16 * n * n);
    let mut tc = TripletMatrix::with_capacity(dim, dim, nb * 16 * n * n);
    let mut load = vec![0.0; dim];
    for (p, t) in split.iter().enumerate() {
        let (bx, by) = mesh.block_coords(p);
        let el = space.element(bx, by);
        for (a, na) in el.iter().enumerate() {
            let Some(na) = *na else { continue };
            for l in 0..n {
                load[na * n + l] += t.f[l] * h * h / 4.0;
            }
            for (b, nb_) in el.iter().enumerate() {
                let Some(nb_) = *nb_ else { continue };
                for l in 0..n {
                    for k in 0..n {
                        let (row, col) = (na * n + l, nb_ * n + k);
                        tm.push(row, col, t.m(k, l) * mass_el[b][a]);
                        tc.push(row, col, t.c(k, l) * mass_el[b][a]);
                        let mut s = 0.0;
                        for m in 0..DIM {
                            for q in 0..DIM {
                                s += t.a(k, m, l, q) * dir[m * DIM + q][b][a];
                            }
                        }
                        ta.push(row, col, s);
                    }
                }
            }
        }
    }
    Ok(MacroSystem {
        space,
        n,
        i0: plan.i0,
        mass: tm.to_csr(),
        stiff: ta.to_csr(),
        react: tc.to_csr(),
        load,
        tensors: split,
    })
}

/// Strengthened Cauchy–Schwarz constant between the two components in the
/// mass inner product.
pub fn estimate_gamma(sys: &MacroSystem) -> Result<f64> {
    let e = sys.dofs(Component::Explicit);
    let i = sys.dofs(Component::Implicit);
    if e.is_empty() || i.is_empty() {
        return Ok(0.0);
    }
    let m11 = sys.mass.select(&i, &i);
    let m12 = sys.mass.select(&i, &e);
    let m21 = sys.mass.select(&e, &i);
    let m22 = sys.mass.select(&e, &e);
    let m22c = SkylineCholesky::factor(&m22)?;
    let m11c = SkylineCholesky::factor(&m11)?;
    let lam = if i.len() <= DENSE_LIMIT {
        let mut s = DMatrix::zeros(i.len(), i.len());
        let mut unit = vec![0.0; i.len()];
        for c in 0..i.len() {
            unit[c] = 1.0;
            let col = m12.mul_vec(&m22c.solve(&m21.mul_vec(&unit)));
            unit[c] = 0.0;
            for (r, x) in col.into_iter().enumerate() {
                s[(r, c)] = x;
            }
        }
        let (l, _) = dense_generalized_eig(&s, &m11.to_dense())?;
        l[i.len() - 1]
    } else {
        let op = |x: &[f64]| m11c.solve(&m12.mul_vec(&m22c.solve(&m21.mul_vec(x))));
        lanczos_max(i.len(), op, |x| m11.mul_vec(x), 1e-10, i.len())?.0
    };
    Ok(lam.max(0.0).sqrt().min(1.0))
}

/// Inverse-inequality constant `C1 = H² · max ‖W‖²_{H¹}/‖W‖²_{L²}` on the coarse
/// Q1 space, with or without zero trace.
pub fn estimate_c1_with(coarse_n: usize, zero_trace: bool) -> Result<f64> {
    let h = 1.0 / coarse_n as f64;
    let side = coarse_n + 1;
    let index = |i: usize, j: usize| -> Option<usize> {
        if zero_trace {
            CoarseSpace { coarse_n }.node(i, j)
        } else {
            Some(i + j * side)
        }
    };
    let dim = if zero_trace {
        CoarseSpace { coarse_n }.num_nodes()
    } else {
        side * side
    };
    if dim == 0 {
        return Err(Error::Config(format!(
            "coarse space with {coarse_n} blocks per side has no interior nodes"
        )));
    }
    let mass_el = q1_mass(h);
    let mut tk = TripletMatrix::new(dim, dim);
    let mut tm = TripletMatrix::new(dim, dim);
    for by in 0..coarse_n {
        for bx in 0..coarse_n {
            let el = [
                index(bx, by),
                index(bx + 1, by),
                index(bx + 1, by + 1),
                index(bx, by + 1),
            ];
            for (a, na) in el.iter().enumerate() {
                for (b, nb) in el.iter().enumerate() {
                    if let (Some(na), Some(nb)) = (na, nb) {
                        tk.push(*na, *nb, Q1_STIFFNESS[a][b] + mass_el[a][b]);
                        tm.push(*na, *nb, mass_el[a][b]);
                    }
                }
            }
        }
    }
    let (lam, _) = extreme_generalized_eigenvalue(&tk.to_csr(), &tm.to_csr(), Extreme::Max)?;
    Ok(h * h * lam)
}

/// `C1` on the zero-trace coarse space of `mesh`.
pub fn estimate_c1(mesh: &MeshHierarchy) -> Result<f64> {
    estimate_c1_with(mesh.coarse_n(), true)
}

/// `inf ‖W‖²_m / (‖W‖²_a [+ ‖W‖²_c])` over one component.
pub fn stability_ratio(sys: &MacroSystem, c: Component, include_c: bool) -> Result<f64> {
    let d = sys.dofs(c);
    if d.is_empty() {
        return Err(Error::Config(format!("{c:?} component is empty")));
    }
    let mut a = sys.stiff.select(&d, &d);
    if include_c {
        a = a.lin_comb(1.0, &sys.react.select(&d, &d), 1.0);
    }
    let m = sys.mass.select(&d, &d);
    let (lam, _) = extreme_generalized_eigenvalue(&a, &m, Extreme::Max)?;
    Ok(1.0 / lam)
}

/// Time-step bounds for schemes 1 and 2 from the slow rate of the plan.
pub fn tau_bounds(
    plan: &SplitPlan,
    c1: f64,
    coarse_h: f64,
    tensors: &[EffectiveTensors],
) -> Result<(f64, f64)> {
    if plan.i0 == 0 {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let h2 = coarse_h * coarse_h;
    let v = matrix_of(&plan.v);
    let vs = v.rows(0, plan.i0).into_owned();
    let mut react = 0.0f64;
    for t in tensors {
        let c = &vs * t.c_matrix() * vs.transpose() * h2;
        let m = &vs * t.m_matrix() * vs.transpose();
        let (lam, _) = dense_generalized_eig(&c, &m)?;
        react = react.max(lam[plan.i0 - 1]);
    }
    let base = c1 * plan.slow_rate;
    Ok((h2 / base, h2 / (base + react)))
}

/// Time discretization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Implicit,
    Explicit,
    Scheme1,
    Scheme2,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Implicit,
        Scheme::Explicit,
        Scheme::Scheme1,
        Scheme::Scheme2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Implicit => "implicit",
            Scheme::Explicit => "explicit",
            Scheme::Scheme1 => "scheme1",
            Scheme::Scheme2 => "scheme2",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scheme '{s}' (expected implicit, explicit, scheme1 or scheme2)"
                ))
            })
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Current and previous macroscopic states.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroState {
    pub step: usize,
    pub t: f64,
    pub u: Vec<f64>,
    pub u_prev: Vec<f64>,
}

impl MacroState {
    /// Initial state with `U⁻¹ = U⁰`.
    pub fn initial(u0: Vec<f64>) -> Self {
        Self {
            step: 0,
            t: 0.0,
            u_prev: u0.clone(),
            u: u0,
        }
    }
}

enum Solver {
    Spd(SkylineCholesky),
    General(BandedLu),
    Triangular {
        imp: Vec<usize>,
        exp: Vec<usize>,
        first: Option<SkylineCholesky>,
        second: Option<SkylineCholesky>,
        coupling: CsrMatrix,
    },
}

/// Factored one-step map of a scheme at fixed `τ`.
pub struct Stepper<'a> {
    sys: &'a MacroSystem,
    scheme: Scheme,
    tau: f64,
    solver: Solver,
    m_diag: CsrMatrix,
    m_off: CsrMatrix,
    /// Matrix applied to `Uⁿ` and moved to the right-hand side.
    lagged: CsrMatrix,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a MacroSystem, scheme: Scheme, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "time step must be positive, got {tau}"
            )));
        }
        let (m_diag, m_off) = sys.split_by_component(&sys.mass);
        let ac = sys.stiff.lin_comb(1.0, &sys.react, 1.0);
        let inv = 1.0 / tau;
        let (solver, lagged) = match scheme {
            Scheme::Implicit => (
                Solver::Spd(SkylineCholesky::factor(&sys.mass.lin_comb(inv, &ac, 1.0))?),
                CsrMatrix::from_triplets(sys.dim(), sys.dim(), &[]),
            ),
            Scheme::Explicit => (Solver::Spd(SkylineCholesky::factor(&sys.mass)?), ac),
            Scheme::Scheme1 => {
                let lhs = m_diag
                    .lin_comb(inv, &sys.columns(&sys.stiff, Component::Implicit), 1.0)
                    .lin_comb(1.0, &sys.react, 1.0);
                let solver = if sys.i0 == 0 {
                    Solver::Spd(SkylineCholesky::factor(&lhs)?)
                } else {
                    Solver::General(BandedLu::factor(&lhs)?)
                };
                (solver, sys.columns(&sys.stiff, Component::Explicit))
            }
            Scheme::Scheme2 => {
                let imp = sys.dofs(Component::Implicit);
                let exp = sys.dofs(Component::Explicit);
                let first_m = m_diag
                    .select(&imp, &imp)
                    .lin_comb(inv, &ac.select(&imp, &imp), 1.0);
                let first = if imp.is_empty() {
                    None
                } else {
                    Some(SkylineCholesky::factor(&first_m)?)
                };
                let second = if exp.is_empty() {
                    None
                } else {
                    Some(SkylineCholesky::factor(
                        &m_diag.select(&exp, &exp).scaled(inv),
                    )?)
                };
                let coupling = ac.select(&exp, &imp);
                (
                    Solver::Triangular {
                        imp,
                        exp,
                        first,
                        second,
                        coupling,
                    },
                    sys.columns(&ac, Component::Explicit),
                )
            }
        };
        Ok(Self {
            sys,
            scheme,
            tau,
            solver,
            m_diag,
            m_off,
            lagged,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Right-hand side of the step from `state`.
    fn rhs(&self, state: &MacroState) -> Vec<f64> {
        let sys = self.sys;
        let inv = 1.0 / self.tau;
        let mut r = sys.load.clone();
        match self.scheme {
            Scheme::Implicit => sys.mass.mul_vec_acc(inv, &state.u, &mut r),
            Scheme::Explicit => {
                // M Uⁿ⁺¹ = M Uⁿ + τ (F − (A + C) Uⁿ), scaled by 1/τ.
                sys.mass.mul_vec_acc(inv, &state.u, &mut r);
                self.lagged.mul_vec_acc(-1.0, &state.u, &mut r);
            }
            Scheme::Scheme1 | Scheme::Scheme2 => {
                self.m_diag.mul_vec_acc(inv, &state.u, &mut r);
                let du: Vec<f64> = state
                    .u
                    .iter()
                    .zip(&state.u_prev)
                    .map(|(a, b)| a - b)
                    .collect();
                self.m_off.mul_vec_acc(-inv, &du, &mut r);
                self.lagged.mul_vec_acc(-1.0, &state.u, &mut r);
            }
        }
        r
    }

    /// Advance one step.
    pub fn step(&self, state: &MacroState) -> MacroState {
        let mut r = self.rhs(state);
        let u = match &self.solver {
            Solver::Spd(f) => {
                if self.scheme == Scheme::Explicit {
                    // Factor holds M; rhs was scaled by 1/τ.
                    f.solve_in_place(&mut r);
                    r.iter_mut().for_each(|x| *x *= self.tau);
                } else {
                    f.solve_in_place(&mut r);
                }
                r
            }
            Solver::General(f) => {
                f.solve_in_place(&mut r);
                r
            }
            Solver::Triangular {
                imp,
                exp,
                first,
                second,
                coupling,
            } => {
                let mut out = vec![0.0; r.len()];
                let mut u1: Vec<f64> = imp.iter().map(|&d| r[d]).collect();
                if let Some(f) = first {
                    f.solve_in_place(&mut u1);
                }
                let mut u2: Vec<f64> = exp.iter().map(|&d| r[d]).collect();
                coupling.mul_vec_acc(-1.0, &u1, &mut u2);
                if let Some(f) = second {
                    f.solve_in_place(&mut u2);
                }
                for (&d, x) in imp.iter().zip(u1) {
                    out[d] = x;
                }
                for (&d, x) in exp.iter().zip(u2) {
                    out[d] = x;
                }
                out
            }
        };
        MacroState {
            step: state.step + 1,
            t: (state.step + 1) as f64 * self.tau,
            u_prev: state.u.clone(),
            u,
        }
    }

    /// Energy functional of the stability theorems.
    pub fn monitor(&self, state: &MacroState, gamma: f64) -> f64 {
        let du: Vec<f64> = state
            .u
            .iter()
            .zip(&state.u_prev)
            .map(|(a, b)| a - b)
            .collect();
        gamma * gamma / self.tau * self.m_diag.quad_form(&du)
            + self.sys.stiff.quad_form(&state.u)
            + self.sys.react.quad_form(&state.u)
    }
}

/// Options for [`run_transient`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Record the energy functional with this γ.
    pub monitor_gamma: Option<f64>,
    /// Steps at which to store the state; the final step is always stored.
    pub record_steps: Vec<usize>,
}

/// Result of a time integration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub tau: f64,
    pub steps: usize,
    /// `(step, t, U)` at recorded steps.
    pub snapshots: Vec<(usize, f64, Vec<f64>)>,
    pub monitor: Vec<f64>,
    /// `‖Uⁿ⁺¹ − Uⁿ‖ / (τ ‖Uⁿ⁺¹‖)` per step.
    pub rates: Vec<f64>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        &self.snapshots.last().expect("final state recorded").2
    }
}

/// Number of steps covering `[0, T]`.
pub fn num_steps(t_final: f64, tau: f64) -> usize {
    ((t_final / tau) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Integrate from `u0` over `[0, T]`.
pub fn run_transient(
    sys: &MacroSystem,
    scheme: Scheme,
    tau: f64,
    t_final: f64,
    u0: Vec<f64>,
    opts: &RunOptions,
) -> Result<Trajectory> {
    if u0.len() != sys.dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, system {}",
            u0.len(),
            sys.dim()
        )));
    }
    let stepper = Stepper::new(sys, scheme, tau)?;
    let steps = num_steps(t_final, tau);
    let scale = {
        let steady = if sys.load.iter().any(|&f| f != 0.0) {
            let ac = sys.stiff.lin_comb(1.0, &sys.react, 1.0);
            SkylineCholesky::factor(&ac)
                .map(|f| l2(&f.solve(&sys.load)))
                .unwrap_or(0.0)
        } else {
            0.0
        };
        let s = l2(&u0).max(steady);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let mut record = opts.record_steps.clone();
    record.sort_unstable();
    record.dedup();
    let mut next = record.iter().copied().peekable();
    let mut state = MacroState::initial(u0);
    let mut snapshots = Vec::new();
    let mut monitor = Vec::new();
    let mut rates = Vec::with_capacity(steps);
    while next.peek() == Some(&0) {
        snapshots.push((0, 0.0, state.u.clone()));
        next.next();
    }
    if let Some(g) = opts.monitor_gamma {
        monitor.push(stepper.monitor(&state, g));
    }
    let mut diverged = false;
    for _ in 0..steps {
        state = stepper.step(&state);
        let nrm = l2(&state.u);
        let du: Vec<f64> = state
            .u
            .iter()
            .zip(&state.u_prev)
            .map(|(a, b)| a - b)
            .collect();
        rates.push(if nrm > 0.0 {
            l2(&du) / (tau * nrm)
        } else {
            0.0
        });
        if let Some(g) = opts.monitor_gamma {
            monitor.push(stepper.monitor(&state, g));
        }
        if next.peek() == Some(&state.step) {
            snapshots.push((state.step, state.t, state.u.clone()));
            next.next();
        }
        if !nrm.is_finite() || nrm > 1e12 * scale {
            diverged = true;
            log::warn!(
                "{scheme} diverged at step {} (t = {:e})",
                state.step,
                state.t
            );
            break;
        }
    }
    if snapshots.last().map(|s| s.0) != Some(state.step) {
        snapshots.push((state.step, state.t, state.u.clone()));
    }
    Ok(Trajectory {
        scheme,
        tau,
        steps: state.step,
        snapshots,
        monitor,
        rates,
        diverged,
    })
}

/// Stability summary of a split system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub coarse_h: f64,
    pub gamma: f64,
    pub c1: f64,
    /// Ratios without and with the reaction term, per component.
    pub implicit_ratio: Option<f64>,
    pub implicit_ratio_c: Option<f64>,
    pub explicit_ratio: Option<f64>,
    pub explicit_ratio_c: Option<f64>,
    pub slow_rate: f64,
    /// Scheme-1 and scheme-2 step bounds; absent when nothing is explicit.
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
}

/// Compute every stability quantity of a system.
pub fn stability_report(
    sys: &MacroSystem,
    plan: &SplitPlan,
    tensors: &[EffectiveTensors],
) -> Result<StabilityReport> {
    let c1 = estimate_c1_with(sys.space.coarse_n, true)?;
    let h = sys.space.h();
    let ratio = |c, with_c| -> Result<Option<f64>> {
        if sys.dofs(c).is_empty() {
            Ok(None)
        } else {
            stability_ratio(sys, c, with_c).map(Some)
        }
    };
    let (tau1, tau2) = tau_bounds(plan, c1, h, tensors)?;
    Ok(StabilityReport {
        coarse_h: h,
        gamma: estimate_gamma(sys)?,
        c1,
        implicit_ratio: ratio(Component::Implicit, false)?,
        implicit_ratio_c: ratio(Component::Implicit, true)?,
        explicit_ratio: ratio(Component::Explicit, false)?,
        explicit_ratio_c: ratio(Component::Explicit, true)?,
        slow_rate: plan.slow_rate,
        tau1: tau1.is_finite().then_some(tau1),
        tau2: tau2.is_finite().then_some(tau2),
    })
}
