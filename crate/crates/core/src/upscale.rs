//! Constrained cell problems on oversampled regions and the effective tensors
//! they induce.
//!
//! Each cell problem minimizes the κ-energy over `K⁺` subject to one moment
//! constraint per (continuum, member block). The solver condenses every
//! member block onto its boundary nodes together with its own multipliers,
//! which leaves a symmetric positive definite system on the skeleton of block
//! edges. Block condensations do not depend on the region, so they are built
//! once and shared by all targets.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{
    self, assemble_load, constraint_row_entries, mass_from_cells, stiffness_from_cells,
    ConstraintMode, Source,
};
use crate::error::{Error, Result};
use crate::geometry::{oversample, CellRect, MeshHierarchy, OversampleRegion, DIM};
use crate::linalg::{solve_saddle, CsrMatrix, SkylineCholesky, TripletMatrix};
use crate::media::{CoefficientField, ContinuumSet};

/// Boundary condition on `∂K⁺` for the cell problems.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellBoundary {
    #[default]
    Natural,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpscaleOptions {
    pub layers: usize,
    /// Relative bound on constraint residuals.
    #[serde(default = "default_constraint_tol")]
    pub constraint_tol: f64,
    #[serde(default)]
    pub boundary: CellBoundary,
}

fn default_constraint_tol() -> f64 {
    1e-9
}

impl UpscaleOptions {
    pub fn new(layers: usize) -> Self {
        Self {
            layers,
            constraint_tol: default_constraint_tol(),
            boundary: CellBoundary::Natural,
        }
    }
}

/// Multiscale basis of one coarse block, restricted to the block.
///
/// Vectors hold nodal values on the closed block, `(cpb + 1)²` entries in
/// local row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockBasis {
    pub block: usize,
    pub nodes_per_side: usize,
    /// `phi[i]`.
    pub phi: Vec<Vec<f64>>,
    /// `phi_lin[m][i]`.
    pub phi_lin: [Vec<Vec<f64>>; DIM],
    /// Linear-constraint centers `x̃` per continuum.
    pub centers: Vec<[f64; DIM]>,
    /// Largest relative constraint residual over all member blocks and solves.
    pub max_constraint_residual: f64,
}

impl BlockBasis {
    pub fn num_continua(&self) -> usize {
        self.phi.len()
    }
}

/// Block-averaged coefficients of the macroscopic system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTensors {
    pub n: usize,
    /// `A[k][m][l][n]`, flattened.
    pub a: Vec<f64>,
    /// `M[k][l]`.
    pub m: Vec<f64>,
    /// `C[k][l]`.
    pub c: Vec<f64>,
    /// Convective diagnostic `Bc[i][m][j] = (1/|K|) ∫ κ ∇φ_j^m · ∇φ_i`.
    pub bc: Vec<f64>,
    pub f: Vec<f64>,
}

impl EffectiveTensors {
    pub fn a_idx(&self, k: usize, m: usize, l: usize, n: usize) -> usize {
        ((k * DIM + m) * self.n + l) * DIM + n
    }

    pub fn a(&self, k: usize, m: usize, l: usize, n: usize) -> f64 {
        self.a[self.a_idx(k, m, l, n)]
    }

    pub fn m(&self, k: usize, l: usize) -> f64 {
        self.m[k * self.n + l]
    }

    pub fn c(&self, k: usize, l: usize) -> f64 {
        self.c[k * self.n + l]
    }

    pub fn bc(&self, i: usize, m: usize, j: usize) -> f64 {
        self.bc[(i * DIM + m) * self.n + j]
    }

    pub fn m_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.m)
    }

    pub fn c_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.c)
    }

    /// The `2×2` block `A^{kl}`.
    pub fn a_block(&self, k: usize, l: usize) -> [[f64; DIM]; DIM] {
        let mut out = [[0.0; DIM]; DIM];
        for (m, row) in out.iter_mut().enumerate() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = self.a(k, m, l, n);
            }
        }
        out
    }
}

/// Region-independent condensation of one coarse block.
struct BlockLocal {
    interior: Vec<usize>,
    gamma: Vec<usize>,
    /// `K⁻¹ [A_IΓ; B_Γ]`, rows: interior then multipliers.
    x: DMatrix<f64>,
    /// `K⁻¹ [0; I]`.
    y: DMatrix<f64>,
    /// Boundary Schur complement.
    s: DMatrix<f64>,
    /// `[A_IΓ; B_Γ]ᵀ K⁻¹ [0; I]`.
    w: DMatrix<f64>,
    /// Constraint rows on the closed block.
    b: DMatrix<f64>,
}

fn block_constraints(mesh: &MeshHierarchy, continua: &ContinuumSet, block: usize) -> DMatrix<f64> {
    let rect = mesh.block_rect(block);
    let mut b = DMatrix::zeros(continua.len(), rect.num_nodes());
    for j in 0..continua.len() {
        for (node, w) in constraint_row_entries(mesh, &rect, continua, j, block) {
            b[(j, node)] += w;
        }
    }
    b
}

impl BlockLocal {
    fn build(
        mesh: &MeshHierarchy,
        field: &CoefficientField,
        continua: &ContinuumSet,
        block: usize,
    ) -> Option<Self> {
        let rect = mesh.block_rect(block);
        let nn = rect.num_nodes();
        let side = rect.nodes_x();
        let (interior, gamma): (Vec<usize>, Vec<usize>) = (0..nn).partition(|&v| {
            let (i, j) = (v % side, v / side);
            i > 0 && j > 0 && i + 1 < side && j + 1 < side
        });
        let n = continua.len();
        let ni = interior.len();
        if ni < n {
            return None;
        }
        let a = stiffness_from_cells(mesh, field, &rect, &mesh.block_cells(block));
        let b = block_constraints(mesh, continua, block);
        let a_ii = a.select(&interior, &interior);
        let chol = SkylineCholesky::factor(&a_ii).ok()?;
        let b_i = DMatrix::from_fn(n, ni, |j, t| b[(j, interior[t])]);
        let mut zb = DMatrix::zeros(ni, n);
        for j in 0..n {
            let col: Vec<f64> = b_i.row(j).iter().copied().collect();
            zb.set_column(j, &DVector::from_vec(chol.solve(&col)));
        }
        let smu = &b_i * &zb;
        let smu = (&smu + smu.transpose()) * 0.5;
        let eig = smu.clone().symmetric_eigenvalues();
        if !(eig.min() > 1e-12 * eig.max().max(f64::MIN_POSITIVE)) {
            return None;
        }
        let smu_chol = smu.cholesky()?;
        let solve_k = |r: &[f64], s: &DVector<f64>| -> DVector<f64> {
            let u0 = DVector::from_vec(chol.solve(r));
            let mu = smu_chol.solve(&(&b_i * &u0 - s));
            let u = u0 - &zb * &mu;
            let mut out = DVector::zeros(ni + n);
            out.rows_mut(0, ni).copy_from(&u);
            out.rows_mut(ni, n).copy_from(&mu);
            out
        };
        let ng = gamma.len();
        let a_ig = a.select(&interior, &gamma).to_dense();
        let b_g = DMatrix::from_fn(n, ng, |j, t| b[(j, gamma[t])]);
        let mut c = DMatrix::zeros(ni + n, ng);
        c.view_mut((0, 0), (ni, ng)).copy_from(&a_ig);
        c.view_mut((ni, 0), (n, ng)).copy_from(&b_g);
        let mut x = DMatrix::zeros(ni + n, ng);
        for t in 0..ng {
            let r: Vec<f64> = a_ig.column(t).iter().copied().collect();
            x.set_column(t, &solve_k(&r, &b_g.column(t).into_owned()));
        }
        let mut y = DMatrix::zeros(ni + n, n);
        let zeros = vec![0.0; ni];
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            y.set_column(k, &solve_k(&zeros, &e));
        }
        let a_gg = a.select(&gamma, &gamma).to_dense();
        let ct = c.transpose();
        let s = a_gg - &ct * &x;
        let s = (&s + s.transpose()) * 0.5;
        let w = &ct * &y;
        Some(Self {
            interior,
            gamma,
            x,
            y,
            s,
            w,
            b,
        })
    }
}

/// Condensed skeleton system of one oversampled region.
struct RegionSystem {
    rect: CellRect,
    /// Region-local node -> skeleton unknown, `usize::MAX` if none.
    skel: Vec<usize>,
    chol: SkylineCholesky,
}

/// Solver for all cell problems of a fixed mesh, field and continuum set.
pub struct CellSolver<'a> {
    mesh: &'a MeshHierarchy,
    field: &'a CoefficientField,
    continua: &'a ContinuumSet,
    opts: UpscaleOptions,
    locals: Vec<Option<BlockLocal>>,
    solves: AtomicUsize,
}

/// Cell-problem right-hand side selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellMode {
    Constant,
    /// Linear moments along direction `m`.
    Linear(usize),
}

impl<'a> CellSolver<'a> {
    pub fn new(
        mesh: &'a MeshHierarchy,
        field: &'a CoefficientField,
        continua: &'a ContinuumSet,
        opts: UpscaleOptions,
    ) -> Result<Self> {
        if field.fine_n() != mesh.fine_n() {
            return Err(Error::Dimension(format!(
                "field has {} cells per side, mesh {}",
                field.fine_n(),
                mesh.fine_n()
            )));
        }
        let blocks: Vec<usize> = (0..mesh.num_blocks()).collect();
        let locals = par_map(&blocks, |&p| BlockLocal::build(mesh, field, continua, p));
        Ok(Self {
            mesh,
            field,
            continua,
            opts,
            locals,
            solves: AtomicUsize::new(0),
        })
    }

    /// Number of constrained minimizations solved so far.
    pub fn saddle_solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn options(&self) -> &UpscaleOptions {
        &self.opts
    }

    fn region_system(&self, region: &OversampleRegion) -> Result<RegionSystem> {
        let mesh = self.mesh;
        let rect = region.cell_rect(mesh);
        let m = mesh.cells_per_block();
        let dirichlet = self.opts.boundary == CellBoundary::Dirichlet;
        let mut skel = vec![usize::MAX; rect.num_nodes()];
        let mut count = 0;
        for v in 0..rect.num_nodes() {
            let (i, j) = rect.node_ij(v);
            let on_lines = i % m == 0 || j % m == 0;
            let on_boundary =
                i == rect.x0 || j == rect.y0 || i == rect.x0 + rect.nx || j == rect.y0 + rect.ny;
            if on_lines && !(dirichlet && on_boundary) {
                skel[v] = count;
                count += 1;
            }
        }
        let mut t = TripletMatrix::new(count, count);
        for &p in &region.members {
            let local = self.locals[p].as_ref().expect("condensed block");
            let map = self.gamma_map(p, local, &rect, &skel);
            for (a, &sa) in map.iter().enumerate() {
                if sa == usize::MAX {
                    continue;
                }
                for (b, &sb) in map.iter().enumerate() {
                    if sb != usize::MAX {
                        t.push(sa, sb, local.s[(a, b)]);
                    }
                }
            }
        }
        let chol = SkylineCholesky::factor(&t.to_csr())?;
        Ok(RegionSystem { rect, skel, chol })
    }

    fn gamma_map(
        &self,
        p: usize,
        local: &BlockLocal,
        rect: &CellRect,
        skel: &[usize],
    ) -> Vec<usize> {
        let brect = self.mesh.block_rect(p);
        local
            .gamma
            .iter()
            .map(|&v| {
                let (i, j) = brect.node_ij(v);
                skel[rect.local_node(i, j)]
            })
            .collect()
    }

    /// Moment data `g_p` of member block `p`.
    fn moments(&self, p: usize, mode: CellMode, i: usize, center: f64) -> DVector<f64> {
        let mut g = DVector::zeros(self.continua.len());
        g[i] = match mode {
            CellMode::Constant => self.continua.block_mass(i, p),
            CellMode::Linear(dir) => {
                assembly::first_moment(self.mesh, self.continua, i, p, dir, center)
            }
        };
        g
    }

    fn residual_scale(&self, p: usize, j: usize, mode: CellMode) -> f64 {
        let mass = self.continua.block_mass(j, p).abs();
        match mode {
            CellMode::Constant => mass,
            CellMode::Linear(_) => mass * self.mesh.coarse_h(),
        }
    }

    /// Solve one cell problem and return region-local nodal values together
    /// with the largest relative constraint residual.
    fn solve_condensed(
        &self,
        sys: &RegionSystem,
        region: &OversampleRegion,
        mode: CellMode,
        i: usize,
        center: f64,
    ) -> (Vec<f64>, f64) {
        let mut rhs = vec![0.0; sys.chol.dim()];
        let mut gs = Vec::with_capacity(region.members.len());
        for &p in &region.members {
            let local = self.locals[p].as_ref().expect("condensed block");
            let g = self.moments(p, mode, i, center);
            let wg = &local.w * &g;
            for (a, &sa) in self
                .gamma_map(p, local, &sys.rect, &sys.skel)
                .iter()
                .enumerate()
            {
                if sa != usize::MAX {
                    rhs[sa] -= wg[a];
                }
            }
            gs.push(g);
        }
        sys.chol.solve_in_place(&mut rhs);
        let mut out = vec![0.0; sys.rect.num_nodes()];
        for (v, &s) in sys.skel.iter().enumerate() {
            if s != usize::MAX {
                out[v] = rhs[s];
            }
        }
        let mut worst = 0.0f64;
        for (&p, g) in region.members.iter().zip(&gs) {
            let local = self.locals[p].as_ref().expect("condensed block");
            let brect = self.mesh.block_rect(p);
            let xg = DVector::from_iterator(
                local.gamma.len(),
                local.gamma.iter().map(|&v| {
                    let (a, b) = brect.node_ij(v);
                    out[sys.rect.local_node(a, b)]
                }),
            );
            let y = &local.y * g - &local.x * xg;
            let mut closed = vec![0.0; brect.num_nodes()];
            for (t, &v) in local.interior.iter().enumerate() {
                closed[v] = y[t];
                let (a, b) = brect.node_ij(v);
                out[sys.rect.local_node(a, b)] = y[t];
            }
            for &v in &local.gamma {
                let (a, b) = brect.node_ij(v);
                closed[v] = out[sys.rect.local_node(a, b)];
            }
            let bx = &local.b * DVector::from_vec(closed);
            for j in 0..self.continua.len() {
                let r = (bx[j] - g[j]).abs() / self.residual_scale(p, j, mode);
                worst = worst.max(r);
            }
        }
        self.solves.fetch_add(1, Ordering::Relaxed);
        (out, worst)
    }

    /// Fallback for regions containing blocks without a usable condensation.
    fn solve_direct(
        &self,
        region: &OversampleRegion,
        mode: CellMode,
        i: usize,
        center: f64,
    ) -> Result<(Vec<f64>, f64)> {
        let mesh = self.mesh;
        let rect = region.cell_rect(mesh);
        let a = crate::assembly::assemble_stiffness(mesh, self.field, &rect);
        let cmode = match mode {
            CellMode::Constant => ConstraintMode::Constant,
            CellMode::Linear(dir) => ConstraintMode::Linear { dir, center },
        };
        let cb = assembly::constraint_rows(mesh, region, self.continua, cmode, i)?;
        let free: Vec<usize> = if self.opts.boundary == CellBoundary::Dirichlet {
            (0..rect.num_nodes())
                .filter(|&v| {
                    let (x, y) = rect.node_ij(v);
                    !(x == rect.x0
                        || y == rect.y0
                        || x == rect.x0 + rect.nx
                        || y == rect.y0 + rect.ny)
                })
                .collect()
        } else {
            (0..rect.num_nodes()).collect()
        };
        let rows: Vec<usize> = (0..cb.b.nrows()).collect();
        let af = a.select(&free, &free);
        let bf = cb.b.select(&rows, &free);
        let sol = solve_saddle(&af, &bf, &vec![0.0; free.len()], &cb.g)?;
        let mut out = vec![0.0; rect.num_nodes()];
        for (k, &v) in free.iter().enumerate() {
            out[v] = sol.x[k];
        }
        let bx = cb.b.mul_vec(&out);
        let worst = cb
            .rows
            .iter()
            .enumerate()
            .map(|(r, &(j, p))| (bx[r] - cb.g[r]).abs() / self.residual_scale(p, j, mode))
            .fold(0.0, f64::max);
        self.solves.fetch_add(1, Ordering::Relaxed);
        Ok((out, worst))
    }

    fn centers(&self, block: usize) -> Vec<[f64; DIM]> {
        (0..self.continua.len())
            .map(|i| {
                let mut c = [0.0; DIM];
                for (d, v) in c.iter_mut().enumerate() {
                    *v = assembly::weighted_centroid(self.mesh, self.continua, i, block, d);
                }
                c
            })
            .collect()
    }

    /// Solve one cell problem on the full oversampled region.
    pub fn solve_region(
        &self,
        block: usize,
        mode: CellMode,
        i: usize,
    ) -> Result<(OversampleRegion, Vec<f64>, f64)> {
        self.mesh.check_block(block)?;
        if i >= self.continua.len() {
            return Err(Error::Config(format!("continuum {i} out of range")));
        }
        let region = oversample(self.mesh, block, self.opts.layers)?;
        let center = match mode {
            CellMode::Constant => 0.0,
            CellMode::Linear(d) => self.centers(block)[i][d],
        };
        let (v, r) = if region.members.iter().all(|&p| self.locals[p].is_some()) {
            let sys = self.region_system(&region).map_err(|e| e.in_block(block))?;
            self.solve_condensed(&sys, &region, mode, i, center)
        } else {
            self.solve_direct(&region, mode, i, center)
                .map_err(|e| e.in_block(block))?
        };
        Ok((region, v, r))
    }

    /// All constant and linear basis functions of one block.
    pub fn solve_block(&self, block: usize) -> Result<BlockBasis> {
        self.mesh.check_block(block)?;
        let region = oversample(self.mesh, block, self.opts.layers)?;
        let rect = region.cell_rect(self.mesh);
        let brect = self.mesh.block_rect(block);
        let centers = self.centers(block);
        let n = self.continua.len();
        let condensed = region.members.iter().all(|&p| self.locals[p].is_some());
        let sys = if condensed {
            Some(self.region_system(&region).map_err(|e| e.in_block(block))?)
        } else {
            None
        };
        let restrict = |v: &[f64]| -> Vec<f64> {
            (0..brect.num_nodes())
                .map(|t| {
                    let (i, j) = brect.node_ij(t);
                    v[rect.local_node(i, j)]
                })
                .collect()
        };
        let mut worst = 0.0f64;
        let mut solve = |mode: CellMode, i: usize| -> Result<Vec<f64>> {
            let center = match mode {
                CellMode::Constant => 0.0,
                CellMode::Linear(d) => centers[i][d],
            };
            let (v, r) = match &sys {
                Some(sys) => self.solve_condensed(sys, &region, mode, i, center),
                None => self
                    .solve_direct(&region, mode, i, center)
                    .map_err(|e| e.in_block(block))?,
            };
            worst = worst.max(r);
            Ok(restrict(&v))
        };
        let mut phi = Vec::with_capacity(n);
        for i in 0..n {
            phi.push(solve(CellMode::Constant, i)?);
        }
        let mut phi_lin: [Vec<Vec<f64>>; DIM] = Default::default();
        for (d, lin) in phi_lin.iter_mut().enumerate() {
            for i in 0..n {
                lin.push(solve(CellMode::Linear(d), i)?);
            }
        }
        if !(worst <= self.opts.constraint_tol) {
            return Err(Error::NoConvergence {
                iterations: 1,
                residual: worst,
            }
            .in_block(block));
        }
        Ok(BlockBasis {
            block,
            nodes_per_side: brect.nodes_x(),
            phi,
            phi_lin,
            centers,
            max_constraint_residual: worst,
        })
    }
}

/// Effective tensors of one block, integrated over the block only.
pub fn effective_tensors(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    basis: &BlockBasis,
    source: &Source,
) -> EffectiveTensors {
    let block = basis.block;
    let rect = mesh.block_rect(block);
    let cells = mesh.block_cells(block);
    let a = stiffness_from_cells(mesh, field, &rect, &cells);
    let mm = mass_from_cells(mesh, &rect, &cells);
    let load = assemble_load(mesh, &rect, &|x| source.eval(x));
    let area = mesh.coarse_h() * mesh.coarse_h();
    let n = basis.num_continua();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sym = |f: &dyn Fn(usize, usize) -> f64, scale: f64, k: usize, l: usize| -> f64 {
        let (x, y) = (f(k, l), f(l, k));
        debug_assert!(
            (x - y).abs() <= 1e-10 * (x.abs() + y.abs()) + 1e-13 * scale + 1e-13 * area,
            "asymmetric tensor entry ({k},{l}): {x:e} vs {y:e}"
        );
        0.5 * (x + y) / area
    };
    let mut m = vec![0.0; n * n];
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        for l in 0..n {
            let pn = norm(&basis.phi[k]) * norm(&basis.phi[l]);
            m[k * n + l] = sym(
                &|k, l| mm.bilinear(&basis.phi[k], &basis.phi[l]),
                mm.max_abs() * pn,
                k,
                l,
            );
            c[k * n + l] = sym(
                &|k, l| a.bilinear(&basis.phi[k], &basis.phi[l]),
                a.max_abs() * pn,
                k,
                l,
            );
        }
    }
    let mut at = vec![0.0; n * DIM * n * DIM];
    for k in 0..n {
        for md in 0..DIM {
            for l in 0..n {
                for nd in 0..DIM {
                    let x = a.bilinear(&basis.phi_lin[md][k], &basis.phi_lin[nd][l]);
                    let y = a.bilinear(&basis.phi_lin[nd][l], &basis.phi_lin[md][k]);
                    at[((k * DIM + md) * n + l) * DIM + nd] = 0.5 * (x + y) / area;
                }
            }
        }
    }
    let mut bc = vec![0.0; n * DIM * n];
    for i in 0..n {
        for md in 0..DIM {
            for j in 0..n {
                bc[(i * DIM + md) * n + j] =
                    a.bilinear(&basis.phi_lin[md][j], &basis.phi[i]) / area;
            }
        }
    }
    let f = (0..n)
        .map(|j| {
            load.iter()
                .zip(&basis.phi[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / area
        })
        .collect();
    EffectiveTensors {
        n,
        a: at,
        m,
        c,
        bc,
        f,
    }
}

/// Bases and tensors for every block.
#[derive(Clone, Debug)]
pub struct Upscaled {
    pub bases: Vec<BlockBasis>,
    pub tensors: Vec<EffectiveTensors>,
    pub stats: UpscaleStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpscaleStats {
    pub blocks_solved: usize,
    pub blocks_loaded: usize,
    pub saddle_solves: usize,
}

/// Solve every block, reusing cached results under `cache_dir` when the
/// inputs match.
pub fn upscale_all(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    continua: &ContinuumSet,
    source: &Source,
    opts: &UpscaleOptions,
    cache_dir: Option<&Path>,
) -> Result<Upscaled> {
    let key = cache_key(mesh, field, continua, source, opts);
    let nb = mesh.num_blocks();
    let mut slots: Vec<Option<(BlockBasis, EffectiveTensors)>> = vec![None; nb];
    let mut stats = UpscaleStats::default();
    if let Some(dir) = cache_dir {
        for (p, slot) in slots.iter_mut().enumerate() {
            let path = cache_path(dir, &key, p);
            if !path.exists() {
                continue;
            }
            match read_cache(&path, &key, p, continua.len(), mesh.cells_per_block() + 1) {
                Ok(v) => {
                    *slot = Some(v);
                    stats.blocks_loaded += 1;
                }
                Err(e) => log::warn!("ignoring cache entry {}: {e}", path.display()),
            }
        }
    }
    let missing: Vec<usize> = (0..nb).filter(|&p| slots[p].is_none()).collect();
    if !missing.is_empty() {
        let solver = CellSolver::new(mesh, field, continua, *opts)?;
        let solved = par_map(&missing, |&p| -> Result<(BlockBasis, EffectiveTensors)> {
            let basis = solver.solve_block(p)?;
            let tensors = effective_tensors(mesh, field, &basis, source);
            Ok((basis, tensors))
        });
        for (&p, r) in missing.iter().zip(solved) {
            let v = r?;
            if let Some(dir) = cache_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_cache(&cache_path(dir, &key, p), &key, &v.0, &v.1)?;
            }
            slots[p] = Some(v);
        }
        stats.blocks_solved = missing.len();
        stats.saddle_solves = solver.saddle_solves();
    }
    let (bases, tensors) = slots
        .into_iter()
        .map(|s| s.expect("all blocks filled"))
        .unzip();
    Ok(Upscaled {
        bases,
        tensors,
        stats,
    })
}

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

const CACHE_MAGIC: &[u8; 8] = b"MCSPLIT\0";
const CACHE_VERSION: u32 = 1;

/// Hex digest identifying every input that influences a block's result.
pub fn cache_key(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    continua: &ContinuumSet,
    source: &Source,
    opts: &UpscaleOptions,
) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_MAGIC);
    h.update(CACHE_VERSION.to_le_bytes());
    h.update((mesh.fine_n() as u64).to_le_bytes());
    h.update((mesh.coarse_n() as u64).to_le_bytes());
    h.update((opts.layers as u64).to_le_bytes());
    h.update(opts.constraint_tol.to_le_bytes());
    h.update([opts.boundary as u8]);
    h.update(field.to_le_bytes());
    h.update(continua.to_le_bytes());
    h.update(serde_json::to_vec(source).unwrap_or_default());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cache_path(dir: &Path, key: &str, block: usize) -> PathBuf {
    dir.join(format!("{}-{block:05}.bin", &key[..16]))
}

fn write_cache(path: &Path, key: &str, basis: &BlockBasis, t: &EffectiveTensors) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    for v in [basis.block, t.n, basis.nodes_per_side] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut push = |xs: &[f64]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    push(&[basis.max_constraint_residual]);
    for c in &basis.centers {
        push(c);
    }
    for v in basis.phi.iter().chain(basis.phi_lin.iter().flatten()) {
        push(v);
    }
    push(&t.a);
    push(&t.m);
    push(&t.c);
    push(&t.bc);
    push(&t.f);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_cache(
    path: &Path,
    key: &str,
    block: usize,
    n: usize,
    side: usize,
) -> Result<(BlockBasis, EffectiveTensors)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Serde(format!("{}: {what}", path.display()));
    let head = CACHE_MAGIC.len() + 4 + key.len() + 24;
    if bytes.len() < head || &bytes[..8] != CACHE_MAGIC {
        return Err(corrupt("bad header"));
    }
    if bytes[8..12] != CACHE_VERSION.to_le_bytes() {
        return Err(corrupt("version mismatch"));
    }
    if &bytes[12..12 + key.len()] != key.as_bytes() {
        return Err(corrupt("key mismatch"));
    }
    let mut pos = 12 + key.len();
    let mut u64s = [0u64; 3];
    for v in &mut u64s {
        *v = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
    }
    if u64s != [block as u64, n as u64, side as u64] {
        return Err(corrupt("shape mismatch"));
    }
    let nn = side * side;
    let count = 1 + DIM * n + 3 * n * nn + n * DIM * n * DIM + 2 * n * n + n * DIM * n + n;
    if bytes.len() != pos + 8 * count {
        return Err(corrupt("truncated"));
    }
    let mut vals = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |k: usize| -> Vec<f64> { (&mut vals).take(k).collect() };
    let max_constraint_residual = take(1)[0];
    let centers = (0..n)
        .map(|_| {
            let c = take(DIM);
            [c[0], c[1]]
        })
        .collect();
    let phi = (0..n).map(|_| take(nn)).collect();
    let phi_lin = [
        (0..n).map(|_| take(nn)).collect(),
        (0..n).map(|_| take(nn)).collect(),
    ];
    let a = take(n * DIM * n * DIM);
    let m = take(n * n);
    let c = take(n * n);
    let bc = take(n * DIM * n);
    let f = take(n);
    Ok((
        BlockBasis {
            block,
            nodes_per_side: side,
            phi,
            phi_lin,
            centers,
            max_constraint_residual,
        },
        EffectiveTensors { n, a, m, c, bc, f },
    ))
}

/// Constrained minimizer computed directly on the full region, bypassing
/// block condensation. Used to cross-check the condensed solver.
pub fn solve_region_direct(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    continua: &ContinuumSet,
    opts: UpscaleOptions,
    block: usize,
    mode: CellMode,
    i: usize,
) -> Result<Vec<f64>> {
    let solver = CellSolver {
        mesh,
        field,
        continua,
        opts,
        locals: Vec::new(),
        solves: AtomicUsize::new(0),
    };
    let region = oversample(mesh, block, opts.layers)?;
    let center = match mode {
        CellMode::Constant => 0.0,
        CellMode::Linear(d) => assembly::weighted_centroid(mesh, continua, i, block, d),
    };
    Ok(solver.solve_direct(&region, mode, i, center)?.0)
}

/// Energy `vᵀ A_K v` of a closed-block vector on block `block`.
pub fn block_energy(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    block: usize,
    v: &[f64],
) -> f64 {
    let rect = mesh.block_rect(block);
    stiffness_from_cells(mesh, field, &rect, &mesh.block_cells(block)).quad_form(v)
}

/// `‖v‖²_{L²(K)}` of a closed-block vector.
pub fn block_l2_sq(mesh: &MeshHierarchy, block: usize, v: &[f64]) -> f64 {
    let rect = mesh.block_rect(block);
    mass_from_cells(mesh, &rect, &mesh.block_cells(block)).quad_form(v)
}

/// Stiffness of the full fine grid, exposed for diagnostics.
pub fn fine_stiffness(mesh: &MeshHierarchy, field: &CoefficientField) -> CsrMatrix {
    crate::assembly::assemble_stiffness(mesh, field, &mesh.full_rect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{continua_by_threshold, generate_field, Axis, FieldSpec};

    fn layered(mesh: &MeshHierarchy, high: f64) -> (CoefficientField, ContinuumSet) {
        let f = generate_field(
            &FieldSpec::Stripes {
                values: [1.0, high],
                period: 0.1,
                width: 0.025,
                offset: 0.05,
                axis: Axis::Y,
            },
            mesh,
        )
        .unwrap();
        let c = continua_by_threshold(&f, mesh, &[10.0]).unwrap();
        (f, c)
    }

    #[test]
    fn unit_field_reproduces_constants() {
        let mesh = MeshHierarchy::new(20, 4).unwrap();
        let field = CoefficientField::constant(20, 1.0).unwrap();
        let one = continua_by_threshold(&field, &mesh, &[]).unwrap();
        let solver = CellSolver::new(&mesh, &field, &one, UpscaleOptions::new(1)).unwrap();
        for p in [0, 5, 15] {
            let b = solver.solve_block(p).unwrap();
            assert!(b.phi[0].iter().all(|v| (v - 1.0).abs() < 1e-10));
            let t = effective_tensors(&mesh, &field, &b, &Source::default());
            assert!((t.m(0, 0) - 1.0).abs() < 1e-3);
            assert!(t.c(0, 0).abs() < 1e-12);
        }
    }

    #[test]
    fn condensed_matches_direct() {
        let mesh = MeshHierarchy::new(60, 6).unwrap();
        let f = generate_field(
            &FieldSpec::Inclusions {
                values: [1.0, 50.0],
                density: 0.3,
                tile: 0.1,
                seed: 2,
            },
            &mesh,
        )
        .unwrap();
        let cs = continua_by_threshold(&f, &mesh, &[10.0]).unwrap();
        for boundary in [CellBoundary::Natural, CellBoundary::Dirichlet] {
            let opts = UpscaleOptions {
                boundary,
                ..UpscaleOptions::new(1)
            };
            let solver = CellSolver::new(&mesh, &f, &cs, opts).unwrap();
            for (block, mode, i) in [
                (0, CellMode::Constant, 0),
                (14, CellMode::Linear(0), 1),
                (21, CellMode::Linear(1), 0),
            ] {
                let (_, v, r) = solver.solve_region(block, mode, i).unwrap();
                assert!(r < 1e-9);
                let d = solve_region_direct(&mesh, &f, &cs, opts, block, mode, i).unwrap();
                let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for (a, b) in v.iter().zip(&d) {
                    assert!(
                        (a - b).abs() <= 1e-8 * scale,
                        "{boundary:?} block {block}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn small_blocks_fall_back_to_direct() {
        let mesh = MeshHierarchy::new(8, 4).unwrap();
        let mut vals = vec![1.0; 64];
        for iy in 0..8 {
            if iy % 2 == 0 {
                for ix in 0..8 {
                    vals[iy * 8 + ix] = 100.0;
                }
            }
        }
        let f = CoefficientField::new(8, vals).unwrap();
        let cs = continua_by_threshold(&f, &mesh, &[10.0]).unwrap();
        let solver = CellSolver::new(&mesh, &f, &cs, UpscaleOptions::new(1)).unwrap();
        let b = solver.solve_block(5).unwrap();
        assert!(b.max_constraint_residual < 1e-9);
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = MeshHierarchy::new(40, 2).unwrap();
        let (f, cs) = layered(&mesh, 1e3);
        let opts = UpscaleOptions::new(1);
        let src = Source::default();
        let first = upscale_all(&mesh, &f, &cs, &src, &opts, Some(dir.path())).unwrap();
        assert_eq!(first.tensors.len(), 4);
        assert_eq!(first.stats.blocks_solved, 4);
        assert!(first.stats.saddle_solves > 0);
        let second = upscale_all(&mesh, &f, &cs, &src, &opts, Some(dir.path())).unwrap();
        assert_eq!(second.stats.saddle_solves, 0);
        assert_eq!(second.stats.blocks_loaded, 4);
        for (a, b) in first.tensors.iter().zip(&second.tensors) {
            let bits = |t: &EffectiveTensors| {
                t.a.iter()
                    .chain(&t.m)
                    .chain(&t.c)
                    .chain(&t.f)
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(first.bases, second.bases);
        // Corrupt one file: it is recomputed.
        let p = cache_path(dir.path(), &cache_key(&mesh, &f, &cs, &src, &opts), 2);
        fs::write(&p, b"garbage").unwrap();
        let third = upscale_all(&mesh, &f, &cs, &src, &opts, Some(dir.path())).unwrap();
        assert_eq!(third.stats.blocks_solved, 1);
        assert_eq!(third.tensors[2], first.tensors[2]);
    }

    #[test]
    fn tensor_symmetries() {
        let mesh = MeshHierarchy::new(50, 5).unwrap();
        let (f, cs) = layered(&mesh, 1e4);
        let up = upscale_all(
            &mesh,
            &f,
            &cs,
            &Source::default(),
            &UpscaleOptions::new(2),
            None,
        )
        .unwrap();
        for t in &up.tensors {
            let n = t.n;
            for k in 0..n {
                for l in 0..n {
                    assert_eq!(t.m(k, l), t.m(l, k));
                    assert_eq!(t.c(k, l), t.c(l, k));
                    for m in 0..2 {
                        for q in 0..2 {
                            assert_eq!(t.a(k, m, l, q), t.a(l, q, k, m));
                        }
                    }
                }
            }
            let mm = t.m_matrix();
            assert!(mm.clone().cholesky().is_some());
            for i in 0..n {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| mm[(i, j)].abs()).sum();
                assert!(off < mm[(i, i)]);
            }
        }
    }
}
