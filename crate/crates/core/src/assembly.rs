//! Bilinear (Q1) finite element assembly on rectangles of fine cells.
//!
//! Element matrices use the local node order of [`CellRect::cell_nodes`]:
//! lower-left, lower-right, upper-right, upper-left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CellRect, MeshHierarchy, OversampleRegion};
use crate::linalg::{CsrMatrix, TripletMatrix};
use crate::media::{CoefficientField, ContinuumSet};

/// Unit-coefficient Q1 stiffness on a square; independent of the side length.
pub const Q1_STIFFNESS: [[f64; 4]; 4] = [
    [4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0],
    [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0],
];

const Q1_MASS_PATTERN: [[f64; 4]; 4] = [
    [4.0, 2.0, 1.0, 2.0],
    [2.0, 4.0, 2.0, 1.0],
    [1.0, 2.0, 4.0, 2.0],
    [2.0, 1.0, 2.0, 4.0],
];

/// Q1 mass matrix of a square of side `h`.
pub fn q1_mass(h: f64) -> [[f64; 4]; 4] {
    let s = h * h / 36.0;
    Q1_MASS_PATTERN.map(|row| row.map(|v| v * s))
}

/// Directional Q1 integrals `∫ ∂_m N_a ∂_n N_b` on a square; side-independent.
pub fn q1_directional(m: usize, n: usize) -> [[f64; 4]; 4] {
    // 1D factors on [0,1]: ∫N'N' = [[1,-1],[-1,1]], ∫NN = [[1/3,1/6],[1/6,1/3]],
    // ∫N'N = [[-1/2,-1/2],[1/2,1/2]] (row = derivative index).
    const DD: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 1.0]];
    const NN: [[f64; 2]; 2] = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
    const DN: [[f64; 2]; 2] = [[-0.5, -0.5], [0.5, 0.5]];
    // Local node -> (x index, y index).
    const IJ: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];
    let mut out = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            let (ax, ay) = IJ[a];
            let (bx, by) = IJ[b];
            let fx = match (m == 0, n == 0) {
                (true, true) => DD[ax][bx],
                (true, false) => DN[ax][bx],
                (false, true) => DN[bx][ax],
                (false, false) => NN[ax][bx],
            };
            let fy = match (m == 1, n == 1) {
                (true, true) => DD[ay][by],
                (true, false) => DN[ay][by],
                (false, true) => DN[by][ay],
                (false, false) => NN[ay][by],
            };
            out[a][b] = fx * fy;
        }
    }
    out
}

/// κ-weighted stiffness over all cells of `rect`.
pub fn assemble_stiffness(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    rect: &CellRect,
) -> CsrMatrix {
    let cells: Vec<usize> = rect.cells(mesh).collect();
    stiffness_from_cells(mesh, field, rect, &cells)
}

/// κ-weighted stiffness over the listed cells, on the nodes of `rect`.
pub fn stiffness_from_cells(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    rect: &CellRect,
    cells: &[usize],
) -> CsrMatrix {
    let mut t = TripletMatrix::with_capacity(rect.num_nodes(), rect.num_nodes(), 16 * cells.len());
    for &c in cells {
        let (ix, iy) = mesh.cell_coords(c);
        let nodes = rect.cell_nodes(ix, iy);
        let k = field.value(c);
        for a in 0..4 {
            for b in 0..4 {
                t.push(nodes[a], nodes[b], k * Q1_STIFFNESS[a][b]);
            }
        }
    }
    t.to_csr()
}

/// Consistent mass over all cells of `rect`.
pub fn assemble_mass(mesh: &MeshHierarchy, rect: &CellRect) -> CsrMatrix {
    let cells: Vec<usize> = rect.cells(mesh).collect();
    mass_from_cells(mesh, rect, &cells)
}

pub fn mass_from_cells(mesh: &MeshHierarchy, rect: &CellRect, cells: &[usize]) -> CsrMatrix {
    let me = q1_mass(mesh.h());
    let mut t = TripletMatrix::with_capacity(rect.num_nodes(), rect.num_nodes(), 16 * cells.len());
    for &c in cells {
        let (ix, iy) = mesh.cell_coords(c);
        let nodes = rect.cell_nodes(ix, iy);
        for a in 0..4 {
            for b in 0..4 {
                t.push(nodes[a], nodes[b], me[a][b]);
            }
        }
    }
    t.to_csr()
}

/// Load vector `(f, N_a)` with 2×2 Gauss quadrature per cell.
pub fn assemble_load(
    mesh: &MeshHierarchy,
    rect: &CellRect,
    f: &dyn Fn([f64; 2]) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rect.num_nodes()];
    let h = mesh.h();
    let g = 0.5 / 3f64.sqrt();
    let pts = [0.5 - g, 0.5 + g];
    let w = h * h / 4.0;
    for iy in rect.y0..rect.y0 + rect.ny {
        for ix in rect.x0..rect.x0 + rect.nx {
            let nodes = rect.cell_nodes(ix, iy);
            for &s in &pts {
                for &t in &pts {
                    let x = [(ix as f64 + s) * h, (iy as f64 + t) * h];
                    let fv = f(x) * w;
                    if fv == 0.0 {
                        continue;
                    }
                    let shape = [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t];
                    for a in 0..4 {
                        out[nodes[a]] += fv * shape[a];
                    }
                }
            }
        }
    }
    out
}

/// Static source term. The default is the centered Gaussian bump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Source {
    /// `amplitude · exp(−width · |x − center|²)`.
    Gaussian {
        amplitude: f64,
        width: f64,
        center: [f64; 2],
    },
    Constant {
        value: f64,
    },
}

impl Default for Source {
    fn default() -> Self {
        Source::Gaussian {
            amplitude: 10.0,
            width: 40.0,
            center: [0.5, 0.5],
        }
    }
}

impl Source {
    pub fn zero() -> Self {
        Source::Constant { value: 0.0 }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match self {
            Source::Gaussian {
                amplitude,
                width,
                center,
            } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                amplitude * (-width * (dx * dx + dy * dy)).exp()
            }
            Source::Constant { value } => *value,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Constant { value } if *value == 0.0)
    }
}

/// Which moment the cell-problem constraints prescribe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintMode {
    /// `∫_{K^p} φ_i ψ_j = δ_ij ∫_{K^p} ψ_j`.
    Constant,
    /// `∫_{K^p} φ_i^m ψ_j = δ_ij ∫_{K^p} (x_m − center) ψ_j`.
    Linear { dir: usize, center: f64 },
}

/// Constraint rows of a cell problem on an oversampled region.
#[derive(Clone, Debug)]
pub struct ConstraintBlock {
    /// One row per `(j, p)` pair, columns are local nodes of the region.
    pub b: CsrMatrix,
    pub g: Vec<f64>,
    /// `(continuum j, member block p)` for each row.
    pub rows: Vec<(usize, usize)>,
}

/// Per-cell midpoint weights `ψ_j(cell) h² / 4` against the four corner
/// basis functions of every cell in `block`, on the nodes of `rect`.
pub fn constraint_row_entries(
    mesh: &MeshHierarchy,
    rect: &CellRect,
    continua: &ContinuumSet,
    j: usize,
    block: usize,
) -> Vec<(usize, f64)> {
    let q = mesh.h() * mesh.h() / 4.0;
    let mut out = Vec::with_capacity(4 * mesh.cells_per_block().pow(2));
    for c in mesh.block_cells(block) {
        let w = continua.weight(j, c);
        if w == 0.0 {
            continue;
        }
        let (ix, iy) = mesh.cell_coords(c);
        for node in rect.cell_nodes(ix, iy) {
            out.push((node, w * q));
        }
    }
    out
}

/// `∫_{K^p} (x_dir − center) ψ_j` by the midpoint rule.
pub fn first_moment(
    mesh: &MeshHierarchy,
    continua: &ContinuumSet,
    j: usize,
    block: usize,
    dir: usize,
    center: f64,
) -> f64 {
    let h2 = mesh.h() * mesh.h();
    mesh.block_cells(block)
        .iter()
        .map(|&c| (mesh.cell_center(c)[dir] - center) * continua.weight(j, c) * h2)
        .sum()
}

/// `ψ_i`-weighted centroid coordinate of a block.
pub fn weighted_centroid(
    mesh: &MeshHierarchy,
    continua: &ContinuumSet,
    i: usize,
    block: usize,
    dir: usize,
) -> f64 {
    let h2 = mesh.h() * mesh.h();
    let s: f64 = mesh
        .block_cells(block)
        .iter()
        .map(|&c| mesh.cell_center(c)[dir] * continua.weight(i, c) * h2)
        .sum();
    s / continua.block_mass(i, block)
}

/// Constraint rows for target continuum `target_i` on `region`.
pub fn constraint_rows(
    mesh: &MeshHierarchy,
    region: &OversampleRegion,
    continua: &ContinuumSet,
    mode: ConstraintMode,
    target_i: usize,
) -> Result<ConstraintBlock> {
    if target_i >= continua.len() {
        return Err(Error::Config(format!("continuum {target_i} out of range")));
    }
    let rect = region.cell_rect(mesh);
    let mut t = TripletMatrix::new(continua.len() * region.members.len(), rect.num_nodes());
    let mut g = Vec::new();
    let mut rows = Vec::new();
    for &p in &region.members {
        for j in 0..continua.len() {
            let mass = continua.block_mass(j, p);
            if mass == 0.0 {
                return Err(Error::ContinuumMissing {
                    continuum: j,
                    block: p,
                });
            }
            let r = rows.len();
            for (node, w) in constraint_row_entries(mesh, &rect, continua, j, p) {
                t.push(r, node, w);
            }
            let rhs = if j != target_i {
                0.0
            } else {
                match mode {
                    ConstraintMode::Constant => mass,
                    ConstraintMode::Linear { dir, center } => {
                        first_moment(mesh, continua, j, p, dir, center)
                    }
                }
            };
            g.push(rhs);
            rows.push((j, p));
        }
    }
    Ok(ConstraintBlock {
        b: t.to_csr(),
        g,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::oversample;
    use crate::media::{continua_by_threshold, generate_field, Axis, FieldSpec};

    /// ∫ over a cell of a bilinear nodal function's gradient, by 5×5 Gauss.
    fn quad_cell(h: f64, vals: [f64; 4], wvals: [f64; 4], grad: bool) -> f64 {
        let (pts, wts) = gauss5();
        let mut s = 0.0;
        for (a, &x) in pts.iter().enumerate() {
            for (b, &y) in pts.iter().enumerate() {
                let w = wts[a] * wts[b] * h * h;
                let f = |v: [f64; 4]| {
                    if grad {
                        let dx = ((v[1] - v[0]) * (1.0 - y) + (v[2] - v[3]) * y) / h;
                        let dy = ((v[3] - v[0]) * (1.0 - x) + (v[2] - v[1]) * x) / h;
                        [dx, dy]
                    } else {
                        let u = v[0] * (1.0 - x) * (1.0 - y)
                            + v[1] * x * (1.0 - y)
                            + v[2] * x * y
                            + v[3] * (1.0 - x) * y;
                        [u, 0.0]
                    }
                };
                let (p, q) = (f(vals), f(wvals));
                s += w * (p[0] * q[0] + p[1] * q[1]);
            }
        }
        s
    }

    fn gauss5() -> ([f64; 5], [f64; 5]) {
        let a = (5.0f64 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0;
        let b = (5.0f64 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0;
        let wa = (322.0 + 13.0 * 70f64.sqrt()) / 900.0;
        let wb = (322.0 - 13.0 * 70f64.sqrt()) / 900.0;
        let p = [-b, -a, 0.0, a, b].map(|x| 0.5 * (x + 1.0));
        let w = [wb, wa, 128.0 / 225.0, wa, wb].map(|x| 0.5 * x);
        (p, w)
    }

    #[test]
    fn single_cell_element_matrices() {
        let mesh = MeshHierarchy::new(2, 2).unwrap();
        let field = CoefficientField::constant(2, 1.0).unwrap();
        let rect = CellRect {
            x0: 0,
            y0: 0,
            nx: 1,
            ny: 1,
        };
        let k = assemble_stiffness(&mesh, &field, &rect);
        let kd = k.to_dense();
        for i in 0..4 {
            assert!(kd.row(i).sum().abs() < 1e-15);
        }
        // local nodes (0,0),(1,0),(0,1),(1,1) map to element order 0,1,3,2
        assert!((kd[(0, 0)] - 4.0 / 6.0).abs() < 1e-15);
        assert!((kd[(0, 3)] + 2.0 / 6.0).abs() < 1e-15);
        let m = assemble_mass(&mesh, &rect);
        assert!((m.to_dense().sum() - 0.25).abs() < 1e-15);
        let k10 = assemble_stiffness(&mesh, &CoefficientField::constant(2, 10.0).unwrap(), &rect);
        assert!((k10.to_dense() - kd * 10.0).amax() < 1e-14);
    }

    #[test]
    fn disjoint_cells_are_block_diagonal() {
        let mesh = MeshHierarchy::new(4, 2).unwrap();
        let rect = mesh.full_rect();
        let cells = [mesh.cell_index(0, 0), mesh.cell_index(2, 2)];
        let m = mass_from_cells(&mesh, &rect, &cells).to_dense();
        let a: Vec<usize> = rect.cell_nodes(0, 0).to_vec();
        let b: Vec<usize> = rect.cell_nodes(2, 2).to_vec();
        for &i in &a {
            for &j in &b {
                assert_eq!(m[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn quadratic_forms_match_quadrature() {
        let mesh = MeshHierarchy::new(6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field =
            CoefficientField::new(6, (0..36).map(|_| rng.gen_range(0.5..50.0)).collect()).unwrap();
        let rect = CellRect {
            x0: 1,
            y0: 2,
            nx: 3,
            ny: 3,
        };
        let k = assemble_stiffness(&mesh, &field, &rect);
        let m = assemble_mass(&mesh, &rect);
        assert!(k.is_symmetric(1e-12) && m.is_symmetric(1e-12));
        for _ in 0..5 {
            let v: Vec<f64> = (0..rect.num_nodes())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let w: Vec<f64> = (0..rect.num_nodes())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut ek = 0.0;
            let mut em = 0.0;
            for c in rect.cells(&mesh) {
                let (ix, iy) = mesh.cell_coords(c);
                let nodes = rect.cell_nodes(ix, iy);
                let vv = nodes.map(|n| v[n]);
                let ww = nodes.map(|n| w[n]);
                ek += field.value(c) * quad_cell(mesh.h(), vv, vv, true);
                em += quad_cell(mesh.h(), vv, ww, false);
            }
            assert!((k.quad_form(&v) - ek).abs() <= 1e-12 * ek.abs().max(1.0));
            assert!((m.bilinear(&v, &w) - em).abs() <= 1e-12);
        }
    }

    #[test]
    fn assembly_is_order_independent() {
        let mesh = MeshHierarchy::new(8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field =
            CoefficientField::new(8, (0..64).map(|_| rng.gen_range(1.0..9.0)).collect()).unwrap();
        let rect = mesh.full_rect();
        let mut cells: Vec<usize> = rect.cells(&mesh).collect();
        let a = stiffness_from_cells(&mesh, &field, &rect, &cells);
        cells.reverse();
        cells.swap(3, 40);
        let b = stiffness_from_cells(&mesh, &field, &rect, &cells);
        assert!((a.to_dense() - b.to_dense()).amax() <= 1e-14);
    }

    #[test]
    fn loads() {
        let mesh = MeshHierarchy::new(20, 2).unwrap();
        let rect = mesh.full_rect();
        assert!(assemble_load(&mesh, &rect, &|_| 0.0)
            .iter()
            .all(|&v| v == 0.0));
        let ones: f64 = assemble_load(&mesh, &rect, &|_| 1.0).iter().sum();
        assert!((ones - 1.0).abs() < 1e-12);
        let mesh = MeshHierarchy::new(100, 10).unwrap();
        let src = Source::default();
        let total: f64 = assemble_load(&mesh, &mesh.full_rect(), &|x| src.eval(x))
            .iter()
            .sum();
        // Dense tensor Gauss oracle: 5-point rule on a 200×200 grid.
        let (p, w) = gauss5();
        let n = 200;
        let hh = 1.0 / n as f64;
        let mut oracle = 0.0;
        for i in 0..n {
            for j in 0..n {
                for a in 0..5 {
                    for b in 0..5 {
                        let x = [(i as f64 + p[a]) * hh, (j as f64 + p[b]) * hh];
                        oracle += w[a] * w[b] * hh * hh * src.eval(x);
                    }
                }
            }
        }
        assert!(
            (total - oracle).abs() <= 1e-10 * oracle,
            "{total} vs {oracle}"
        );
    }

    #[test]
    fn directional_integrals_sum_to_stiffness() {
        let d00 = q1_directional(0, 0);
        let d11 = q1_directional(1, 1);
        for a in 0..4 {
            for b in 0..4 {
                assert!((d00[a][b] + d11[a][b] - Q1_STIFFNESS[a][b]).abs() < 1e-15);
            }
        }
        let d01 = q1_directional(0, 1);
        let d10 = q1_directional(1, 0);
        for a in 0..4 {
            for b in 0..4 {
                assert!((d01[a][b] - d10[b][a]).abs() < 1e-15);
            }
        }
        // ∫ ∂x(x) ∂y(y) = 1 on the unit square: x = nodes (0,1,1,0), y = (0,0,1,1).
        let x = [0.0, 1.0, 1.0, 0.0];
        let y = [0.0, 0.0, 1.0, 1.0];
        let s: f64 = (0..4)
            .flat_map(|a| (0..4).map(move |b| (a, b)))
            .map(|(a, b)| x[a] * d01[a][b] * y[b])
            .sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    fn layered(mesh: &MeshHierarchy) -> (CoefficientField, ContinuumSet) {
        let f = generate_field(
            &FieldSpec::Stripes {
                values: [1.0, 1e3],
                period: 0.05,
                width: 0.01,
                offset: 0.02,
                axis: Axis::Y,
            },
            mesh,
        )
        .unwrap();
        let c = continua_by_threshold(&f, mesh, &[10.0]).unwrap();
        (f, c)
    }

    #[test]
    fn constraint_rows_constant_mode() {
        let mesh = MeshHierarchy::new(100, 10).unwrap();
        let field = CoefficientField::constant(100, 1.0).unwrap();
        let one = continua_by_threshold(&field, &mesh, &[]).unwrap();
        let region = oversample(&mesh, 55, 1).unwrap();
        let cb = constraint_rows(&mesh, &region, &one, ConstraintMode::Constant, 0).unwrap();
        assert_eq!(cb.b.nrows(), region.members.len());
        for (r, &(_, p)) in cb.rows.iter().enumerate() {
            assert!((cb.g[r] - one.block_mass(0, p)).abs() < 1e-15);
        }

        let (_, two) = layered(&mesh);
        let cb = constraint_rows(&mesh, &region, &two, ConstraintMode::Constant, 1).unwrap();
        let ones = vec![1.0; region.cell_rect(&mesh).num_nodes()];
        let sums = cb.b.mul_vec(&ones);
        for (r, &(j, p)) in cb.rows.iter().enumerate() {
            if j != 1 {
                assert_eq!(cb.g[r], 0.0);
            }
            assert!((sums[r] - two.block_mass(j, p)).abs() < 1e-14);
            let (_, vals) = cb.b.row(r);
            assert!(vals.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn linear_mode_centroid_zeroes_target_row() {
        let mesh = MeshHierarchy::new(100, 10).unwrap();
        let (_, two) = layered(&mesh);
        let target = 46;
        let region = oversample(&mesh, target, 1).unwrap();
        for i in 0..2 {
            for dir in 0..2 {
                let center = weighted_centroid(&mesh, &two, i, target, dir);
                let cb = constraint_rows(
                    &mesh,
                    &region,
                    &two,
                    ConstraintMode::Linear { dir, center },
                    i,
                )
                .unwrap();
                for (r, &(j, p)) in cb.rows.iter().enumerate() {
                    if p == target && j == i {
                        assert!(cb.g[r].abs() < 1e-15);
                    } else if j == i {
                        // Off-target moments are the shifted first moments.
                        let expect = first_moment(&mesh, &two, j, p, dir, center);
                        assert_eq!(cb.g[r], expect);
                    }
                }
            }
        }
    }
}
