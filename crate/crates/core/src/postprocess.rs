//! Back-projection from split coordinates, per-continuum error metrics and
//! fine-scale reconstruction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MeshHierarchy, DIM};
use crate::macrosystem::CoarseSpace;
use crate::media::ContinuumSet;
use crate::split::SplitPlan;
use crate::upscale::BlockBasis;

fn check_len(u: &[f64], n: usize, what: &str) -> Result<()> {
    if n == 0 || !u.len().is_multiple_of(n) {
        return Err(Error::Dimension(format!(
            "{what} of length {} is not a multiple of {n}",
            u.len()
        )));
    }
    Ok(())
}

/// Natural coordinates `U = vᵀ Û` from split coordinates, node by node.
pub fn project_back(split: &[f64], plan: &SplitPlan) -> Result<Vec<f64>> {
    let n = plan.n;
    check_len(split, n, "split state")?;
    let mut out = vec![0.0; split.len()];
    for (uh, u) in split.chunks(n).zip(out.chunks_mut(n)) {
        for (k, uk) in u.iter_mut().enumerate() {
            *uk = (0..n).map(|i| plan.v[i][k] * uh[i]).sum();
        }
    }
    Ok(out)
}

/// Split coordinates `Û = v̂ U` from natural ones.
pub fn mix(natural: &[f64], plan: &SplitPlan) -> Result<Vec<f64>> {
    let n = plan.n;
    check_len(natural, n, "natural state")?;
    let mut out = vec![0.0; natural.len()];
    for (u, uh) in natural.chunks(n).zip(out.chunks_mut(n)) {
        for (i, x) in uh.iter_mut().enumerate() {
            *x = (0..n).map(|k| plan.v_hat[i][k] * u[k]).sum();
        }
    }
    Ok(out)
}

/// Values of continuum `i` at the four corners of a block (zero on ∂Ω).
fn corners(space: &CoarseSpace, u: &[f64], n: usize, bx: usize, by: usize, i: usize) -> [f64; 4] {
    space
        .element(bx, by)
        .map(|node| node.map_or(0.0, |k| u[k * n + i]))
}

/// `(1/|K|) ∫_K U_i` per block, `[block][continuum]`, by coarse Q1 quadrature.
pub fn macro_block_averages(mesh: &MeshHierarchy, u: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    let space = CoarseSpace {
        coarse_n: mesh.coarse_n(),
    };
    if u.len() != space.num_nodes() * n {
        return Err(Error::Dimension(format!(
            "macro state has {} entries, expected {}",
            u.len(),
            space.num_nodes() * n
        )));
    }
    Ok((0..mesh.num_blocks())
        .map(|p| {
            let (bx, by) = mesh.block_coords(p);
            (0..n)
                .map(|i| corners(&space, u, n, bx, by, i).iter().sum::<f64>() / 4.0)
                .collect()
        })
        .collect())
}

/// `∫_K u ψ_i / ∫_K ψ_i` per block, `[block][continuum]`, for a full fine nodal vector.
pub fn reference_block_averages(
    mesh: &MeshHierarchy,
    continua: &ContinuumSet,
    u: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let rect = mesh.full_rect();
    if u.len() != rect.num_nodes() {
        return Err(Error::Dimension(format!(
            "fine state has {} entries, expected {}",
            u.len(),
            rect.num_nodes()
        )));
    }
    let h2 = mesh.h() * mesh.h();
    let n = continua.len();
    let mut out = vec![vec![0.0; n]; mesh.num_blocks()];
    for c in 0..mesh.num_cells() {
        let (ix, iy) = mesh.cell_coords(c);
        let avg = rect.cell_nodes(ix, iy).iter().map(|&k| u[k]).sum::<f64>() / 4.0;
        let p = mesh.block_of_cell(c);
        for (i, o) in out[p].iter_mut().enumerate() {
            *o += continua.weight(i, c) * avg * h2;
        }
    }
    for (p, row) in out.iter_mut().enumerate() {
        for (i, o) in row.iter_mut().enumerate() {
            *o /= continua.block_mass(i, p);
        }
    }
    Ok(out)
}

/// Continua whose weights are non-negative, i.e. those that define averages.
pub fn averaging_continua(continua: &ContinuumSet) -> Vec<usize> {
    (0..continua.len())
        .filter(|&i| continua.weights(i).iter().all(|&w| w >= 0.0))
        .collect()
}

/// Relative error series per continuum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    /// Evaluated continuum indices.
    pub continua: Vec<usize>,
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    /// `values[t][k]` for continuum `continua[k]`; absent when the reference
    /// vanishes.
    pub values: Vec<Vec<Option<f64>>>,
}

impl ErrorSeries {
    /// Series of one evaluated continuum.
    pub fn series(&self, k: usize) -> Vec<(f64, Option<f64>)> {
        self.times
            .iter()
            .zip(&self.values)
            .map(|(&t, v)| (t, v[k]))
            .collect()
    }

    /// Value at the last time.
    pub fn last(&self, k: usize) -> Option<f64> {
        self.values.last().and_then(|v| v[k])
    }

    /// Largest error of continuum `k` over all times.
    pub fn max(&self, k: usize) -> Option<f64> {
        self.values.iter().filter_map(|v| v[k]).reduce(f64::max)
    }

    /// Largest pointwise difference to another series on the same times.
    pub fn max_difference(&self, other: &ErrorSeries, k: usize) -> Option<f64> {
        if self.times.len() != other.times.len() {
            return None;
        }
        self.values
            .iter()
            .zip(&other.values)
            .filter_map(|(a, b)| Some((a[k]? - b[k]?).abs()))
            .reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for k in 0..self.continua.len() {
            let _ = write!(s, ",e{}", k + 1);
        }
        s.push('\n');
        for (t, row) in self.times.iter().zip(&self.values) {
            let _ = write!(s, "{t:e}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v:e}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Error of one continuum from block averages.
pub fn relative_error(macro_avg: &[f64], ref_avg: &[f64]) -> Option<f64> {
    let num: f64 = macro_avg
        .iter()
        .zip(ref_avg)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = ref_avg.iter().map(|b| b * b).sum();
    (den > 0.0).then(|| (num / den).sqrt())
}

/// Errors of natural-coordinate macro states against fine snapshots at the same times.
pub fn relative_errors(
    mesh: &MeshHierarchy,
    continua: &ContinuumSet,
    which: &[usize],
    macro_states: &[(f64, Vec<f64>)],
    reference: &[(f64, Vec<f64>)],
) -> Result<ErrorSeries> {
    let n = continua.len();
    if let Some(&bad) = which.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("continuum {bad} out of range")));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (t, u) in macro_states {
        let (_, r) = reference
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-9 * t.abs().max(1e-12))
            .ok_or_else(|| Error::Config(format!("no reference snapshot at t = {t:e}")))?;
        let ma = macro_block_averages(mesh, u, n)?;
        let ra = reference_block_averages(mesh, continua, r)?;
        let row = which
            .iter()
            .map(|&i| {
                let a: Vec<f64> = ma.iter().map(|b| b[i]).collect();
                let b: Vec<f64> = ra.iter().map(|b| b[i]).collect();
                relative_error(&a, &b)
            })
            .collect();
        times.push(*t);
        values.push(row);
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "macro snapshot times must be strictly increasing".into(),
        ));
    }
    Ok(ErrorSeries {
        continua: which.to_vec(),
        labels: which
            .iter()
            .map(|&i| continua.labels()[i].clone())
            .collect(),
        times,
        values,
    })
}

/// Where macroscopic values and gradients are evaluated when downscaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientPoint {
    /// Block center.
    #[default]
    Center,
    /// Every fine node, from the coarse bilinear interpolant.
    Pointwise,
}

/// Fine nodal field `Σ_i φ_i U_i + φ_i^m ∂_m U_i`, averaged on shared block edges.
pub fn downscale(
    mesh: &MeshHierarchy,
    bases: &[BlockBasis],
    u: &[f64],
    at: GradientPoint,
) -> Result<Vec<f64>> {
    if bases.len() != mesh.num_blocks() {
        return Err(Error::Dimension(format!(
            "{} bases for {} blocks",
            bases.len(),
            mesh.num_blocks()
        )));
    }
    let n = bases[0].num_continua();
    let space = CoarseSpace {
        coarse_n: mesh.coarse_n(),
    };
    if u.len() != space.num_nodes() * n {
        return Err(Error::Dimension(format!(
            "macro state has {} entries, expected {}",
            u.len(),
            space.num_nodes() * n
        )));
    }
    let full = mesh.full_rect();
    let hc = mesh.coarse_h();
    let mut acc = vec![0.0; full.num_nodes()];
    let mut count = vec![0u32; full.num_nodes()];
    for (p, basis) in bases.iter().enumerate() {
        let (bx, by) = mesh.block_coords(p);
        let rect = mesh.block_rect(p);
        let c: Vec<[f64; 4]> = (0..n).map(|i| corners(&space, u, n, bx, by, i)).collect();
        // Bilinear value and gradient at local coordinates (s, t) ∈ [0,1]².
        let eval = |i: usize, s: f64, t: f64| -> (f64, [f64; DIM]) {
            let [a, b, cc, d] = c[i];
            let val =
                a * (1.0 - s) * (1.0 - t) + b * s * (1.0 - t) + cc * s * t + d * (1.0 - s) * t;
            let gx = ((b - a) * (1.0 - t) + (cc - d) * t) / hc;
            let gy = ((d - a) * (1.0 - s) + (cc - b) * s) / hc;
            (val, [gx, gy])
        };
        let center: Vec<(f64, [f64; DIM])> = (0..n).map(|i| eval(i, 0.5, 0.5)).collect();
        let side = basis.nodes_per_side;
        for local in 0..rect.num_nodes() {
            let (gi, gj) = rect.node_ij(local);
            let s = (gi - rect.x0) as f64 / (side - 1) as f64;
            let t = (gj - rect.y0) as f64 / (side - 1) as f64;
            let mut v = 0.0;
            for i in 0..n {
                let (val, grad) = match at {
                    GradientPoint::Center => center[i],
                    GradientPoint::Pointwise => eval(i, s, t),
                };
                v += basis.phi[i][local] * val;
                for m in 0..DIM {
                    v += basis.phi_lin[m][i][local] * grad[m];
                }
            }
            let g = full.local_node(gi, gj);
            acc[g] += v;
            count[g] += 1;
        }
    }
    Ok(acc
        .iter()
        .zip(&count)
        .map(|(a, &k)| if k > 0 { a / k as f64 } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::assembly::Source;
    use crate::media::{continua_by_threshold, CoefficientField};
    use crate::upscale::{upscale_all, UpscaleOptions};

    fn random_plan(n: usize, seed: u64) -> (SplitPlan, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DMatrix::from_fn(n, n, |i, j| {
            f64::from(u8::from(i == j)) + rng.gen_range(-0.4..0.4)
        });
        (SplitPlan::manual(v.clone(), 1).unwrap(), v)
    }

    #[test]
    fn identity_plan_projects_to_itself() {
        let plan = SplitPlan::identity(3, 1).unwrap();
        let u: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        assert_eq!(project_back(&u, &plan).unwrap(), u);
    }

    #[test]
    fn mix_then_project_round_trip() {
        let (plan, _) = random_plan(4, 1);
        let u: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let back = project_back(&mix(&u, &plan).unwrap(), &plan).unwrap();
        assert!(u.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn project_back_matches_dense_product() {
        let (plan, v) = random_plan(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let uh: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = project_back(&uh, &plan).unwrap();
        for node in 0..5 {
            let x = nalgebra::DVector::from_column_slice(&uh[node * 3..node * 3 + 3]);
            let want = v.transpose() * x;
            for k in 0..3 {
                assert!((got[node * 3 + k] - want[k]).abs() < 1e-14);
            }
        }
        assert!(project_back(&uh[..14], &plan).is_err());
    }

    #[test]
    fn hand_evaluated_two_block_error() {
        assert!(
            (relative_error(&[1.0, 2.0], &[1.5, 2.0]).unwrap() - (0.25f64 / 6.25).sqrt()).abs()
                < 1e-15
        );
        assert_eq!(relative_error(&[2.0, 4.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(relative_error(&[1.0], &[0.0]), None);
    }

    /// Fine field that is bilinear on the coarse grid, and the matching macro state.
    fn bilinear_pair(mesh: &MeshHierarchy, n: usize) -> (Vec<f64>, Vec<f64>) {
        let g = |x: f64, y: f64| x * (1.0 - x) * y * (1.0 - y) * 16.0;
        let cn = mesh.coarse_n();
        let space = CoarseSpace { coarse_n: cn };
        let mut u = vec![0.0; space.num_nodes() * n];
        for k in 0..space.num_nodes() {
            let (i, j) = space.node_ij(k);
            for c in 0..n {
                u[k * n + c] = g(i as f64 / cn as f64, j as f64 / cn as f64);
            }
        }
        // Coarse bilinear interpolant sampled at fine nodes.
        let fine_n = mesh.fine_n();
        let r = mesh.cells_per_block();
        let mut fine = vec![0.0; (fine_n + 1) * (fine_n + 1)];
        for j in 0..=fine_n {
            for i in 0..=fine_n {
                let (bi, bj) = ((i / r).min(cn - 1), (j / r).min(cn - 1));
                let s = (i - bi * r) as f64 / r as f64;
                let t = (j - bj * r) as f64 / r as f64;
                let x0 = bi as f64 / cn as f64;
                let y0 = bj as f64 / cn as f64;
                let hc = 1.0 / cn as f64;
                let (a, b, c, d) = (
                    g(x0, y0),
                    g(x0 + hc, y0),
                    g(x0 + hc, y0 + hc),
                    g(x0, y0 + hc),
                );
                fine[i + j * (fine_n + 1)] =
                    a * (1.0 - s) * (1.0 - t) + b * s * (1.0 - t) + c * s * t + d * (1.0 - s) * t;
            }
        }
        (u, fine)
    }

    fn stripes(mesh: &MeshHierarchy) -> (CoefficientField, ContinuumSet) {
        let n = mesh.fine_n();
        let vals: Vec<f64> = (0..n * n)
            .map(|c| if (c / n) % 4 == 1 { 100.0 } else { 1.0 })
            .collect();
        let f = CoefficientField::new(n, vals).unwrap();
        let cs = continua_by_threshold(&f, mesh, &[10.0]).unwrap();
        (f, cs)
    }

    #[test]
    fn exact_averages_give_zero_and_doubling_gives_one() {
        let mesh = MeshHierarchy::new(16, 4).unwrap();
        let (u, fine) = bilinear_pair(&mesh, 1);
        let unit = ContinuumSet::new(&mesh, vec![vec![1.0; 256]], true, vec![]).unwrap();
        let e = relative_errors(
            &mesh,
            &unit,
            &[0],
            &[(0.5, u.clone())],
            &[(0.5, fine.clone())],
        )
        .unwrap();
        assert!(e.last(0).unwrap() < 1e-14);
        let doubled: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let e2 = relative_errors(&mesh, &unit, &[0], &[(0.5, doubled)], &[(0.5, fine)]).unwrap();
        assert!((e2.last(0).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(e2.to_csv().lines().next(), Some("t,e1"));
    }

    #[test]
    fn zero_reference_reports_absent() {
        let mesh = MeshHierarchy::new(8, 2).unwrap();
        let unit = ContinuumSet::new(&mesh, vec![vec![1.0; 64]], true, vec![]).unwrap();
        let e = relative_errors(
            &mesh,
            &unit,
            &[0],
            &[(1.0, vec![1.0])],
            &[(1.0, vec![0.0; 81])],
        )
        .unwrap();
        assert_eq!(e.values[0][0], None);
        assert_eq!(e.to_csv(), "t,e1\n1e0,\n");
    }

    #[test]
    fn error_is_invariant_under_block_relabeling() {
        let a = [0.3, 1.2, -0.4, 2.0];
        let b = [0.5, 1.0, -0.2, 2.5];
        let perm = [2, 0, 3, 1];
        let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        assert_eq!(relative_error(&a, &b), relative_error(&pa, &pb));
    }

    #[test]
    fn downscale_constants_and_zero() {
        let mesh = MeshHierarchy::new(16, 4).unwrap();
        let field = CoefficientField::constant(16, 1.0).unwrap();
        let n = 16;
        let w: Vec<f64> = (0..n * n)
            .map(|c| f64::from(u8::from((c / n) % 2 == 0)))
            .collect();
        let cs = ContinuumSet::new(
            &mesh,
            vec![w.clone(), w.iter().map(|x| 1.0 - x).collect()],
            true,
            vec![],
        )
        .unwrap();
        let up = upscale_all(
            &mesh,
            &field,
            &cs,
            &Source::zero(),
            &UpscaleOptions::new(1),
            None,
        )
        .unwrap();
        let space = CoarseSpace { coarse_n: 4 };
        let u = vec![0.7; space.num_nodes() * 2];
        let fine = downscale(&mesh, &up.bases, &u, GradientPoint::Center).unwrap();
        // Interior of the central blocks sees no boundary corner.
        let r = mesh.full_rect();
        for j in 5..12 {
            for i in 5..12 {
                assert!((fine[r.local_node(i, j)] - 0.7).abs() < 1e-8);
            }
        }
        let z = downscale(
            &mesh,
            &up.bases,
            &vec![0.0; u.len()],
            GradientPoint::Pointwise,
        )
        .unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn downscaled_averages_track_macro_averages() {
        let mesh = MeshHierarchy::new(40, 8).unwrap();
        let (field, cs) = stripes(&mesh);
        let up = upscale_all(
            &mesh,
            &field,
            &cs,
            &Source::zero(),
            &UpscaleOptions::new(2),
            None,
        )
        .unwrap();
        let space = CoarseSpace { coarse_n: 8 };
        let mut u = vec![0.0; space.num_nodes() * 2];
        for k in 0..space.num_nodes() {
            let (i, j) = space.node_ij(k);
            let (x, y) = (i as f64 / 8.0, j as f64 / 8.0);
            let s = (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin();
            u[k * 2] = s;
            u[k * 2 + 1] = 0.8 * s;
        }
        let fine = downscale(&mesh, &up.bases, &u, GradientPoint::Center).unwrap();
        let ra = reference_block_averages(&mesh, &cs, &fine).unwrap();
        let space_avg = |p: usize, i: usize| {
            let (bx, by) = mesh.block_coords(p);
            corners(&space, &u, 2, bx, by, i).iter().sum::<f64>() / 4.0
        };
        for p in 0..mesh.num_blocks() {
            let (bx, by) = mesh.block_coords(p);
            if bx == 0 || by == 0 || bx == 7 || by == 7 {
                continue;
            }
            for i in 0..2 {
                let m = space_avg(p, i);
                assert!(
                    (ra[p][i] - m).abs() <= 0.05 * m.abs(),
                    "block {p} continuum {i}: {} vs {m}",
                    ra[p][i]
                );
            }
        }
    }
}
