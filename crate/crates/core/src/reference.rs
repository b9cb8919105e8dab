//! Fine-grid reference solution: backward Euler on the full Q1 system with
//! zero Dirichlet data on ∂Ω.

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_load, assemble_mass, assemble_stiffness, Source};
use crate::error::{Error, Result};
use crate::geometry::MeshHierarchy;
use crate::linalg::{CsrMatrix, SkylineCholesky};
use crate::macrosystem::num_steps;
use crate::media::CoefficientField;

/// Relative residual accepted per backward Euler step.
pub const STEP_RESIDUAL_TOL: f64 = 1e-10;

/// Fine system restricted to interior nodes.
#[derive(Clone, Debug)]
pub struct FineSystem {
    pub fine_n: usize,
    /// Global fine node index of every interior unknown.
    pub interior: Vec<usize>,
    pub mass: CsrMatrix,
    pub stiff: CsrMatrix,
    pub load: Vec<f64>,
}

impl FineSystem {
    pub fn new(mesh: &MeshHierarchy, field: &CoefficientField, source: &Source) -> Result<Self> {
        if field.fine_n() != mesh.fine_n() {
            return Err(Error::Dimension(format!(
                "field is {0}x{0}, mesh {1}x{1}",
                field.fine_n(),
                mesh.fine_n()
            )));
        }
        let rect = mesh.full_rect();
        let n = mesh.fine_n();
        let interior: Vec<usize> = (1..n)
            .flat_map(|j| (1..n).map(move |i| rect.local_node(i, j)))
            .collect();
        let k = assemble_stiffness(mesh, field, &rect).select(&interior, &interior);
        let m = assemble_mass(mesh, &rect).select(&interior, &interior);
        let f = assemble_load(mesh, &rect, &|x| source.eval(x));
        Ok(Self {
            fine_n: n,
            load: interior.iter().map(|&g| f[g]).collect(),
            interior,
            mass: m,
            stiff: k,
        })
    }

    pub fn dim(&self) -> usize {
        self.interior.len()
    }

    pub fn num_nodes(&self) -> usize {
        (self.fine_n + 1) * (self.fine_n + 1)
    }

    /// Full nodal vector with zero boundary values.
    pub fn extend(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for (&g, &v) in self.interior.iter().zip(u) {
            out[g] = v;
        }
        out
    }

    /// Interior values of a full nodal vector.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&g| full[g]).collect()
    }

    /// Stationary solution of `K u = F`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        Ok(SkylineCholesky::factor(&self.stiff)?.solve(&self.load))
    }
}

/// Fine snapshots at requested times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTrajectory {
    pub fine_n: usize,
    pub tau: f64,
    pub steps: usize,
    /// `(t, full nodal vector)`.
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub max_residual: f64,
    /// `½‖u‖²_M + τ Σ ‖u‖²_K` after every step.
    pub energy: Vec<f64>,
}

impl FineTrajectory {
    pub fn at(&self, t: f64) -> Option<&[f64]> {
        self.snapshots
            .iter()
            .find(|s| (s.0 - t).abs() <= 1e-9 * self.tau.max(t.abs()))
            .map(|s| s.1.as_slice())
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.0).collect()
    }
}

/// Step indices of the requested times; each must lie on the step grid.
pub fn snapshot_steps(tau: f64, t_final: f64, times: &[f64]) -> Result<Vec<usize>> {
    let steps = num_steps(t_final, tau);
    times
        .iter()
        .map(|&t| {
            let k = (t / tau).round();
            if !(t >= 0.0) || (t / tau - k).abs() > 1e-6 || k as usize > steps {
                Err(Error::Config(format!(
                    "snapshot time {t:e} is not a step of τ = {tau:e} within [0, {t_final:e}]"
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Backward Euler from zero initial data.
pub fn solve_reference(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    source: &Source,
    tau: f64,
    t_final: f64,
    snapshot_times: &[f64],
) -> Result<FineTrajectory> {
    let sys = FineSystem::new(mesh, field, source)?;
    run_fine(&sys, tau, t_final, snapshot_times, vec![0.0; sys.dim()])
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Backward Euler on a prepared fine system from interior data `u0`.
pub fn run_fine(
    sys: &FineSystem,
    tau: f64,
    t_final: f64,
    snapshot_times: &[f64],
    u0: Vec<f64>,
) -> Result<FineTrajectory> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "time step must be positive, got {tau}"
        )));
    }
    if u0.len() != sys.dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, system {}",
            u0.len(),
            sys.dim()
        )));
    }
    let mut wanted: Vec<(usize, f64)> = snapshot_steps(tau, t_final, snapshot_times)?
        .into_iter()
        .zip(snapshot_times.iter().copied())
        .collect();
    wanted.sort_by_key(|w| w.0);
    wanted.dedup_by_key(|w| w.0);
    let steps = num_steps(t_final, tau);
    let lhs = sys.mass.lin_comb(1.0 / tau, &sys.stiff, 1.0);
    let chol = SkylineCholesky::factor(&lhs)?;
    let mut u = u0;
    let mut snapshots = Vec::with_capacity(wanted.len());
    let mut next = wanted.iter().peekable();
    while let Some(&&(0, t)) = next.peek() {
        snapshots.push((t, sys.extend(&u)));
        next.next();
    }
    let mut max_residual = 0.0f64;
    let mut dissipated = 0.0;
    let mut energy = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut rhs = sys.load.clone();
        sys.mass.mul_vec_acc(1.0 / tau, &u, &mut rhs);
        let mut x = chol.solve(&rhs);
        let scale = l2(&rhs);
        let mut res = residual(&lhs, &x, &rhs);
        let mut rel = if scale > 0.0 {
            l2(&res) / scale
        } else {
            l2(&res)
        };
        if rel > STEP_RESIDUAL_TOL {
            chol.solve_in_place(&mut res);
            x.iter_mut().zip(&res).for_each(|(a, d)| *a += d);
            res = residual(&lhs, &x, &rhs);
            rel = if scale > 0.0 {
                l2(&res) / scale
            } else {
                l2(&res)
            };
            if rel > STEP_RESIDUAL_TOL {
                return Err(Error::NoConvergence {
                    iterations: step,
                    residual: rel,
                });
            }
        }
        max_residual = max_residual.max(rel);
        u = x;
        dissipated += tau * sys.stiff.quad_form(&u);
        energy.push(0.5 * sys.mass.quad_form(&u) + dissipated);
        if let Some(&&(k, t)) = next.peek() {
            if k == step {
                snapshots.push((t, sys.extend(&u)));
                next.next();
            }
        }
    }
    Ok(FineTrajectory {
        fine_n: sys.fine_n,
        tau,
        steps,
        snapshots,
        max_residual,
        energy,
    })
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(ax).map(|(b, a)| b - a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> (MeshHierarchy, CoefficientField) {
        (
            MeshHierarchy::new(n, 2).unwrap(),
            CoefficientField::constant(n, 1.0).unwrap(),
        )
    }

    #[test]
    fn zero_source_gives_zero_trajectory() {
        let (mesh, field) = unit(10);
        let tr =
            solve_reference(&mesh, &field, &Source::zero(), 1e-3, 1e-2, &[5e-3, 1e-2]).unwrap();
        assert_eq!(tr.snapshots.len(), 2);
        assert!(tr.snapshots.iter().all(|s| s.1.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn long_time_limit_is_stationary_solution() {
        let (mesh, field) = unit(20);
        let sys = FineSystem::new(&mesh, &field, &Source::default()).unwrap();
        let tr = run_fine(&sys, 0.05, 5.0, &[5.0], vec![0.0; sys.dim()]).unwrap();
        let u = sys.restrict(tr.at(5.0).unwrap());
        let s = sys.stationary().unwrap();
        let diff: Vec<f64> = u.iter().zip(&s).map(|(a, b)| a - b).collect();
        assert!(sys.mass.quad_form(&diff).sqrt() <= 1e-6 * sys.mass.quad_form(&s).sqrt());
        assert!(tr.max_residual <= STEP_RESIDUAL_TOL);
    }

    #[test]
    fn first_order_in_time() {
        let (mesh, field) = unit(10);
        let sys = FineSystem::new(&mesh, &field, &Source::default()).unwrap();
        let t = 0.02;
        let runs: Vec<Vec<f64>> = [2e-3, 1e-3, 5e-4]
            .iter()
            .map(|&tau| {
                run_fine(&sys, tau, t, &[t], vec![0.0; sys.dim()])
                    .unwrap()
                    .snapshots[0]
                    .1
                    .clone()
            })
            .collect();
        let d1 = l2(&runs[0]
            .iter()
            .zip(&runs[1])
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>());
        let d2 = l2(&runs[1]
            .iter()
            .zip(&runs[2])
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>());
        let ratio = d1 / d2;
        assert!((1.5..=2.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn energy_is_monotone_without_source() {
        let mesh = MeshHierarchy::new(12, 2).unwrap();
        let vals: Vec<f64> = (0..144)
            .map(|c| if c % 5 == 0 { 1e4 } else { 1.0 })
            .collect();
        let field = CoefficientField::new(12, vals).unwrap();
        let sys = FineSystem::new(&mesh, &field, &Source::zero()).unwrap();
        let u0: Vec<f64> = (0..sys.dim())
            .map(|i| ((i * 13 % 7) as f64) - 3.0)
            .collect();
        let e0 = 0.5 * sys.mass.quad_form(&u0);
        let tr = run_fine(&sys, 1e-4, 1e-2, &[], u0).unwrap();
        assert!(tr.energy[0] <= e0);
        assert!(tr.energy.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn off_grid_snapshot_is_rejected() {
        let (mesh, field) = unit(4);
        assert!(matches!(
            solve_reference(&mesh, &field, &Source::zero(), 1e-3, 1e-2, &[1.5e-3]),
            Err(Error::Config(_))
        ));
    }
}
