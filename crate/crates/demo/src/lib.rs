//! Browser demo: build a high-contrast medium, inspect its splitting, and
//! time-step the coarse system with any scheme.

use mcsplit::experiment::{preset, Experiment};
use mcsplit::geometry::MeshHierarchy;
use mcsplit::macrosystem::{
    assemble_macro, run_transient, stability_report, MacroSystem, RunOptions, Scheme,
    StabilityReport,
};
use mcsplit::media::CoefficientField;
use mcsplit::postprocess::{downscale, macro_block_averages, project_back, GradientPoint};
use mcsplit::split::SplitPlan;
use mcsplit::upscale::{upscale_all, BlockBasis, UpscaleOptions};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Split and stability data shown after building a medium.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub fine_n: usize,
    pub coarse_n: usize,
    pub continua: Vec<String>,
    pub contrast: f64,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub i0: usize,
    pub stability: StabilityReport,
}

/// Outcome of one time integration.
#[derive(Clone, Debug, Serialize)]
pub struct Simulation {
    pub scheme: Scheme,
    pub tau: f64,
    pub steps: usize,
    pub diverged: bool,
    /// Energy functional, at most 200 samples.
    pub monitor: Vec<f64>,
    /// `[block][continuum]` averages of the natural macro variables.
    pub averages: Vec<Vec<f64>>,
    /// Downscaled fine-grid nodal values, empty after divergence.
    pub fine: Vec<f64>,
}

/// A medium with its upscaled coarse system.
pub struct Model {
    mesh: MeshHierarchy,
    field: CoefficientField,
    bases: Vec<BlockBasis>,
    plan: SplitPlan,
    sys: MacroSystem,
    summary: Summary,
}

impl Model {
    /// Build from a named preset with the highest coefficient replaced.
    pub fn build(
        name: &str,
        contrast: f64,
        coarse_n: usize,
        layers: usize,
    ) -> mcsplit::Result<Self> {
        let mut config = preset(name)?;
        config.field = config.field.with_max_value(contrast);
        config.coarse_n = vec![coarse_n];
        let exp = Experiment::new(config, "");
        let mesh = exp.mesh(coarse_n)?;
        let (field, continua) = exp.media(&mesh, None)?;
        let up = upscale_all(
            &mesh,
            &field,
            &continua,
            &exp.config.source,
            &UpscaleOptions::new(layers),
            None,
        )?;
        let plan = exp.compute_split(&up.tensors)?;
        let sys = assemble_macro(&mesh, &up.tensors, &plan)?;
        let stability = stability_report(&sys, &plan, &up.tensors)?;
        let summary = Summary {
            fine_n: mesh.fine_n(),
            coarse_n,
            continua: continua.labels().to_vec(),
            contrast: field.contrast(),
            eigenvalues: plan.eigenvalues.clone(),
            eigenvectors: plan.eigenvectors.clone(),
            i0: plan.i0,
            stability,
        };
        Ok(Self {
            mesh,
            field,
            bases: up.bases,
            plan,
            sys,
            summary,
        })
    }

    pub fn summary(&self) -> &Summary {
        &self.summary
    }

    pub fn field(&self) -> &[f64] {
        self.field.values()
    }

    /// Integrate from zero over `steps` steps of size `tau`.
    pub fn simulate(&self, scheme: Scheme, tau: f64, steps: usize) -> mcsplit::Result<Simulation> {
        let opts = RunOptions {
            monitor_gamma: Some(self.summary.stability.gamma),
            record_steps: Vec::new(),
        };
        let tr = run_transient(
            &self.sys,
            scheme,
            tau,
            tau * steps as f64,
            vec![0.0; self.sys.dim()],
            &opts,
        )?;
        let stride = tr.monitor.len().div_ceil(200).max(1);
        let monitor = tr.monitor.iter().step_by(stride).copied().collect();
        let (averages, fine) = if tr.diverged {
            (Vec::new(), Vec::new())
        } else {
            let natural = project_back(tr.last(), &self.plan)?;
            (
                macro_block_averages(&self.mesh, &natural, self.plan.n)?,
                downscale(&self.mesh, &self.bases, &natural, GradientPoint::Center)?,
            )
        };
        Ok(Simulation {
            scheme,
            tau,
            steps: tr.steps,
            diverged: tr.diverged,
            monitor,
            averages,
            fine,
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// JavaScript handle to a [`Model`].
#[wasm_bindgen]
pub struct Demo {
    model: Model,
}

#[wasm_bindgen]
impl Demo {
    /// Upscale a preset medium; `contrast` replaces the highest value.
    #[wasm_bindgen(constructor)]
    pub fn new(name: &str, contrast: f64, coarse_n: usize, layers: usize) -> Result<Demo, JsError> {
        Model::build(name, contrast, coarse_n, layers)
            .map(|model| Demo { model })
            .map_err(js_err)
    }

    #[wasm_bindgen(js_name = fineN)]
    pub fn fine_n(&self) -> usize {
        self.model.summary.fine_n
    }

    /// Per-cell coefficient, row-major from the bottom row.
    pub fn field(&self) -> Vec<f64> {
        self.model.field().to_vec()
    }

    /// Split and stability data as JSON.
    pub fn summary(&self) -> Result<String, JsError> {
        serde_json::to_string(self.model.summary()).map_err(js_err)
    }

    /// Run one scheme and return the result as JSON.
    pub fn simulate(&self, scheme: &str, tau: f64, steps: usize) -> Result<String, JsError> {
        let scheme: Scheme = scheme.parse().map_err(js_err)?;
        let sim = self.model.simulate(scheme, tau, steps).map_err(js_err)?;
        serde_json::to_string(&sim).map_err(js_err)
    }
}
