//! Experiment configuration, presets and the staged pipeline
//! upscale → split → stability → solve → reference → errors → report.
//!
//! Every stage reads its inputs from and writes its outputs to an artifact
//! directory, so stages can run separately.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::Source;
use crate::error::{Error, Result};
use crate::geometry::{default_layers, MeshHierarchy};
use crate::macrosystem::{
    assemble_macro, num_steps, run_transient, stability_report, RunOptions, Scheme, StabilityReport,
};
use crate::media::{
    generate_field, Axis, CoefficientField, ContinuumSet, ContinuumSpec, FieldSpec,
};
use crate::postprocess::{averaging_continua, project_back, relative_errors, ErrorSeries};
use crate::reference::solve_reference;
use crate::split::{
    matrix_of, plan_split, spectral_split, Aggregation, BlockAggregate, Reduction, SelectionPolicy,
    SplitPlan,
};
use crate::upscale::{upscale_all, CellBoundary, EffectiveTensors, UpscaleOptions, UpscaleStats};

/// Artifact format version.
pub const ARTIFACT_VERSION: u32 = 1;

/// Oversampling layers: a number or `"auto"` for `⌈−2 ln H⌉`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Layers {
    Fixed(usize),
    Named(String),
}

impl Layers {
    pub fn auto() -> Self {
        Layers::Named("auto".into())
    }

    pub fn resolve(&self, coarse_h: f64) -> Result<usize> {
        match self {
            Layers::Fixed(l) => Ok(*l),
            Layers::Named(s) if s == "auto" => Ok(default_layers(coarse_h)),
            Layers::Named(s) => Err(Error::Config(format!(
                "layers must be a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

impl std::str::FromStr for Layers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Layers::auto());
        }
        s.parse()
            .map(Layers::Fixed)
            .map_err(|_| Error::Config(format!("layers must be a number or \"auto\", got \"{s}\"")))
    }
}

/// Macro time step: a number or `"auto"` for `0.9 τ₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauChoice {
    Value(f64),
    Auto,
}

impl std::str::FromStr for TauChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(TauChoice::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(TauChoice::Value(v)),
            _ => Err(Error::Config(format!(
                "tau must be a positive number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpscaleConfig {
    pub layers: Layers,
    pub boundary: CellBoundary,
    pub constraint_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualSplit {
    /// Mixing rows, slow rows first.
    pub v: Vec<Vec<f64>>,
    pub i0: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub policy: SelectionPolicy,
    pub reduction: Reduction,
    pub aggregation: Aggregation,
    /// Fall back to subset search when the mixing inequality fails.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual: Option<ManualSplit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    /// Step of the reference and, unless overridden, of the macro schemes.
    pub tau: f64,
    /// Number of evenly spaced snapshot times in `(0, T]`.
    pub snapshots: usize,
    pub schemes: Vec<Scheme>,
}

/// Fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub fine_n: usize,
    pub coarse_n: Vec<usize>,
    pub field: FieldSpec,
    pub continua: ContinuumSpec,
    pub source: Source,
    pub upscale: UpscaleConfig,
    pub split: SplitConfig,
    pub time: TimeConfig,
    /// Highest coefficient values for the stability sweep; empty skips it.
    pub contrasts: Vec<f64>,
}

/// Partial sections of a config file; present keys override the preset.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    fine_n: Option<usize>,
    coarse_n: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUpscale {
    layers: Option<Layers>,
    boundary: Option<CellBoundary>,
    constraint_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    policy: Option<SelectionPolicy>,
    reduction: Option<Reduction>,
    aggregation: Option<Aggregation>,
    fallback: Option<bool>,
    manual: Option<ManualSplit>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    t_final: Option<f64>,
    tau: Option<f64>,
    snapshots: Option<usize>,
    schemes: Option<Vec<Scheme>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    name: Option<String>,
    seed: Option<u64>,
    mesh: Option<RawMesh>,
    field: Option<FieldSpec>,
    continua: Option<ContinuumSpec>,
    source: Option<Source>,
    upscale: Option<RawUpscale>,
    split: Option<RawSplit>,
    time: Option<RawTime>,
    contrasts: Option<Vec<f64>>,
}

pub const PRESETS: [&str; 5] = ["example1", "example2", "example3", "example4", "example5"];

fn layered_three(high_grid: bool) -> FieldSpec {
    FieldSpec::ThreeValueLayered {
        values: [1.0, 1e2, 1e7],
        period: 0.05,
        high: [0.02, 0.01],
        medium: [0.04, 0.01],
        medium_axis: Axis::Y,
        high_grid,
    }
}

fn two_value_layers() -> FieldSpec {
    FieldSpec::Stripes {
        values: [1.0, 1e5],
        period: 0.05,
        width: 0.01,
        offset: 0.02,
        axis: Axis::Y,
    }
}

/// Desk-scale setup of one of the five reported examples.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let all = vec![
        Scheme::Implicit,
        Scheme::Explicit,
        Scheme::Scheme1,
        Scheme::Scheme2,
    ];
    let base = |field, continua, t_final, tau| ExperimentConfig {
        name: name.to_string(),
        seed: 0,
        fine_n: 100,
        coarse_n: vec![10, 20],
        field,
        continua,
        source: Source::default(),
        upscale: UpscaleConfig {
            layers: Layers::auto(),
            boundary: CellBoundary::Natural,
            constraint_tol: 1e-9,
        },
        split: SplitConfig {
            policy: SelectionPolicy::default(),
            reduction: Reduction::default(),
            aggregation: Aggregation::default(),
            fallback: true,
            manual: None,
        },
        time: TimeConfig {
            t_final,
            tau,
            snapshots: 15,
            schemes: all.clone(),
        },
        contrasts: Vec::new(),
    };
    let two = ContinuumSpec::Threshold { cuts: vec![10.0] };
    let three = ContinuumSpec::Threshold {
        cuts: vec![10.0, 1e4],
    };
    Ok(match name {
        "example1" => ExperimentConfig {
            contrasts: vec![1e4, 1e5, 1e6, 1e7],
            ..base(two_value_layers(), two, 1.5e-4, 1e-7)
        },
        "example2" => {
            let mut c = ExperimentConfig {
                contrasts: vec![1e4, 1e5, 1e6, 1e7],
                ..base(
                    FieldSpec::Inclusions {
                        values: [1.0, 1e5],
                        density: 0.2,
                        tile: 0.05,
                        seed: 7,
                    },
                    two,
                    1e-4,
                    1e-7,
                )
            };
            c.time.snapshots = 10;
            c
        }
        "example3" => base(layered_three(false), three, 6e-4, 5e-7),
        "example4" => {
            let mut c = base(
                layered_three(true),
                ContinuumSpec::Union {
                    cuts: vec![10.0, 1e4],
                    unions: vec![vec![0, 2], vec![0, 1], vec![1, 2]],
                },
                1.5e-4,
                5e-8,
            );
            c.split.fallback = false;
            c
        }
        "example5" => base(
            two_value_layers(),
            ContinuumSpec::WithLinear {
                cuts: vec![10.0],
                axis: Axis::X,
            },
            1.5e-4,
            1e-7,
        ),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset '{name}' (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    })
}

impl ExperimentConfig {
    /// Parse a TOML config; keys present override the named preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = match &raw.preset {
            Some(p) => preset(p)?,
            None => {
                let (Some(field), Some(continua), Some(time)) =
                    (&raw.field, &raw.continua, &raw.time)
                else {
                    return Err(Error::Config(
                        "without a preset, [field], [continua] and [time] are required".into(),
                    ));
                };
                let (Some(t_final), Some(tau)) = (time.t_final, time.tau) else {
                    return Err(Error::Config("[time] needs t_final and tau".into()));
                };
                let mut c = preset("example1")?;
                c.name = "custom".into();
                c.field = field.clone();
                c.continua = continua.clone();
                c.time.t_final = t_final;
                c.time.tau = tau;
                c.contrasts.clear();
                c
            }
        };
        let base_fine = c.fine_n;
        let mut tau_given = false;
        if let Some(v) = raw.name {
            c.name = v;
        }
        if let Some(v) = raw.seed {
            c.seed = v;
        }
        if let Some(m) = raw.mesh {
            if let Some(v) = m.fine_n {
                c.fine_n = v;
            }
            if let Some(v) = m.coarse_n {
                c.coarse_n = v;
            }
        }
        if let Some(v) = raw.field {
            c.field = v;
        }
        if let Some(v) = raw.continua {
            c.continua = v;
        }
        if let Some(v) = raw.source {
            c.source = v;
        }
        if let Some(u) = raw.upscale {
            if let Some(v) = u.layers {
                c.upscale.layers = v;
            }
            if let Some(v) = u.boundary {
                c.upscale.boundary = v;
            }
            if let Some(v) = u.constraint_tol {
                c.upscale.constraint_tol = v;
            }
        }
        if let Some(s) = raw.split {
            if let Some(v) = s.policy {
                c.split.policy = v;
            }
            if let Some(v) = s.reduction {
                c.split.reduction = v;
            }
            if let Some(v) = s.aggregation {
                c.split.aggregation = v;
            }
            if let Some(v) = s.fallback {
                c.split.fallback = v;
            }
            if s.manual.is_some() {
                c.split.manual = s.manual;
            }
        }
        if let Some(t) = raw.time {
            if let Some(v) = t.t_final {
                c.time.t_final = v;
            }
            if let Some(v) = t.tau {
                c.time.tau = v;
                tau_given = true;
            }
            if let Some(v) = t.snapshots {
                c.time.snapshots = v;
            }
            if let Some(v) = t.schemes {
                c.time.schemes = v;
            }
        }
        if let Some(v) = raw.contrasts {
            c.contrasts = v;
        }
        if !tau_given && raw.preset.is_some() && c.fine_n != base_fine {
            c.time.tau *= base_fine as f64 / c.fine_n as f64;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Change the fine grid, scaling the time step with `h`.
    pub fn set_fine_n(&mut self, fine_n: usize) {
        self.time.tau *= self.fine_n as f64 / fine_n as f64;
        self.fine_n = fine_n;
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_n.is_empty() {
            return Err(Error::Config("mesh.coarse_n is empty".into()));
        }
        for &cn in &self.coarse_n {
            MeshHierarchy::new(self.fine_n, cn)?;
        }
        let t = &self.time;
        if !(t.t_final > 0.0 && t.tau > 0.0 && t.t_final.is_finite() && t.tau.is_finite()) {
            return Err(Error::Config(format!(
                "time.t_final and time.tau must be positive, got {} and {}",
                t.t_final, t.tau
            )));
        }
        if t.snapshots == 0 {
            return Err(Error::Config("time.snapshots must be at least 1".into()));
        }
        let per = t.t_final / t.snapshots as f64 / t.tau;
        if (per - per.round()).abs() > 1e-6 * per.max(1.0) || per.round() < 1.0 {
            return Err(Error::Config(format!(
                "snapshot spacing T/snapshots = {:e} is not a multiple of tau = {:e}",
                t.t_final / t.snapshots as f64,
                t.tau
            )));
        }
        if t.schemes.is_empty() {
            return Err(Error::Config("time.schemes is empty".into()));
        }
        if self.contrasts.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("contrasts must be positive".into()));
        }
        for &cn in &self.coarse_n {
            self.upscale.layers.resolve(1.0 / cn as f64)?;
        }
        if self.fine_n >= 400 {
            log::warn!(
                "fine grid {0}x{0} is large; cell problems and the reference will be slow",
                self.fine_n
            );
        }
        Ok(())
    }

    /// Snapshot times `k T / S`, `k = 1..S`.
    pub fn snapshot_times(&self) -> Vec<f64> {
        let s = self.time.snapshots;
        let per = (self.time.t_final / s as f64 / self.time.tau).round() as usize;
        (1..=s).map(|k| (k * per) as f64 * self.time.tau).collect()
    }

    /// Config file form, readable by [`ExperimentConfig::from_toml`].
    pub fn to_toml(&self) -> String {
        let Ok(toml::Value::Table(mut t)) = toml::Value::try_from(self) else {
            return String::new();
        };
        let mut mesh = toml::Table::new();
        for k in ["fine_n", "coarse_n"] {
            if let Some(v) = t.remove(k) {
                mesh.insert(k.into(), v);
            }
        }
        t.insert("mesh".into(), toml::Value::Table(mesh));
        toml::to_string_pretty(&t).unwrap_or_default()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn optional<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MissingArtifact { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Output of the upscale stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpscaleArtifact {
    pub coarse_n: usize,
    pub layers: usize,
    pub stats: UpscaleStats,
    pub max_constraint_residual: f64,
    pub tensors: Vec<EffectiveTensors>,
}

/// Output of one solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveArtifact {
    pub scheme: Scheme,
    pub tau_requested: f64,
    pub tau: f64,
    pub steps: usize,
    pub diverged: bool,
    pub gamma: f64,
    /// `(t, U)` in split coordinates at snapshot times.
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub monitor_increases: usize,
}

/// Output of the reference stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceArtifact {
    pub fine_n: usize,
    pub tau: f64,
    pub steps: usize,
    pub max_residual: f64,
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeErrors {
    pub scheme: Scheme,
    pub diverged: bool,
    pub series: ErrorSeries,
}

/// One row of the contrast sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub coarse_n: usize,
    pub contrast: f64,
    pub i0: usize,
    pub report: StabilityReport,
}

/// One row of the eigen table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub coarse_n: usize,
    pub layers: usize,
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub completed: Vec<String>,
    pub failed: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub artifact_version: u32,
}

/// Per-coarse-grid section of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub coarse_n: usize,
    pub layers: Option<usize>,
    pub split: Option<SplitPlan>,
    pub stability: Option<StabilityReport>,
    pub solves: Vec<SolveSummary>,
    pub errors: Vec<SchemeErrors>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub scheme: Scheme,
    pub tau: f64,
    pub steps: usize,
    pub diverged: bool,
    pub monitor_increases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub levels: Vec<LevelReport>,
    pub stability_table: Option<Vec<StabilityRow>>,
    pub eigen_table: Option<Vec<EigenRow>>,
    pub reference: Option<ReferenceSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub fine_n: usize,
    pub tau: f64,
    pub steps: usize,
    pub max_residual: f64,
}

/// Pipeline bound to an artifact directory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            cache_dir: None,
        }
    }

    pub fn with_cache(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    fn level_dir(&self, cn: usize) -> PathBuf {
        self.out.join(format!("H{cn:03}"))
    }

    pub fn path(&self, cn: usize, file: &str) -> PathBuf {
        self.level_dir(cn).join(file)
    }

    pub fn mesh(&self, cn: usize) -> Result<MeshHierarchy> {
        MeshHierarchy::new(self.config.fine_n, cn)
    }

    /// Field and continua, optionally with the highest value replaced.
    pub fn media(
        &self,
        mesh: &MeshHierarchy,
        contrast: Option<f64>,
    ) -> Result<(CoefficientField, ContinuumSet)> {
        let spec = match contrast {
            Some(c) => self.config.field.with_max_value(c),
            None => self.config.field.clone(),
        };
        let field = generate_field(&spec, mesh)?;
        let continua = self.config.continua.build(&field, mesh)?;
        Ok((field, continua))
    }

    fn upscale_options(&self, cn: usize) -> Result<UpscaleOptions> {
        Ok(UpscaleOptions {
            constraint_tol: self.config.upscale.constraint_tol,
            boundary: self.config.upscale.boundary,
            ..UpscaleOptions::new(self.config.upscale.layers.resolve(1.0 / cn as f64)?)
        })
    }

    /// Upscale in memory.
    pub fn compute_upscale(&self, cn: usize, contrast: Option<f64>) -> Result<UpscaleArtifact> {
        let mesh = self.mesh(cn)?;
        let (field, continua) = self.media(&mesh, contrast)?;
        let opts = self.upscale_options(cn)?;
        let up = upscale_all(
            &mesh,
            &field,
            &continua,
            &self.config.source,
            &opts,
            self.cache_dir.as_deref(),
        )?;
        Ok(UpscaleArtifact {
            coarse_n: cn,
            layers: opts.layers,
            stats: up.stats,
            max_constraint_residual: up
                .bases
                .iter()
                .map(|b| b.max_constraint_residual)
                .fold(0.0, f64::max),
            tensors: up.tensors,
        })
    }

    pub fn stage_upscale(&self, cn: usize) -> Result<UpscaleArtifact> {
        let art = self.compute_upscale(cn, None)?;
        // Cache hits differ between runs; the artifact records only the total.
        let mut stored = art.clone();
        stored.stats = UpscaleStats {
            blocks_solved: art.stats.blocks_solved + art.stats.blocks_loaded,
            blocks_loaded: 0,
            saddle_solves: 0,
        };
        write_json(&self.path(cn, "upscale.json"), &stored)?;
        Ok(art)
    }

    pub fn load_upscale(&self, cn: usize) -> Result<UpscaleArtifact> {
        read_json(&self.path(cn, "upscale.json"), "upscale")
    }

    /// Split plan from block tensors under the configured options.
    pub fn compute_split(&self, tensors: &[EffectiveTensors]) -> Result<SplitPlan> {
        let s = &self.config.split;
        if let Some(m) = &s.manual {
            let mut plan = SplitPlan::manual(matrix_of(&m.v), m.i0)?;
            let agg = BlockAggregate::with_options(tensors, s.reduction, s.aggregation)?;
            plan.slow_rate = crate::split::slow_rate(&agg, &matrix_of(&m.v), m.i0)?;
            return Ok(plan);
        }
        let agg = BlockAggregate::with_options(tensors, s.reduction, s.aggregation)?;
        if s.fallback {
            plan_split(&agg, &s.policy)
        } else {
            spectral_split(&agg, &s.policy)
        }
    }

    pub fn stage_split(&self, cn: usize) -> Result<SplitPlan> {
        let up = self.load_upscale(cn)?;
        let plan = self.compute_split(&up.tensors)?;
        write_json(&self.path(cn, "split.json"), &plan)?;
        Ok(plan)
    }

    pub fn load_split(&self, cn: usize) -> Result<SplitPlan> {
        read_json(&self.path(cn, "split.json"), "split")
    }

    pub fn stage_stability(&self, cn: usize) -> Result<StabilityReport> {
        let up = self.load_upscale(cn)?;
        let plan = self.load_split(cn)?;
        let mesh = self.mesh(cn)?;
        let sys = assemble_macro(&mesh, &up.tensors, &plan)?;
        let rep = stability_report(&sys, &plan, &up.tensors)?;
        write_json(&self.path(cn, "stability.json"), &rep)?;
        Ok(rep)
    }

    pub fn load_stability(&self, cn: usize) -> Result<StabilityReport> {
        read_json(&self.path(cn, "stability.json"), "stability")
    }

    /// Requested macro step for a choice.
    pub fn requested_tau(&self, choice: Option<TauChoice>, stability: &StabilityReport) -> f64 {
        match choice {
            None => self.config.time.tau,
            Some(TauChoice::Value(v)) => v,
            Some(TauChoice::Auto) => stability.tau2.map_or(self.config.time.tau, |t| 0.9 * t),
        }
    }

    /// Largest step not above `tau` that lands on every snapshot time.
    pub fn aligned_tau(&self, tau: f64) -> f64 {
        let spacing = self.config.time.t_final / self.config.time.snapshots as f64;
        let k = (spacing / tau * (1.0 - 1e-12)).ceil().max(1.0);
        spacing / k
    }

    pub fn stage_solve(
        &self,
        cn: usize,
        scheme: Scheme,
        choice: Option<TauChoice>,
    ) -> Result<SolveArtifact> {
        let up = self.load_upscale(cn)?;
        let plan = self.load_split(cn)?;
        let stab = self.load_stability(cn)?;
        let mesh = self.mesh(cn)?;
        let sys = assemble_macro(&mesh, &up.tensors, &plan)?;
        let tau_requested = self.requested_tau(choice, &stab);
        let tau = self.aligned_tau(tau_requested);
        let times = self.config.snapshot_times();
        let record: Vec<usize> = times.iter().map(|t| (t / tau).round() as usize).collect();
        let opts = RunOptions {
            monitor_gamma: Some(stab.gamma),
            record_steps: record.clone(),
        };
        let tr = run_transient(
            &sys,
            scheme,
            tau,
            self.config.time.t_final,
            vec![0.0; sys.dim()],
            &opts,
        )?;
        let snapshots: Vec<(f64, Vec<f64>)> = tr
            .snapshots
            .iter()
            .filter(|(k, _, u)| record.contains(k) && u.iter().all(|x| x.is_finite()))
            .map(|(k, _, u)| {
                (
                    times[record.iter().position(|r| r == k).expect("recorded")],
                    u.clone(),
                )
            })
            .collect();
        let mut csv = String::from("step,value\n");
        for (k, v) in tr.monitor.iter().enumerate() {
            let _ = writeln!(csv, "{k},{v:e}");
        }
        write_text(&self.path(cn, &format!("monitor-{scheme}.csv")), &csv)?;
        let art = SolveArtifact {
            scheme,
            tau_requested,
            tau,
            steps: tr.steps,
            diverged: tr.diverged,
            gamma: stab.gamma,
            snapshots,
            monitor_increases: tr
                .monitor
                .windows(2)
                .filter(|w| !(w[1] <= w[0] * (1.0 + 1e-12)))
                .count(),
        };
        write_json(&self.path(cn, &format!("solve-{scheme}.json")), &art)?;
        Ok(art)
    }

    pub fn load_solve(&self, cn: usize, scheme: Scheme) -> Result<SolveArtifact> {
        read_json(&self.path(cn, &format!("solve-{scheme}.json")), "solve")
    }

    pub fn compute_reference(&self) -> Result<ReferenceArtifact> {
        let mesh = self.mesh(self.config.coarse_n[0])?;
        let (field, _) = self.media(&mesh, None)?;
        let tr = solve_reference(
            &mesh,
            &field,
            &self.config.source,
            self.config.time.tau,
            self.config.time.t_final,
            &self.config.snapshot_times(),
        )?;
        Ok(ReferenceArtifact {
            fine_n: tr.fine_n,
            tau: tr.tau,
            steps: tr.steps,
            max_residual: tr.max_residual,
            snapshots: tr.snapshots,
        })
    }

    pub fn stage_reference(&self) -> Result<ReferenceArtifact> {
        let art = self.compute_reference()?;
        write_json(&self.out.join("reference.json"), &art)?;
        Ok(art)
    }

    pub fn load_reference(&self) -> Result<ReferenceArtifact> {
        read_json(&self.out.join("reference.json"), "reference")
    }

    /// Errors of every solved scheme on one coarse grid.
    pub fn stage_errors(&self, cn: usize) -> Result<Vec<SchemeErrors>> {
        let plan = self.load_split(cn)?;
        let reference = self.load_reference()?;
        let mesh = self.mesh(cn)?;
        let (_, continua) = self.media(&mesh, None)?;
        let which = averaging_continua(&continua);
        let mut out = Vec::new();
        for &scheme in &self.config.time.schemes {
            let path = self.path(cn, &format!("solve-{scheme}.json"));
            if !path.exists() {
                continue;
            }
            let sol = self.load_solve(cn, scheme)?;
            let states = sol
                .snapshots
                .iter()
                .map(|(t, u)| Ok((*t, project_back(u, &plan)?)))
                .collect::<Result<Vec<_>>>()?;
            let series = relative_errors(&mesh, &continua, &which, &states, &reference.snapshots)?;
            write_text(
                &self.path(cn, &format!("errors-{scheme}.csv")),
                &series.to_csv(),
            )?;
            out.push(SchemeErrors {
                scheme,
                diverged: sol.diverged,
                series,
            });
        }
        if out.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.path(cn, "solve-*.json"),
                stage: "solve",
            });
        }
        write_json(&self.path(cn, "errors.json"), &out)?;
        Ok(out)
    }

    pub fn load_errors(&self, cn: usize) -> Result<Vec<SchemeErrors>> {
        read_json(&self.path(cn, "errors.json"), "errors")
    }

    /// Stability quantities across the configured contrasts.
    pub fn compute_stability_table(&self, contrasts: &[f64]) -> Result<Vec<StabilityRow>> {
        let mut rows = Vec::new();
        for &cn in &self.config.coarse_n {
            let mesh = self.mesh(cn)?;
            for &contrast in contrasts {
                let up = self.compute_upscale(cn, Some(contrast))?;
                let plan = self.compute_split(&up.tensors)?;
                let sys = assemble_macro(&mesh, &up.tensors, &plan)?;
                rows.push(StabilityRow {
                    coarse_n: cn,
                    contrast,
                    i0: plan.i0,
                    report: stability_report(&sys, &plan, &up.tensors)?,
                });
            }
        }
        Ok(rows)
    }

    pub fn stage_stability_table(&self, contrasts: &[f64]) -> Result<Vec<StabilityRow>> {
        let rows = self.compute_stability_table(contrasts)?;
        write_json(&self.out.join("stability_table.json"), &rows)?;
        write_text(
            &self.out.join("stability_table.csv"),
            &stability_csv(&rows, contrasts, false),
        )?;
        write_text(
            &self.out.join("stability_table_c.csv"),
            &stability_csv(&rows, contrasts, true),
        )?;
        Ok(rows)
    }

    pub fn stage_eigen_table(&self) -> Result<Vec<EigenRow>> {
        let mut rows = Vec::new();
        for &cn in &self.config.coarse_n {
            let plan = self.load_split(cn)?;
            let up = self.load_upscale(cn)?;
            for (l, v) in plan.eigenvalues.iter().zip(&plan.eigenvectors) {
                rows.push(EigenRow {
                    coarse_n: cn,
                    layers: up.layers,
                    eigenvalue: *l,
                    eigenvector: v.clone(),
                });
            }
        }
        write_json(&self.out.join("eigen_table.json"), &rows)?;
        let mut csv = String::from("H,layers,lambda,v\n");
        for r in &rows {
            let v: Vec<String> = r.eigenvector.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(
                csv,
                "1/{},{},{:e},{}",
                r.coarse_n,
                r.layers,
                r.eigenvalue,
                v.join(" ")
            );
        }
        write_text(&self.out.join("eigen_table.csv"), &csv)?;
        Ok(rows)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            artifact_version: ARTIFACT_VERSION,
        }
    }

    /// Merge whatever stage outputs exist into `report.json`.
    pub fn stage_report(&self) -> Result<Report> {
        let mut levels = Vec::new();
        for &cn in &self.config.coarse_n {
            let mut solves = Vec::new();
            for &s in &self.config.time.schemes {
                if let Some(a) = optional(self.load_solve(cn, s))? {
                    solves.push(SolveSummary {
                        scheme: s,
                        tau: a.tau,
                        steps: a.steps,
                        diverged: a.diverged,
                        monitor_increases: a.monitor_increases,
                    });
                }
            }
            levels.push(LevelReport {
                coarse_n: cn,
                layers: optional(self.load_upscale(cn))?.map(|u: UpscaleArtifact| u.layers),
                split: optional(self.load_split(cn))?,
                stability: optional(self.load_stability(cn))?,
                solves,
                errors: optional(self.load_errors(cn))?.unwrap_or_default(),
            });
        }
        let report = Report {
            provenance: self.provenance(),
            config: self.config.clone(),
            levels,
            stability_table: optional(read_json(
                &self.out.join("stability_table.json"),
                "stability",
            ))?,
            eigen_table: optional(read_json(&self.out.join("eigen_table.json"), "split"))?,
            reference: optional(self.load_reference())?.map(|r: ReferenceArtifact| {
                ReferenceSummary {
                    fine_n: r.fine_n,
                    tau: r.tau,
                    steps: r.steps,
                    max_residual: r.max_residual,
                }
            }),
        };
        write_json(&self.out.join("report.json"), &report)?;
        Ok(report)
    }

    /// Human-readable plan of what a full run does; touches nothing.
    pub fn describe(&self) -> Result<String> {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "experiment {} (config {})", c.name, &c.hash()[..16]);
        let _ = writeln!(s, "fine grid {0}x{0}, h = 1/{0}", c.fine_n);
        for &cn in &c.coarse_n {
            let layers = c.upscale.layers.resolve(1.0 / cn as f64)?;
            let _ = writeln!(
                s,
                "  H = 1/{cn}: {} blocks, {layers} oversampling layers",
                cn * cn
            );
        }
        let _ = writeln!(
            s,
            "field {}",
            serde_json::to_string(&c.field).unwrap_or_default()
        );
        let _ = writeln!(
            s,
            "continua {}",
            serde_json::to_string(&c.continua).unwrap_or_default()
        );
        let steps = num_steps(c.time.t_final, c.time.tau);
        let _ = writeln!(
            s,
            "T = {:e}, tau = {:e} ({steps} steps), {} snapshots",
            c.time.t_final, c.time.tau, c.time.snapshots
        );
        let names: Vec<&str> = c.time.schemes.iter().map(|s| s.name()).collect();
        let _ = writeln!(s, "schemes {}", names.join(", "));
        if !c.contrasts.is_empty() {
            let _ = writeln!(s, "contrast sweep {:?}", c.contrasts);
        }
        let _ = writeln!(s, "output {}", self.out.display());
        Ok(s)
    }

    /// Run every stage, recording failures in `manifest.json`.
    pub fn run_all(&self, tau: Option<TauChoice>) -> Result<Report> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_json(&self.out.join("config.json"), &self.config)?;
        let mut manifest = Manifest::default();
        let mut record = |name: String, r: Result<()>| match r {
            Ok(()) => manifest.completed.push(name),
            Err(e) => {
                log::error!("{name}: {e}");
                manifest.failed.push((name, e.to_string()));
            }
        };
        record("reference".into(), self.stage_reference().map(drop));
        for &cn in &self.config.coarse_n {
            let tag = |s: &str| format!("{s} H=1/{cn}");
            let ok = self.stage_upscale(cn).map(drop);
            let up_ok = ok.is_ok();
            record(tag("upscale"), ok);
            if !up_ok {
                continue;
            }
            let ok = self
                .stage_split(cn)
                .map(drop)
                .and_then(|_| self.stage_stability(cn).map(drop));
            let split_ok = ok.is_ok();
            record(tag("split+stability"), ok);
            if !split_ok {
                continue;
            }
            for &s in &self.config.time.schemes {
                record(
                    tag(&format!("solve {s}")),
                    self.stage_solve(cn, s, tau).map(drop),
                );
            }
            record(tag("errors"), self.stage_errors(cn).map(drop));
        }
        if self
            .config
            .coarse_n
            .iter()
            .all(|&cn| self.path(cn, "split.json").exists())
        {
            record("eigen table".into(), self.stage_eigen_table().map(drop));
        }
        if !self.config.contrasts.is_empty() {
            let contrasts = self.config.contrasts.clone();
            record(
                "stability table".into(),
                self.stage_stability_table(&contrasts).map(drop),
            );
        }
        let report = self.stage_report();
        record(
            "report".into(),
            report
                .as_ref()
                .map(drop)
                .map_err(|e| Error::Config(e.to_string())),
        );
        write_json(&self.out.join("manifest.json"), &manifest)?;
        if let Some((stage, msg)) = manifest.failed.first() {
            return Err(Error::Config(format!(
                "{} stage(s) failed, first {stage}: {msg}",
                manifest.failed.len()
            )));
        }
        report
    }
}

/// Table layout: one row per H, two columns (implicit, explicit) per contrast.
pub fn stability_csv(rows: &[StabilityRow], contrasts: &[f64], with_c: bool) -> String {
    let mut s = String::from("H");
    for c in contrasts {
        let _ = write!(s, ",V1@{c:e},V2@{c:e}");
    }
    s.push('\n');
    let mut levels: Vec<usize> = rows.iter().map(|r| r.coarse_n).collect();
    levels.dedup();
    for cn in levels {
        let _ = write!(s, "1/{cn}");
        for &c in contrasts {
            let row = rows.iter().find(|r| r.coarse_n == cn && r.contrast == c);
            let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
            let (i, e) = match row {
                Some(r) if with_c => (r.report.implicit_ratio_c, r.report.explicit_ratio_c),
                Some(r) => (r.report.implicit_ratio, r.report.explicit_ratio),
                None => (None, None),
            };
            let _ = write!(s, ",{},{}", fmt(i), fmt(e));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            let c = preset(p).unwrap();
            c.validate().unwrap();
            let times = c.snapshot_times();
            assert_eq!(times.len(), c.time.snapshots);
            assert!((times[times.len() - 1] - c.time.t_final).abs() < 1e-15);
        }
        assert!(preset("example9").is_err());
    }

    #[test]
    fn toml_overrides_preset() {
        let c = ExperimentConfig::from_toml(
            r#"
preset = "example1"
[mesh]
coarse_n = [10]
[upscale]
layers = 3
[time]
schemes = ["implicit", "scheme1"]
"#,
        )
        .unwrap();
        assert_eq!(c.coarse_n, vec![10]);
        assert_eq!(c.upscale.layers, Layers::Fixed(3));
        assert_eq!(c.time.schemes, vec![Scheme::Implicit, Scheme::Scheme1]);
        assert_eq!(c.time.tau, 1e-7);
        let round = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn fine_grid_override_scales_tau() {
        let c =
            ExperimentConfig::from_toml("preset = \"example1\"\n[mesh]\nfine_n = 200\n").unwrap();
        assert!((c.time.tau - 5e-8).abs() < 1e-20);
        let mut d = preset("example1").unwrap();
        d.set_fine_n(200);
        assert_eq!(d.time.tau, c.time.tau);
    }

    #[test]
    fn diagnostics_name_the_problem() {
        let e =
            ExperimentConfig::from_toml("preset = \"example1\"\n[mesh]\nfine_m = 3\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("fine_m") && msg.contains("line"), "{msg}");
        let e = ExperimentConfig::from_toml("preset = \"example1\"\n[mesh]\ncoarse_n = [7]\n")
            .unwrap_err();
        assert!(e.to_string().contains('7'));
        let e =
            ExperimentConfig::from_toml("preset = \"example1\"\n[time]\ntau = 3e-7\n").unwrap_err();
        assert!(e.to_string().contains("multiple"));
        assert!(ExperimentConfig::from_toml("[mesh]\nfine_n = 100\n").is_err());
    }

    #[test]
    fn choices_parse() {
        assert_eq!("auto".parse::<Layers>().unwrap(), Layers::auto());
        assert_eq!("4".parse::<Layers>().unwrap(), Layers::Fixed(4));
        assert!("x".parse::<Layers>().is_err());
        assert_eq!("auto".parse::<TauChoice>().unwrap(), TauChoice::Auto);
        assert_eq!("1e-6".parse::<TauChoice>().unwrap(), TauChoice::Value(1e-6));
        assert!("-1".parse::<TauChoice>().is_err());
    }

    #[test]
    fn aligned_tau_divides_snapshot_spacing() {
        let e = Experiment::new(preset("example1").unwrap(), "unused");
        assert!((e.aligned_tau(1e-7) - 1e-7).abs() < 1e-20);
        let t = e.aligned_tau(3.3e-7);
        assert!(t <= 3.3e-7);
        let k = 1e-5 / t;
        assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn hash_tracks_content() {
        let a = preset("example1").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
