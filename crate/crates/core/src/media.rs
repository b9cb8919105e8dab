//! Coefficient fields and continuum definitions, both stored per fine cell.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MeshHierarchy;

/// Coordinate axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }

    pub fn other(self) -> Axis {
        match self {
            Axis::X => Axis::Y,
            Axis::Y => Axis::X,
        }
    }
}

/// Piecewise constant conductivity, one value per fine cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    fine_n: usize,
    values: Vec<f64>,
    min: f64,
    max: f64,
}

impl CoefficientField {
    pub fn new(fine_n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != fine_n * fine_n {
            return Err(Error::InvalidField(format!(
                "expected {} values for a {fine_n}x{fine_n} grid, got {}",
                fine_n * fine_n,
                values.len()
            )));
        }
        let mut min = f64::INFINITY;
        let mut max = 0.0f64;
        for (c, &v) in values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidField(format!(
                    "non-positive or non-finite value {v} in cell {c}"
                )));
            }
            min = min.min(v);
            max = max.max(v);
        }
        Ok(Self {
            fine_n,
            values,
            min,
            max,
        })
    }

    pub fn constant(fine_n: usize, value: f64) -> Result<Self> {
        Self::new(fine_n, vec![value; fine_n * fine_n])
    }

    pub fn fine_n(&self) -> usize {
        self.fine_n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn contrast(&self) -> f64 {
        self.max / self.min
    }

    /// Sorted distinct values.
    pub fn distinct_values(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Replace every occurrence of `from` by `to`.
    pub fn with_value_replaced(&self, from: f64, to: f64) -> Result<Self> {
        Self::new(
            self.fine_n,
            self.values
                .iter()
                .map(|&v| if v == from { to } else { v })
                .collect(),
        )
    }

    /// Raw little-endian bytes of the raster, used for cache keys.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend_from_slice(&(self.fine_n as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// File layout of a user-supplied raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    /// Text, one grid row per line, separated by commas or whitespace.
    Csv,
    /// Little-endian `f64` values, no header.
    Binary,
}

/// Recipe for a coefficient field. All lengths are in physical units on the
/// unit square and are evaluated at fine-cell centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// Two-value layers: cells whose `axis` coordinate satisfies
    /// `(x - offset) mod period < width` take `values[1]`, the rest `values[0]`.
    Stripes {
        values: [f64; 2],
        period: f64,
        width: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default = "default_axis")]
        axis: Axis,
    },
    /// Low background with high layers across `y` and medium layers across
    /// `medium_axis`. With `medium_axis = "x"` the medium layers cross the
    /// high ones.
    ThreeValueLayered {
        /// `[low, medium, high]`.
        values: [f64; 3],
        period: f64,
        /// `[offset, width]` of the high layers.
        high: [f64; 2],
        /// `[offset, width]` of the medium layers.
        medium: [f64; 2],
        #[serde(default = "default_axis")]
        medium_axis: Axis,
        /// High layers along both axes, forming a grid.
        #[serde(default)]
        high_grid: bool,
    },
    /// One random axis-aligned high-value rectangle per square tile.
    Inclusions {
        values: [f64; 2],
        /// Target area fraction of the inclusions.
        density: f64,
        tile: f64,
        seed: u64,
    },
    Raster {
        path: PathBuf,
        format: RasterFormat,
    },
}

fn default_axis() -> Axis {
    Axis::Y
}

impl FieldSpec {
    /// Value list, low to high, for generators that carry one.
    pub fn values(&self) -> Vec<f64> {
        match self {
            FieldSpec::Constant { value } => vec![*value],
            FieldSpec::Stripes { values, .. } | FieldSpec::Inclusions { values, .. } => {
                values.to_vec()
            }
            FieldSpec::ThreeValueLayered { values, .. } => values.to_vec(),
            FieldSpec::Raster { .. } => Vec::new(),
        }
    }

    /// Same geometry with the highest value replaced.
    pub fn with_max_value(&self, high: f64) -> FieldSpec {
        let mut s = self.clone();
        match &mut s {
            FieldSpec::Constant { value } => *value = high,
            FieldSpec::Stripes { values, .. } | FieldSpec::Inclusions { values, .. } => {
                values[1] = high
            }
            FieldSpec::ThreeValueLayered { values, .. } => values[2] = high,
            FieldSpec::Raster { .. } => {}
        }
        s
    }

    fn validate(&self) -> Result<()> {
        let vals = self.values();
        if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidField(format!(
                "values must be positive, got {vals:?}"
            )));
        }
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidField(format!(
                    "{name} must be positive, got {x}"
                )))
            }
        };
        match self {
            FieldSpec::Stripes { period, width, .. } => {
                positive("period", *period)?;
                positive("width", *width)?;
                if width >= period {
                    return Err(Error::InvalidField(
                        "stripe width must be below the period".into(),
                    ));
                }
            }
            FieldSpec::ThreeValueLayered {
                period,
                high,
                medium,
                ..
            } => {
                positive("period", *period)?;
                positive("high width", high[1])?;
                positive("medium width", medium[1])?;
            }
            FieldSpec::Inclusions { density, tile, .. } => {
                positive("tile", *tile)?;
                if !(*density > 0.0 && *density < 1.0) {
                    return Err(Error::InvalidField(format!(
                        "density must lie in (0,1), got {density}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn in_layer(x: f64, period: f64, offset: f64, width: f64) -> bool {
    (x - offset).rem_euclid(period) < width
}

/// Build the coefficient field described by `spec` on the fine grid.
pub fn generate_field(spec: &FieldSpec, mesh: &MeshHierarchy) -> Result<CoefficientField> {
    spec.validate()?;
    let n = mesh.fine_n();
    let centers = (0..mesh.num_cells()).map(|c| mesh.cell_center(c));
    let values: Vec<f64> = match spec {
        FieldSpec::Constant { value } => vec![*value; n * n],
        FieldSpec::Stripes {
            values,
            period,
            width,
            offset,
            axis,
        } => centers
            .map(|x| {
                if in_layer(x[axis.index()], *period, *offset, *width) {
                    values[1]
                } else {
                    values[0]
                }
            })
            .collect(),
        FieldSpec::ThreeValueLayered {
            values,
            period,
            high,
            medium,
            medium_axis,
            high_grid,
        } => centers
            .map(|x| {
                let in_high = |d: usize| in_layer(x[d], *period, high[0], high[1]);
                if in_high(1) || (*high_grid && in_high(0)) {
                    values[2]
                } else if in_layer(x[medium_axis.index()], *period, medium[0], medium[1]) {
                    values[1]
                } else {
                    values[0]
                }
            })
            .collect(),
        FieldSpec::Inclusions {
            values,
            density,
            tile,
            seed,
        } => inclusions(mesh, *values, *density, *tile, *seed),
        FieldSpec::Raster { path, format } => read_raster(path, *format, n)?,
    };
    CoefficientField::new(n, values)
}

fn inclusions(
    mesh: &MeshHierarchy,
    values: [f64; 2],
    density: f64,
    tile: f64,
    seed: u64,
) -> Vec<f64> {
    let n = mesh.fine_n();
    let mut out = vec![values[0]; n * n];
    let tile_cells = ((tile * n as f64).round() as usize).clamp(2, n);
    let tiles = n.div_ceil(tile_cells);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ty in 0..tiles {
        for tx in 0..tiles {
            let x0 = tx * tile_cells;
            let y0 = ty * tile_cells;
            let tw = tile_cells.min(n - x0);
            let th = tile_cells.min(n - y0);
            let aspect: f64 = rng.gen_range(0.4..2.5);
            let area = density * (tw * th) as f64;
            let w = ((area * aspect).sqrt().round() as usize).clamp(1, tw - 1);
            let h = ((area / w as f64).round() as usize).clamp(1, th - 1);
            let ox = x0 + rng.gen_range(0..=tw - w);
            let oy = y0 + rng.gen_range(0..=th - h);
            for iy in oy..oy + h {
                for ix in ox..ox + w {
                    out[iy * n + ix] = values[1];
                }
            }
        }
    }
    out
}

/// Read a `fine_n × fine_n` raster. Rows run along `x`; the first row is the
/// bottom row (`y` index 0).
pub fn read_raster(path: &Path, format: RasterFormat, fine_n: usize) -> Result<Vec<f64>> {
    let values = match format {
        RasterFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut values = Vec::with_capacity(fine_n * fine_n);
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                for tok in line
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                {
                    let v: f64 = tok.parse().map_err(|_| {
                        Error::InvalidField(format!(
                            "{}:{}: cannot parse {tok:?}",
                            path.display(),
                            lineno + 1
                        ))
                    })?;
                    values.push(v);
                }
            }
            values
        }
        RasterFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::InvalidField(format!(
                    "{}: length {} is not a multiple of 8",
                    path.display(),
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
    };
    if values.len() != fine_n * fine_n {
        return Err(Error::InvalidField(format!(
            "{}: expected {}x{} = {} values, found {}",
            path.display(),
            fine_n,
            fine_n,
            fine_n * fine_n,
            values.len()
        )));
    }
    Ok(values)
}

/// Write a field in the raster layout accepted by [`read_raster`].
pub fn write_raster(field: &CoefficientField, path: &Path, format: RasterFormat) -> Result<()> {
    let n = field.fine_n();
    let bytes = match format {
        RasterFormat::Csv => {
            let mut s = String::new();
            for row in field.values().chunks(n) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&line.join(","));
                s.push('\n');
            }
            s.into_bytes()
        }
        RasterFormat::Binary => field
            .values()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Auxiliary functions `ψ_i`, sampled at fine-cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuumSet {
    weights: Vec<Vec<f64>>,
    /// `block_mass[i][p] = ∫_{K^p} ψ_i`.
    block_mass: Vec<Vec<f64>>,
    characteristic: bool,
    labels: Vec<String>,
}

impl ContinuumSet {
    /// Validate and wrap per-cell weights.
    pub fn new(
        mesh: &MeshHierarchy,
        weights: Vec<Vec<f64>>,
        characteristic: bool,
        labels: Vec<String>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("continuum set is empty".into()));
        }
        if weights.iter().any(|w| w.len() != mesh.num_cells()) {
            return Err(Error::Dimension(
                "continuum weights must have one value per fine cell".into(),
            ));
        }
        let h2 = mesh.h() * mesh.h();
        let nb = mesh.num_blocks();
        let mut block_mass = vec![vec![0.0; nb]; weights.len()];
        for (i, w) in weights.iter().enumerate() {
            for (c, &v) in w.iter().enumerate() {
                block_mass[i][mesh.block_of_cell(c)] += v * h2;
            }
        }
        for p in 0..nb {
            for (i, bm) in block_mass.iter().enumerate() {
                if bm[p] == 0.0 {
                    return Err(Error::ContinuumMissing {
                        continuum: i,
                        block: p,
                    });
                }
            }
            let cells = mesh.block_cells(p);
            let k = weights.len();
            let gram = DMatrix::from_fn(k, k, |i, j| {
                cells
                    .iter()
                    .map(|&c| weights[i][c] * weights[j][c])
                    .sum::<f64>()
            });
            let eig = gram.symmetric_eigenvalues();
            let top = eig.max();
            if !(eig.min() > 1e-12 * top) {
                return Err(Error::DependentContinua { block: p });
            }
        }
        let labels = if labels.len() == weights.len() {
            labels
        } else {
            (0..weights.len())
                .map(|i| format!("psi{}", i + 1))
                .collect()
        };
        Ok(Self {
            weights,
            block_mass,
            characteristic,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub fn weight(&self, i: usize, cell: usize) -> f64 {
        self.weights[i][cell]
    }

    pub fn block_mass(&self, i: usize, block: usize) -> f64 {
        self.block_mass[i][block]
    }

    pub fn is_characteristic(&self) -> bool {
        self.characteristic
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Raw bytes of all weights, used for cache keys.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Indicators of value bands. `cuts` splits the value axis; continuum `i`
/// collects cells with `cuts[i-1] <= κ < cuts[i]`, so continua are ordered
/// by ascending value.
pub fn continua_by_threshold(
    field: &CoefficientField,
    mesh: &MeshHierarchy,
    cuts: &[f64],
) -> Result<ContinuumSet> {
    if cuts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "cuts must be strictly ascending, got {cuts:?}"
        )));
    }
    let nbands = cuts.len() + 1;
    let mut weights = vec![vec![0.0; mesh.num_cells()]; nbands];
    for (c, &v) in field.values().iter().enumerate() {
        let band = cuts.iter().take_while(|&&cut| v >= cut).count();
        weights[band][c] = 1.0;
    }
    let labels = (0..nbands).map(|i| format!("band{}", i + 1)).collect();
    ContinuumSet::new(mesh, weights, true, labels)
}

/// New continua as sums of base indicators, one per index set.
pub fn continua_union(
    base: &ContinuumSet,
    mesh: &MeshHierarchy,
    unions: &[Vec<usize>],
) -> Result<ContinuumSet> {
    let mut weights = Vec::with_capacity(unions.len());
    let mut labels = Vec::with_capacity(unions.len());
    for set in unions {
        if set.is_empty() {
            return Err(Error::Config("empty continuum union".into()));
        }
        let mut w = vec![0.0; mesh.num_cells()];
        for &i in set {
            if i >= base.len() {
                return Err(Error::Config(format!(
                    "union index {i} out of range for {} continua",
                    base.len()
                )));
            }
            w.iter_mut().zip(base.weights(i)).for_each(|(a, b)| *a += b);
        }
        weights.push(w);
        labels.push(
            set.iter()
                .map(|&i| base.labels()[i].clone())
                .collect::<Vec<_>>()
                .join("+"),
        );
    }
    let characteristic = base.is_characteristic()
        && weights
            .iter()
            .all(|w| w.iter().all(|&v| v == 0.0 || v == 1.0));
    ContinuumSet::new(mesh, weights, characteristic, labels)
}

/// Append `(x_dir − c_dir) ψ_i` for every base continuum, where `c_dir` is the
/// smallest `dir` coordinate of the cell's coarse block.
pub fn continua_with_linear(
    base: &ContinuumSet,
    mesh: &MeshHierarchy,
    dir: Axis,
) -> Result<ContinuumSet> {
    let d = dir.index();
    let mut weights: Vec<Vec<f64>> = (0..base.len()).map(|i| base.weights(i).to_vec()).collect();
    let mut labels = base.labels().to_vec();
    for i in 0..base.len() {
        let w: Vec<f64> = (0..mesh.num_cells())
            .map(|c| {
                let x = mesh.cell_center(c)[d];
                let c0 = mesh.block_origin(mesh.block_of_cell(c))[d];
                (x - c0) * base.weight(i, c)
            })
            .collect();
        weights.push(w);
        labels.push(format!("{}*(x{}-c)", base.labels()[i], d + 1));
    }
    ContinuumSet::new(mesh, weights, false, labels)
}

/// Recipe for a continuum set, applied to a generated field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ContinuumSpec {
    Threshold {
        cuts: Vec<f64>,
    },
    /// Zero-based band indices.
    Union {
        cuts: Vec<f64>,
        unions: Vec<Vec<usize>>,
    },
    WithLinear {
        cuts: Vec<f64>,
        axis: Axis,
    },
}

impl ContinuumSpec {
    pub fn build(&self, field: &CoefficientField, mesh: &MeshHierarchy) -> Result<ContinuumSet> {
        match self {
            ContinuumSpec::Threshold { cuts } => continua_by_threshold(field, mesh, cuts),
            ContinuumSpec::Union { cuts, unions } => {
                continua_union(&continua_by_threshold(field, mesh, cuts)?, mesh, unions)
            }
            ContinuumSpec::WithLinear { cuts, axis } => {
                continua_with_linear(&continua_by_threshold(field, mesh, cuts)?, mesh, *axis)
            }
        }
    }
}
