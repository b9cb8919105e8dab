//! Structured mesh hierarchy on the unit square.
//!
//! Fine cells are indexed row-major, `c = iy * fine_n + ix`; coarse blocks
//! likewise with `coarse_n`. Fine nodes carry global indices
//! `j * (fine_n + 1) + i`. Every fine cell belongs to exactly one block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial dimension. All direction loops run over `0..DIM`.
pub const DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshHierarchy {
    fine_n: usize,
    coarse_n: usize,
}

impl MeshHierarchy {
    pub fn new(fine_n: usize, coarse_n: usize) -> Result<Self> {
        if coarse_n < 2 {
            return Err(Error::Config(format!(
                "coarse grid needs at least 2 blocks per side, got {coarse_n}"
            )));
        }
        if fine_n == 0 || !fine_n.is_multiple_of(coarse_n) {
            return Err(Error::NonNestedMesh { fine_n, coarse_n });
        }
        Ok(Self { fine_n, coarse_n })
    }

    pub fn fine_n(&self) -> usize {
        self.fine_n
    }

    pub fn coarse_n(&self) -> usize {
        self.coarse_n
    }

    /// Fine cells per block side.
    pub fn cells_per_block(&self) -> usize {
        self.fine_n / self.coarse_n
    }

    /// Fine mesh size `h`.
    pub fn h(&self) -> f64 {
        1.0 / self.fine_n as f64
    }

    /// Coarse mesh size `H`.
    pub fn coarse_h(&self) -> f64 {
        1.0 / self.coarse_n as f64
    }

    pub fn num_cells(&self) -> usize {
        self.fine_n * self.fine_n
    }

    pub fn num_blocks(&self) -> usize {
        self.coarse_n * self.coarse_n
    }

    pub fn num_fine_nodes(&self) -> usize {
        (self.fine_n + 1) * (self.fine_n + 1)
    }

    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.fine_n + ix
    }

    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.fine_n, cell / self.fine_n)
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (ix, iy) = self.cell_coords(cell);
        let h = self.h();
        [(ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h]
    }

    pub fn block_index(&self, bx: usize, by: usize) -> usize {
        by * self.coarse_n + bx
    }

    pub fn block_coords(&self, block: usize) -> (usize, usize) {
        (block % self.coarse_n, block / self.coarse_n)
    }

    pub fn check_block(&self, block: usize) -> Result<()> {
        if block < self.num_blocks() {
            Ok(())
        } else {
            Err(Error::InvalidBlock {
                block,
                num_blocks: self.num_blocks(),
            })
        }
    }

    pub fn block_of_cell(&self, cell: usize) -> usize {
        let (ix, iy) = self.cell_coords(cell);
        let m = self.cells_per_block();
        self.block_index(ix / m, iy / m)
    }

    /// Lower-left corner of a block.
    pub fn block_origin(&self, block: usize) -> [f64; 2] {
        let (bx, by) = self.block_coords(block);
        let hc = self.coarse_h();
        [bx as f64 * hc, by as f64 * hc]
    }

    /// Block center, the point where macroscopic fields are sampled.
    pub fn block_center(&self, block: usize) -> [f64; 2] {
        let o = self.block_origin(block);
        let hc = self.coarse_h();
        [o[0] + 0.5 * hc, o[1] + 0.5 * hc]
    }

    pub fn block_rect(&self, block: usize) -> CellRect {
        let (bx, by) = self.block_coords(block);
        let m = self.cells_per_block();
        CellRect {
            x0: bx * m,
            y0: by * m,
            nx: m,
            ny: m,
        }
    }

    pub fn block_cells(&self, block: usize) -> Vec<usize> {
        self.block_rect(block).cells(self).collect()
    }

    pub fn full_rect(&self) -> CellRect {
        CellRect {
            x0: 0,
            y0: 0,
            nx: self.fine_n,
            ny: self.fine_n,
        }
    }

    pub fn fine_node_index(&self, i: usize, j: usize) -> usize {
        j * (self.fine_n + 1) + i
    }

    pub fn fine_node_coord(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.h();
        [i as f64 * h, j as f64 * h]
    }

    /// Coarse node `(I, J)` in `0..=coarse_n`.
    pub fn coarse_node_coord(&self, i: usize, j: usize) -> [f64; 2] {
        let hc = self.coarse_h();
        [i as f64 * hc, j as f64 * hc]
    }
}

/// Number of oversampling layers used by default for coarse size `H`.
pub fn default_layers(coarse_h: f64) -> usize {
    (-2.0 * coarse_h.ln()).ceil() as usize
}

/// Axis-aligned rectangle of fine cells `[x0, x0+nx) x [y0, y0+ny)`.
///
/// Nodes of the rectangle are numbered locally, `(i - x0) + (j - y0) * (nx + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub nx: usize,
    pub ny: usize,
}

impl CellRect {
    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn nodes_x(&self) -> usize {
        self.nx + 1
    }

    pub fn nodes_y(&self) -> usize {
        self.ny + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_x() * self.nodes_y()
    }

    /// Local index of the node at global fine coordinates `(i, j)`.
    pub fn local_node(&self, i: usize, j: usize) -> usize {
        (i - self.x0) + (j - self.y0) * self.nodes_x()
    }

    /// Global fine coordinates of a local node.
    pub fn node_ij(&self, local: usize) -> (usize, usize) {
        let nx = self.nodes_x();
        (self.x0 + local % nx, self.y0 + local / nx)
    }

    pub fn contains_cell(&self, ix: usize, iy: usize) -> bool {
        ix >= self.x0 && ix < self.x0 + self.nx && iy >= self.y0 && iy < self.y0 + self.ny
    }

    pub fn contains_node(&self, i: usize, j: usize) -> bool {
        i >= self.x0 && i <= self.x0 + self.nx && j >= self.y0 && j <= self.y0 + self.ny
    }

    /// Global cell indices, row-major.
    pub fn cells<'a>(&self, mesh: &'a MeshHierarchy) -> impl Iterator<Item = usize> + 'a {
        let r = *self;
        (r.y0..r.y0 + r.ny)
            .flat_map(move |iy| (r.x0..r.x0 + r.nx).map(move |ix| mesh.cell_index(ix, iy)))
    }

    /// Local node indices of the cell `(ix, iy)` in counterclockwise order
    /// starting at the lower-left corner.
    pub fn cell_nodes(&self, ix: usize, iy: usize) -> [usize; 4] {
        [
            self.local_node(ix, iy),
            self.local_node(ix + 1, iy),
            self.local_node(ix + 1, iy + 1),
            self.local_node(ix, iy + 1),
        ]
    }
}

/// Oversampled region `K+` around a target block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OversampleRegion {
    pub target: usize,
    pub layers: usize,
    /// Inclusive block range along x.
    pub bx: (usize, usize),
    /// Inclusive block range along y.
    pub by: (usize, usize),
    /// Member blocks, row-major.
    pub members: Vec<usize>,
}

impl OversampleRegion {
    pub fn new(mesh: &MeshHierarchy, target: usize, layers: usize) -> Result<Self> {
        mesh.check_block(target)?;
        let (tx, ty) = mesh.block_coords(target);
        let last = mesh.coarse_n() - 1;
        let bx = (tx.saturating_sub(layers), (tx + layers).min(last));
        let by = (ty.saturating_sub(layers), (ty + layers).min(last));
        let members = (by.0..=by.1)
            .flat_map(|y| (bx.0..=bx.1).map(move |x| mesh.block_index(x, y)))
            .collect();
        Ok(Self {
            target,
            layers,
            bx,
            by,
            members,
        })
    }

    pub fn cell_rect(&self, mesh: &MeshHierarchy) -> CellRect {
        let m = mesh.cells_per_block();
        CellRect {
            x0: self.bx.0 * m,
            y0: self.by.0 * m,
            nx: (self.bx.1 - self.bx.0 + 1) * m,
            ny: (self.by.1 - self.by.0 + 1) * m,
        }
    }

    /// Key identifying the geometric extent, shared by targets with equal clipping.
    pub fn extent(&self) -> ((usize, usize), (usize, usize)) {
        (self.bx, self.by)
    }
}

/// Block-level oversampling. Convenience wrapper over [`OversampleRegion::new`].
pub fn oversample(mesh: &MeshHierarchy, block: usize, layers: usize) -> Result<OversampleRegion> {
    OversampleRegion::new(mesh, block, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_hierarchy() {
        let m = MeshHierarchy::new(400, 10).unwrap();
        assert_eq!(m.cells_per_block(), 40);
        assert!((m.coarse_h() - 0.1).abs() < 1e-15);
        assert!((m.h() - 1.0 / 400.0).abs() < 1e-15);
        assert_eq!(m.block_cells(37).len(), 1600);
    }

    #[test]
    fn smallest_nesting() {
        let m = MeshHierarchy::new(4, 2).unwrap();
        assert_eq!(m.num_blocks(), 4);
        let area: f64 = (0..4)
            .map(|b| m.block_cells(b).len() as f64 * m.h() * m.h())
            .sum();
        assert!((area - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cell_block_map_round_trips() {
        let m = MeshHierarchy::new(100, 20).unwrap();
        let mut seen = vec![0usize; m.num_cells()];
        for b in 0..m.num_blocks() {
            let cells = m.block_cells(b);
            assert_eq!(cells.len(), 25);
            for c in cells {
                assert_eq!(m.block_of_cell(c), b);
                seen[c] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn rejects_non_nested() {
        let err = MeshHierarchy::new(100, 30).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("100") && msg.contains("30"), "{msg}");
        assert!(MeshHierarchy::new(10, 1).is_err());
    }

    #[test]
    fn default_layers_matches_reported_choices() {
        assert_eq!(default_layers(1.0 / 10.0), 5);
        assert_eq!(default_layers(1.0 / 20.0), 6);
        assert_eq!(default_layers(1.0 / 40.0), 8);
        let mut prev = 0;
        for n in 2..200 {
            let l = default_layers(1.0 / n as f64);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn oversample_clipping() {
        let m = MeshHierarchy::new(20, 10).unwrap();
        assert_eq!(oversample(&m, 0, 1).unwrap().members.len(), 4);
        assert_eq!(
            oversample(&m, m.block_index(4, 6), 1)
                .unwrap()
                .members
                .len(),
            9
        );
        for b in 0..m.num_blocks() {
            let r = oversample(&m, b, 5).unwrap();
            // 2*5+1 > 10 is not enough on its own: corner blocks still clip.
            assert!(r.members.contains(&b));
            let full = r.members.len() == 100;
            let (bx, by) = m.block_coords(b);
            assert_eq!(full, (4..=5).contains(&bx) && (4..=5).contains(&by));
        }
        assert!(oversample(&m, 100, 1).is_err());
    }

    #[test]
    fn region_members_tile_the_region() {
        let m = MeshHierarchy::new(30, 6).unwrap();
        for b in 0..m.num_blocks() {
            for l in 0..4 {
                let r = oversample(&m, b, l).unwrap();
                let rect = r.cell_rect(&m);
                let region_area = rect.num_cells() as f64 * m.h() * m.h();
                let member_area: f64 = r
                    .members
                    .iter()
                    .map(|&p| m.block_cells(p).len() as f64 * m.h() * m.h())
                    .sum();
                assert!((region_area - member_area).abs() < 1e-14);
                for &p in &r.members {
                    for c in m.block_cells(p) {
                        let (ix, iy) = m.cell_coords(c);
                        assert!(rect.contains_cell(ix, iy));
                    }
                }
            }
        }
    }
}
