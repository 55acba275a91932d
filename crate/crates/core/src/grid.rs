//! Multiresolution vertex feature grid with trilinear read-out.
//!
//! Each level stores a `c`-vector per vertex of a regular lattice over the
//! scene bounds. Coarse levels whose vertex count fits `table_size` are stored
//! densely (x-fastest row-major); larger levels go through a spatial hash and
//! may collide. Encoding a point concatenates the interpolated feature of every
//! level, coarse to fine.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Bounds;

/// Hash multipliers for the three axes.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Half-width of the uniform feature initialization range.
pub const INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bounds: Bounds,
    /// Cell size per level in meters, coarse to fine.
    pub levels: Vec<f64>,
    /// Latent width `c` of every level.
    pub feature_dim: usize,
    /// Maximum number of stored vertex slots per level.
    pub table_size: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    /// Two-level table-scale grid (0.24 m / 0.12 m cells, 8 features per level).
    fn default() -> Self {
        GridConfig {
            bounds: Bounds {
                min: [0.0, 0.0, 0.0],
                max: [1.8, 1.8, 0.6],
            },
            levels: vec![0.24, 0.12],
            feature_dim: 8,
            table_size: 1 << 19,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig("grid needs at least one level".into()));
        }
        if self.levels.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidConfig("cell sizes must be positive".into()));
        }
        if self.levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(
                "cell sizes must be strictly decreasing (coarse to fine)".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.table_size == 0 {
            return Err(Error::InvalidConfig("table_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the concatenated encoding, `L * c`.
    pub fn encoded_dim(&self) -> usize {
        self.levels.len() * self.feature_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageMode {
    Dense,
    Hashed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    cell_size: f64,
    dims: [u32; 3],
    mode: StorageMode,
    slots: usize,
    feature_dim: usize,
    features: Vec<f64>,
}

/// Shape of one level as implied by a config, computed without allocating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelLayout {
    pub dims: [u32; 3],
    pub mode: StorageMode,
    pub slots: usize,
}

impl LevelLayout {
    pub fn of(bounds: &Bounds, cell_size: f64, table_size: usize) -> Result<Self> {
        let extent = bounds.extent();
        let mut dims = [0u32; 3];
        let mut count: u128 = 1;
        for a in 0..3 {
            // tolerate extents that are exact multiples up to rounding
            let cells = ((extent[a] / cell_size) - 1e-9).ceil().max(1.0);
            if cells >= u32::MAX as f64 {
                return Err(Error::InvalidConfig(format!(
                    "cell size {cell_size} too small for bounds"
                )));
            }
            dims[a] = cells as u32 + 1;
            count *= dims[a] as u128;
        }
        let (mode, slots) = if count <= table_size as u128 {
            (StorageMode::Dense, count as usize)
        } else {
            (StorageMode::Hashed, table_size)
        };
        Ok(LevelLayout { dims, mode, slots })
    }
}

impl GridConfig {
    /// Per-level layouts, coarse to fine.
    pub fn layouts(&self) -> Result<Vec<LevelLayout>> {
        self.validate()?;
        self.levels
            .iter()
            .map(|&cell| LevelLayout::of(&self.bounds, cell, self.table_size))
            .collect()
    }
}

impl GridLevel {
    fn new(bounds: &Bounds, cell_size: f64, feature_dim: usize, table_size: usize) -> Result<Self> {
        let LevelLayout { dims, mode, slots } = LevelLayout::of(bounds, cell_size, table_size)?;
        Ok(GridLevel {
            cell_size,
            dims,
            mode,
            slots,
            feature_dim,
            features: vec![0.0; slots * feature_dim],
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Vertex counts per axis.
    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    /// Full vertex count of the lattice, regardless of storage mode.
    pub fn vertex_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn vertex_slot(&self, coord: [u32; 3]) -> Result<usize> {
        if (0..3).any(|a| coord[a] >= self.dims[a]) {
            return Err(Error::VertexOutOfRange { coord, dims: self.dims });
        }
        Ok(self.slot_unchecked(coord))
    }

    #[inline]
    fn slot_unchecked(&self, coord: [u32; 3]) -> usize {
        match self.mode {
            StorageMode::Dense => {
                let [nx, ny, _] = self.dims;
                coord[0] as usize + nx as usize * (coord[1] as usize + ny as usize * coord[2] as usize)
            }
            StorageMode::Hashed => {
                let h = coord[0].wrapping_mul(HASH_PRIMES[0])
                    ^ coord[1].wrapping_mul(HASH_PRIMES[1])
                    ^ coord[2].wrapping_mul(HASH_PRIMES[2]);
                (h as u64 % self.slots as u64) as usize
            }
        }
    }

    pub fn slot_feature(&self, slot: usize) -> &[f64] {
        let c = self.feature_dim;
        &self.features[slot * c..(slot + 1) * c]
    }

    fn slot_feature_mut(&mut self, slot: usize) -> &mut [f64] {
        let c = self.feature_dim;
        &mut self.features[slot * c..(slot + 1) * c]
    }

    /// Base cell and fractional offsets of `x`; max faces clamp into the last cell.
    fn locate(&self, bounds: &Bounds, x: &[f64; 3]) -> Result<([u32; 3], [f64; 3])> {
        if !bounds.contains(x) {
            return Err(Error::OutOfBounds { point: *x });
        }
        let mut base = [0u32; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (x[a] - bounds.min[a]) / self.cell_size;
            let last_cell = (self.dims[a] - 2) as f64;
            let i = u.floor().clamp(0.0, last_cell);
            base[a] = i as u32;
            frac[a] = (u - i).clamp(0.0, 1.0);
        }
        Ok((base, frac))
    }
}

/// The eight lattice vertices around a point with their trilinear weights.
///
/// Corner `i` is offset by `(i & 1, (i >> 1) & 1, (i >> 2) & 1)` from the base vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexStencil {
    pub vertices: [[u32; 3]; 8],
    pub weights: [f64; 8],
}

/// Storage-slot form of [`VertexStencil`], as consumed by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stencil {
    pub slots: [usize; 8],
    pub weights: [f64; 8],
}

#[inline]
fn corner_weights(frac: &[f64; 3]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (i, wi) in w.iter_mut().enumerate() {
        let mut p = 1.0;
        for (a, &t) in frac.iter().enumerate() {
            p *= if (i >> a) & 1 == 1 { t } else { 1.0 - t };
        }
        *wi = p;
    }
    w
}

#[inline]
fn corner(base: [u32; 3], i: usize) -> [u32; 3] {
    [
        base[0] + (i & 1) as u32,
        base[1] + ((i >> 1) & 1) as u32,
        base[2] + ((i >> 2) & 1) as u32,
    ]
}

/// Scene-specific latent parameters plus the exact finest-level occupancy set.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    config: GridConfig,
    levels: Vec<GridLevel>,
    occupancy: BTreeSet<[u32; 3]>,
}

impl LatentGrid {
    /// Grid with features drawn uniformly from `[-1e-4, 1e-4]` using `config.seed`.
    pub fn new(config: GridConfig) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(grid.config.seed);
        for level in &mut grid.levels {
            for f in &mut level.features {
                *f = rng.random_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        Ok(grid)
    }

    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let levels = config
            .levels
            .iter()
            .map(|&cell| GridLevel::new(&config.bounds, cell, config.feature_dim, config.table_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentGrid {
            config,
            levels,
            occupancy: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn bounds(&self) -> &Bounds {
        &self.config.bounds
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn encoded_dim(&self) -> usize {
        self.config.encoded_dim()
    }

    pub fn level(&self, level: usize) -> &GridLevel {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [GridLevel] {
        &mut self.levels
    }

    /// Feature tensors of every level, coarse to fine.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.levels.iter_mut().map(|l| l.features.as_mut_slice()).collect()
    }

    fn check_level(&self, level: usize) -> Result<&GridLevel> {
        self.levels
            .get(level)
            .ok_or_else(|| Error::InvalidConfig(format!("level {level} out of range (grid has {})", self.levels.len())))
    }

    pub fn interpolation_weights(&self, level: usize, x: &[f64; 3]) -> Result<VertexStencil> {
        let lvl = self.check_level(level)?;
        let (base, frac) = lvl.locate(&self.config.bounds, x)?;
        let weights = corner_weights(&frac);
        let mut vertices = [[0u32; 3]; 8];
        for (i, v) in vertices.iter_mut().enumerate() {
            *v = corner(base, i);
        }
        Ok(VertexStencil { vertices, weights })
    }

    pub fn stencil(&self, level: usize, x: &[f64; 3]) -> Result<Stencil> {
        let lvl = self.check_level(level)?;
        let (base, frac) = lvl.locate(&self.config.bounds, x)?;
        let mut slots = [0usize; 8];
        for (i, s) in slots.iter_mut().enumerate() {
            *s = lvl.slot_unchecked(corner(base, i));
        }
        Ok(Stencil {
            slots,
            weights: corner_weights(&frac),
        })
    }

    pub fn vertex_slot(&self, level: usize, coord: [u32; 3]) -> Result<usize> {
        self.check_level(level)?.vertex_slot(coord)
    }

    pub fn vertex_feature(&self, level: usize, coord: [u32; 3]) -> Result<&[f64]> {
        let lvl = self.check_level(level)?;
        let slot = lvl.vertex_slot(coord)?;
        Ok(lvl.slot_feature(slot))
    }

    pub fn set_vertex_feature(&mut self, level: usize, coord: [u32; 3], value: &[f64]) -> Result<()> {
        let c = self.config.feature_dim;
        if value.len() != c {
            return Err(Error::DimensionMismatch {
                what: "vertex feature",
                expected: c,
                got: value.len(),
            });
        }
        let slot = self.vertex_slot(level, coord)?;
        self.levels[level].slot_feature_mut(slot).copy_from_slice(value);
        Ok(())
    }

    /// World position of an integer vertex coordinate at `level`.
    pub fn vertex_position(&self, level: usize, coord: [u32; 3]) -> [f64; 3] {
        let cell = self.levels[level].cell_size;
        let min = self.config.bounds.min;
        [
            min[0] + coord[0] as f64 * cell,
            min[1] + coord[1] as f64 * cell,
            min[2] + coord[2] as f64 * cell,
        ]
    }

    #[inline]
    fn accumulate_stencil(lvl: &GridLevel, stencil: &Stencil, out: &mut [f64]) {
        out.fill(0.0);
        for (&slot, &w) in stencil.slots.iter().zip(&stencil.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, f) in out.iter_mut().zip(lvl.slot_feature(slot)) {
                *o += w * f;
            }
        }
    }

    pub fn level_feature(&self, level: usize, x: &[f64; 3]) -> Result<Vec<f64>> {
        let stencil = self.stencil(level, x)?;
        let mut out = vec![0.0; self.config.feature_dim];
        Self::accumulate_stencil(&self.levels[level], &stencil, &mut out);
        Ok(out)
    }

    pub fn encode(&self, x: &[f64; 3]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.encoded_dim()];
        let mut trace = vec![Stencil::default(); self.levels.len()];
        self.encode_into(x, &mut out, &mut trace)?;
        Ok(out)
    }

    /// Writes the concatenated encoding into `out` and the per-level stencils into `trace`.
    pub fn encode_into(&self, x: &[f64; 3], out: &mut [f64], trace: &mut [Stencil]) -> Result<()> {
        let c = self.config.feature_dim;
        debug_assert_eq!(out.len(), self.encoded_dim());
        debug_assert_eq!(trace.len(), self.levels.len());
        for (l, lvl) in self.levels.iter().enumerate() {
            let (base, frac) = lvl.locate(&self.config.bounds, x)?;
            let st = &mut trace[l];
            for (i, s) in st.slots.iter_mut().enumerate() {
                *s = lvl.slot_unchecked(corner(base, i));
            }
            st.weights = corner_weights(&frac);
            Self::accumulate_stencil(lvl, st, &mut out[l * c..(l + 1) * c]);
        }
        Ok(())
    }

    /// Marks the eight finest-level vertices of the cell containing `x` as occupied.
    pub fn mark_occupied(&mut self, x: &[f64; 3]) -> Result<()> {
        let finest = self.levels.last().expect("validated: at least one level");
        let (base, _) = finest.locate(&self.config.bounds, x)?;
        for i in 0..8 {
            self.occupancy.insert(corner(base, i));
        }
        Ok(())
    }

    /// Same as [`LatentGrid::mark_occupied`] for many points; each distinct
    /// cell is inserted once.
    pub fn mark_occupied_all<'a>(&mut self, xs: impl IntoIterator<Item = &'a [f64; 3]>) -> Result<()> {
        let finest = self.levels.last().expect("validated: at least one level");
        let mut bases = xs
            .into_iter()
            .map(|x| finest.locate(&self.config.bounds, x).map(|(b, _)| b))
            .collect::<Result<Vec<_>>>()?;
        bases.sort_unstable();
        bases.dedup();
        for base in bases {
            for i in 0..8 {
                self.occupancy.insert(corner(base, i));
            }
        }
        Ok(())
    }

    /// Inserts a raw finest-level coordinate (used when loading maps).
    pub fn insert_occupied(&mut self, coord: [u32; 3]) -> Result<()> {
        let finest = self.levels.last().expect("validated: at least one level");
        finest.vertex_slot(coord)?;
        self.occupancy.insert(coord);
        Ok(())
    }

    pub fn occupancy(&self) -> &BTreeSet<[u32; 3]> {
        &self.occupancy
    }

    pub fn is_occupied(&self, coord: [u32; 3]) -> bool {
        self.occupancy.contains(&coord)
    }

    /// Occupied finest vertices as `(coord, world position)`, sorted by coordinate.
    pub fn occupied_vertices(&self) -> Vec<([u32; 3], [f64; 3])> {
        let finest = self.levels.len() - 1;
        self.occupancy
            .iter()
            .map(|&c| (c, self.vertex_position(finest, c)))
            .collect()
    }
}

/// Gradient accumulator with the same layout as the grid's feature tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    feature_dim: usize,
    levels: Vec<Vec<f64>>,
}

impl GridGradient {
    pub fn zeros_like(grid: &LatentGrid) -> Self {
        GridGradient {
            feature_dim: grid.feature_dim(),
            levels: grid.levels.iter().map(|l| vec![0.0; l.features.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.levels {
            l.fill(0.0);
        }
    }

    /// Adds `weight * upstream` into each stencil slot; colliding slots superpose.
    #[inline]
    pub fn accumulate(&mut self, level: usize, stencil: &Stencil, upstream: &[f64]) {
        let c = self.feature_dim;
        let g = &mut self.levels[level];
        for (&slot, &w) in stencil.slots.iter().zip(&stencil.weights) {
            if w == 0.0 {
                continue;
            }
            for (gi, u) in g[slot * c..(slot + 1) * c].iter_mut().zip(upstream) {
                *gi += w * u;
            }
        }
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.levels.iter().map(|l| l.as_slice()).collect()
    }
}
