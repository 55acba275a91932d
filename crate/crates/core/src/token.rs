//! Global map token: decoded occupied vertices, positionally encoded, passed
//! through a shared per-point network and max-pooled.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::decoder::{BatchCache, Mlp};
use crate::error::{Error, Result};
use crate::geometry::Bounds;
use crate::grid::LatentGrid;

/// Points per batched pass of the shared network.
const POOL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosEncConfig {
    pub num_frequencies: usize,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        PosEncConfig { num_frequencies: 6 }
    }
}

impl PosEncConfig {
    pub fn output_dim(&self) -> usize {
        6 * self.num_frequencies
    }
}

/// Decoded feature at one occupied finest-level vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedVertex {
    pub position: [f64; 3],
    pub feature: Vec<f64>,
}

/// Decodes every occupied finest vertex, in sorted coordinate order.
pub fn decode_occupied(grid: &LatentGrid, decoder: &Mlp) -> Result<Vec<DecodedVertex>> {
    grid.occupied_vertices()
        .into_iter()
        .map(|(_, position)| {
            // the last vertex row sits past the max face when the extent is
            // not a multiple of the cell size
            Ok(DecodedVertex {
                position,
                feature: decoder.decode(&grid.encode(&grid.bounds().clamp(&position))?)?,
            })
        })
        .collect()
}

/// `[sin(2^b π u), cos(2^b π u)]` for each axis `u` of the normalized point, axis-major.
pub fn positional_encode(z: &[f64; 3], bounds: &Bounds, cfg: &PosEncConfig) -> Result<Vec<f64>> {
    let u = bounds.normalize(z)?;
    let mut out = Vec::with_capacity(cfg.output_dim());
    for ua in u {
        let mut freq = PI;
        for _ in 0..cfg.num_frequencies {
            out.push((freq * ua).sin());
            out.push((freq * ua).cos());
            freq *= 2.0;
        }
    }
    Ok(out)
}

/// Shared per-point network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights {
    pub posenc: PosEncConfig,
    pub seed: u64,
    pub mlp: Mlp,
}

impl AggregatorWeights {
    pub const DEFAULT_HIDDEN: [usize; 2] = [128, 256];
    pub const DEFAULT_TOKEN_DIM: usize = 256;

    /// Seeded random weights for `feature_dim`-wide decoded features.
    pub fn init(
        seed: u64,
        feature_dim: usize,
        posenc: PosEncConfig,
        hidden: &[usize],
        token_dim: usize,
    ) -> Result<Self> {
        if posenc.num_frequencies == 0 {
            return Err(Error::InvalidConfig("num_frequencies must be >= 1".into()));
        }
        Ok(AggregatorWeights {
            mlp: Mlp::init(seed, hidden, feature_dim + posenc.output_dim(), token_dim)?,
            posenc,
            seed,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.in_dim() - self.posenc.output_dim()
    }

    /// Network input row for one point: decoded feature then positional code.
    fn input_row(&self, v: &DecodedVertex, bounds: &Bounds, row: &mut Vec<f64>) -> Result<()> {
        if v.feature.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoded vertex feature",
                expected: self.feature_dim(),
                got: v.feature.len(),
            });
        }
        row.extend_from_slice(&v.feature);
        row.extend(positional_encode(&bounds.clamp(&v.position), bounds, &self.posenc)?);
        Ok(())
    }

    /// Network output for one point (pre-pooling).
    pub fn point_output(&self, v: &DecodedVertex, bounds: &Bounds) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(self.mlp.in_dim());
        self.input_row(v, bounds, &mut input)?;
        Ok(self.mlp.forward_batch(&input, &mut BatchCache::default())?.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapToken {
    pub values: Vec<f64>,
    pub vertex_count: usize,
    /// Fingerprint of the map the token was computed from.
    pub source_map: u64,
}

/// Max-pools the per-point network output over `points`.
pub fn aggregate(points: &[DecodedVertex], weights: &AggregatorWeights, bounds: &Bounds) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyMap);
    }
    let mut pooled = vec![f64::NEG_INFINITY; weights.token_dim()];
    let mut input = Vec::with_capacity(POOL_CHUNK * weights.mlp.in_dim());
    let mut cache = BatchCache::default();
    // rows of a batched pass do not interact, so chunking cannot change the result
    for chunk in points.chunks(POOL_CHUNK) {
        input.clear();
        for p in chunk {
            weights.input_row(p, bounds, &mut input)?;
        }
        let out = weights.mlp.forward_batch(&input, &mut cache)?;
        for row in out.chunks_exact(pooled.len()) {
            for (m, &v) in pooled.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
    }
    Ok(pooled)
}

/// Computes the token of a map; `allow_empty` yields a zero token instead of an error.
pub fn map_token(grid: &LatentGrid, decoder: &Mlp, weights: &AggregatorWeights, allow_empty: bool) -> Result<MapToken> {
    if weights.feature_dim() != decoder.out_dim() {
        return Err(Error::DimensionMismatch {
            what: "aggregator feature input",
            expected: decoder.out_dim(),
            got: weights.feature_dim(),
        });
    }
    let points = decode_occupied(grid, decoder)?;
    let source_map = crate::store::map_fingerprint(grid, decoder);
    let values = match aggregate(&points, weights, grid.bounds()) {
        Ok(v) => v,
        Err(Error::EmptyMap) if allow_empty => vec![0.0; weights.token_dim()],
        Err(e) => return Err(e),
    };
    Ok(MapToken {
        values,
        vertex_count: points.len(),
        source_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bounds() -> Bounds {
        Bounds::new([0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn posenc_examples() {
        let cfg = PosEncConfig { num_frequencies: 3 };
        let e = positional_encode(&[0.0; 3], &unit_bounds(), &cfg).unwrap();
        assert_eq!(e.len(), 18);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let e = positional_encode(&[1.0, 0.0, 0.0], &unit_bounds(), &cfg).unwrap();
        assert!(e[0].abs() < 1e-12);
        assert!((e[1] + 1.0).abs() < 1e-12);
        assert!(positional_encode(&[1.1, 0.0, 0.0], &unit_bounds(), &cfg).is_err());
    }

    #[test]
    fn posenc_axis_major_layout() {
        let cfg = PosEncConfig { num_frequencies: 2 };
        let e = positional_encode(&[0.25, 0.5, 0.0], &unit_bounds(), &cfg).unwrap();
        let expect = [
            (PI * 0.25).sin(),
            (PI * 0.25).cos(),
            (2.0 * PI * 0.25).sin(),
            (2.0 * PI * 0.25).cos(),
            (PI * 0.5).sin(),
            (PI * 0.5).cos(),
        ];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn pts(n: usize, k: usize) -> Vec<DecodedVertex> {
        (0..n)
            .map(|i| DecodedVertex {
                position: [i as f64 / n as f64, 0.5, 0.25],
                feature: (0..k).map(|j| ((i * 7 + j) as f64).sin()).collect(),
            })
            .collect()
    }

    #[test]
    fn singleton_and_empty() {
        let w = AggregatorWeights::init(1, 4, PosEncConfig::default(), &[8], 5).unwrap();
        let p = pts(1, 4);
        let token = aggregate(&p, &w, &unit_bounds()).unwrap();
        assert_eq!(token, w.point_output(&p[0], &unit_bounds()).unwrap());
        assert!(matches!(aggregate(&[], &w, &unit_bounds()), Err(Error::EmptyMap)));
    }

    #[test]
    fn adding_a_point_never_lowers_the_pool() {
        let w = AggregatorWeights::init(2, 4, PosEncConfig::default(), &[8, 8], 6).unwrap();
        let p = pts(6, 4);
        let base = aggregate(&p[..5], &w, &unit_bounds()).unwrap();
        let more = aggregate(&p, &w, &unit_bounds()).unwrap();
        assert!(base.iter().zip(&more).all(|(a, b)| b >= a));
    }
}
