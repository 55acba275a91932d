//! PCA-colored point cloud export of decoded occupied vertices.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_atomic, LatentMap};
use crate::error::{Error, Result};
use crate::token::decode_occupied;

pub const POWER_ITERATIONS: usize = 100;

/// Leading `n` principal directions of the rows of `data` (each `dim` wide).
///
/// Power iteration with deflation on the covariance matrix; each direction is
/// signed so its largest-magnitude entry is positive. Directions of a
/// zero-variance subspace come back as zero vectors.
pub fn principal_components(data: &[Vec<f64>], dim: usize, n: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let count = data.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / count;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for row in data {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (row[j] - mean[j]) / count;
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let w: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| cov[i * dim + j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 * trace.max(f64::MIN_POSITIVE) {
                v.fill(0.0);
                lambda = 0.0;
                break;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        if let Some(big) = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
        comps.push(v);
    }
    (mean, comps)
}

/// Min-max scales `values` to `0..=255`; a constant column maps to 128.
fn to_channel(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| {
            if range <= 1e-9 {
                128
            } else {
                ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// `(position, rgb)` for every occupied vertex.
pub fn pca_colors(map: &LatentMap, seed: u64) -> Result<Vec<([f64; 3], [u8; 3])>> {
    let points = decode_occupied(&map.grid, &map.decoder)?;
    if points.is_empty() {
        return Err(Error::EmptyMap);
    }
    let feats: Vec<Vec<f64>> = points.iter().map(|p| p.feature.clone()).collect();
    let (mean, comps) = principal_components(&feats, map.decoder.out_dim(), 3, seed);
    let channels: Vec<Vec<u8>> = comps
        .iter()
        .map(|c| {
            let proj: Vec<f64> = feats
                .iter()
                .map(|f| f.iter().zip(&mean).zip(c).map(|((x, m), ci)| (x - m) * ci).sum())
                .collect();
            to_channel(&proj)
        })
        .collect();
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.position, [channels[0][i], channels[1][i], channels[2][i]]))
        .collect())
}

pub fn ply_string(points: &[([f64; 3], [u8; 3])]) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for (p, c) in points {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]
        );
    }
    s
}

/// Writes the PCA-colored cloud and returns the number of points.
pub fn export_pca_ply(map: &LatentMap, path: impl AsRef<Path>, seed: u64) -> Result<usize> {
    let points = pca_colors(map, seed)?;
    write_atomic(path.as_ref(), ply_string(&points).as_bytes())?;
    Ok(points.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_the_dominant_axis() {
        let mut rows = Vec::new();
        for i in 0..50 {
            let t = i as f64 / 10.0 - 2.5;
            rows.push(vec![3.0 * t, 0.1 * (i % 3) as f64, -1.0]);
        }
        let (_, comps) = principal_components(&rows, 3, 2, 1);
        assert!((comps[0][0] - 1.0).abs() < 1e-6);
        assert!(comps[1][1].abs() > 0.99);
    }

    #[test]
    fn constant_data_is_one_color() {
        assert_eq!(to_channel(&[0.5, 0.5, 0.5]), vec![128, 128, 128]);
        let (_, comps) = principal_components(&vec![vec![1.0, 2.0]; 4], 2, 2, 0);
        assert!(comps.iter().all(|c| c.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn two_orthogonal_prototypes_split_on_the_first_component() {
        let mut rows = vec![vec![1.0, 0.0, 0.0, 0.0]; 10];
        rows.extend(vec![vec![0.0, 1.0, 0.0, 0.0]; 30]);
        let (mean, comps) = principal_components(&rows, 4, 1, 3);
        let proj = |r: &Vec<f64>| -> f64 { r.iter().zip(&mean).zip(&comps[0]).map(|((x, m), c)| (x - m) * c).sum() };
        let ch = to_channel(&rows.iter().map(proj).collect::<Vec<_>>());
        assert!(ch[..10].iter().all(|&c| c == ch[0]));
        assert!(ch[10..].iter().all(|&c| c == ch[10]));
        assert_eq!(ch[0].abs_diff(ch[10]), 255);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((comps[0][0].abs() - s).abs() < 1e-9 && (comps[0][1].abs() - s).abs() < 1e-9);
    }
}
