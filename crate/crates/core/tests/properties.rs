use latmap_core::decoder::BatchCache;
use latmap_core::ingest::{back_project, filter_dynamic, forward_project, DepthImage, DynamicMask, EmbeddingGrid};
use latmap_core::store::Precision;
use latmap_core::token::{aggregate, DecodedVertex};
use latmap_core::trainer::cosine_loss;
use latmap_core::*;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

fn rotation(axis: [f64; 3]) -> [[f64; 3]; 3] {
    let r = Rotation3::from_scaled_axis(Vector3::from(axis));
    std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))
}

#[derive(Debug, Clone)]
struct FrameSpec {
    rows: usize,
    cols: usize,
    stride: u32,
    k: usize,
    axis: [f64; 3],
    t: [f64; 3],
    f: (f64, f64),
    depths: Vec<f64>,
    mask: Vec<bool>,
}

fn frame_spec(depth: impl Strategy<Value = f64> + Clone) -> impl Strategy<Value = FrameSpec> {
    (1usize..6, 1usize..6, 1u32..5, 2usize..5).prop_flat_map(move |(rows, cols, stride, k)| {
        let n = rows * cols;
        (
            [-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64],
            [-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64],
            (20.0..600.0f64, 20.0..600.0f64),
            prop::collection::vec(depth.clone(), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(axis, t, f, depths, mask)| FrameSpec {
                rows,
                cols,
                stride,
                k,
                axis,
                t,
                f,
                depths,
                mask,
            })
    })
}

fn build_frame(s: &FrameSpec, with_mask: bool) -> CameraFrame {
    let st = s.stride as usize;
    let (h, w) = (s.rows * st, s.cols * st);
    let intrinsics = CameraIntrinsics {
        fx: s.f.0,
        fy: s.f.1,
        cx: 0.5 * (w as f64 - 1.0),
        cy: 0.5 * (h as f64 - 1.0),
        patch_stride: s.stride,
    };
    let mut depth = vec![1.0; h * w];
    for r in 0..s.rows {
        for c in 0..s.cols {
            let (pr, pc) = (intrinsics.patch_pixel(r), intrinsics.patch_pixel(c));
            depth[pr * w + pc] = s.depths[r * s.cols + c];
        }
    }
    let emb = (0..s.rows * s.cols * s.k).map(|i| 1.0 + (i % 7) as f64).collect();
    CameraFrame {
        depth: DepthImage::new(h, w, depth).unwrap(),
        embeddings: EmbeddingGrid::new(s.rows, s.cols, s.k, emb).unwrap(),
        pose: CameraPose {
            rotation: rotation(s.axis),
            translation: s.t,
        },
        intrinsics,
        dynamic_mask: with_mask
            .then(|| DynamicMask::new(s.rows, s.cols, s.mask.iter().map(|&m| m as u8).collect()).unwrap()),
    }
}

fn depth_with_invalid() -> impl Strategy<Value = f64> + Clone {
    prop_oneof![
        4 => 0.05..20.0f64,
        1 => Just(0.0),
        1 => -5.0..0.0f64,
        1 => Just(f64::NAN),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_round_trip(spec in frame_spec(0.05..20.0f64)) {
        let frame = build_frame(&spec, false);
        let (batch, _) = back_project(&frame, "f").unwrap();
        prop_assert_eq!(batch.len(), spec.rows * spec.cols);
        for s in &batch.samples {
            let (uv, z) = forward_project(&s.x, &frame.pose, &frame.intrinsics).unwrap();
            let (r, c) = (s.patch.0 as usize, s.patch.1 as usize);
            let center = frame.intrinsics.patch_center(r, c);
            prop_assert!((uv[0] - center[0]).abs() < 1e-9 && (uv[1] - center[1]).abs() < 1e-9);
            prop_assert!((z - spec.depths[r * spec.cols + c]).abs() < 1e-9);
            let norm = s.y.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn sample_count_is_valid_minus_masked(spec in frame_spec(depth_with_invalid())) {
        let frame = build_frame(&spec, true);
        let (batch, stats) = back_project(&frame, "f").unwrap();
        let expected = spec
            .depths
            .iter()
            .zip(&spec.mask)
            .filter(|(d, m)| d.is_finite() && **d > 0.0 && !**m)
            .count();
        prop_assert_eq!(batch.len(), expected);
        prop_assert_eq!(stats.emitted, expected);
        prop_assert_eq!(stats.emitted + stats.masked + stats.invalid_depth, spec.rows * spec.cols);
    }

    #[test]
    fn dynamic_filter_keeps_survivor_order(spec in frame_spec(0.05..20.0f64)) {
        let frame = build_frame(&spec, false);
        let (batch, _) = back_project(&frame, "f").unwrap();
        let mask = DynamicMask::new(spec.rows, spec.cols, spec.mask.iter().map(|&m| m as u8).collect()).unwrap();
        let kept = filter_dynamic(&batch, &mask).unwrap();
        let expected: Vec<_> = batch
            .samples
            .iter()
            .filter(|s| !spec.mask[s.patch.0 as usize * spec.cols + s.patch.1 as usize])
            .cloned()
            .collect();
        prop_assert_eq!(kept.samples, expected);
    }
}

fn small_grid(table_size: usize, seed: u64) -> LatentGrid {
    LatentGrid::new(GridConfig {
        bounds: Bounds::new([-0.5, 0.0, 0.2], [0.7, 0.9, 0.8]).unwrap(),
        levels: vec![0.3, 0.13],
        feature_dim: 3,
        table_size,
        seed,
    })
    .unwrap()
}

fn unit_point() -> impl Strategy<Value = [f64; 3]> {
    [0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64]
}

fn in_bounds(b: &Bounds, u: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (b.min[a] + u[a] * (b.max[a] - b.min[a])).min(b.max[a]))
}

/// Trilinear blend of one cell's corner features at fractional position `frac`.
fn blend(grid: &LatentGrid, level: usize, base: [u32; 3], frac: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; grid.feature_dim()];
    for i in 0..8 {
        let off = [i & 1, (i >> 1) & 1, (i >> 2) & 1];
        let w: f64 = (0..3)
            .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
            .product();
        let v: [u32; 3] = std::array::from_fn(|a| base[a] + off[a] as u32);
        for (o, f) in out.iter_mut().zip(grid.vertex_feature(level, v).unwrap()) {
            *o += w * f;
        }
    }
    out
}

proptest! {
    #[test]
    fn weights_partition_unity(u in unit_point(), hashed in any::<bool>(), seed in 0u64..50) {
        let grid = small_grid(if hashed { 16 } else { 1 << 16 }, seed);
        let x = in_bounds(grid.bounds(), &u);
        for level in 0..grid.num_levels() {
            let s = grid.interpolation_weights(level, &x).unwrap();
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        }
        prop_assert_eq!(grid.encode(&x).unwrap().len(), grid.encoded_dim());
    }

    #[test]
    fn linear_fields_are_reproduced(
        u in unit_point(),
        a in prop::array::uniform3(-3.0..3.0f64),
        b in -2.0..2.0f64,
    ) {
        let mut grid = small_grid(1 << 16, 0);
        for level in 0..grid.num_levels() {
            let [nx, ny, nz] = grid.level(level).dims();
            for z in 0..nz {
                for y in 0..ny {
                    for xi in 0..nx {
                        let p = grid.vertex_position(level, [xi, y, z]);
                        let v = a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + b;
                        grid.set_vertex_feature(level, [xi, y, z], &[v, 2.0 * v, -v]).unwrap();
                    }
                }
            }
        }
        let x = in_bounds(grid.bounds(), &u);
        let want = a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + b;
        for level in 0..grid.num_levels() {
            let f = grid.level_feature(level, &x).unwrap();
            prop_assert!((f[0] - want).abs() <= 1e-10);
            prop_assert!((f[1] - 2.0 * want).abs() <= 1e-10);
            prop_assert!((f[2] + want).abs() <= 1e-10);
        }
    }

    #[test]
    fn features_are_continuous_across_faces(
        level in 0usize..2,
        axis in 0usize..3,
        cell in prop::array::uniform3(0.0..1.0f64),
        frac in prop::array::uniform3(0.0..1.0f64),
        hashed in any::<bool>(),
    ) {
        let grid = small_grid(if hashed { 16 } else { 1 << 16 }, 3);
        let b = grid.bounds();
        let cs = grid.level(level).cell_size();
        let cells = grid.level(level).dims().map(|d| d - 1);
        // the shared face needs a cell on both sides
        prop_assume!(cells[axis] >= 2);
        let mut left: [u32; 3] = std::array::from_fn(|a| (cell[a] * cells[a] as f64) as u32 % cells[a]);
        left[axis] = left[axis].min(cells[axis] - 2);
        let mut right = left;
        right[axis] += 1;
        let mut lf = frac;
        lf[axis] = 1.0;
        let mut rf = frac;
        rf[axis] = 0.0;
        let from_left = blend(&grid, level, left, lf);
        let from_right = blend(&grid, level, right, rf);
        for (l, r) in from_left.iter().zip(&from_right) {
            prop_assert!((l - r).abs() <= 1e-10);
        }
        let origin = grid.vertex_position(level, right);
        let x: [f64; 3] = std::array::from_fn(|a| if a == axis { origin[a] } else { origin[a] + frac[a] * cs });
        prop_assume!(b.contains(&x));
        for (g, r) in grid.level_feature(level, &x).unwrap().iter().zip(&from_right) {
            prop_assert!((g - r).abs() <= 1e-10);
        }
    }
}

fn mlp_case() -> impl Strategy<Value = (Mlp, usize, Vec<f64>, Vec<f64>)> {
    (
        any::<u64>(),
        prop::collection::vec(1usize..12, 0..3),
        1usize..10,
        1usize..8,
        1usize..40,
    )
        .prop_flat_map(|(seed, hidden, din, dout, n)| {
            (
                Just(seed),
                Just(hidden),
                Just(din),
                Just(dout),
                Just(n),
                prop::collection::vec(-2.0..2.0f64, n * din),
                prop::collection::vec(-1.0..1.0f64, n * dout),
            )
        })
        .prop_map(|(seed, hidden, din, dout, n, x, up)| {
            let mut mlp = Mlp::init(seed, &hidden, din, dout).unwrap();
            for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
                for (j, b) in layer.bias_mut().iter_mut().enumerate() {
                    *b = ((i * 31 + j * 7) as f64).sin() * 0.3;
                }
            }
            (mlp, n, x, up)
        })
}

proptest! {
    #[test]
    fn batched_decoder_matches_per_sample_oracle((mlp, n, x, up) in mlp_case()) {
        let (din, dout) = (mlp.in_dim(), mlp.out_dim());
        let mut cache = BatchCache::default();
        let out = mlp.forward_batch(&x, &mut cache).unwrap().to_vec();
        let mut grads = MlpGradients::zeros_like(&mlp);
        let mut d_in = Vec::new();
        mlp.backward_batch(&mut cache, &up, Some(&mut grads), &mut d_in).unwrap();

        let mut want = MlpGradients::zeros_like(&mlp);
        for i in 0..n {
            let fc = mlp.forward(&x[i * din..(i + 1) * din]).unwrap();
            for (a, b) in fc.output().iter().zip(&out[i * dout..(i + 1) * dout]) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            let (g, di) = mlp.backward(&fc, &up[i * dout..(i + 1) * dout]).unwrap();
            for (a, b) in di.iter().zip(&d_in[i * din..(i + 1) * din]) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            want.add_assign(&g);
        }
        for (a, b) in want.slices().iter().zip(grads.slices()) {
            for (p, q) in a.iter().zip(b) {
                prop_assert!((p - q).abs() <= 1e-10 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn cosine_loss_ignores_scale(
        pred in prop::collection::vec(-1.0..1.0f64, 8),
        target in prop::collection::vec(-1.0..1.0f64, 8),
        alpha in 1e-3..1e3f64,
    ) {
        prop_assume!(pred.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        prop_assume!(target.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let scaled: Vec<f64> = pred.iter().map(|v| v * alpha).collect();
        prop_assert!((cosine_loss(&scaled, &target).0 - cosine_loss(&pred, &target).0).abs() <= 1e-9);
    }
}

fn points() -> impl Strategy<Value = Vec<DecodedVertex>> {
    prop::collection::vec((unit_point(), prop::collection::vec(-2.0..2.0f64, 3)), 1..30).prop_map(|v| {
        v.into_iter()
            .map(|(position, feature)| DecodedVertex { position, feature })
            .collect()
    })
}

proptest! {
    #[test]
    fn token_ignores_order_and_duplicates(
        pts in points(),
        order in any::<prop::sample::Index>(),
        dups in prop::collection::vec(any::<prop::sample::Index>(), 0..20),
        seed in any::<u64>(),
    ) {
        let bounds = Bounds::new([0.0; 3], [1.0; 3]).unwrap();
        let w = AggregatorWeights::init(seed, 3, PosEncConfig { num_frequencies: 2 }, &[16, 8], 6).unwrap();
        let base = aggregate(&pts, &w, &bounds).unwrap();
        let mut rotated = pts.clone();
        rotated.rotate_left(order.index(pts.len()));
        rotated.reverse();
        prop_assert_eq!(&aggregate(&rotated, &w, &bounds).unwrap(), &base);
        let mut more = pts.clone();
        more.extend(dups.iter().map(|d| pts[d.index(pts.len())].clone()));
        prop_assert_eq!(&aggregate(&more, &w, &bounds).unwrap(), &base);
        // pooling can only keep or raise each coordinate when a point is added
        let fewer = aggregate(&pts[..pts.len().div_ceil(2)], &w, &bounds).unwrap();
        prop_assert!(fewer.iter().zip(&base).all(|(a, b)| a <= b));
    }
}

fn random_map(seed: u64, occupied: &[[f64; 3]]) -> LatentMap {
    let mut grid = small_grid(if seed.is_multiple_of(2) { 16 } else { 1 << 16 }, seed);
    let b = *grid.bounds();
    for u in occupied {
        grid.mark_occupied(&in_bounds(&b, u)).unwrap();
    }
    let decoder = Mlp::init(seed, &[5], grid.encoded_dim(), 4).unwrap();
    LatentMap::new(grid, decoder).unwrap()
}

proptest! {
    #[test]
    fn corrupt_map_bytes_are_rejected(
        seed in 0u64..1000,
        occupied in prop::collection::vec(unit_point(), 0..6),
        cut in any::<prop::sample::Index>(),
        bit in any::<prop::sample::Index>(),
        wide in any::<bool>(),
    ) {
        let map = random_map(seed, &occupied);
        let bytes = map.to_bytes(if wide { Precision::F64 } else { Precision::F32 });
        let back = LatentMap::from_bytes(&bytes).unwrap();
        if wide {
            prop_assert_eq!(&back, &map);
        }
        prop_assert_eq!(back.grid.occupancy(), map.grid.occupancy());
        prop_assert!(LatentMap::from_bytes(&bytes[..cut.index(bytes.len())]).is_err());
        let mut flipped = bytes.clone();
        let i = bit.index(bytes.len() * 8);
        flipped[i / 8] ^= 1 << (i % 8);
        prop_assert!(LatentMap::from_bytes(&flipped).is_err());
    }
}
