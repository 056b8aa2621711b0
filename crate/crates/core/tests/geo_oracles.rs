//! Randomized comparison of the clipping-based aggregation against an
//! independent rasterization oracle (point-in-polygon subsampling), plus
//! the aggregation invariants on random instances.

use std::collections::BTreeMap;

use gcgvt_core::geo::{
    aggregate, point_in_ring, GeoCategory, GeoLayerSet, GeoPolygon, PatchGrid, PatchGeoMatrix,
    GEO_FORMAT_VERSION,
};
use gcgvt_core::synth::random_convex_polygon;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Evaluates the area-weighted average by subsampling each patch on a
/// `sub x sub` grid of cell centers — no clipping, no shoelace.
fn rasterization_oracle(layers: &GeoLayerSet, grid: &PatchGrid, sub: usize) -> PatchGeoMatrix {
    let n = grid.n_patches();
    let mut out = PatchGeoMatrix::zeros(
        grid.rows,
        grid.cols,
        &layers
            .categories
            .iter()
            .map(|c| (c.name.clone(), c.variables.clone()))
            .collect::<Vec<_>>(),
    );
    for (ci, cat) in layers.categories.iter().enumerate() {
        let nv = cat.variables.len();
        for p in 0..n {
            let rect = grid.rect(p / grid.cols, p % grid.cols);
            let mut weighted = vec![0.0; nv];
            let mut hits = 0usize;
            for poly in &cat.polygons {
                let mut count = 0usize;
                for sy in 0..sub {
                    let y = rect.y0 + (sy as f64 + 0.5) / sub as f64 * (rect.y1 - rect.y0);
                    for sx in 0..sub {
                        let x = rect.x0 + (sx as f64 + 0.5) / sub as f64 * (rect.x1 - rect.x0);
                        if point_in_ring([x, y], &poly.ring) {
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    hits += count;
                    for (w, var) in weighted.iter_mut().zip(&cat.variables) {
                        *w += count as f64 * poly.values[var];
                    }
                }
            }
            if hits > 0 {
                for v in 0..nv {
                    out.categories[ci].values[p * nv + v] = weighted[v] / hits as f64;
                }
            }
        }
    }
    out
}

fn random_instance(seed: u64) -> (GeoLayerSet, PatchGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch: usize = [8, 12, 16][rng.gen_range(0..3)];
    let tiles: usize = rng.gen_range(2..5);
    let extent = (patch * tiles) as f64;
    let n_polys = rng.gen_range(1..5);
    let polygons = (0..n_polys)
        .map(|_| {
            let center = [rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)];
            let radius = rng.gen_range(extent * 0.15..extent * 0.45);
            let n_pts = rng.gen_range(5..10);
            let mut values = BTreeMap::new();
            values.insert("v0".to_string(), rng.gen_range(0.0..100.0));
            values.insert("v1".to_string(), rng.gen_range(0.0..100.0));
            GeoPolygon { ring: random_convex_polygon(&mut rng, center, radius, n_pts), values }
        })
        .collect();
    let mut layers = GeoLayerSet {
        format_version: GEO_FORMAT_VERSION,
        image_extent: [extent, extent],
        categories: vec![GeoCategory {
            name: "cat".into(),
            variables: vec!["v0".into(), "v1".into()],
            polygons,
        }],
    };
    layers.validate().expect("generated layers are valid");
    let grid = PatchGrid::square(extent as usize, extent as usize, patch).unwrap();
    (layers, grid)
}

#[test]
fn aggregate_matches_rasterization_oracle_on_random_instances() {
    for seed in 0..6u64 {
        let (layers, grid) = random_instance(seed);
        let exact = aggregate(&layers, &grid).unwrap();
        let approx = rasterization_oracle(&layers, &grid, 256);
        for (ce, ca) in exact.categories.iter().zip(&approx.categories) {
            for (i, (e, a)) in ce.values.iter().zip(&ca.values).enumerate() {
                assert!(
                    (e - a).abs() < 0.05,
                    "seed {seed}, value {i}: exact {e} vs oracle {a}"
                );
            }
        }
    }
}

#[test]
fn aggregate_order_and_rescale_invariance_on_random_instances() {
    for seed in 20..26u64 {
        let (mut layers, grid) = random_instance(seed);
        let base = aggregate(&layers, &grid).unwrap();

        layers.categories[0].polygons.reverse();
        let reversed = aggregate(&layers, &grid).unwrap();
        for (a, b) in base.categories[0].values.iter().zip(&reversed.categories[0].values) {
            assert!((a - b).abs() < 1e-12, "order invariance violated");
        }

        // Common rescale of all coordinates (areas scale by 9) with the
        // grid scaled along leaves f unchanged.
        let mut scaled = layers.clone();
        scaled.image_extent = [layers.image_extent[0] * 3.0, layers.image_extent[1] * 3.0];
        for poly in &mut scaled.categories[0].polygons {
            for v in &mut poly.ring {
                v[0] *= 3.0;
                v[1] *= 3.0;
            }
        }
        let grid3 = PatchGrid::square(
            scaled.image_extent[0] as usize,
            scaled.image_extent[1] as usize,
            grid.patch_w * 3,
        )
        .unwrap();
        let rescaled = aggregate(&scaled, &grid3).unwrap();
        for (a, b) in base.categories[0].values.iter().zip(&rescaled.categories[0].values) {
            assert!((a - b).abs() < 1e-9, "rescale invariance violated: {a} vs {b}");
        }
    }
}

#[test]
fn coverage_stays_in_unit_interval_and_convex_combination_bounds_hold() {
    for seed in 40..46u64 {
        let (layers, grid) = random_instance(seed);
        let m = aggregate(&layers, &grid).unwrap();
        for &c in &m.coverage {
            assert!((0.0..=1.0).contains(&c));
        }
        // Every aggregated value lies within the min/max of contributing
        // polygon values (convex combination); zero-coverage patches are 0.
        let cat = &layers.categories[0];
        let lo = cat
            .polygons
            .iter()
            .map(|p| p.values["v0"])
            .fold(f64::INFINITY, f64::min);
        let hi = cat
            .polygons
            .iter()
            .map(|p| p.values["v0"])
            .fold(f64::NEG_INFINITY, f64::max);
        let nv = cat.variables.len();
        for p in 0..m.n_patches() {
            let v = m.categories[0].values[p * nv];
            if m.coverage[p] == 0.0 {
                assert_eq!(v, 0.0);
            } else if v != 0.0 {
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "value {v} outside [{lo}, {hi}]");
            }
        }
    }
}
