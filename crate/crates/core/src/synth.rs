//! Synthetic dataset generator with planted signal.
//!
//! Each sample is a procedural scene (textured building rectangles and
//! vegetation regions over soil) plus random convex polygon layers per
//! geospatial category. Targets follow a documented generative formula,
//! so each outcome's dependence on image-visible vs geo-only information
//! is known ground truth:
//!
//! * `img_linked`  = 10 + 55 * green_fraction + noise
//! * `geo_linked`  = 5 + 0.5 * mean(income.poverty)
//!                     + 0.3 * mean(housing.crowding) + noise
//! * `area_linked` = 8 + 35 * green_fraction
//!                     + 1.3 * area_mean(environment.pollution) + noise
//!
//! `green_fraction` is the fraction of local-image pixels covered by
//! vegetation (the image statistic); `mean(...)` is the mean over the
//! local patch grid of the area-weighted aggregated variable;
//! `area_mean(...)` is the same statistic over the area grid. The
//! `environment` category has no polygons in the local layers — its
//! values exist only in the area layers (placed in the ring outside the
//! local extent), which is what makes `area_linked` require area-level
//! guidance. Noise is Gaussian with configurable sigma; targets are
//! clamped to [0, 100] and the generator warns when clamping exceeds 1%.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    bicubic_resize, CategorySchema, Image, Manifest, ManifestRecord, MANIFEST_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::geo::{
    aggregate, GeoCategory, GeoLayerSet, GeoPolygon, PatchGrid, GEO_FORMAT_VERSION,
};

pub const OUTCOME_IMG: &str = "img_linked";
pub const OUTCOME_GEO: &str = "geo_linked";
pub const OUTCOME_AREA: &str = "area_linked";

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Area extent is `area_factor * image_size`; the local scene is the
    /// center crop of the area scene.
    pub area_factor: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_samples: 500, image_size: 64, patch_size: 8, area_factor: 2, sigma: 1.0, seed: 0 }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Usage("n_samples must be positive".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Usage(format!(
                "patch size {} does not tile image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.area_factor < 2 {
            return Err(Error::Usage("area_factor must be at least 2".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Usage("sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn category_schema(&self) -> Vec<CategorySchema> {
        let vars = |names: [&str; 5]| names.iter().map(|s| (*s).to_string()).collect();
        vec![
            CategorySchema { name: "income".into(), variables: vars(["median_income", "poverty", "employment", "benefits", "high_income"]) },
            CategorySchema { name: "housing".into(), variables: vars(["owner_occupied", "renter", "vacancy", "crowding", "old_units"]) },
            CategorySchema { name: "age".into(), variables: vars(["under_18", "over_65", "median_age", "working_age", "retired"]) },
            CategorySchema { name: "environment".into(), variables: vars(["green_cover", "industrial", "impervious", "traffic", "pollution"]) },
        ]
    }

    pub fn outcome_names(&self) -> Vec<String> {
        vec![OUTCOME_IMG.into(), OUTCOME_GEO.into(), OUTCOME_AREA.into()]
    }
}

/// Ground-truth generative features of one sample.
#[derive(Debug, Clone)]
pub struct TrueFeatures {
    pub green_fraction: f64,
    pub poverty_mean: f64,
    pub crowding_mean: f64,
    pub pollution_area_mean: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub id: String,
    pub local_image: Image,
    pub area_image: Image,
    pub local_geo: GeoLayerSet,
    pub area_geo: GeoLayerSet,
    pub targets: Vec<f64>,
    pub features: TrueFeatures,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub samples: Vec<GeneratedSample>,
    /// Fraction of generated target values that hit the [0, 100] clamp.
    pub clamp_fraction: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ── Scene rendering ─────────────────────────────────────────────────────

struct Scene {
    size: usize,
    pixels: Vec<f64>,
    green_mask: Vec<bool>,
}

impl Scene {
    fn new(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            let n = rng.gen_range(-0.04..0.04);
            pixels.extend_from_slice(&[0.45 + n, 0.40 + n, 0.33 + n]);
        }
        Scene { size, pixels, green_mask: vec![false; size * size] }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [f64; 3], green: bool, rng: &mut ChaCha8Rng) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                let n = rng.gen_range(-0.03..0.03);
                let i = y * self.size + x;
                for c in 0..3 {
                    self.pixels[i * 3 + c] = (rgb[c] + n).clamp(0.0, 1.0);
                }
                self.green_mask[i] = green;
            }
        }
    }
}

fn render_area_scene(size: usize, rng: &mut ChaCha8Rng) -> Scene {
    let mut scene = Scene::new(size, rng);
    // Buildings: gray textured rectangles with a darker border row.
    let n_buildings = rng.gen_range(10..24) * size * size / (128 * 128);
    for _ in 0..n_buildings.max(4) {
        let w = rng.gen_range(6..18);
        let h = rng.gen_range(6..18);
        let x0 = rng.gen_range(0..size.saturating_sub(w).max(1));
        let y0 = rng.gen_range(0..size.saturating_sub(h).max(1));
        let shade = rng.gen_range(0.50..0.64);
        scene.fill_rect(x0, y0, w, h, [shade, shade * 0.97, shade * 0.93], false, rng);
    }
    // Vegetation drawn last so the mask is exactly the visible green area.
    let target_green: f64 = rng.gen_range(0.05..0.45);
    let total = size * size;
    let mut attempts = 0;
    while (scene.green_mask.iter().filter(|&&g| g).count() as f64) < target_green * total as f64 {
        attempts += 1;
        if attempts > 200 {
            break;
        }
        let w = rng.gen_range(8..26);
        let h = rng.gen_range(8..26);
        let x0 = rng.gen_range(0..size.saturating_sub(w).max(1));
        let y0 = rng.gen_range(0..size.saturating_sub(h).max(1));
        scene.fill_rect(x0, y0, w, h, [0.20, 0.62, 0.24], true, rng);
    }
    scene
}

fn crop_center(scene: &Scene, crop: usize) -> (Image, f64) {
    let off = (scene.size - crop) / 2;
    let mut pixels = Vec::with_capacity(crop * crop * 3);
    let mut green = 0usize;
    for y in 0..crop {
        for x in 0..crop {
            let i = (y + off) * scene.size + (x + off);
            pixels.extend_from_slice(&scene.pixels[i * 3..i * 3 + 3]);
            if scene.green_mask[i] {
                green += 1;
            }
        }
    }
    let img = Image::new(crop, crop, pixels).expect("crop buffer");
    (img, green as f64 / (crop * crop) as f64)
}

// ── Polygon layers ──────────────────────────────────────────────────────

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

// Andrew monotone-chain convex hull, counter-clockwise, no collinear
// points kept.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Random convex polygon: the hull of points sampled in a disc.
pub fn random_convex_polygon(
    rng: &mut ChaCha8Rng,
    center: [f64; 2],
    radius: f64,
    n_points: usize,
) -> Vec<[f64; 2]> {
    for _ in 0..16 {
        let pts: Vec<[f64; 2]> = (0..n_points.max(4))
            .map(|_| {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius * rng.gen_range(0.3f64..1.0).sqrt();
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect();
        let hull = convex_hull(pts);
        if hull.len() >= 3 {
            return hull;
        }
    }
    // Degenerate draws are vanishingly rare; fall back to a triangle.
    vec![
        [center[0] - radius * 0.5, center[1] - radius * 0.4],
        [center[0] + radius * 0.5, center[1] - radius * 0.4],
        [center[0], center[1] + radius * 0.5],
    ]
}

fn polygon_values(
    rng: &mut ChaCha8Rng,
    variables: &[String],
    centers: &BTreeMap<String, f64>,
    spread: f64,
) -> BTreeMap<String, f64> {
    variables
        .iter()
        .map(|v| {
            let c = centers[v];
            (v.clone(), (c + rng.gen_range(-spread..spread)).clamp(0.0, 100.0))
        })
        .collect()
}

/// Per-sample variable centers: polygon values scatter around these, so
/// the aggregated means vary widely across samples (the learnable signal).
fn sample_centers(rng: &mut ChaCha8Rng, variables: &[String]) -> BTreeMap<String, f64> {
    variables.iter().map(|v| (v.clone(), rng.gen_range(10.0..90.0))).collect()
}

fn category_polygons(
    rng: &mut ChaCha8Rng,
    variables: &[String],
    centers: &BTreeMap<String, f64>,
    extent: f64,
    ring_only: bool,
    inner: f64,
) -> Vec<GeoPolygon> {
    let n = rng.gen_range(4..8);
    (0..n)
        .map(|_| {
            // Ring placement must keep the polygon clear of the central
            // (local) region, so its radius stays below half the ring
            // width; the rejection loop then always has room to succeed.
            let radius = if ring_only {
                let max_r = (extent - inner) / 2.0 * 0.45;
                rng.gen_range(extent * 0.04..max_r)
            } else {
                rng.gen_range(extent * 0.12..extent * 0.3)
            };
            let center = if ring_only {
                let mut attempts = 0;
                loop {
                    attempts += 1;
                    if attempts > 200 {
                        break [radius, radius];
                    }
                    let c = [rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)];
                    let lo = (extent - inner) / 2.0 - radius;
                    let hi = (extent + inner) / 2.0 + radius;
                    let in_box = c[0] > lo && c[0] < hi && c[1] > lo && c[1] < hi;
                    if !in_box {
                        break c;
                    }
                }
            } else {
                [rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)]
            };
            let n_vertices = rng.gen_range(5..9);
            GeoPolygon {
                ring: random_convex_polygon(rng, center, radius, n_vertices),
                values: polygon_values(rng, variables, centers, 15.0),
            }
        })
        .collect()
}

// ── Generation ──────────────────────────────────────────────────────────

fn grid_mean(layers: &GeoLayerSet, patch: usize, category: &str, variable: &str) -> Result<f64> {
    let extent = layers.image_extent[0] as usize;
    let grid = PatchGrid::square(extent, extent, patch)?;
    let matrix = aggregate(layers, &grid)?;
    let cat = matrix
        .categories
        .iter()
        .find(|c| c.name == category)
        .ok_or_else(|| Error::Usage(format!("unknown category {category:?}")))?;
    let vi = cat
        .variables
        .iter()
        .position(|v| v == variable)
        .ok_or_else(|| Error::Usage(format!("unknown variable {variable:?}")))?;
    let nv = cat.variables.len();
    let n = matrix.n_patches();
    Ok(cat.values.iter().skip(vi).step_by(nv).sum::<f64>() / n as f64)
}

/// Generates the full synthetic dataset in memory, deterministically from
/// the seed (single stream, sample order fixed).
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schema = config.category_schema();
    let area_size = config.image_size * config.area_factor;
    // The area image is tokenized on the same grid as the local image, so
    // its patch in source coordinates is scaled by the area factor.
    let area_patch = config.patch_size * config.area_factor;

    let mut samples = Vec::with_capacity(config.n_samples);
    let mut clamped = 0usize;
    let mut total = 0usize;

    for i in 0..config.n_samples {
        let id = format!("s{i:04}");
        let scene = render_area_scene(area_size, &mut rng);
        let (local_image, green_fraction) = crop_center(&scene, config.image_size);
        let local_image = local_image.quantized();
        let area_full = Image::new(area_size, area_size, scene.pixels.clone())?;
        let area_image =
            bicubic_resize(&area_full, config.image_size, config.image_size)?.quantized();

        let mut local_cats = Vec::with_capacity(schema.len());
        let mut area_cats = Vec::with_capacity(schema.len());
        for cat in &schema {
            let centers = sample_centers(&mut rng, &cat.variables);
            let env = cat.name == "environment";
            let local_polys = if env {
                // Environment values exist only in the area layers.
                Vec::new()
            } else {
                category_polygons(&mut rng, &cat.variables, &centers, config.image_size as f64, false, 0.0)
            };
            let area_polys = category_polygons(
                &mut rng,
                &cat.variables,
                &centers,
                area_size as f64,
                env,
                config.image_size as f64,
            );
            local_cats.push(GeoCategory {
                name: cat.name.clone(),
                variables: cat.variables.clone(),
                polygons: local_polys,
            });
            area_cats.push(GeoCategory {
                name: cat.name.clone(),
                variables: cat.variables.clone(),
                polygons: area_polys,
            });
        }
        let mut local_geo = GeoLayerSet {
            format_version: GEO_FORMAT_VERSION,
            image_extent: [config.image_size as f64, config.image_size as f64],
            categories: local_cats,
        };
        local_geo.validate()?;
        let mut area_geo = GeoLayerSet {
            format_version: GEO_FORMAT_VERSION,
            image_extent: [area_size as f64, area_size as f64],
            categories: area_cats,
        };
        area_geo.validate()?;

        let poverty_mean = grid_mean(&local_geo, config.patch_size, "income", "poverty")?;
        let crowding_mean = grid_mean(&local_geo, config.patch_size, "housing", "crowding")?;
        let pollution_area_mean = grid_mean(&area_geo, area_patch, "environment", "pollution")?;

        let raw_targets = [
            10.0 + 55.0 * green_fraction + config.sigma * gaussian(&mut rng),
            5.0 + 0.5 * poverty_mean + 0.3 * crowding_mean + config.sigma * gaussian(&mut rng),
            8.0 + 35.0 * green_fraction + 1.3 * pollution_area_mean
                + config.sigma * gaussian(&mut rng),
        ];
        let targets: Vec<f64> = raw_targets
            .iter()
            .map(|&t| {
                total += 1;
                let c = t.clamp(0.0, 100.0);
                if c != t {
                    clamped += 1;
                }
                c
            })
            .collect();

        samples.push(GeneratedSample {
            id,
            local_image,
            area_image,
            local_geo,
            area_geo,
            targets,
            features: TrueFeatures {
                green_fraction,
                poverty_mean,
                crowding_mean,
                pollution_area_mean,
            },
        });
    }

    Ok(SynthOutput {
        config: config.clone(),
        samples,
        clamp_fraction: clamped as f64 / total as f64,
    })
}

impl SynthOutput {
    /// Writes manifest, images, geo layers, and the ground-truth feature
    /// table. Returns the manifest path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir.join("images"))?;
        std::fs::create_dir_all(out_dir.join("geo"))?;

        let mut records = Vec::with_capacity(self.samples.len());
        let mut features = String::from(
            "id,green_fraction,poverty_mean,crowding_mean,pollution_area_mean,img_linked,geo_linked,area_linked\n",
        );
        for s in &self.samples {
            let local_image = format!("images/{}_local.png", s.id);
            let area_image = format!("images/{}_area.png", s.id);
            let local_geo = format!("geo/{}_local.json", s.id);
            let area_geo = format!("geo/{}_area.json", s.id);
            s.local_image.save_png(&out_dir.join(&local_image))?;
            s.area_image.save_png(&out_dir.join(&area_image))?;
            s.local_geo.save(&out_dir.join(&local_geo))?;
            s.area_geo.save(&out_dir.join(&area_geo))?;
            features.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{},{},{}\n",
                s.id,
                s.features.green_fraction,
                s.features.poverty_mean,
                s.features.crowding_mean,
                s.features.pollution_area_mean,
                s.targets[0],
                s.targets[1],
                s.targets[2],
            ));
            records.push(ManifestRecord {
                id: s.id.clone(),
                local_image,
                area_image: Some(area_image),
                local_geo,
                area_geo: Some(area_geo),
                targets: s.targets.clone(),
            });
        }

        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            outcomes: self.config.outcome_names(),
            categories: self.config.category_schema(),
            records,
        };
        let path = out_dir.join("manifest.json");
        manifest.save(&path)?;
        std::fs::write(out_dir.join("features.csv"), features)?;
        Ok(path)
    }
}
