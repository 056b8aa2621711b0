//! Dataset ingestion: manifest + PNG images + geo layers + targets,
//! bicubic resampling, and deterministic 8:1:1 splitting.
//!
//! All file formats carry a `format_version` field. Images are 8-bit RGB
//! PNG loaded to `[0, 1]` floats by `/255`, so a save/load round trip of
//! quantized pixel data is bit-exact.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoLayerSet;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

// ── Images ──────────────────────────────────────────────────────────────

/// RGB image with channels interleaved row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Usage(format!(
                "image buffer length {} does not match {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Image { width, height, pixels }
    }

    /// Snaps every channel to the 8-bit grid (`round(v*255)/255`), the
    /// representation a PNG round trip preserves exactly.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.pixels {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (self.pixels[i * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path).map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("png read {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for px in img.pixels() {
            for c in 0..3 {
                pixels.push(px.0[c] as f64 / 255.0);
            }
        }
        Image::new(w, h, pixels)
    }
}

// ── Bicubic resampling ──────────────────────────────────────────────────

// Catmull-Rom cubic convolution kernel (a = -0.5).
fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

// Tap positions and weights for one destination coordinate under the
// pixel-center mapping src = (dst + 0.5) * scale - 0.5, edge-clamped.
fn taps(dst: usize, scale: f64, src_len: usize) -> ([usize; 4], [f64; 4]) {
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let base = src.floor();
    let t = src - base;
    let mut idx = [0usize; 4];
    let mut w = [0.0f64; 4];
    for k in 0..4 {
        let off = k as isize - 1;
        idx[k] = (base as isize + off).clamp(0, src_len as isize - 1) as usize;
        w[k] = cubic_kernel(t - off as f64);
    }
    (idx, w)
}

/// Bicubic resample (Catmull-Rom, a = -0.5), edge-clamped, channels
/// independent. Both downscale and upscale are supported; identity sizes
/// reproduce the input bit-exactly (the kernel is exact at the nodes).
pub fn bicubic_resize(src: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::Usage("bicubic_resize: target must be positive".into()));
    }
    let scale_x = src.width as f64 / width as f64;
    let scale_y = src.height as f64 / height as f64;

    // Horizontal pass: [src.height x width].
    let mut mid = vec![0.0f64; src.height * width * 3];
    for x in 0..width {
        let (ix, wx) = taps(x, scale_x, src.width);
        for y in 0..src.height {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wx[k] * src.pixels[(y * src.width + ix[k]) * 3 + c];
                }
                mid[(y * width + x) * 3 + c] = acc;
            }
        }
    }

    // Vertical pass: [height x width].
    let mut out = vec![0.0f64; height * width * 3];
    for y in 0..height {
        let (iy, wy) = taps(y, scale_y, src.height);
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wy[k] * mid[(iy[k] * width + x) * 3 + c];
                }
                out[(y * width + x) * 3 + c] = acc;
            }
        }
    }
    Image::new(width, height, out)
}

// ── Manifest and dataset ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategorySchema {
    pub name: String,
    pub variables: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub local_image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_image: Option<String>,
    pub local_geo: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_geo: Option<String>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub outcomes: Vec<String>,
    pub categories: Vec<CategorySchema>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest format_version {} unsupported (expected {MANIFEST_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// One fully loaded and validated record.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub local_image: Image,
    pub area_image: Option<Image>,
    pub local_geo: GeoLayerSet,
    pub area_geo: Option<GeoLayerSet>,
    pub targets: Vec<f64>,
}

/// In-memory dataset: validated records plus the shared schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub outcomes: Vec<String>,
    pub categories: Vec<CategorySchema>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn record(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn outcome_index(&self, name: &str) -> Result<usize> {
        self.outcomes
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| Error::Usage(format!("unknown outcome {name:?}, have {:?}", self.outcomes)))
    }
}

fn check_geo_schema(id: &str, which: &str, layers: &GeoLayerSet, schema: &[CategorySchema]) -> Result<()> {
    let got: Vec<CategorySchema> = layers
        .categories
        .iter()
        .map(|c| CategorySchema { name: c.name.clone(), variables: c.variables.clone() })
        .collect();
    if got != schema {
        return Err(Error::Ingest(format!(
            "record {id:?}: {which} geo schema does not match the manifest categories"
        )));
    }
    Ok(())
}

/// Loads and validates every record of a manifest. Errors name the
/// offending record id. An empty manifest is a valid empty dataset.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |rel: &str| -> PathBuf { base.join(rel) };

    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut image_size: Option<(usize, usize)> = None;

    for rec in &manifest.records {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Ingest(format!("record {:?}: duplicate id", rec.id)));
        }
        if rec.targets.len() != manifest.outcomes.len() {
            return Err(Error::Ingest(format!(
                "record {:?}: {} targets for {} outcomes",
                rec.id,
                rec.targets.len(),
                manifest.outcomes.len()
            )));
        }
        for (o, &t) in manifest.outcomes.iter().zip(&rec.targets) {
            if !(0.0..=100.0).contains(&t) {
                return Err(Error::Ingest(format!(
                    "record {:?}: target {o:?} = {t} outside [0, 100]",
                    rec.id
                )));
            }
        }

        let local_image = Image::load_png(&resolve(&rec.local_image))
            .map_err(|e| Error::Ingest(format!("record {:?}: {e}", rec.id)))?;
        match image_size {
            None => image_size = Some((local_image.width, local_image.height)),
            Some(sz) if sz != (local_image.width, local_image.height) => {
                return Err(Error::Ingest(format!(
                    "record {:?}: local image {}x{} differs from the dataset's {}x{}",
                    rec.id, local_image.width, local_image.height, sz.0, sz.1
                )))
            }
            _ => {}
        }
        let area_image = match &rec.area_image {
            Some(p) => {
                let img = Image::load_png(&resolve(p))
                    .map_err(|e| Error::Ingest(format!("record {:?}: {e}", rec.id)))?;
                if (img.width, img.height) != (local_image.width, local_image.height) {
                    return Err(Error::Ingest(format!(
                        "record {:?}: area image must be pre-resampled to the local size",
                        rec.id
                    )));
                }
                Some(img)
            }
            None => None,
        };

        let local_geo = GeoLayerSet::load(&resolve(&rec.local_geo))
            .map_err(|e| Error::Ingest(format!("record {:?}: {e}", rec.id)))?;
        check_geo_schema(&rec.id, "local", &local_geo, &manifest.categories)?;
        let area_geo = match &rec.area_geo {
            Some(p) => {
                let layers = GeoLayerSet::load(&resolve(p))
                    .map_err(|e| Error::Ingest(format!("record {:?}: {e}", rec.id)))?;
                check_geo_schema(&rec.id, "area", &layers, &manifest.categories)?;
                Some(layers)
            }
            None => None,
        };

        records.push(Record {
            id: rec.id.clone(),
            local_image,
            area_image,
            local_geo,
            area_geo,
            targets: rec.targets.clone(),
        });
    }

    Ok(Dataset { outcomes: manifest.outcomes, categories: manifest.categories, records })
}

// ── Splitting ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitBucket {
    Train,
    Val,
    Test,
}

/// Deterministic 8:1:1 partition of the id set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn bucket(&self, id: &str) -> Option<SplitBucket> {
        if self.train.iter().any(|x| x == id) {
            Some(SplitBucket::Train)
        } else if self.val.iter().any(|x| x == id) {
            Some(SplitBucket::Val)
        } else if self.test.iter().any(|x| x == id) {
            Some(SplitBucket::Test)
        } else {
            None
        }
    }
}

/// Largest-remainder bucket sizes for ratios 0.8/0.1/0.1.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let ratios = [0.8f64, 0.1, 0.1];
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    // Distribute the leftovers by descending fractional remainder; ties go
    // to the earlier bucket (train, then val, then test).
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        sizes[order[i % 3]] += 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Shuffled 8:1:1 split. Ids are sorted before shuffling so the result is
/// invariant to manifest record order; the same seed reproduces the same
/// assignment.
pub fn split(ids: &[String], seed: u64) -> Result<SplitSpec> {
    if ids.len() < 10 {
        return Err(Error::Usage(format!(
            "split needs at least 10 ids to honor the 8:1:1 ratios, got {}",
            ids.len()
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Usage("split ids must be unique".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(sorted.len());
    let val = sorted.split_off(n_train);
    let mut val = val;
    let test = val.split_off(n_val);
    Ok(SplitSpec { seed, train: sorted, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bicubic_identity_is_bit_exact() {
        let mut px = Vec::new();
        for i in 0..8 * 8 {
            let v = (i as f64 * 37.0 % 255.0) / 255.0;
            px.extend_from_slice(&[v, 1.0 - v, v * 0.5]);
        }
        let img = Image::new(8, 8, px).unwrap();
        let out = bicubic_resize(&img, 8, 8).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn bicubic_constant_image_stays_constant() {
        let img = Image::filled(9, 7, [0.3, 0.6, 0.2]);
        for (w, h) in [(4, 3), (18, 14), (5, 5)] {
            let out = bicubic_resize(&img, w, h).unwrap();
            for (i, &v) in out.pixels.iter().enumerate() {
                let want = [0.3, 0.6, 0.2][i % 3];
                assert!((v - want).abs() < 1e-12, "constant not preserved: {v} vs {want}");
            }
        }
    }

    #[test]
    fn bicubic_matches_direct_kernel_oracle() {
        // 8x8 gradient ramp downscaled to 4x4, against a direct 2-D
        // 16-tap evaluation of the same kernel and mapping.
        let mut px = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                let v = (x as f64 + 8.0 * y as f64) / 71.0;
                px.extend_from_slice(&[v, v * 0.5, 1.0 - v]);
            }
        }
        let img = Image::new(8, 8, px).unwrap();
        let out = bicubic_resize(&img, 4, 4).unwrap();

        let scale = 2.0;
        for dy in 0..4 {
            for dx in 0..4 {
                for c in 0..3 {
                    let sx = (dx as f64 + 0.5) * scale - 0.5;
                    let sy = (dy as f64 + 0.5) * scale - 0.5;
                    let (bx, by) = (sx.floor(), sy.floor());
                    let mut acc = 0.0;
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let ix = (bx as isize + kx - 1).clamp(0, 7) as usize;
                            let iy = (by as isize + ky - 1).clamp(0, 7) as usize;
                            let w = cubic_kernel(sx - bx - (kx - 1) as f64)
                                * cubic_kernel(sy - by - (ky - 1) as f64);
                            acc += w * img.pixels[(iy * 8 + ix) * 3 + c];
                        }
                    }
                    let got = out.pixels[(dy * 4 + dx) * 3 + c];
                    assert!((got - acc).abs() < 1e-9, "({dx},{dy},{c}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn png_round_trip_of_quantized_image_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut px = Vec::new();
        for i in 0..6 * 5 * 3 {
            px.push((i as f64 * 0.137) % 1.0);
        }
        let img = Image::new(6, 5, px).unwrap().quantized();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn split_ten_ids_gives_8_1_1() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let s = split(&ids, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_order_invariant() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i:03}")).collect();
        let a = split(&ids, 7).unwrap();
        let b = split(&ids, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);

        let mut shuffled = ids.clone();
        shuffled.reverse();
        let c = split(&shuffled, 7).unwrap();
        assert_eq!(a.train, c.train);

        let d = split(&ids, 8).unwrap();
        assert_ne!(a.train, d.train, "different seed should reshuffle");
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        // 97 -> quotas 77.6 / 9.7 / 9.7; floors 77/9/9, remainders
        // 0.6/0.7/0.7 so val and test each get one extra.
        assert_eq!(split_sizes(97), (77, 10, 10));
        assert_eq!(split_sizes(10), (8, 1, 1));
        let (a, b, c) = split_sizes(500);
        assert_eq!((a, b, c), (400, 50, 50));
        // Partition always covers the set exactly.
        for n in 10..400 {
            let (x, y, z) = split_sizes(n);
            assert_eq!(x + y + z, n);
            assert!((x as f64 - 0.8 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn split_rejects_too_few_ids() {
        let ids: Vec<String> = (0..9).map(|i| format!("s{i}")).collect();
        assert!(matches!(split(&ids, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_manifest_loads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            outcomes: vec!["a".into()],
            categories: vec![],
            records: vec![],
        };
        m.save(&path).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert!(ds.records.is_empty());
    }

    #[test]
    fn out_of_range_target_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let img = Image::filled(4, 4, [0.5; 3]);
        img.save_png(&dir.path().join("x.png")).unwrap();
        let m = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            outcomes: vec!["a".into()],
            categories: vec![],
            records: vec![ManifestRecord {
                id: "bad_rec".into(),
                local_image: "x.png".into(),
                area_image: None,
                local_geo: "missing.json".into(),
                area_geo: None,
                targets: vec![101.0],
            }],
        };
        m.save(&path).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("bad_rec"), "error must cite the id: {err}");
    }
}
