//! Polygonal geospatial layers and their reduction to per-patch tokens.
//!
//! The pipeline is: clip every polygon to every patch rectangle
//! (Sutherland–Hodgman, exact for simple polygons against an axis-aligned
//! rectangle), take the shoelace area of each clipped segment, and reduce
//! values per patch and variable as the area-weighted average
//! `f = sum_i(area_i * f_i) / sum_i(area_i)`. Categories stay separate
//! channels end to end; a per-category affine projection then lifts each
//! block to its attention head's width.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

/// Geo layer JSON format version accepted by this build.
pub const GEO_FORMAT_VERSION: u32 = 1;

// ── Geometry kernels (generic over scalar) ──────────────────────────────

/// Axis-aligned rectangle in pixel coordinates, y-down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T: Scalar> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Usage(format!(
                "rectangle must have positive extent, got x [{x0}, {x1}], y [{y0}, {y1}]"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> T {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Shoelace area of a simple ring, orientation-invariant.
pub fn ring_area<T: Scalar>(ring: &[[T; 2]]) -> T {
    if ring.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..ring.len() {
        let [x0, y0] = ring[i];
        let [x1, y1] = ring[(i + 1) % ring.len()];
        acc += x0 * y1 - x1 * y0;
    }
    (acc / T::from_f64_c(2.0)).abs()
}

#[derive(Clone, Copy)]
enum ClipEdge {
    Left,
    Right,
    Top,
    Bottom,
}

fn inside<T: Scalar>(p: [T; 2], edge: ClipEdge, r: &Rect<T>) -> bool {
    match edge {
        ClipEdge::Left => p[0] >= r.x0,
        ClipEdge::Right => p[0] <= r.x1,
        ClipEdge::Top => p[1] >= r.y0,
        ClipEdge::Bottom => p[1] <= r.y1,
    }
}

fn intersect<T: Scalar>(a: [T; 2], b: [T; 2], edge: ClipEdge, r: &Rect<T>) -> [T; 2] {
    // The caller guarantees a and b straddle the edge line, so the
    // denominator is nonzero.
    match edge {
        ClipEdge::Left | ClipEdge::Right => {
            let x = match edge {
                ClipEdge::Left => r.x0,
                _ => r.x1,
            };
            let t = (x - a[0]) / (b[0] - a[0]);
            [x, a[1] + t * (b[1] - a[1])]
        }
        ClipEdge::Top | ClipEdge::Bottom => {
            let y = match edge {
                ClipEdge::Top => r.y0,
                _ => r.y1,
            };
            let t = (y - a[1]) / (b[1] - a[1]);
            [a[0] + t * (b[0] - a[0]), y]
        }
    }
}

/// Sutherland–Hodgman clip of a simple ring against a rectangle.
///
/// Returns the intersection ring; empty when disjoint. Rings with fewer
/// than 3 vertices are rejected as degenerate input.
pub fn clip_polygon_to_rect<T: Scalar>(ring: &[[T; 2]], rect: &Rect<T>) -> Result<Vec<[T; 2]>> {
    if ring.len() < 3 {
        return Err(Error::Ingest(format!(
            "polygon ring needs at least 3 vertices, got {}",
            ring.len()
        )));
    }
    let mut points = ring.to_vec();
    for edge in [ClipEdge::Left, ClipEdge::Right, ClipEdge::Top, ClipEdge::Bottom] {
        if points.is_empty() {
            break;
        }
        let mut next = Vec::with_capacity(points.len() + 4);
        let mut prev = *points.last().unwrap();
        let mut prev_in = inside(prev, edge, rect);
        for p in points {
            let p_in = inside(p, edge, rect);
            if p_in != prev_in {
                next.push(intersect(prev, p, edge, rect));
            }
            if p_in {
                next.push(p);
            }
            prev = p;
            prev_in = p_in;
        }
        points = next;
    }
    if points.len() < 3 {
        points.clear();
    }
    Ok(points)
}

/// Even-odd ray-casting point-in-ring test.
pub fn point_in_ring<T: Scalar>(p: [T; 2], ring: &[[T; 2]]) -> bool {
    let mut hit = false;
    let n = ring.len();
    for i in 0..n {
        let [x0, y0] = ring[i];
        let [x1, y1] = ring[(i + 1) % n];
        if (y0 > p[1]) != (y1 > p[1]) {
            let xcross = x0 + (p[1] - y0) / (y1 - y0) * (x1 - x0);
            if p[0] < xcross {
                hit = !hit;
            }
        }
    }
    hit
}

fn orientation(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let o1 = orientation(p1, p2, q1);
    let o2 = orientation(p1, p2, q2);
    let o3 = orientation(q1, q2, p1);
    let o4 = orientation(q1, q2, p2);
    if ((o1 > 0.0) != (o2 > 0.0)) && ((o3 > 0.0) != (o4 > 0.0)) && o1 != 0.0 && o2 != 0.0 && o3 != 0.0 && o4 != 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(p1, p2, q1))
        || (o2 == 0.0 && on_segment(p1, p2, q2))
        || (o3 == 0.0 && on_segment(q1, q2, p1))
        || (o4 == 0.0 && on_segment(q1, q2, p2))
}

fn ring_is_simple(ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    for i in 0..n {
        for j in (i + 1)..n {
            // Skip edges sharing a vertex (adjacent, including the wrap pair).
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            if segments_intersect(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

// ── Layer data model ────────────────────────────────────────────────────

/// One polygon with its attached variable values (percentages, 0-100).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoPolygon {
    pub ring: Vec<[f64; 2]>,
    pub values: BTreeMap<String, f64>,
}

impl GeoPolygon {
    /// Validates ring shape, simplicity, and value ranges against the
    /// owning category's variable list.
    fn validate(&mut self, category: &str, variables: &[String], idx: usize) -> Result<()> {
        // Accept explicitly closed rings by dropping the repeated vertex.
        if self.ring.len() >= 4 && self.ring.first() == self.ring.last() {
            self.ring.pop();
        }
        if self.ring.len() < 3 {
            return Err(Error::Ingest(format!(
                "category {category:?} polygon {idx}: ring needs at least 3 vertices, got {}",
                self.ring.len()
            )));
        }
        if !ring_is_simple(&self.ring) {
            return Err(Error::Ingest(format!(
                "category {category:?} polygon {idx}: ring is self-intersecting"
            )));
        }
        for var in variables {
            match self.values.get(var) {
                None => {
                    return Err(Error::Ingest(format!(
                        "category {category:?} polygon {idx}: missing variable {var:?}"
                    )))
                }
                Some(&v) if !(0.0..=100.0).contains(&v) => {
                    return Err(Error::Ingest(format!(
                        "category {category:?} polygon {idx}: variable {var:?} value {v} outside [0, 100]"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoCategory {
    pub name: String,
    pub variables: Vec<String>,
    pub polygons: Vec<GeoPolygon>,
}

/// Named categories of polygons over one image extent. Category order is
/// fixed and equals the attention head order, one to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoLayerSet {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub image_extent: [f64; 2],
    pub categories: Vec<GeoCategory>,
}

fn default_version() -> u32 {
    GEO_FORMAT_VERSION
}

impl GeoLayerSet {
    pub fn validate(&mut self) -> Result<()> {
        if self.format_version != GEO_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "geo layer format_version {} unsupported (expected {GEO_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.image_extent[0] <= 0.0 || self.image_extent[1] <= 0.0 {
            return Err(Error::Ingest(format!(
                "image_extent must be positive, got {:?}",
                self.image_extent
            )));
        }
        for cat in &mut self.categories {
            if cat.variables.is_empty() {
                return Err(Error::Ingest(format!("category {:?} has no variables", cat.name)));
            }
            for (idx, poly) in cat.polygons.iter_mut().enumerate() {
                poly.validate(&cat.name, &cat.variables, idx)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
        let mut layers: GeoLayerSet = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        layers.validate()?;
        Ok(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("geo serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// (category name, variable list) pairs, in fixed category order.
    pub fn schema(&self) -> Vec<(String, Vec<String>)> {
        self.categories.iter().map(|c| (c.name.clone(), c.variables.clone())).collect()
    }
}

// ── Patch grid and aggregation ──────────────────────────────────────────

/// Raster-ordered non-overlapping tiling of the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_w: usize,
    pub patch_h: usize,
}

impl PatchGrid {
    /// Square-patch grid over a `width x height` extent; the patch size
    /// must tile the extent exactly.
    pub fn square(width: usize, height: usize, patch: usize) -> Result<Self> {
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} does not tile extent {width}x{height}"
            )));
        }
        Ok(PatchGrid { rows: height / patch, cols: width / patch, patch_w: patch, patch_h: patch })
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn rect(&self, row: usize, col: usize) -> Rect<f64> {
        let x0 = (col * self.patch_w) as f64;
        let y0 = (row * self.patch_h) as f64;
        Rect::new(x0, y0, x0 + self.patch_w as f64, y0 + self.patch_h as f64)
            .expect("patch rect has positive extent")
    }
}

/// One category's area-weighted values over the patch grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryBlock {
    pub name: String,
    pub variables: Vec<String>,
    /// `[n_patches x n_vars]`, raster patch order.
    pub values: Vec<f64>,
}

/// Per-patch, per-variable area-weighted values, grouped by category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchGeoMatrix {
    pub rows: usize,
    pub cols: usize,
    pub categories: Vec<CategoryBlock>,
    /// Fraction of each patch's area covered by any polygon, in [0, 1].
    pub coverage: Vec<f64>,
}

impl PatchGeoMatrix {
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// All-zero matrix with the given schema (used when a variant carries
    /// no geo signal).
    pub fn zeros(rows: usize, cols: usize, schema: &[(String, Vec<String>)]) -> Self {
        let n = rows * cols;
        PatchGeoMatrix {
            rows,
            cols,
            categories: schema
                .iter()
                .map(|(name, vars)| CategoryBlock {
                    name: name.clone(),
                    variables: vars.clone(),
                    values: vec![0.0; n * vars.len()],
                })
                .collect(),
            coverage: vec![0.0; n],
        }
    }

    /// Mean over patches of each variable, per category — the raw
    /// statistics the head-weight score networks consume.
    pub fn category_means(&self) -> Vec<Vec<f64>> {
        let n = self.n_patches() as f64;
        self.categories
            .iter()
            .map(|cat| {
                let nv = cat.variables.len();
                let mut means = vec![0.0; nv];
                for patch in cat.values.chunks_exact(nv) {
                    for (m, &v) in means.iter_mut().zip(patch) {
                        *m += v;
                    }
                }
                means.iter_mut().for_each(|m| *m /= n);
                means
            })
            .collect()
    }

    /// Copy with every value multiplied by `factor` (model-side conditioning).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for cat in &mut out.categories {
            cat.values.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }

    /// Copy with all values zeroed except for the named categories.
    /// Blocks are kept in place so the category/head binding is unchanged.
    pub fn restricted_to(&self, keep: &[String]) -> Self {
        let mut out = self.clone();
        for cat in &mut out.categories {
            if !keep.contains(&cat.name) {
                cat.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }

    /// CSV with columns `patch_row,patch_col,coverage` then one
    /// `category.variable` column per variable, six decimal places.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("patch_row,patch_col,coverage");
        for cat in &self.categories {
            for var in &cat.variables {
                header.push(',');
                header.push_str(&format!("{}.{}", cat.name, var));
            }
        }
        let mut out = header;
        out.push('\n');
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = r * self.cols + c;
                out.push_str(&format!("{r},{c},{:.6}", self.coverage[p]));
                for cat in &self.categories {
                    let nv = cat.variables.len();
                    for v in 0..nv {
                        out.push_str(&format!(",{:.6}", cat.values[p * nv + v]));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Area-weighted reduction of polygon layers onto a patch grid.
///
/// For each patch and variable: `f = sum_i(area_i * f_i) / sum_i(area_i)`
/// over all polygon-patch intersection segments with positive area.
/// Patches no polygon touches get `f = 0` and `coverage = 0`; that is a
/// recorded state, not an error.
pub fn aggregate(layers: &GeoLayerSet, grid: &PatchGrid) -> Result<PatchGeoMatrix> {
    let (w, h) = (layers.image_extent[0], layers.image_extent[1]);
    let tiled_w = (grid.cols * grid.patch_w) as f64;
    let tiled_h = (grid.rows * grid.patch_h) as f64;
    if (tiled_w - w).abs() > 1e-9 || (tiled_h - h).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "grid {}x{} patches of {}x{} px does not tile extent {w}x{h}",
            grid.rows, grid.cols, grid.patch_w, grid.patch_h
        )));
    }

    let n = grid.n_patches();
    let mut coverage = vec![0.0f64; n];
    let mut blocks = Vec::with_capacity(layers.categories.len());

    for cat in &layers.categories {
        let nv = cat.variables.len();
        let mut weighted = vec![0.0f64; n * nv];
        let mut area_sum = vec![0.0f64; n];
        for poly in &cat.polygons {
            let vals: Vec<f64> =
                cat.variables.iter().map(|v| poly.values[v]).collect();
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let rect = grid.rect(r, c);
                    let clipped = clip_polygon_to_rect(&poly.ring, &rect)?;
                    let area = ring_area(&clipped);
                    if area > 0.0 {
                        let p = r * grid.cols + c;
                        area_sum[p] += area;
                        for (acc, &fv) in
                            weighted[p * nv..(p + 1) * nv].iter_mut().zip(&vals)
                        {
                            *acc += area * fv;
                        }
                    }
                }
            }
        }
        let mut values = vec![0.0f64; n * nv];
        for p in 0..n {
            if area_sum[p] > 0.0 {
                for v in 0..nv {
                    values[p * nv + v] = weighted[p * nv + v] / area_sum[p];
                }
                let patch_area = grid.rect(p / grid.cols, p % grid.cols).area();
                // Per-category covered fraction; polygons within a category
                // are assumed non-overlapping (tract-like layers), so the
                // capped sum is the covered fraction. The patch-level
                // coverage is the max over categories.
                let frac = (area_sum[p] / patch_area).min(1.0);
                coverage[p] = coverage[p].max(frac);
            }
        }
        blocks.push(CategoryBlock {
            name: cat.name.clone(),
            variables: cat.variables.clone(),
            values,
        });
    }

    Ok(PatchGeoMatrix { rows: grid.rows, cols: grid.cols, categories: blocks, coverage })
}

// ── Embedding projection ────────────────────────────────────────────────

/// Projects each category block `[n_patches x n_vars]` to its head width
/// through the given `(weight, bias)` tape parameters and concatenates the
/// blocks along the feature axis in category order.
pub fn embed_geo(
    tape: &mut Tape<f64>,
    matrix: &PatchGeoMatrix,
    projections: &[(TensorId, TensorId)],
) -> Result<TensorId> {
    if projections.len() != matrix.categories.len() {
        return Err(Error::Config(format!(
            "embed_geo: {} categories but {} projections",
            matrix.categories.len(),
            projections.len()
        )));
    }
    let n = matrix.n_patches();
    let mut parts = Vec::with_capacity(matrix.categories.len());
    for (cat, &(w, b)) in matrix.categories.iter().zip(projections) {
        let nv = cat.variables.len();
        let (wr, _) = tape.value(w).dims2()?;
        if wr != nv {
            return Err(Error::Config(format!(
                "embed_geo: category {:?} has {nv} variables but projection expects {wr}",
                cat.name
            )));
        }
        let x = tape.constant(Tensor::matrix(n, nv, cat.values.clone())?);
        parts.push(tape.linear(x, w, b)?);
    }
    tape.concat_last_axis(&parts)
}
