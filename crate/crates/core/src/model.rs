//! Model assembly: patch embedding, positional encoding, stacked guided
//! blocks, average pooling, and the regression head, wired into the
//! architecture variants.
//!
//! Variants differ only in how the input and guidance streams are built:
//!
//! * `A`    — input: local image embedding + local geo embedding;
//!   guidance: area image embedding + area geo embedding.
//! * `G`    — input: local image embedding; guidance: local geo embedding.
//! * `L`    — local image embedding serves both roles; gates disabled.
//! * `Vit`  — plain self-attention baseline; identical wiring to `L`.
//!
//! Guidance is computed once and reused by every block; blocks have
//! independent parameters including the gate score networks.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    guided_block, AffineIds, BlockIds, GateMode, GuidancePacket, GuidedAttentionParams, HeadIds,
    NormIds, ScoreNetIds,
};
use crate::data::{Dataset, Image, Record};
use crate::error::{Error, Result};
use crate::fd::fd_check_at;
use crate::geo::{aggregate, embed_geo, PatchGeoMatrix, PatchGrid};
use crate::tensor::TensorId;
use crate::{Tape, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Geo variables are percentages; the embedding projections consume them
/// scaled to [0, 1] so image and geo tokens start at comparable magnitude.
pub const GEO_EMBED_SCALE: f64 = 1e-2;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    G,
    L,
    Vit,
}

impl Variant {
    pub fn uses_geo(&self) -> bool {
        matches!(self, Variant::A | Variant::G)
    }

    pub fn needs_area(&self) -> bool {
        matches!(self, Variant::A)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "g" => Ok(Variant::G),
            "l" => Ok(Variant::L),
            "vit" => Ok(Variant::Vit),
            other => Err(Error::Usage(format!("unknown variant {other:?} (expected A, G, L, vit)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::A => write!(f, "A"),
            Variant::G => write!(f, "G"),
            Variant::L => write!(f, "L"),
            Variant::Vit => write!(f, "vit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub n_vars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub mlp_dim: usize,
    pub n_blocks: usize,
    pub categories: Vec<CategorySpec>,
    pub n_outcomes: usize,
    pub head_weights_enabled: bool,
    /// Learned positional table instead of the fixed sinusoidal encoding.
    pub learned_pos: bool,
    pub score_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale preset: 64 px images, 8 px patches, width 80, 4 blocks,
    /// 4 categories of 5 variables, 3 outcomes.
    pub fn desk(variant: Variant) -> Self {
        let categories = ["income", "housing", "age", "environment"]
            .iter()
            .map(|n| CategorySpec { name: (*n).into(), n_vars: 5 })
            .collect();
        let mut cfg = ModelConfig {
            variant,
            image_size: 64,
            patch_size: 8,
            d_model: 80,
            mlp_dim: 128,
            n_blocks: 4,
            categories,
            n_outcomes: 3,
            head_weights_enabled: true,
            learned_pos: false,
            score_hidden: 32,
            seed: 0,
        };
        cfg.finalize().expect("desk preset is valid");
        cfg
    }

    /// Reference-scale preset: 640 px images, 16 px patches, width 1280,
    /// 4 blocks, 10 categories, 9 outcomes. Supported, not CI-gated.
    pub fn paper(variant: Variant) -> Self {
        let names = [
            "age_sex", "ancestry", "education", "employment", "household", "housing", "income",
            "origin", "race", "residency",
        ];
        let categories =
            names.iter().map(|n| CategorySpec { name: (*n).into(), n_vars: 23 }).collect();
        let mut cfg = ModelConfig {
            variant,
            image_size: 640,
            patch_size: 16,
            d_model: 1280,
            mlp_dim: 128,
            n_blocks: 4,
            categories,
            n_outcomes: 9,
            head_weights_enabled: true,
            learned_pos: false,
            score_hidden: 32,
            seed: 0,
        };
        cfg.finalize().expect("paper preset is valid");
        cfg
    }

    /// Normalizes variant-dependent fields and checks the dimension
    /// invariants. Must be called after manual edits.
    pub fn finalize(&mut self) -> Result<()> {
        if matches!(self.variant, Variant::L | Variant::Vit) {
            self.head_weights_enabled = false;
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("at least one category is required".into()));
        }
        if self.d_model % self.categories.len() != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} categories (head width must be integral)",
                self.d_model,
                self.categories.len()
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the sinusoidal encoding".into()));
        }
        if self.n_outcomes == 0 || self.n_blocks == 0 || self.mlp_dim == 0 || self.score_hidden == 0
        {
            return Err(Error::Config("n_outcomes, n_blocks, mlp_dim, score_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn n_heads(&self) -> usize {
        self.categories.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.categories.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn gate_mode(&self) -> GateMode {
        if self.head_weights_enabled {
            GateMode::Learned
        } else {
            GateMode::Disabled
        }
    }
}

// ── Parameter containers ────────────────────────────────────────────────
//
// One generic container holds host tensors (`ModelParams`) and their tape
// handles (`ParamIds`); `visit`/`visit_mut`/`map` traverse in one fixed
// order, which defines the stable parameter names used by the optimizer
// and the checkpoint format:
//
//   patch_embed.{w,b}, patch_embed_area.{w,b},
//   geo_in.<cat>.{w,b}, geo_gd.<cat>.{w,b}, pos,
//   block<i>.norm1.{gain,bias}, block<i>.head<j>.{q,k,v}.{w,b},
//   block<i>.score<j>.{l1,l2}.{w,b}, block<i>.out.{w,b},
//   block<i>.norm2.{gain,bias}, block<i>.mlp_in.{w,b},
//   block<i>.mlp_out.{w,b}, head.{w,b}

#[derive(Debug, Clone)]
pub struct AffineG<L> {
    pub w: L,
    pub b: L,
}

#[derive(Debug, Clone)]
pub struct NormG<L> {
    pub gain: L,
    pub bias: L,
}

#[derive(Debug, Clone)]
pub struct ScoreG<L> {
    pub l1: AffineG<L>,
    pub l2: AffineG<L>,
}

#[derive(Debug, Clone)]
pub struct HeadG<L> {
    pub q: AffineG<L>,
    pub k: AffineG<L>,
    pub v: AffineG<L>,
}

#[derive(Debug, Clone)]
pub struct BlockG<L> {
    pub norm1: NormG<L>,
    pub heads: Vec<HeadG<L>>,
    pub score: Vec<ScoreG<L>>,
    pub out: AffineG<L>,
    pub norm2: NormG<L>,
    pub mlp_in: AffineG<L>,
    pub mlp_out: AffineG<L>,
}

#[derive(Debug, Clone)]
pub struct ParamsG<L> {
    pub patch_embed: AffineG<L>,
    pub patch_embed_area: Option<AffineG<L>>,
    pub geo_in: Option<Vec<AffineG<L>>>,
    pub geo_gd: Option<Vec<AffineG<L>>>,
    pub pos: Option<L>,
    pub blocks: Vec<BlockG<L>>,
    pub head: AffineG<L>,
}

pub type ModelParams = ParamsG<Tensor>;
pub type ParamIds = ParamsG<TensorId>;

impl<L> ParamsG<L> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a L)) {
        let affine = |name: String, a: &'a AffineG<L>, f: &mut dyn FnMut(String, &'a L)| {
            f(format!("{name}.w"), &a.w);
            f(format!("{name}.b"), &a.b);
        };
        affine("patch_embed".into(), &self.patch_embed, f);
        if let Some(a) = &self.patch_embed_area {
            affine("patch_embed_area".into(), a, f);
        }
        if let Some(list) = &self.geo_in {
            for (i, a) in list.iter().enumerate() {
                affine(format!("geo_in.{i}"), a, f);
            }
        }
        if let Some(list) = &self.geo_gd {
            for (i, a) in list.iter().enumerate() {
                affine(format!("geo_gd.{i}"), a, f);
            }
        }
        if let Some(p) = &self.pos {
            f("pos".into(), p);
        }
        for (b, block) in self.blocks.iter().enumerate() {
            f(format!("block{b}.norm1.gain"), &block.norm1.gain);
            f(format!("block{b}.norm1.bias"), &block.norm1.bias);
            for (h, head) in block.heads.iter().enumerate() {
                affine(format!("block{b}.head{h}.q"), &head.q, f);
                affine(format!("block{b}.head{h}.k"), &head.k, f);
                affine(format!("block{b}.head{h}.v"), &head.v, f);
            }
            for (s, score) in block.score.iter().enumerate() {
                affine(format!("block{b}.score{s}.l1"), &score.l1, f);
                affine(format!("block{b}.score{s}.l2"), &score.l2, f);
            }
            affine(format!("block{b}.out"), &block.out, f);
            f(format!("block{b}.norm2.gain"), &block.norm2.gain);
            f(format!("block{b}.norm2.bias"), &block.norm2.bias);
            affine(format!("block{b}.mlp_in"), &block.mlp_in, f);
            affine(format!("block{b}.mlp_out"), &block.mlp_out, f);
        }
        affine("head".into(), &self.head, f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut L)) {
        let affine = |name: String, a: &mut AffineG<L>, f: &mut dyn FnMut(String, &mut L)| {
            f(format!("{name}.w"), &mut a.w);
            f(format!("{name}.b"), &mut a.b);
        };
        affine("patch_embed".into(), &mut self.patch_embed, f);
        if let Some(a) = &mut self.patch_embed_area {
            affine("patch_embed_area".into(), a, f);
        }
        if let Some(list) = &mut self.geo_in {
            for (i, a) in list.iter_mut().enumerate() {
                affine(format!("geo_in.{i}"), a, f);
            }
        }
        if let Some(list) = &mut self.geo_gd {
            for (i, a) in list.iter_mut().enumerate() {
                affine(format!("geo_gd.{i}"), a, f);
            }
        }
        if let Some(p) = &mut self.pos {
            f("pos".into(), p);
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            f(format!("block{b}.norm1.gain"), &mut block.norm1.gain);
            f(format!("block{b}.norm1.bias"), &mut block.norm1.bias);
            for (h, head) in block.heads.iter_mut().enumerate() {
                affine(format!("block{b}.head{h}.q"), &mut head.q, f);
                affine(format!("block{b}.head{h}.k"), &mut head.k, f);
                affine(format!("block{b}.head{h}.v"), &mut head.v, f);
            }
            for (s, score) in block.score.iter_mut().enumerate() {
                affine(format!("block{b}.score{s}.l1"), &mut score.l1, f);
                affine(format!("block{b}.score{s}.l2"), &mut score.l2, f);
            }
            affine(format!("block{b}.out"), &mut block.out, f);
            f(format!("block{b}.norm2.gain"), &mut block.norm2.gain);
            f(format!("block{b}.norm2.bias"), &mut block.norm2.bias);
            affine(format!("block{b}.mlp_in"), &mut block.mlp_in, f);
            affine(format!("block{b}.mlp_out"), &mut block.mlp_out, f);
        }
        affine("head".into(), &mut self.head, f);
    }

    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> ParamsG<M> {
        let affine = |a: &AffineG<L>, f: &mut dyn FnMut(&L) -> M| AffineG { w: f(&a.w), b: f(&a.b) };
        ParamsG {
            patch_embed: affine(&self.patch_embed, f),
            patch_embed_area: self.patch_embed_area.as_ref().map(|a| affine(a, f)),
            geo_in: self.geo_in.as_ref().map(|l| l.iter().map(|a| affine(a, f)).collect()),
            geo_gd: self.geo_gd.as_ref().map(|l| l.iter().map(|a| affine(a, f)).collect()),
            pos: self.pos.as_ref().map(|p| f(p)),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockG {
                    norm1: NormG { gain: f(&b.norm1.gain), bias: f(&b.norm1.bias) },
                    heads: b
                        .heads
                        .iter()
                        .map(|h| HeadG { q: affine(&h.q, f), k: affine(&h.k, f), v: affine(&h.v, f) })
                        .collect(),
                    score: b
                        .score
                        .iter()
                        .map(|s| ScoreG { l1: affine(&s.l1, f), l2: affine(&s.l2, f) })
                        .collect(),
                    out: affine(&b.out, f),
                    norm2: NormG { gain: f(&b.norm2.gain), bias: f(&b.norm2.bias) },
                    mlp_in: affine(&b.mlp_in, f),
                    mlp_out: affine(&b.mlp_out, f),
                })
                .collect(),
            head: affine(&self.head, f),
        }
    }

    /// Parameters as a name-keyed map (visitation order is stable).
    pub fn to_named(&self) -> Vec<(String, &L)> {
        let mut out = Vec::new();
        self.visit(&mut |name, l| out.push((name, l)));
        out
    }
}

// ── Initialization ──────────────────────────────────────────────────────

fn init_affine(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> AffineG<Tensor> {
    let s = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
    AffineG {
        w: Tensor::matrix(fan_in, fan_out, w).expect("affine weight"),
        b: Tensor::vector(vec![0.0; fan_out]),
    }
}

fn init_norm(d: usize) -> NormG<Tensor> {
    NormG { gain: Tensor::vector(vec![1.0; d]), bias: Tensor::vector(vec![0.0; d]) }
}

/// Deterministic parameter initialization: affine weights uniform with
/// scale `1/sqrt(fan_in)`, biases zero, layer norms identity. The same
/// seed reproduces bit-identical parameters.
pub fn init_params(config: &ModelConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let d_head = config.d_head();

    let geo_projs = |rng: &mut ChaCha8Rng| -> Vec<AffineG<Tensor>> {
        config.categories.iter().map(|c| init_affine(rng, c.n_vars, d_head)).collect()
    };

    let patch_embed = init_affine(&mut rng, config.patch_dim(), d);
    let (patch_embed_area, geo_in, geo_gd) = match config.variant {
        Variant::A => (
            Some(init_affine(&mut rng, config.patch_dim(), d)),
            Some(geo_projs(&mut rng)),
            Some(geo_projs(&mut rng)),
        ),
        Variant::G => (None, None, Some(geo_projs(&mut rng))),
        Variant::L | Variant::Vit => (None, None, None),
    };
    let pos = config.learned_pos.then(|| {
        let s = 1.0 / (d as f64).sqrt();
        let data: Vec<f64> = (0..config.n_patches() * d).map(|_| rng.gen_range(-s..s)).collect();
        Tensor::matrix(config.n_patches(), d, data).expect("pos table")
    });

    let blocks = (0..config.n_blocks)
        .map(|_| BlockG {
            norm1: init_norm(d),
            heads: (0..config.n_heads())
                .map(|_| HeadG {
                    q: init_affine(&mut rng, d, d_head),
                    k: init_affine(&mut rng, d, d_head),
                    v: init_affine(&mut rng, d, d_head),
                })
                .collect(),
            score: config
                .categories
                .iter()
                .map(|c| ScoreG {
                    l1: init_affine(&mut rng, c.n_vars, config.score_hidden),
                    l2: init_affine(&mut rng, config.score_hidden, 1),
                })
                .collect(),
            out: init_affine(&mut rng, d, d),
            norm2: init_norm(d),
            mlp_in: init_affine(&mut rng, d, config.mlp_dim),
            mlp_out: init_affine(&mut rng, config.mlp_dim, d),
        })
        .collect();
    let head = init_affine(&mut rng, d, config.n_outcomes);

    ParamsG { patch_embed, patch_embed_area, geo_in, geo_gd, pos, blocks, head }
}

// ── Samples ─────────────────────────────────────────────────────────────

/// A record reduced to model-ready form: images plus pre-aggregated
/// patch-geo matrices on the config's grid.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub local_image: Image,
    pub area_image: Option<Image>,
    pub local_geo: PatchGeoMatrix,
    pub area_geo: Option<PatchGeoMatrix>,
    pub targets: Vec<f64>,
}

/// Aggregates a record's geo layers onto the config's patch grid. The
/// area layers use the same token grid over their own (wider) extent.
pub fn prepare_sample(record: &Record, config: &ModelConfig) -> Result<Sample> {
    if record.local_image.width != config.image_size
        || record.local_image.height != config.image_size
    {
        return Err(Error::Config(format!(
            "record {:?}: image is {}x{} but the config expects {}x{}",
            record.id,
            record.local_image.width,
            record.local_image.height,
            config.image_size,
            config.image_size
        )));
    }
    let grid = PatchGrid::square(config.image_size, config.image_size, config.patch_size)?;
    let local_geo = aggregate(&record.local_geo, &grid)?;

    let area_geo = match &record.area_geo {
        Some(layers) => {
            let side = config.grid_side();
            let (w, h) = (layers.image_extent[0], layers.image_extent[1]);
            let patch = w / side as f64;
            if w != h || patch.fract() != 0.0 || (patch as usize) * side != w as usize {
                return Err(Error::Config(format!(
                    "record {:?}: area extent {w}x{h} cannot be tiled by a {side}x{side} grid",
                    record.id
                )));
            }
            let grid = PatchGrid::square(w as usize, h as usize, patch as usize)?;
            Some(aggregate(layers, &grid)?)
        }
        None => None,
    };

    Ok(Sample {
        id: record.id.clone(),
        local_image: record.local_image.clone(),
        area_image: record.area_image.clone(),
        local_geo,
        area_geo,
        targets: record.targets.clone(),
    })
}

pub fn prepare_samples(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<Sample>> {
    dataset.records.iter().map(|r| prepare_sample(r, config)).collect()
}

// ── Forward ─────────────────────────────────────────────────────────────

/// Non-overlapping patch flattening: `[n_patches x patch_size^2*3]` in
/// raster patch order, identical to the geo matrix patch order.
pub fn patchify(image: &Image, patch: usize) -> Result<Vec<f64>> {
    if image.width % patch != 0 || image.height % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} does not tile image {}x{}",
            image.width, image.height
        )));
    }
    let (rows, cols) = (image.height / patch, image.width / patch);
    let pdim = patch * patch * 3;
    let mut out = vec![0.0; rows * cols * pdim];
    for pr in 0..rows {
        for pc in 0..cols {
            let dst = (pr * cols + pc) * pdim;
            for py in 0..patch {
                for px in 0..patch {
                    let src = ((pr * patch + py) * image.width + pc * patch + px) * 3;
                    let d = dst + (py * patch + px) * 3;
                    out[d..d + 3].copy_from_slice(&image.pixels[src..src + 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2-D sinusoidal positional encoding: the sum of a row and a
/// column 1-D sin/cos encoding, `[rows*cols x d]`.
pub fn sinusoidal_pos(rows: usize, cols: usize, d: usize) -> Tensor {
    let pe1d = |pos: f64| -> Vec<f64> {
        let mut v = vec![0.0; d];
        for i in 0..d / 2 {
            let angle = pos / 10000f64.powf(2.0 * i as f64 / d as f64);
            v[2 * i] = angle.sin();
            v[2 * i + 1] = angle.cos();
        }
        v
    };
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        let per = pe1d(r as f64);
        for c in 0..cols {
            let pec = pe1d(c as f64);
            data.extend(per.iter().zip(&pec).map(|(a, b)| a + b));
        }
    }
    Tensor::matrix(rows * cols, d, data).expect("positional encoding")
}

/// Experiment-level switches for a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Keep per-layer attention matrices in the diagnostics.
    pub collect_attention: bool,
    /// Override the config's gate mode (test fixtures, explain demos).
    pub gates: Option<GateMode>,
    /// Zero all image inputs (the geo-only ablation setting).
    pub zero_image: bool,
    /// Keep only the named categories' geo values (others zeroed).
    pub restrict_categories: Option<Vec<String>>,
}

/// Per-forward observability, serializable for the explain tooling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub category_names: Vec<String>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `[layer][head]` resolved gate values.
    pub head_weights: Vec<Vec<f64>>,
    /// `[layer][head]` pre-gating attention, each flattened `[n x n]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<Vec<f64>>>>,
}

/// A forward pass left on its tape, ready for a loss head and backward.
pub struct TapedForward {
    pub tape: Tape,
    pub ids: ParamIds,
    pub input: TensorId,
    pub guidance: TensorId,
    pub prediction: TensorId,
    pub diagnostics: Diagnostics,
}

fn affine_ids(a: &AffineG<TensorId>) -> AffineIds {
    AffineIds { w: a.w, b: a.b }
}

fn block_ids(b: &BlockG<TensorId>) -> BlockIds {
    BlockIds {
        norm1: NormIds { gain: b.norm1.gain, bias: b.norm1.bias },
        attention: GuidedAttentionParams {
            heads: b
                .heads
                .iter()
                .map(|h| HeadIds {
                    query: affine_ids(&h.q),
                    key: affine_ids(&h.k),
                    value: affine_ids(&h.v),
                })
                .collect(),
            score: b
                .score
                .iter()
                .map(|s| ScoreNetIds { layer1: affine_ids(&s.l1), layer2: affine_ids(&s.l2) })
                .collect(),
            output: affine_ids(&b.out),
        },
        norm2: NormIds { gain: b.norm2.gain, bias: b.norm2.bias },
        mlp_in: affine_ids(&b.mlp_in),
        mlp_out: affine_ids(&b.mlp_out),
    }
}

fn patch_tokens(
    tape: &mut Tape,
    image: &Image,
    config: &ModelConfig,
    embed: &AffineG<TensorId>,
    zero_image: bool,
) -> Result<TensorId> {
    let data = if zero_image {
        vec![0.0; config.n_patches() * config.patch_dim()]
    } else {
        patchify(image, config.patch_size)?
    };
    let x = tape.constant(Tensor::matrix(config.n_patches(), config.patch_dim(), data)?);
    tape.linear(x, embed.w, embed.b)
}

fn geo_tokens(
    tape: &mut Tape,
    matrix: &PatchGeoMatrix,
    projs: &[AffineG<TensorId>],
) -> Result<TensorId> {
    let pairs: Vec<(TensorId, TensorId)> = projs.iter().map(|a| (a.w, a.b)).collect();
    embed_geo(tape, &matrix.scaled(GEO_EMBED_SCALE), &pairs)
}

/// Builds the input stream and the guidance packet for the config's
/// variant. Token counts of the two streams are equal by construction.
pub fn build_input_and_guidance(
    tape: &mut Tape,
    sample: &Sample,
    config: &ModelConfig,
    ids: &ParamIds,
    opts: &ForwardOptions,
) -> Result<(TensorId, GuidancePacket)> {
    let side = config.grid_side();
    let pos = match &ids.pos {
        Some(p) => *p,
        None => tape.constant(sinusoidal_pos(side, side, config.d_model)),
    };

    let restrict = |m: &PatchGeoMatrix| -> PatchGeoMatrix {
        match &opts.restrict_categories {
            Some(keep) => m.restricted_to(keep),
            None => m.clone(),
        }
    };

    match config.variant {
        Variant::A => {
            let (area_image, area_geo) = match (&sample.area_image, &sample.area_geo) {
                (Some(img), Some(geo)) => (img, geo),
                _ => {
                    return Err(Error::Ingest(format!(
                        "sample {:?}: variant A requires area image and area geo layers",
                        sample.id
                    )))
                }
            };
            let local_geo = restrict(&sample.local_geo);
            let area_geo = restrict(area_geo);

            let img = patch_tokens(tape, &sample.local_image, config, &ids.patch_embed, opts.zero_image)?;
            let geo = geo_tokens(tape, &local_geo, ids.geo_in.as_ref().expect("variant A geo_in"))?;
            let sum = tape.add(img, geo)?;
            let x_input = tape.add(sum, pos)?;

            let g_img = patch_tokens(
                tape,
                area_image,
                config,
                ids.patch_embed_area.as_ref().expect("variant A area embed"),
                opts.zero_image,
            )?;
            let g_geo = geo_tokens(tape, &area_geo, ids.geo_gd.as_ref().expect("variant A geo_gd"))?;
            let g_sum = tape.add(g_img, g_geo)?;
            let tokens = tape.add(g_sum, pos)?;

            Ok((x_input, GuidancePacket { tokens, raw_categories: area_geo.category_means() }))
        }
        Variant::G => {
            let local_geo = restrict(&sample.local_geo);
            let img = patch_tokens(tape, &sample.local_image, config, &ids.patch_embed, opts.zero_image)?;
            let x_input = tape.add(img, pos)?;
            let geo = geo_tokens(tape, &local_geo, ids.geo_gd.as_ref().expect("variant G geo_gd"))?;
            let tokens = tape.add(geo, pos)?;
            Ok((x_input, GuidancePacket { tokens, raw_categories: local_geo.category_means() }))
        }
        Variant::L | Variant::Vit => {
            let img = patch_tokens(tape, &sample.local_image, config, &ids.patch_embed, opts.zero_image)?;
            let x_input = tape.add(img, pos)?;
            let raw = config.categories.iter().map(|c| vec![0.0; c.n_vars]).collect();
            Ok((x_input, GuidancePacket { tokens: x_input, raw_categories: raw }))
        }
    }
}

/// Full forward pass on a fresh tape: embeddings, `n_blocks` guided
/// blocks, mean pooling, affine head.
pub fn forward_on_tape(
    sample: &Sample,
    config: &ModelConfig,
    params: &ModelParams,
    opts: &ForwardOptions,
) -> Result<TapedForward> {
    let mut tape = Tape::new();
    let ids = params.map(&mut |t: &Tensor| tape.param(t.clone()));
    let (input, packet) = build_input_and_guidance(&mut tape, sample, config, &ids, opts)?;
    let gates = opts.gates.clone().unwrap_or_else(|| config.gate_mode());

    let mut x = input;
    let mut head_weights = Vec::with_capacity(config.n_blocks);
    let mut attention_ids = Vec::with_capacity(config.n_blocks);
    for block in &ids.blocks {
        let (next, diag) = guided_block(&mut tape, x, &packet, &block_ids(block), &gates)?;
        x = next;
        head_weights.push(diag.head_weights);
        attention_ids.push(diag.attention);
    }

    let pooled = tape.mean_pool_rows(x)?;
    let prediction = tape.linear(pooled, ids.head.w, ids.head.b)?;

    let attention = opts.collect_attention.then(|| {
        attention_ids
            .iter()
            .map(|layer| layer.iter().map(|&p| tape.data(p).to_vec()).collect())
            .collect()
    });
    let diagnostics = Diagnostics {
        category_names: config.categories.iter().map(|c| c.name.clone()).collect(),
        grid_rows: config.grid_side(),
        grid_cols: config.grid_side(),
        head_weights,
        attention,
    };

    Ok(TapedForward { tape, ids, input, guidance: packet.tokens, prediction, diagnostics })
}

/// Convenience: predictions plus diagnostics, tape discarded.
pub fn forward(
    sample: &Sample,
    config: &ModelConfig,
    params: &ModelParams,
    opts: &ForwardOptions,
) -> Result<(Vec<f64>, Diagnostics)> {
    let tf = forward_on_tape(sample, config, params, opts)?;
    Ok((tf.tape.data(tf.prediction).to_vec(), tf.diagnostics))
}

/// Named gradients after a backward pass, in parameter order.
pub fn extract_grads(tf: &TapedForward) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    tf.ids.visit(&mut |name, &id| {
        out.insert(name, tf.tape.grad(id).expect("param gradient").to_vec());
    });
    out
}

/// Central-difference check of the MSE loss gradient for one named
/// parameter group, at the given coordinates. Verification utility used
/// by the test suites.
pub fn fd_check_param(
    sample: &Sample,
    config: &ModelConfig,
    params: &ModelParams,
    opts: &ForwardOptions,
    name: &str,
    coords: &[usize],
    h: f64,
) -> Result<f64> {
    let mut target_tensor = None;
    params.visit(&mut |n, t| {
        if n == name {
            target_tensor = Some(t.clone());
        }
    });
    let base =
        target_tensor.ok_or_else(|| Error::Usage(format!("unknown parameter group {name:?}")))?;

    fd_check_at(
        |tape: &mut Tape, xid| {
            // Rebuild the whole forward with this one parameter group
            // replaced by the tape leaf under test.
            let ids = params.map(&mut |t: &Tensor| tape.constant(t.clone()));
            let mut ids = ids;
            let mut found = false;
            ids.visit_mut(&mut |n, id| {
                if n == name {
                    *id = xid;
                    found = true;
                }
            });
            assert!(found);
            let (input, packet) = build_input_and_guidance(tape, sample, config, &ids, opts)?;
            let gates = opts.gates.clone().unwrap_or_else(|| config.gate_mode());
            let mut x = input;
            for block in &ids.blocks {
                let (next, _) = guided_block(tape, x, &packet, &block_ids(block), &gates)?;
                x = next;
            }
            let pooled = tape.mean_pool_rows(x)?;
            let pred = tape.linear(pooled, ids.head.w, ids.head.b)?;
            let target = tape.constant(Tensor::matrix(1, sample.targets.len(), sample.targets.clone())?);
            tape.mse(pred, target)
        },
        &base,
        h,
        coords,
    )
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Config plus named parameter arrays. JSON on disk; `f64` values survive
/// the round trip bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, SavedTensor>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ModelParams) -> Self {
        let mut map = BTreeMap::new();
        params.visit(&mut |name, t: &Tensor| {
            map.insert(name, SavedTensor { shape: t.shape().to_vec(), data: t.data().to_vec() });
        });
        Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, config: config.clone(), params: map }
    }

    pub fn into_params(&self) -> Result<ModelParams> {
        let mut params = init_params(&self.config);
        let mut missing = Vec::new();
        let mut used = 0usize;
        params.visit_mut(&mut |name, t: &mut Tensor| match self.params.get(&name) {
            Some(saved) => {
                *t = Tensor::new(saved.shape.clone(), saved.data.clone())
                    .expect("checkpoint tensor shape");
                used += 1;
            }
            None => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint missing parameters: {missing:?}")));
        }
        if used != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter arrays but the config expects {used}",
                self.params.len()
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("checkpoint serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format_version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut cfg = ckpt.config.clone();
        cfg.finalize()?;
        if cfg != ckpt.config {
            return Err(Error::Format("checkpoint config fails validation".into()));
        }
        Ok(ckpt)
    }
}
