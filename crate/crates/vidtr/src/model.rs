//! End-to-end model assembly: configuration and presets, the parameter
//! tree with canonical names, seeded initialization, the forward pass over
//! any factorization, and checkpoint serialization.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    axial_layer, joint_layer, separable_layer, spatial_only_layer, AttentionMaps, AttnBlockP,
    Factorization, FfnBlockP, MsaP, NormP, PoolApply,
};
use crate::error::{Error, Result};
use crate::patch::{self, PatchGeom};
use crate::pool::PoolKind;
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

/// Scale for positional tables and class tokens. Projection weights use
/// width-aware Xavier scales instead: a flat 0.02 is calibrated for
/// 768-wide stacks and starves narrow models, where each attention hop
/// would shrink token content by ~two orders of magnitude and leave the
/// class corner almost input-independent. The patch embedding uses std
/// 1/sqrt(patch width) so token magnitudes start near unit scale.
pub const INIT_STD: f64 = 0.02;

/// Xavier/Glorot std for a fan_in x fan_out projection.
fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Starting kernel for strided-conv temporal pooling: a smoothing average
/// of three adjacent rows.
pub const CONV_KERNEL_INIT: [f64; 3] = [0.25, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub factorization: Factorization,
    /// Frames per clip as seen by the model.
    pub clip_len: usize,
    /// Source-video frame stride the preset assumes; bookkeeping only.
    pub sample_rate: usize,
    pub channels: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub patch_size: usize,
    /// Frames per patch; 1 is square patches, 2 or 4 gives cubic patches.
    pub temporal_patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub pool: PoolKind,
    /// 0-based encoder layers whose temporal attention pools its rows.
    pub downsample_layers: Vec<usize>,
    /// Temporal body extent kept at each scheduled layer.
    pub downsample_taus: Vec<usize>,
    pub class_count: usize,
    pub precision: Precision,
}

pub const PRESET_NAMES: &[&str] = &[
    "toy",
    "vidtr-s",
    "vidtr-m",
    "vidtr-l",
    "c-vidtr-s",
    "c-vidtr-m",
];

const CONFIG_KEYS: &[&str] = &[
    "factorization",
    "clip_len",
    "sample_rate",
    "channels",
    "frame_w",
    "frame_h",
    "patch_size",
    "temporal_patch",
    "embed_dim",
    "depth",
    "heads",
    "mlp_hidden",
    "pool",
    "downsample_layers",
    "downsample_taus",
    "class_count",
    "precision",
];

fn parse_count(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_count(key, p.trim())).collect()
}

fn join_list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            factorization: Factorization::Separable,
            clip_len: 8,
            sample_rate: 1,
            channels: 1,
            frame_w: 32,
            frame_h: 32,
            patch_size: 8,
            temporal_patch: 1,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
            pool: PoolKind::None,
            downsample_layers: Vec::new(),
            downsample_taus: Vec::new(),
            class_count: 4,
            precision: Precision::Single,
        }
    }

    fn video_scale(clip_len: usize, sample_rate: usize) -> Self {
        ModelConfig {
            factorization: Factorization::Separable,
            clip_len,
            sample_rate,
            channels: 3,
            frame_w: 224,
            frame_h: 224,
            patch_size: 16,
            temporal_patch: 1,
            embed_dim: 768,
            depth: 12,
            heads: 8,
            mlp_hidden: 3072,
            pool: PoolKind::None,
            downsample_layers: Vec::new(),
            downsample_taus: Vec::new(),
            class_count: 400,
            precision: Precision::Single,
        }
    }

    pub fn vidtr_s() -> Self {
        Self::video_scale(8, 8)
    }

    pub fn vidtr_m() -> Self {
        Self::video_scale(16, 4)
    }

    pub fn vidtr_l() -> Self {
        Self::video_scale(32, 2)
    }

    pub fn c_vidtr_s() -> Self {
        let mut c = Self::vidtr_s();
        c.pool = PoolKind::TopKStd;
        c.downsample_layers = vec![1, 2, 4];
        c.downsample_taus = vec![6, 4, 2];
        c
    }

    pub fn c_vidtr_m() -> Self {
        let mut c = Self::vidtr_m();
        c.pool = PoolKind::TopKStd;
        c.downsample_layers = vec![1, 2, 4];
        c.downsample_taus = vec![8, 4, 2];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "vidtr-s" => Ok(Self::vidtr_s()),
            "vidtr-m" => Ok(Self::vidtr_m()),
            "vidtr-l" => Ok(Self::vidtr_l()),
            "c-vidtr-s" => Ok(Self::c_vidtr_s()),
            "c-vidtr-m" => Ok(Self::c_vidtr_m()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; known presets: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn geom(&self) -> PatchGeom {
        PatchGeom {
            channels: self.channels,
            frames: self.clip_len,
            width: self.frame_w,
            height: self.frame_h,
            patch_size: self.patch_size,
            temporal_patch: self.temporal_patch,
        }
    }

    /// Temporal grid extent before any pooling (frame blocks).
    pub fn frame_blocks(&self) -> usize {
        self.clip_len / self.temporal_patch
    }

    pub fn patches_per_frame(&self) -> usize {
        self.geom().patches_per_frame()
    }

    /// Body temporal extent entering each layer, schedule applied.
    pub fn incoming_extents(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth);
        let mut t = self.frame_blocks();
        for l in 0..self.depth {
            out.push(t);
            if let Some(pos) = self.downsample_layers.iter().position(|&x| x == l) {
                t = self.downsample_taus[pos];
            }
        }
        out
    }

    /// Body temporal extent a layer emits (tau if scheduled).
    pub fn outgoing_extents(&self) -> Vec<usize> {
        let mut out = self.incoming_extents();
        for (l, ext) in out.iter_mut().enumerate() {
            if let Some(pos) = self.downsample_layers.iter().position(|&x| x == l) {
                *ext = self.downsample_taus[pos];
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.geom().validate()?;
        if self.embed_dim == 0 || self.depth == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("embed_dim, depth and mlp_hidden must be positive".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let (layers, taus) = (&self.downsample_layers, &self.downsample_taus);
        if self.pool == PoolKind::None {
            if !layers.is_empty() || !taus.is_empty() {
                return Err(Error::Config(
                    "pool kind none requires an empty down-sample schedule".into(),
                ));
            }
            return Ok(());
        }
        if self.factorization != Factorization::Separable {
            return Err(Error::Config(format!(
                "temporal pooling applies only to the separable factorization, not {}",
                self.factorization.name()
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config(format!(
                "pool kind {} needs at least one scheduled layer",
                self.pool.name()
            )));
        }
        if layers.len() != taus.len() {
            return Err(Error::Config(format!(
                "schedule length mismatch: {} layers vs {} tau values",
                layers.len(),
                taus.len()
            )));
        }
        if !layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("downsample_layers must be strictly increasing".into()));
        }
        if *layers.last().unwrap() >= self.depth {
            return Err(Error::Config(format!(
                "downsample layer {} is out of range for depth {}",
                layers.last().unwrap(),
                self.depth
            )));
        }
        if !taus.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Config("downsample_taus must be strictly decreasing".into()));
        }
        let mut t_in = self.frame_blocks();
        for (&l, &tau) in layers.iter().zip(taus) {
            match self.pool {
                // tau equal to the incoming extent keeps every row
                // (identity selection); beyond it there is nothing to keep.
                PoolKind::TopKStd => {
                    if tau == 0 || tau > t_in {
                        return Err(Error::Config(format!(
                            "layer {l}: tau {tau} is outside 1..={t_in} (incoming temporal extent)"
                        )));
                    }
                }
                PoolKind::Avg | PoolKind::Conv1d => {
                    let want = t_in / 2 + t_in % 2;
                    if t_in < 2 || tau != want {
                        return Err(Error::Config(format!(
                            "layer {l}: stride-2 pooling of extent {t_in} yields tau {want}, not {tau}"
                        )));
                    }
                }
                PoolKind::None => unreachable!(),
            }
            t_in = tau;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for &key in CONFIG_KEYS {
            let value = match key {
                "factorization" => self.factorization.name().to_string(),
                "clip_len" => self.clip_len.to_string(),
                "sample_rate" => self.sample_rate.to_string(),
                "channels" => self.channels.to_string(),
                "frame_w" => self.frame_w.to_string(),
                "frame_h" => self.frame_h.to_string(),
                "patch_size" => self.patch_size.to_string(),
                "temporal_patch" => self.temporal_patch.to_string(),
                "embed_dim" => self.embed_dim.to_string(),
                "depth" => self.depth.to_string(),
                "heads" => self.heads.to_string(),
                "mlp_hidden" => self.mlp_hidden.to_string(),
                "pool" => self.pool.name().to_string(),
                "downsample_layers" => join_list(&self.downsample_layers),
                "downsample_taus" => join_list(&self.downsample_taus),
                "class_count" => self.class_count.to_string(),
                "precision" => self.precision.name().to_string(),
                _ => unreachable!(),
            };
            s.push_str(key);
            s.push('=');
            s.push_str(&value);
            s.push('\n');
        }
        s
    }

    /// Applies one key=value pair. Unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "factorization" => self.factorization = Factorization::parse(value)?,
            "clip_len" => self.clip_len = parse_count(key, value)?,
            "sample_rate" => self.sample_rate = parse_count(key, value)?,
            "channels" => self.channels = parse_count(key, value)?,
            "frame_w" => self.frame_w = parse_count(key, value)?,
            "frame_h" => self.frame_h = parse_count(key, value)?,
            "patch_size" => self.patch_size = parse_count(key, value)?,
            "temporal_patch" => self.temporal_patch = parse_count(key, value)?,
            "embed_dim" => self.embed_dim = parse_count(key, value)?,
            "depth" => self.depth = parse_count(key, value)?,
            "heads" => self.heads = parse_count(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_count(key, value)?,
            "pool" => self.pool = PoolKind::parse(value)?,
            "downsample_layers" => self.downsample_layers = parse_list(key, value)?,
            "downsample_taus" => self.downsample_taus = parse_list(key, value)?,
            "class_count" => self.class_count = parse_count(key, value)?,
            "precision" => self.precision = Precision::parse(value)?,
            other => return Err(Error::Config(format!("unknown model config key `{other}`"))),
        }
        Ok(())
    }

    pub fn is_model_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key)
    }

    /// Parses a complete key=value block (as written by `to_kv`). Every
    /// key must appear exactly once.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut seen = vec![false; CONFIG_KEYS.len()];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let idx = CONFIG_KEYS
                .iter()
                .position(|&k| k == key)
                .ok_or_else(|| Error::Config(format!("unknown model config key `{key}`")))?;
            if seen[idx] {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            seen[idx] = true;
            cfg.apply_kv(key, value)?;
        }
        for (i, s) in seen.iter().enumerate() {
            if !s {
                return Err(Error::Config(format!("missing key `{}`", CONFIG_KEYS[i])));
            }
        }
        Ok(cfg)
    }
}

// ---- parameter tree ----

#[derive(Clone, Debug)]
pub enum EmbedP<T> {
    Flat { w: T, pos: T, cls: T },
    Grid {
        w: T,
        pos_time: T,
        pos_space: T,
        cls_corner: T,
        cls_temporal: T,
        cls_spatial: T,
    },
    AxialGrid {
        w: T,
        pos_time: T,
        pos_w: T,
        pos_h: T,
        cls_time: T,
        cls_w: T,
        cls_h: T,
    },
    PerFrame { w: T, pos: T, cls: T },
}

#[derive(Clone, Debug)]
pub enum LayerP<T> {
    Joint { attn: AttnBlockP<T>, ffn: FfnBlockP<T> },
    Separable {
        attn_t: AttnBlockP<T>,
        attn_s: AttnBlockP<T>,
        ffn: FfnBlockP<T>,
        pool_kernel: Option<T>,
    },
    Axial {
        attn_t: AttnBlockP<T>,
        attn_w: AttnBlockP<T>,
        attn_h: AttnBlockP<T>,
        ffn: FfnBlockP<T>,
    },
    SpatialOnly { attn: AttnBlockP<T>, ffn: FfnBlockP<T> },
}

#[derive(Clone, Debug)]
pub struct ModelP<T> {
    pub embed: EmbedP<T>,
    pub layers: Vec<LayerP<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> EmbedP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EmbedP<U> {
        match self {
            EmbedP::Flat { w, pos, cls } => EmbedP::Flat { w: f(w), pos: f(pos), cls: f(cls) },
            EmbedP::Grid { w, pos_time, pos_space, cls_corner, cls_temporal, cls_spatial } => {
                EmbedP::Grid {
                    w: f(w),
                    pos_time: f(pos_time),
                    pos_space: f(pos_space),
                    cls_corner: f(cls_corner),
                    cls_temporal: f(cls_temporal),
                    cls_spatial: f(cls_spatial),
                }
            }
            EmbedP::AxialGrid { w, pos_time, pos_w, pos_h, cls_time, cls_w, cls_h } => {
                EmbedP::AxialGrid {
                    w: f(w),
                    pos_time: f(pos_time),
                    pos_w: f(pos_w),
                    pos_h: f(pos_h),
                    cls_time: f(cls_time),
                    cls_w: f(cls_w),
                    cls_h: f(cls_h),
                }
            }
            EmbedP::PerFrame { w, pos, cls } => {
                EmbedP::PerFrame { w: f(w), pos: f(pos), cls: f(cls) }
            }
        }
    }
}

impl<T> LayerP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerP<U> {
        match self {
            LayerP::Joint { attn, ffn } => LayerP::Joint { attn: attn.map(f), ffn: ffn.map(f) },
            LayerP::Separable { attn_t, attn_s, ffn, pool_kernel } => LayerP::Separable {
                attn_t: attn_t.map(f),
                attn_s: attn_s.map(f),
                ffn: ffn.map(f),
                pool_kernel: pool_kernel.as_ref().map(&mut *f),
            },
            LayerP::Axial { attn_t, attn_w, attn_h, ffn } => LayerP::Axial {
                attn_t: attn_t.map(f),
                attn_w: attn_w.map(f),
                attn_h: attn_h.map(f),
                ffn: ffn.map(f),
            },
            LayerP::SpatialOnly { attn, ffn } => {
                LayerP::SpatialOnly { attn: attn.map(f), ffn: ffn.map(f) }
            }
        }
    }
}

impl<T> ModelP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelP<U> {
        ModelP {
            embed: self.embed.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }
}

/// How a parameter starts out.
#[derive(Clone, Copy, Debug)]
enum Draw {
    Normal(f64),
    Zero,
    One,
    ConvKernel,
}

/// Builds the parameter tree for a config, asking `f` for every tensor in
/// canonical order. The one construction path keeps names, shapes, draw
/// specs, checkpoint order and gradient order in lockstep.
#[allow(clippy::type_complexity)]
fn construct<T>(
    config: &ModelConfig,
    f: &mut impl FnMut(&str, Vec<usize>, Draw) -> Result<T>,
) -> Result<ModelP<T>> {
    let geom = config.geom();
    let c = config.embed_dim;
    let pw = geom.patch_width();
    let t = config.frame_blocks();
    let p = geom.patches_per_frame();
    let embed_std = 1.0 / (pw as f64).sqrt();

    let msa = |f: &mut dyn FnMut(&str, Vec<usize>, Draw) -> Result<T>,
               prefix: &str|
     -> Result<MsaP<T>> {
        Ok(MsaP {
            wq: f(&format!("{prefix}.wq"), vec![c, c], Draw::Normal(xavier(c, c)))?,
            bq: f(&format!("{prefix}.bq"), vec![c], Draw::Zero)?,
            wk: f(&format!("{prefix}.wk"), vec![c, c], Draw::Normal(xavier(c, c)))?,
            bk: f(&format!("{prefix}.bk"), vec![c], Draw::Zero)?,
            wv: f(&format!("{prefix}.wv"), vec![c, c], Draw::Normal(xavier(c, c)))?,
            bv: f(&format!("{prefix}.bv"), vec![c], Draw::Zero)?,
            wo: f(&format!("{prefix}.wo"), vec![c, c], Draw::Normal(xavier(c, c)))?,
            bo: f(&format!("{prefix}.bo"), vec![c], Draw::Zero)?,
        })
    };
    let norm = |f: &mut dyn FnMut(&str, Vec<usize>, Draw) -> Result<T>,
                prefix: &str|
     -> Result<NormP<T>> {
        Ok(NormP {
            gamma: f(&format!("{prefix}.gamma"), vec![c], Draw::One)?,
            beta: f(&format!("{prefix}.beta"), vec![c], Draw::Zero)?,
        })
    };
    let attn_block = |f: &mut dyn FnMut(&str, Vec<usize>, Draw) -> Result<T>,
                      prefix: &str|
     -> Result<AttnBlockP<T>> {
        Ok(AttnBlockP {
            msa: msa(f, prefix)?,
            pre: norm(f, &format!("{prefix}.norm_pre"))?,
            post: norm(f, &format!("{prefix}.norm_post"))?,
        })
    };
    let ffn_block = |f: &mut dyn FnMut(&str, Vec<usize>, Draw) -> Result<T>,
                     prefix: &str|
     -> Result<FfnBlockP<T>> {
        Ok(FfnBlockP {
            w1: f(
                &format!("{prefix}.w1"),
                vec![c, config.mlp_hidden],
                Draw::Normal(xavier(c, config.mlp_hidden)),
            )?,
            b1: f(&format!("{prefix}.b1"), vec![config.mlp_hidden], Draw::Zero)?,
            w2: f(
                &format!("{prefix}.w2"),
                vec![config.mlp_hidden, c],
                Draw::Normal(xavier(config.mlp_hidden, c)),
            )?,
            b2: f(&format!("{prefix}.b2"), vec![c], Draw::Zero)?,
            pre: norm(f, &format!("{prefix}.norm_pre"))?,
            post: norm(f, &format!("{prefix}.norm_post"))?,
        })
    };

    let embed = match config.factorization {
        Factorization::Joint => EmbedP::Flat {
            w: f("embed.w", vec![pw, c], Draw::Normal(embed_std))?,
            pos: f("pos.flat", vec![t * p + 1, c], Draw::Normal(INIT_STD))?,
            cls: f("cls.token", vec![c], Draw::Normal(INIT_STD))?,
        },
        Factorization::Separable => EmbedP::Grid {
            w: f("embed.w", vec![pw, c], Draw::Normal(embed_std))?,
            pos_time: f("pos.time", vec![t + 1, c], Draw::Normal(INIT_STD))?,
            pos_space: f("pos.space", vec![p + 1, c], Draw::Normal(INIT_STD))?,
            cls_corner: f("cls.corner", vec![c], Draw::Normal(INIT_STD))?,
            cls_temporal: f("cls.temporal", vec![c], Draw::Normal(INIT_STD))?,
            cls_spatial: f("cls.spatial", vec![c], Draw::Normal(INIT_STD))?,
        },
        Factorization::Axial => EmbedP::AxialGrid {
            w: f("embed.w", vec![pw, c], Draw::Normal(embed_std))?,
            pos_time: f("pos.time", vec![t + 1, c], Draw::Normal(INIT_STD))?,
            pos_w: f("pos.w", vec![geom.grid_w() + 1, c], Draw::Normal(INIT_STD))?,
            pos_h: f("pos.h", vec![geom.grid_h() + 1, c], Draw::Normal(INIT_STD))?,
            cls_time: f("cls.time", vec![c], Draw::Normal(INIT_STD))?,
            cls_w: f("cls.w", vec![c], Draw::Normal(INIT_STD))?,
            cls_h: f("cls.h", vec![c], Draw::Normal(INIT_STD))?,
        },
        Factorization::SpatialOnly => EmbedP::PerFrame {
            w: f("embed.w", vec![pw, c], Draw::Normal(embed_std))?,
            pos: f("pos.space", vec![p + 1, c], Draw::Normal(INIT_STD))?,
            cls: f("cls.token", vec![c], Draw::Normal(INIT_STD))?,
        },
    };

    let mut layers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let pfx = format!("layers.{l}");
        let layer = match config.factorization {
            Factorization::Joint => LayerP::Joint {
                attn: attn_block(f, &format!("{pfx}.attn"))?,
                ffn: ffn_block(f, &format!("{pfx}.ffn"))?,
            },
            Factorization::Separable => {
                let scheduled = config.downsample_layers.contains(&l);
                LayerP::Separable {
                    attn_t: attn_block(f, &format!("{pfx}.attn_t"))?,
                    attn_s: attn_block(f, &format!("{pfx}.attn_s"))?,
                    ffn: ffn_block(f, &format!("{pfx}.ffn"))?,
                    pool_kernel: if scheduled && config.pool == PoolKind::Conv1d {
                        Some(f(&format!("{pfx}.pool.kernel"), vec![3], Draw::ConvKernel)?)
                    } else {
                        None
                    },
                }
            }
            Factorization::Axial => LayerP::Axial {
                attn_t: attn_block(f, &format!("{pfx}.attn_t"))?,
                attn_w: attn_block(f, &format!("{pfx}.attn_w"))?,
                attn_h: attn_block(f, &format!("{pfx}.attn_h"))?,
                ffn: ffn_block(f, &format!("{pfx}.ffn"))?,
            },
            Factorization::SpatialOnly => LayerP::SpatialOnly {
                attn: attn_block(f, &format!("{pfx}.attn"))?,
                ffn: ffn_block(f, &format!("{pfx}.ffn"))?,
            },
        };
        layers.push(layer);
    }

    Ok(ModelP {
        embed,
        layers,
        head_w: f(
            "head.w",
            vec![c, config.class_count],
            Draw::Normal(xavier(c, config.class_count)),
        )?,
        head_b: f("head.b", vec![config.class_count], Draw::Zero)?,
    })
}

/// One standard normal draw (Box-Muller).
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Forward-pass products beyond the logits.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// One entry per encoder layer.
    pub attention: Vec<AttentionMaps>,
    /// Final token structure just before the head.
    pub tokens: Tensor,
}

pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    tree: ModelP<usize>,
}

const MAGIC: &[u8; 6] = b"VIDTR1";

impl Model {
    /// Deterministic seeded initialization.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(config, |shape, draw, precision| {
            let n: usize = shape.iter().product();
            let mut data = match draw {
                Draw::Normal(std) => (0..n).map(|_| normal_draw(&mut rng) * std).collect(),
                Draw::Zero => vec![0.0; n],
                Draw::One => vec![1.0; n],
                Draw::ConvKernel => CONV_KERNEL_INIT.to_vec(),
            };
            precision.round_slice(&mut data);
            Tensor::new(shape, data)
        })
    }

    /// All-zero parameters (norm gains included); a shape scaffold.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        Self::assemble(config, |shape, _, _| Ok(Tensor::zeros(&shape)))
    }

    fn assemble(
        config: ModelConfig,
        mut make: impl FnMut(Vec<usize>, Draw, Precision) -> Result<Tensor>,
    ) -> Result<Model> {
        let mut names = Vec::new();
        let mut params = Vec::new();
        let precision = config.precision;
        let tree = construct(&config, &mut |name, shape, draw| {
            names.push(name.to_string());
            params.push(make(shape, draw, precision)?);
            Ok(params.len() - 1)
        })?;
        Ok(Model { config, names, params, tree })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.params.iter())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Puts every parameter on a tape, in canonical order, so tape gradient
    /// slots line up with `params`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ModelP<Var> {
        self.tree
            .map(&mut |&i| tape.leaf(self.params[i].clone(), requires_grad))
    }

    /// Like `register`, but also hands back the vars indexed like `params`,
    /// which is what an optimizer wants.
    pub fn register_flat(&self, tape: &mut Tape, requires_grad: bool) -> (ModelP<Var>, Vec<Var>) {
        let mut flat: Vec<Option<Var>> = vec![None; self.params.len()];
        let tree = self.tree.map(&mut |&i| {
            let v = tape.leaf(self.params[i].clone(), requires_grad);
            flat[i] = Some(v);
            v
        });
        (tree, flat.into_iter().map(|v| v.expect("every param registered")).collect())
    }

    /// Rebuilds the parameter tree over caller-owned vars ordered like
    /// `params`; the hook for gradient checks that create their own leaves.
    pub fn tree_with(&self, vars: &[Var]) -> ModelP<Var> {
        self.tree.map(&mut |&i| vars[i])
    }

    /// Full forward pass on a fresh tape; no gradients retained.
    pub fn forward(&self, clip: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new(self.config.precision);
        let vars = self.register(&mut tape, false);
        let (logits, attention, tokens) = self.forward_on(&mut tape, &vars, clip)?;
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            attention,
            tokens: tape.value(tokens).clone(),
        })
    }

    /// Forward pass on a caller-owned tape, for training and grad checks.
    /// Returns (logits, per-layer attention, final pre-head tokens).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ModelP<Var>,
        clip: &Tensor,
    ) -> Result<(Var, Vec<AttentionMaps>, Var)> {
        let geom = self.config.geom();
        let patches = patch::patchify(clip, &geom)?;
        let pv = tape.constant(patches);
        let heads = self.config.heads;
        let mut maps = Vec::with_capacity(self.config.depth);

        let tokens = match (&vars.embed, self.config.factorization) {
            (EmbedP::Flat { w, pos, cls }, Factorization::Joint) => {
                let mut x = patch::embed_flat(tape, pv, *w, *pos, *cls)?;
                for layer in &vars.layers {
                    let LayerP::Joint { attn, ffn } = layer else {
                        unreachable!("layer kind always matches the factorization")
                    };
                    let (y, m) = joint_layer(tape, x, attn, ffn, heads)?;
                    maps.push(m);
                    x = y;
                }
                x
            }
            (
                EmbedP::Grid { w, pos_time, pos_space, cls_corner, cls_temporal, cls_spatial },
                Factorization::Separable,
            ) => {
                let mut grid = patch::embed_grid(
                    tape,
                    pv,
                    self.config.frame_blocks(),
                    geom.patches_per_frame(),
                    *w,
                    *pos_time,
                    *pos_space,
                    *cls_corner,
                    *cls_temporal,
                    *cls_spatial,
                )?;
                for (l, layer) in vars.layers.iter().enumerate() {
                    let LayerP::Separable { attn_t, attn_s, ffn, pool_kernel } = layer else {
                        unreachable!("layer kind always matches the factorization")
                    };
                    let pool_apply = self.pool_apply_at(l, pool_kernel.as_ref());
                    let (y, m) = separable_layer(tape, grid, attn_t, attn_s, ffn, heads, &pool_apply)?;
                    maps.push(m);
                    grid = y;
                }
                grid
            }
            (
                EmbedP::AxialGrid { w, pos_time, pos_w, pos_h, cls_time, cls_w, cls_h },
                Factorization::Axial,
            ) => {
                let mut grid = patch::embed_axial(
                    tape,
                    pv,
                    self.config.frame_blocks(),
                    geom.grid_w(),
                    geom.grid_h(),
                    *w,
                    *pos_time,
                    *pos_w,
                    *pos_h,
                    *cls_time,
                    *cls_w,
                    *cls_h,
                )?;
                for layer in &vars.layers {
                    let LayerP::Axial { attn_t, attn_w, attn_h, ffn } = layer else {
                        unreachable!("layer kind always matches the factorization")
                    };
                    let (y, m) = axial_layer(tape, grid, attn_t, attn_w, attn_h, ffn, heads)?;
                    maps.push(m);
                    grid = y;
                }
                grid
            }
            (EmbedP::PerFrame { w, pos, cls }, Factorization::SpatialOnly) => {
                let mut frames = patch::embed_frames(
                    tape,
                    pv,
                    self.config.frame_blocks(),
                    geom.patches_per_frame(),
                    *w,
                    *pos,
                    *cls,
                )?;
                for layer in &vars.layers {
                    let LayerP::SpatialOnly { attn, ffn } = layer else {
                        unreachable!("layer kind always matches the factorization")
                    };
                    let (ys, m) = spatial_only_layer(tape, &frames, attn, ffn, heads)?;
                    maps.push(m);
                    frames = ys;
                }
                tape.stack(&frames, 0)?
            }
            _ => unreachable!("embed kind always matches the factorization"),
        };

        let feat = Self::head_feature(tape, tokens, self.config.factorization)?;
        let logits = tape.linear(feat, vars.head_w, Some(vars.head_b))?;
        let logits = tape.reshape(logits, &[self.config.class_count])?;
        Ok((logits, maps, tokens))
    }

    /// Cross-entropy training loss for one labelled clip.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        vars: &ModelP<Var>,
        clip: &Tensor,
        label: usize,
    ) -> Result<(Var, Var)> {
        let (logits, _, _) = self.forward_on(tape, vars, clip)?;
        let loss = tape.cross_entropy(logits, label)?;
        Ok((loss, logits))
    }

    fn pool_apply_at(&self, layer: usize, kernel: Option<&Var>) -> PoolApply {
        match self.config.downsample_layers.iter().position(|&x| x == layer) {
            None => PoolApply::None,
            Some(pos) => match self.config.pool {
                PoolKind::None => PoolApply::None,
                PoolKind::TopKStd => PoolApply::TopK { tau: self.config.downsample_taus[pos] },
                PoolKind::Avg => PoolApply::Avg,
                PoolKind::Conv1d => PoolApply::Conv {
                    kernel: *kernel.expect("scheduled conv layer carries a kernel"),
                },
            },
        }
    }

    /// The classification feature read from the final token structure: the
    /// shared corner token for grid kinds, the class token for flat, and
    /// the across-frame mean of class tokens for spatial-only.
    fn head_feature(tape: &mut Tape, tokens: Var, kind: Factorization) -> Result<Var> {
        let feat = match kind {
            Factorization::Joint => tape.select(tokens, 0, 0)?,
            Factorization::Separable => {
                let row = tape.select(tokens, 0, 0)?;
                tape.select(row, 0, 0)?
            }
            Factorization::Axial => {
                let a = tape.select(tokens, 0, 0)?;
                let b = tape.select(a, 0, 0)?;
                tape.select(b, 0, 0)?
            }
            Factorization::SpatialOnly => {
                let cls = tape.select(tokens, 1, 0)?; // frames x C
                tape.mean_rows(cls)?
            }
        };
        let c = tape.shape(feat)[0];
        tape.reshape(feat, &[1, c])
    }

    /// Recomputes logits from a pre-head token tensor, exactly as the
    /// forward pass would.
    pub fn head_from_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(self.config.precision);
        let tv = tape.constant(tokens.clone());
        let w = tape.constant(self.params[self.tree.head_w].clone());
        let b = tape.constant(self.params[self.tree.head_b].clone());
        let feat = Self::head_feature(&mut tape, tv, self.config.factorization)?;
        let logits = tape.linear(feat, w, Some(b))?;
        let logits = tape.reshape(logits, &[self.config.class_count])?;
        Ok(tape.value(logits).clone())
    }

    // ---- checkpointing ----

    /// Serialized form: magic, length-prefixed config text, tensor count,
    /// then per tensor a length-prefixed name, rank, extents and raw
    /// little-endian f32 data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config_text = self.config.to_kv();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.named_params() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::CorruptHeader(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let config_len = cur.u32("config length")? as usize;
        let config_bytes = cur.take(config_len, "config block")?;
        let config_text = std::str::from_utf8(config_bytes)
            .map_err(|_| Error::CorruptHeader("config block is not UTF-8".into()))?;
        let config = match ModelConfig::from_kv(config_text) {
            Ok(c) => c,
            Err(e) => return Err(Error::CheckpointMismatch(e.to_string())),
        };
        if let Err(e) = config.validate() {
            return Err(Error::CheckpointMismatch(e.to_string()));
        }

        let mut model = Model::zeros(config)?;
        let count = cur.u32("tensor count")? as usize;
        if count != model.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "file holds {count} tensors, config implies {}",
                model.params.len()
            )));
        }
        for i in 0..count {
            let expected_name = model.names[i].clone();
            let name_len = cur.u32(&expected_name)? as usize;
            let name_bytes = cur.take(name_len, &expected_name)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::CorruptHeader(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            if name != expected_name {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {i} is `{name}`, expected `{expected_name}`"
                )));
            }
            let rank = cur.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32(&name)? as usize);
            }
            let expected_shape = model.params[i].shape().to_vec();
            if shape != expected_shape {
                return Err(Error::CheckpointShape {
                    name,
                    found: shape,
                    expected: expected_shape,
                });
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(4 * n, &name)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            model.params[i] = Tensor::new(shape, data)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { name: what.to_string() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
