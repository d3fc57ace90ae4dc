//! Encoder layers for the four token factorizations: joint (one sequence
//! over all tokens), separable (temporal then spatial attention over a
//! token grid), axial (one attention per grid axis) and spatial-only
//! (per-frame attention, no temporal mixing).
//!
//! Every sublayer is pre-norm -> mix -> residual -> post-norm. Temporal
//! attention optionally pools its affinity rows, shrinking the temporal
//! extent mid-layer; the residual path is reduced by the same operator so
//! shapes stay conformable.

use crate::error::{Error, Result};
use crate::pool::{self, RENORM_FLOOR};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factorization {
    Joint,
    Separable,
    Axial,
    SpatialOnly,
}

impl Factorization {
    pub fn name(self) -> &'static str {
        match self {
            Factorization::Joint => "joint",
            Factorization::Separable => "separable",
            Factorization::Axial => "axial",
            Factorization::SpatialOnly => "spatial_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Factorization::Joint),
            "separable" => Ok(Factorization::Separable),
            "axial" => Ok(Factorization::Axial),
            "spatial_only" => Ok(Factorization::SpatialOnly),
            other => Err(Error::Config(format!("unknown factorization `{other}`"))),
        }
    }
}

// ---- parameter shapes, generic over storage (Tensor) or tape handles (Var) ----

#[derive(Clone, Debug)]
pub struct MsaP<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Clone, Debug)]
pub struct NormP<T> {
    pub gamma: T,
    pub beta: T,
}

/// Attention sublayer parameters: projections plus its two norms.
#[derive(Clone, Debug)]
pub struct AttnBlockP<T> {
    pub msa: MsaP<T>,
    pub pre: NormP<T>,
    pub post: NormP<T>,
}

/// Feed-forward sublayer parameters: two dense maps plus its two norms.
#[derive(Clone, Debug)]
pub struct FfnBlockP<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub pre: NormP<T>,
    pub post: NormP<T>,
}

impl<T> MsaP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MsaP<U> {
        MsaP {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.bq"), &self.bq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.bk"), &self.bk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.bv"), &self.bv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.bo"), &self.bo);
    }
}

impl<T> NormP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormP<U> {
        NormP {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
}

impl<T> AttnBlockP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnBlockP<U> {
        AttnBlockP {
            msa: self.msa.map(f),
            pre: self.pre.map(f),
            post: self.post.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.msa.visit(prefix, f);
        self.pre.visit(&format!("{prefix}.norm_pre"), f);
        self.post.visit(&format!("{prefix}.norm_post"), f);
    }
}

impl<T> FfnBlockP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnBlockP<U> {
        FfnBlockP {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            pre: self.pre.map(f),
            post: self.post.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        self.pre.visit(&format!("{prefix}.norm_pre"), f);
        self.post.visit(&format!("{prefix}.norm_post"), f);
    }
}

/// Row pooling applied inside temporal attention, if any.
#[derive(Clone, Copy)]
pub enum PoolApply {
    None,
    /// Keep the class row plus the tau highest-sigma rows. `tau` equal to
    /// the body row count keeps every row in order (identity selection).
    TopK { tau: usize },
    Avg,
    Conv { kernel: Var },
}

/// Post-softmax affinities captured per layer, detached from the tape.
#[derive(Clone, Debug)]
pub enum AttentionMaps {
    /// heads x L x L.
    Joint { affinity: Tensor },
    /// temporal: heads x (P+1) x (tau+1) x (T+1), spatial: heads x
    /// (tau+1) x (P+1) x (P+1). `kept` lists surviving temporal rows per
    /// spatial index when topK pooling ran.
    Separable {
        temporal: Tensor,
        spatial: Tensor,
        kept: Option<Vec<Vec<usize>>>,
    },
    /// One tensor per axis; same layout as `Separable` per axis pair.
    Axial { time: Tensor, w: Tensor, h: Tensor },
    /// heads x T x (P+1) x (P+1).
    PerFrame { affinity: Tensor },
}

impl AttentionMaps {
    /// Flat iterator over every affinity matrix held, for stochasticity
    /// checks: yields (rows, cols, data-slice) triples.
    pub fn affinity_rows(&self) -> Vec<&Tensor> {
        match self {
            AttentionMaps::Joint { affinity } | AttentionMaps::PerFrame { affinity } => {
                vec![affinity]
            }
            AttentionMaps::Separable { temporal, spatial, .. } => vec![temporal, spatial],
            AttentionMaps::Axial { time, w, h } => vec![time, w, h],
        }
    }
}

fn check_heads(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "head count {heads} must divide embed width {c}"
        )));
    }
    Ok(c / heads)
}

/// Multi-head attention over one sequence. Returns the projected output,
/// the per-head pooled affinities and, for topK pooling, the kept rows.
/// topK selection is computed once from the head-averaged affinity and the
/// same rows are gathered from every head, so heads stay row-aligned.
fn msa_sequence(
    tape: &mut Tape,
    x: Var,
    p: &MsaP<Var>,
    heads: usize,
    pool_apply: &PoolApply,
) -> Result<(Var, Vec<Tensor>, Option<Vec<usize>>)> {
    let shape = tape.shape(x).to_vec();
    let (l, c) = (shape[0], shape[1]);
    let dh = check_heads(c, heads)?;
    let q = tape.linear(x, p.wq, Some(p.bq))?;
    let k = tape.linear(x, p.wk, Some(p.bk))?;
    let v = tape.linear(x, p.wv, Some(p.bv))?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        attns.push(tape.softmax_rows(scaled)?);
    }

    // For topK, selection comes from the head average so every head keeps
    // the same temporal rows.
    let kept = match pool_apply {
        PoolApply::TopK { tau } => {
            let mut avg = vec![0.0; l * l];
            for &a in &attns {
                for (o, &v) in avg.iter_mut().zip(tape.value(a).data()) {
                    *o += v;
                }
            }
            for o in avg.iter_mut() {
                *o /= heads as f64;
            }
            let avg = Tensor::new(vec![l, l], avg)?;
            Some(pool::topk_selection(&avg, *tau)?)
        }
        _ => None,
    };

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_maps = Vec::with_capacity(heads);
    for (h, &attn) in attns.iter().enumerate() {
        let pooled = match pool_apply {
            PoolApply::None => attn,
            PoolApply::TopK { .. } => tape.index_rows(attn, kept.as_ref().unwrap())?,
            PoolApply::Avg => tape.avg_pool_rows(attn)?,
            PoolApply::Conv { kernel } => {
                let conv = tape.conv_rows(attn, *kernel)?;
                tape.clamp_renorm_rows(conv, RENORM_FLOOR)?
            }
        };
        head_maps.push(tape.value(pooled).clone());
        let vh = tape.slice_cols(v, h * dh, dh)?;
        head_outs.push(tape.matmul(pooled, vh)?);
        let _ = h;
    }
    let merged = tape.concat(&head_outs, 1)?;
    let out = tape.linear(merged, p.wo, Some(p.bo))?;
    Ok((out, head_maps, kept))
}

/// Residual path under pooling: the same row reduction the affinity saw,
/// minus the stochastic renormalization (token rows are not simplexes).
fn pool_residual(tape: &mut Tape, x: Var, pool_apply: &PoolApply, kept: Option<&Vec<usize>>) -> Result<Var> {
    match pool_apply {
        PoolApply::None => Ok(x),
        PoolApply::TopK { .. } => tape.index_rows(x, kept.unwrap()),
        PoolApply::Avg => tape.avg_pool_rows(x),
        PoolApply::Conv { kernel } => tape.conv_rows(x, *kernel),
    }
}

/// Pre-norm -> MSA -> (pooled) residual -> post-norm over one sequence.
fn attn_sublayer(
    tape: &mut Tape,
    x: Var,
    block: &AttnBlockP<Var>,
    heads: usize,
    pool_apply: &PoolApply,
) -> Result<(Var, Vec<Tensor>, Option<Vec<usize>>)> {
    let pre = tape.layer_norm(x, block.pre.gamma, block.pre.beta, LAYER_NORM_EPS)?;
    let (mixed, maps, kept) = msa_sequence(tape, pre, &block.msa, heads, pool_apply)?;
    let resid = pool_residual(tape, x, pool_apply, kept.as_ref())?;
    let summed = tape.add(resid, mixed)?;
    let out = tape.layer_norm(summed, block.post.gamma, block.post.beta, LAYER_NORM_EPS)?;
    Ok((out, maps, kept))
}

/// Pre-norm -> dense -> GELU -> dense -> residual -> post-norm, any rank.
fn ffn_sublayer(tape: &mut Tape, x: Var, ffn: &FfnBlockP<Var>) -> Result<Var> {
    let pre = tape.layer_norm(x, ffn.pre.gamma, ffn.pre.beta, LAYER_NORM_EPS)?;
    let h = tape.linear(pre, ffn.w1, Some(ffn.b1))?;
    let h = tape.gelu(h);
    let y = tape.linear(h, ffn.w2, Some(ffn.b2))?;
    let summed = tape.add(x, y)?;
    tape.layer_norm(summed, ffn.post.gamma, ffn.post.beta, LAYER_NORM_EPS)
}

/// Stacks per-index, per-head maps into one tensor indexed
/// [head, index, row, col].
fn stack_maps(maps: &[Vec<Tensor>]) -> Result<Tensor> {
    let heads = maps[0].len();
    let (rows, cols) = (maps[0][0].shape()[0], maps[0][0].shape()[1]);
    let n = maps.len();
    let mut data = Vec::with_capacity(heads * n * rows * cols);
    for h in 0..heads {
        for per_index in maps {
            data.extend_from_slice(per_index[h].data());
        }
    }
    Tensor::new(vec![heads, n, rows, cols], data)
}

/// Joint factorization: one attention over the whole flat sequence.
pub fn joint_layer(
    tape: &mut Tape,
    x: Var,
    attn: &AttnBlockP<Var>,
    ffn: &FfnBlockP<Var>,
    heads: usize,
) -> Result<(Var, AttentionMaps)> {
    let (y, maps, _) = attn_sublayer(tape, x, attn, heads, &PoolApply::None)?;
    let out = ffn_sublayer(tape, y, ffn)?;
    let l = tape.shape(x)[0];
    let mut data = Vec::with_capacity(maps.len() * l * l);
    for m in &maps {
        data.extend_from_slice(m.data());
    }
    let affinity = Tensor::new(vec![maps.len(), l, l], data)?;
    Ok((out, AttentionMaps::Joint { affinity }))
}

/// Temporal half of a separable layer: attention down each spatial column
/// of the grid, independently per spatial index.
#[allow(clippy::type_complexity)]
pub fn temporal_sublayer(
    tape: &mut Tape,
    grid: Var,
    block: &AttnBlockP<Var>,
    heads: usize,
    pool_apply: &PoolApply,
) -> Result<(Var, Tensor, Option<Vec<Vec<usize>>>)> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 3 {
        return Err(Error::Invalid {
            op: "temporal_sublayer",
            msg: format!("expected a rank-3 grid, got {shape:?}"),
        });
    }
    let p1 = shape[1];
    let mut columns = Vec::with_capacity(p1);
    let mut maps = Vec::with_capacity(p1);
    let mut kept_all = Vec::with_capacity(p1);
    for i in 0..p1 {
        let xi = tape.select(grid, 1, i)?;
        let (yi, head_maps, kept) = attn_sublayer(tape, xi, block, heads, pool_apply)?;
        columns.push(yi);
        maps.push(head_maps);
        if let Some(k) = kept {
            kept_all.push(k);
        }
    }
    let out = tape.stack(&columns, 1)?;
    let kept = if kept_all.is_empty() { None } else { Some(kept_all) };
    Ok((out, stack_maps(&maps)?, kept))
}

/// Spatial half of a separable layer: attention along each temporal row.
/// Never pooled.
pub fn spatial_sublayer(
    tape: &mut Tape,
    grid: Var,
    block: &AttnBlockP<Var>,
    heads: usize,
) -> Result<(Var, Tensor)> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 3 {
        return Err(Error::Invalid {
            op: "spatial_sublayer",
            msg: format!("expected a rank-3 grid, got {shape:?}"),
        });
    }
    let t1 = shape[0];
    let mut rows = Vec::with_capacity(t1);
    let mut maps = Vec::with_capacity(t1);
    for j in 0..t1 {
        let xj = tape.select(grid, 0, j)?;
        let (yj, head_maps, _) = attn_sublayer(tape, xj, block, heads, &PoolApply::None)?;
        rows.push(yj);
        maps.push(head_maps);
    }
    let out = tape.stack(&rows, 0)?;
    Ok((out, stack_maps(&maps)?))
}

/// Separable factorization: temporal attention (optionally pooled), then
/// spatial attention, then the shared feed-forward.
pub fn separable_layer(
    tape: &mut Tape,
    grid: Var,
    attn_t: &AttnBlockP<Var>,
    attn_s: &AttnBlockP<Var>,
    ffn: &FfnBlockP<Var>,
    heads: usize,
    pool_apply: &PoolApply,
) -> Result<(Var, AttentionMaps)> {
    let (after_t, temporal, kept) = temporal_sublayer(tape, grid, attn_t, heads, pool_apply)?;
    let (after_s, spatial) = spatial_sublayer(tape, after_t, attn_s, heads)?;
    let out = ffn_sublayer(tape, after_s, ffn)?;
    Ok((
        out,
        AttentionMaps::Separable {
            temporal,
            spatial,
            kept,
        },
    ))
}

/// Axial factorization over a rank-4 grid: attention along the temporal,
/// then horizontal, then vertical axis, then the feed-forward.
pub fn axial_layer(
    tape: &mut Tape,
    grid: Var,
    attn_t: &AttnBlockP<Var>,
    attn_w: &AttnBlockP<Var>,
    attn_h: &AttnBlockP<Var>,
    ffn: &FfnBlockP<Var>,
    heads: usize,
) -> Result<(Var, AttentionMaps)> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid {
            op: "axial_layer",
            msg: format!("expected a rank-4 grid, got {shape:?}"),
        });
    }
    let (t1, w1, h1) = (shape[0], shape[1], shape[2]);

    // Along time: one sequence per (w, h) site.
    let mut maps_t = Vec::new();
    let mut planes = Vec::with_capacity(w1);
    for j in 0..w1 {
        let plane = tape.select(grid, 1, j)?; // (T+1) x (H+1) x C
        let mut cols = Vec::with_capacity(h1);
        for k in 0..h1 {
            let seq = tape.select(plane, 1, k)?;
            let (y, m, _) = attn_sublayer(tape, seq, attn_t, heads, &PoolApply::None)?;
            cols.push(y);
            maps_t.push(m);
        }
        planes.push(tape.stack(&cols, 1)?);
    }
    let grid = tape.stack(&planes, 1)?;

    // Along width: one sequence per (t, h) site.
    let mut maps_w = Vec::new();
    let mut t_planes = Vec::with_capacity(t1);
    for i in 0..t1 {
        let plane = tape.select(grid, 0, i)?; // (W+1) x (H+1) x C
        let mut cols = Vec::with_capacity(h1);
        for k in 0..h1 {
            let seq = tape.select(plane, 1, k)?;
            let (y, m, _) = attn_sublayer(tape, seq, attn_w, heads, &PoolApply::None)?;
            cols.push(y);
            maps_w.push(m);
        }
        t_planes.push(tape.stack(&cols, 1)?);
    }
    let grid = tape.stack(&t_planes, 0)?;

    // Along height: one sequence per (t, w) site.
    let mut maps_h = Vec::new();
    let mut t_planes = Vec::with_capacity(t1);
    for i in 0..t1 {
        let plane = tape.select(grid, 0, i)?; // (W+1) x (H+1) x C
        let mut rows = Vec::with_capacity(w1);
        for j in 0..w1 {
            let seq = tape.select(plane, 0, j)?;
            let (y, m, _) = attn_sublayer(tape, seq, attn_h, heads, &PoolApply::None)?;
            rows.push(y);
            maps_h.push(m);
        }
        t_planes.push(tape.stack(&rows, 0)?);
    }
    let grid = tape.stack(&t_planes, 0)?;

    let out = ffn_sublayer(tape, grid, ffn)?;
    Ok((
        out,
        AttentionMaps::Axial {
            time: stack_maps(&maps_t)?,
            w: stack_maps(&maps_w)?,
            h: stack_maps(&maps_h)?,
        },
    ))
}

/// Spatial-only factorization: each frame is its own sequence, processed
/// by shared parameters; no information crosses frames.
pub fn spatial_only_layer(
    tape: &mut Tape,
    frames: &[Var],
    attn: &AttnBlockP<Var>,
    ffn: &FfnBlockP<Var>,
    heads: usize,
) -> Result<(Vec<Var>, AttentionMaps)> {
    let mut outs = Vec::with_capacity(frames.len());
    let mut maps = Vec::with_capacity(frames.len());
    for &fx in frames {
        let (y, m, _) = attn_sublayer(tape, fx, attn, heads, &PoolApply::None)?;
        outs.push(ffn_sublayer(tape, y, ffn)?);
        maps.push(m);
    }
    Ok((outs, AttentionMaps::PerFrame { affinity: stack_maps(&maps)? }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn msa_vars(tape: &mut Tape, rng: &mut ChaCha8Rng, c: usize) -> MsaP<Var> {
        MsaP {
            wq: tape.leaf(randn(rng, &[c, c], 0.3), true),
            bq: tape.leaf(randn(rng, &[c], 0.1), true),
            wk: tape.leaf(randn(rng, &[c, c], 0.3), true),
            bk: tape.leaf(randn(rng, &[c], 0.1), true),
            wv: tape.leaf(randn(rng, &[c, c], 0.3), true),
            bv: tape.leaf(randn(rng, &[c], 0.1), true),
            wo: tape.leaf(randn(rng, &[c, c], 0.3), true),
            bo: tape.leaf(randn(rng, &[c], 0.1), true),
        }
    }

    fn norm_vars(tape: &mut Tape, c: usize) -> NormP<Var> {
        NormP {
            gamma: tape.leaf(Tensor::full(&[c], 1.0), true),
            beta: tape.leaf(Tensor::zeros(&[c]), true),
        }
    }

    fn attn_block(tape: &mut Tape, rng: &mut ChaCha8Rng, c: usize) -> AttnBlockP<Var> {
        AttnBlockP {
            msa: msa_vars(tape, rng, c),
            pre: norm_vars(tape, c),
            post: norm_vars(tape, c),
        }
    }

    fn ffn_block(tape: &mut Tape, rng: &mut ChaCha8Rng, c: usize, hidden: usize) -> FfnBlockP<Var> {
        FfnBlockP {
            w1: tape.leaf(randn(rng, &[c, hidden], 0.3), true),
            b1: tape.leaf(Tensor::zeros(&[hidden]), true),
            w2: tape.leaf(randn(rng, &[hidden, c], 0.3), true),
            b2: tape.leaf(Tensor::zeros(&[c]), true),
            pre: norm_vars(tape, c),
            post: norm_vars(tape, c),
        }
    }

    #[test]
    fn joint_affinities_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new(Precision::Double);
        let c = 8;
        let x = tape.leaf(randn(&mut rng, &[5, c], 1.0), false);
        let attn = attn_block(&mut tape, &mut rng, c);
        let ffn = ffn_block(&mut tape, &mut rng, c, 16);
        let (out, maps) = joint_layer(&mut tape, x, &attn, &ffn, 2).unwrap();
        assert_eq!(tape.shape(out), &[5, c]);
        let AttentionMaps::Joint { affinity } = maps else {
            panic!()
        };
        assert_eq!(affinity.shape(), &[2, 5, 5]);
        for chunk in affinity.data().chunks(5) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_layer_is_permutation_equivariant() {
        // Swapping two body rows of the input swaps the same output rows.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 8;
        let x = randn(&mut rng, &[6, c], 1.0);
        let mut swapped = x.clone();
        for ch in 0..c {
            let (a, b) = (2 * c + ch, 4 * c + ch);
            swapped.data_mut().swap(a, b);
        }
        let run = |input: &Tensor, rng_seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut tape = Tape::new(Precision::Double);
            let xv = tape.leaf(input.clone(), false);
            let attn = attn_block(&mut tape, &mut rng, c);
            let ffn = ffn_block(&mut tape, &mut rng, c, 16);
            let (out, _) = joint_layer(&mut tape, xv, &attn, &ffn, 2).unwrap();
            tape.value(out).clone()
        };
        let y = run(&x, 99);
        let y_swapped = run(&swapped, 99);
        for ch in 0..c {
            assert!((y.at(&[2, ch]) - y_swapped.at(&[4, ch])).abs() < 1e-12);
            assert!((y.at(&[4, ch]) - y_swapped.at(&[2, ch])).abs() < 1e-12);
            assert!((y.at(&[0, ch]) - y_swapped.at(&[0, ch])).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_sublayer_is_per_spatial_index() {
        // Perturbing the tokens at one spatial index must not change
        // temporal outputs at any other index.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t1, p1, c) = (4, 3, 8);
        let base = randn(&mut rng, &[t1, p1, c], 1.0);
        let mut poked = base.clone();
        for i in 0..t1 {
            poked.data_mut()[(i * p1 + 1) * c] += 3.0;
        }
        let run = |input: &Tensor| {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape = Tape::new(Precision::Double);
            let g = tape.leaf(input.clone(), false);
            let attn = attn_block(&mut tape, &mut rng, c);
            let (out, _, _) =
                temporal_sublayer(&mut tape, g, &attn, 2, &PoolApply::None).unwrap();
            tape.value(out).clone()
        };
        let y0 = run(&base);
        let y1 = run(&poked);
        for i in 0..t1 {
            for j in [0usize, 2] {
                for ch in 0..c {
                    assert_eq!(y0.at(&[i, j, ch]), y1.at(&[i, j, ch]));
                }
            }
            assert!((y0.at(&[i, 1, 0]) - y1.at(&[i, 1, 0])).abs() > 1e-9);
        }
    }

    #[test]
    fn spatial_sublayer_is_per_temporal_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t1, p1, c) = (3, 5, 8);
        let base = randn(&mut rng, &[t1, p1, c], 1.0);
        let mut poked = base.clone();
        for j in 0..p1 {
            poked.data_mut()[(p1 + j) * c + 2] -= 2.0;
        }
        let run = |input: &Tensor| {
            let mut rng = ChaCha8Rng::seed_from_u64(43);
            let mut tape = Tape::new(Precision::Double);
            let g = tape.leaf(input.clone(), false);
            let attn = attn_block(&mut tape, &mut rng, c);
            let (out, _) = spatial_sublayer(&mut tape, g, &attn, 2).unwrap();
            tape.value(out).clone()
        };
        let y0 = run(&base);
        let y1 = run(&poked);
        for i in [0usize, 2] {
            for j in 0..p1 {
                for ch in 0..c {
                    assert_eq!(y0.at(&[i, j, ch]), y1.at(&[i, j, ch]));
                }
            }
        }
    }

    #[test]
    fn pooled_temporal_extent_and_selection_match_pool_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (t, p1, c, heads) = (8usize, 3usize, 8usize, 2usize);
        let mut tape = Tape::new(Precision::Double);
        let g = tape.leaf(randn(&mut rng, &[t + 1, p1, c], 1.0), false);
        let attn = attn_block(&mut tape, &mut rng, c);
        let tau = 6;
        let (out, maps, kept) =
            temporal_sublayer(&mut tape, g, &attn, heads, &PoolApply::TopK { tau }).unwrap();
        assert_eq!(tape.shape(out), &[tau + 1, p1, c]);
        assert_eq!(maps.shape(), &[heads, p1, tau + 1, t + 1]);
        let kept = kept.unwrap();
        assert_eq!(kept.len(), p1);
        for k in &kept {
            assert_eq!(k.len(), tau + 1);
            assert_eq!(k[0], 0);
            assert!(k.windows(2).all(|w| w[0] < w[1]));
        }
        // Pooled rows of every head are gathered from the unpooled ones;
        // check row sums stay 1 (selection preserves stochastic rows).
        for chunk in maps.data().chunks(t + 1) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_with_full_tau_is_bit_identical_to_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (t, p1, c) = (4usize, 3usize, 8usize);
        let input = randn(&mut rng, &[t + 1, p1, c], 1.0);
        let run = |pool_apply: PoolApply| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut tape = Tape::new(Precision::Double);
            let g = tape.leaf(input.clone(), false);
            let attn = attn_block(&mut tape, &mut rng, c);
            let (out, _, _) = temporal_sublayer(&mut tape, g, &attn, 2, &pool_apply).unwrap();
            tape.value(out).clone()
        };
        let full = run(PoolApply::TopK { tau: t });
        let none = run(PoolApply::None);
        assert_eq!(full, none);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::new(Precision::Double);
        let x = tape.leaf(randn(&mut rng, &[4, 6], 1.0), false);
        let attn = attn_block(&mut tape, &mut rng, 6);
        let ffn = ffn_block(&mut tape, &mut rng, 6, 12);
        assert!(joint_layer(&mut tape, x, &attn, &ffn, 4).is_err());
    }
}
