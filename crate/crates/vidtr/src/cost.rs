//! Analytic cost accounting: affinity-matrix element counts (the memory
//! that dominates attention) and multiply-accumulate counts for every
//! factorization, with the down-sample schedule applied layer by layer.
//!
//! Everything here is exact integer arithmetic over the config; nothing
//! is measured. Affinity numbers count matrix elements only, not
//! activations or optimizer state, and the reports say so.

use crate::attention::Factorization;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pool::PoolKind;

/// Per-head affinity elements per layer, plus the head/depth factors.
#[derive(Clone, Debug)]
pub struct AffinityCounts {
    pub per_layer_per_head: Vec<u128>,
    pub heads: usize,
}

impl AffinityCounts {
    pub fn per_layer(&self) -> Vec<u128> {
        self.per_layer_per_head
            .iter()
            .map(|&c| c * self.heads as u128)
            .collect()
    }

    pub fn total(&self) -> u128 {
        self.per_layer().iter().sum()
    }
}

/// Exact MAC and affinity accounting for one config.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub label: String,
    pub factorization: Factorization,
    pub affinity: AffinityCounts,
    /// Attention MACs per layer: q/k/v projections, affinity products,
    /// attention-times-value products and output projections.
    pub attention_macs: Vec<u128>,
    /// Feed-forward MACs per layer (two dense maps).
    pub ffn_macs: Vec<u128>,
    pub embed_macs: u128,
    pub head_macs: u128,
    pub param_count: u128,
}

impl CostReport {
    pub fn attention_total(&self) -> u128 {
        self.attention_macs.iter().sum()
    }

    pub fn ffn_total(&self) -> u128 {
        self.ffn_macs.iter().sum()
    }

    /// The comparison quantity for schedules: encoder-layer work only.
    pub fn attention_plus_ffn(&self) -> u128 {
        self.attention_total() + self.ffn_total()
    }

    pub fn total_macs(&self) -> u128 {
        self.attention_plus_ffn() + self.embed_macs + self.head_macs
    }
}

/// Geometry checks the cost model needs; deliberately weaker than full
/// config validation so degenerate queries (depth 0) still report zeros.
fn check_geometry(config: &ModelConfig) -> Result<()> {
    config.geom().validate()?;
    if config.heads == 0 || !config.embed_dim.is_multiple_of(config.heads) {
        return Err(Error::Config(format!(
            "heads {} must divide embed_dim {}",
            config.heads, config.embed_dim
        )));
    }
    Ok(())
}

/// Affinity elements stored per layer. Temporal pooling shrinks the
/// temporal affinity to its kept rows and every later layer inherits the
/// smaller extent.
pub fn affinity_counts(config: &ModelConfig) -> Result<AffinityCounts> {
    check_geometry(config)?;
    let p1 = (config.patches_per_frame() + 1) as u128;
    let incoming = config.incoming_extents();
    let outgoing = config.outgoing_extents();
    let flat = (config.frame_blocks() * config.patches_per_frame() + 1) as u128;
    let gw = (config.geom().grid_w() + 1) as u128;
    let gh = (config.geom().grid_h() + 1) as u128;

    let per_layer_per_head = (0..config.depth)
        .map(|l| {
            let a = (incoming[l] + 1) as u128;
            let b = (outgoing[l] + 1) as u128;
            match config.factorization {
                Factorization::Joint => flat * flat,
                Factorization::Separable => p1 * b * a + b * p1 * p1,
                Factorization::Axial => gw * gh * a * a + a * gh * gw * gw + a * gw * gh * gh,
                Factorization::SpatialOnly => incoming[l] as u128 * p1 * p1,
            }
        })
        .collect();
    Ok(AffinityCounts {
        per_layer_per_head,
        heads: config.heads,
    })
}

/// Multiply-accumulate counts for the whole forward pass. The formulas
/// (also printed in report headers): for a sequence of length L with
/// width C, q/k/v cost 3LC^2, the affinity product L^2 C, the
/// attention-times-value product L'LC for L' output rows, the output
/// projection L'C^2, and the feed-forward 2 L C M for hidden width M.
pub fn flops_estimate(config: &ModelConfig, label: &str) -> Result<CostReport> {
    check_geometry(config)?;
    let c = config.embed_dim as u128;
    let m = config.mlp_hidden as u128;
    let p1 = (config.patches_per_frame() + 1) as u128;
    let t = config.frame_blocks() as u128;
    let incoming = config.incoming_extents();
    let outgoing = config.outgoing_extents();
    let flat = t * config.patches_per_frame() as u128 + 1;
    let gw = (config.geom().grid_w() + 1) as u128;
    let gh = (config.geom().grid_h() + 1) as u128;

    // One attention sublayer over `seqs` sequences of length `len`, with
    // `kept` output rows per sequence.
    let attn = |seqs: u128, len: u128, kept: u128| -> u128 {
        seqs * (3 * len * c * c + len * len * c + kept * len * c + kept * c * c)
    };

    let mut attention_macs = Vec::with_capacity(config.depth);
    let mut ffn_macs = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let a = (incoming[l] + 1) as u128;
        let b = (outgoing[l] + 1) as u128;
        let (att, tokens_out) = match config.factorization {
            Factorization::Joint => (attn(1, flat, flat), flat),
            Factorization::Separable => {
                (attn(p1, a, b) + attn(b, p1, p1), b * p1)
            }
            Factorization::Axial => {
                let n = a * gw * gh;
                (
                    attn(gw * gh, a, a) + attn(a * gh, gw, gw) + attn(a * gw, gh, gh),
                    n,
                )
            }
            Factorization::SpatialOnly => (attn(t, p1, p1), t * p1),
        };
        attention_macs.push(att);
        ffn_macs.push(2 * tokens_out * c * m);
    }

    let pw = config.geom().patch_width() as u128;
    let rows = (config.geom().rows()) as u128;
    let embed_macs = rows * pw * c;
    let head_macs = c * config.class_count as u128;

    Ok(CostReport {
        label: label.to_string(),
        factorization: config.factorization,
        affinity: affinity_counts(config)?,
        attention_macs,
        ffn_macs,
        embed_macs,
        head_macs,
        param_count: param_count(config),
    })
}

/// Closed-form parameter count; matches `Model::param_count` without
/// materializing the tensors.
pub fn param_count(config: &ModelConfig) -> u128 {
    let c = config.embed_dim as u128;
    let m = config.mlp_hidden as u128;
    let pw = config.geom().patch_width() as u128;
    let t = config.frame_blocks() as u128;
    let p = config.patches_per_frame() as u128;
    let gw = config.geom().grid_w() as u128;
    let gh = config.geom().grid_h() as u128;

    let attn_block = 4 * c * c + 4 * c + 4 * c; // projections, biases, two norm pairs
    let ffn_block = 2 * c * m + m + c + 4 * c;
    let embed = pw * c
        + match config.factorization {
            Factorization::Joint => (t * p + 1) * c + c,
            Factorization::Separable => (t + 1) * c + (p + 1) * c + 3 * c,
            Factorization::Axial => (t + 1) * c + (gw + 1) * c + (gh + 1) * c + 3 * c,
            Factorization::SpatialOnly => (p + 1) * c + c,
        };
    let attn_per_layer = match config.factorization {
        Factorization::Joint | Factorization::SpatialOnly => attn_block,
        Factorization::Separable => 2 * attn_block,
        Factorization::Axial => 3 * attn_block,
    };
    let kernels = if config.pool == PoolKind::Conv1d {
        3 * config.downsample_layers.len() as u128
    } else {
        0
    };
    embed
        + config.depth as u128 * (attn_per_layer + ffn_block)
        + kernels
        + c * config.class_count as u128
        + config.class_count as u128
}

/// Side-by-side totals. The first report is the baseline for reduction
/// percentages.
pub struct Comparison {
    pub text: String,
    pub csv: String,
}

fn reduction_pct(base: u128, x: u128) -> f64 {
    if base == 0 {
        return 0.0;
    }
    100.0 * (1.0 - x as f64 / base as f64)
}

pub fn compare_report(reports: &[CostReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::Invalid {
            op: "compare_report",
            msg: "need at least one cost report".into(),
        });
    }
    let mut text = String::new();
    text.push_str("cost model: exact integer accounting\n");
    text.push_str("  affinity elements: post-softmax attention matrices only\n");
    text.push_str("    (activations and optimizer state are not modelled)\n");
    text.push_str("  MAC formulas per attention sublayer over sequences of length L,\n");
    text.push_str("  width C, L' kept rows, hidden M:\n");
    text.push_str("    qkv 3LC^2, affinity L^2C, attn*v L'LC, out proj L'C^2, ffn 2LCM\n\n");
    let header = format!(
        "{:<14} {:>14} {:>18} {:>16} {:>16} {:>16} {:>10}\n",
        "model", "params", "affinity elems", "attention MACs", "ffn MACs", "attn+ffn MACs", "reduction"
    );
    text.push_str(&header);
    let base = reports[0].attention_plus_ffn();
    let mut csv = String::from(
        "label,factorization,params,affinity_elements,attention_macs,ffn_macs,attention_plus_ffn_macs,reduction_pct\n",
    );
    for (i, r) in reports.iter().enumerate() {
        let red = reduction_pct(base, r.attention_plus_ffn());
        let red_text = if i == 0 {
            "-".to_string()
        } else {
            format!("{red:.2}%")
        };
        text.push_str(&format!(
            "{:<14} {:>14} {:>18} {:>16} {:>16} {:>16} {:>10}\n",
            r.label,
            r.param_count,
            r.affinity.total(),
            r.attention_total(),
            r.ffn_total(),
            r.attention_plus_ffn(),
            red_text,
        ));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{:.4}\n",
            r.label,
            r.factorization.name(),
            r.param_count,
            r.affinity.total(),
            r.attention_total(),
            r.ffn_total(),
            r.attention_plus_ffn(),
            red,
        ));
    }
    Ok(Comparison { text, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn standard_geometry_affinity_counts_match_hand_arithmetic() {
        let joint = {
            let mut c = ModelConfig::vidtr_s();
            c.factorization = Factorization::Joint;
            c
        };
        let sep = ModelConfig::vidtr_s();
        let jc = affinity_counts(&joint).unwrap();
        let sc = affinity_counts(&sep).unwrap();
        // 8 frames of 224^2 in 16x16 patches: 196 patches, 1569 flat tokens.
        assert_eq!(jc.per_layer_per_head[0], 1569 * 1569);
        assert_eq!(jc.per_layer_per_head[0], 2_461_761);
        assert_eq!(sc.per_layer_per_head[0], 197 * 81 + 9 * 197 * 197);
        assert_eq!(sc.per_layer_per_head[0], 365_238);
        let ratio = jc.total() as f64 / sc.total() as f64;
        assert!(ratio > 6.7 && ratio < 6.8, "ratio {ratio}");
    }

    // Factoring pays once the spatial grid is non-trivial; at T=2 the
    // crossover sits at P=12, so tiny demo grids can invert the ordering.
    #[test]
    fn separable_beats_joint_on_video_scale_geometries() {
        for (t, w, h, s) in [(2, 32, 32, 8), (4, 32, 32, 8), (8, 64, 48, 16), (6, 24, 24, 8)] {
            let mut cfg = ModelConfig::toy();
            cfg.clip_len = t;
            cfg.frame_w = w;
            cfg.frame_h = h;
            cfg.patch_size = s;
            let sep = affinity_counts(&cfg).unwrap().total();
            cfg.factorization = Factorization::Joint;
            let joint = affinity_counts(&cfg).unwrap().total();
            assert!(sep < joint, "T={t} {w}x{h}/{s}: {sep} !< {joint}");
        }
    }

    #[test]
    fn compact_schedule_shrinks_counts_monotonically() {
        let cfg = ModelConfig::c_vidtr_s();
        let counts = affinity_counts(&cfg).unwrap().per_layer_per_head;
        // Pooling at layers 1, 2, 4: the following layer is strictly
        // cheaper; unscheduled stretches hold constant.
        assert!(counts[2] < counts[1] && counts[1] < counts[0]);
        assert!(counts[3] <= counts[2]);
        assert!(counts[5] < counts[4]);
        assert!(counts[6..].windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn compact_reduction_sits_in_the_expected_window() {
        let a = flops_estimate(&ModelConfig::vidtr_s(), "vidtr-s").unwrap();
        let b = flops_estimate(&ModelConfig::c_vidtr_s(), "c-vidtr-s").unwrap();
        let red = reduction_pct(a.attention_plus_ffn(), b.attention_plus_ffn());
        assert!((40.0..=65.0).contains(&red), "reduction {red:.2}%");
    }

    #[test]
    fn toy_macs_match_a_hand_closed_form() {
        let cfg = ModelConfig::toy();
        let r = flops_estimate(&cfg, "toy").unwrap();
        let (c, m, q, a) = (32u128, 64u128, 17u128, 9u128);
        // Temporal: 17 sequences of 9; spatial: 9 sequences of 17.
        let attn_t = q * (3 * a * c * c + a * a * c + a * a * c + a * c * c);
        let attn_s = a * (3 * q * c * c + q * q * c + q * q * c + q * c * c);
        let per_layer = attn_t + attn_s;
        assert_eq!(r.attention_macs, vec![per_layer, per_layer]);
        assert_eq!(r.ffn_macs, vec![2 * a * q * c * m, 2 * a * q * c * m]);
        assert_eq!(r.embed_macs, 128 * 64 * 32);
        assert_eq!(r.head_macs, 32 * 4);
    }

    #[test]
    fn doubling_depth_doubles_encoder_macs_and_depth_zero_is_free() {
        let mut cfg = ModelConfig::toy();
        let once = flops_estimate(&cfg, "d2").unwrap();
        cfg.depth = 4;
        let twice = flops_estimate(&cfg, "d4").unwrap();
        assert_eq!(twice.attention_plus_ffn(), 2 * once.attention_plus_ffn());
        cfg.depth = 0;
        let zero = flops_estimate(&cfg, "d0").unwrap();
        assert_eq!(zero.attention_plus_ffn(), 0);
        assert_eq!(zero.affinity.total(), 0);
    }

    #[test]
    fn analytic_param_count_matches_built_models() {
        for kind in [
            Factorization::Joint,
            Factorization::Separable,
            Factorization::Axial,
            Factorization::SpatialOnly,
        ] {
            let mut cfg = ModelConfig::toy();
            cfg.factorization = kind;
            let model = Model::build(cfg.clone(), 0).unwrap();
            assert_eq!(param_count(&cfg), model.param_count() as u128, "{kind:?}");
        }
        let mut cfg = ModelConfig::toy();
        cfg.depth = 6;
        cfg.pool = PoolKind::Conv1d;
        cfg.downsample_layers = vec![1, 3];
        cfg.downsample_taus = vec![4, 2];
        let model = Model::build(cfg.clone(), 0).unwrap();
        assert_eq!(param_count(&cfg), model.param_count() as u128);
    }

    #[test]
    fn comparison_of_identical_configs_reports_zero_reduction() {
        let r1 = flops_estimate(&ModelConfig::vidtr_s(), "a").unwrap();
        let r2 = flops_estimate(&ModelConfig::vidtr_s(), "b").unwrap();
        let cmp = compare_report(&[r1, r2]).unwrap();
        assert!(cmp.csv.lines().last().unwrap().ends_with("0.0000"));
        assert!(cmp.text.contains("0.00%"));
        // Totals line up with the per-layer sums.
        let r = flops_estimate(&ModelConfig::c_vidtr_s(), "c").unwrap();
        assert_eq!(r.attention_total(), r.attention_macs.iter().sum::<u128>());
        assert_eq!(
            r.affinity.total(),
            r.affinity.per_layer().iter().sum::<u128>()
        );
    }
}
