//! Attention rollout: multiply per-layer affinities into cumulative
//! masks, slice out the class-token rows, combine the temporal and
//! spatial views, threshold, and render per-frame heatmaps.
//!
//! Only separable models without temporal down-sampling are supported;
//! pooling changes the affinity extent mid-stack so the layer products
//! stop conforming.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::patch::PatchGeom;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// The literal product of affinities.
    Plain,
    /// Each factor becomes (A + I) / 2, row-renormalized, crediting the
    /// residual path.
    ResidualAdjusted,
}

/// Accumulated per-index products: `mask_t` is (P+1) x (T+1) x (T+1),
/// `mask_s` is (T+1) x (P+1) x (P+1).
#[derive(Clone, Debug)]
pub struct RolloutMasks {
    pub mask_t: Tensor,
    pub mask_s: Tensor,
}

/// Head-averages each layer's affinities and multiplies them across
/// layers, newest layer leftmost, independently per grid index.
pub fn accumulate(maps: &[AttentionMaps], mode: RolloutMode) -> Result<RolloutMasks> {
    if maps.is_empty() {
        return Err(Error::Invalid {
            op: "rollout",
            msg: "no attention maps given".into(),
        });
    }
    let mut t_layers = Vec::with_capacity(maps.len());
    let mut s_layers = Vec::with_capacity(maps.len());
    for m in maps {
        let AttentionMaps::Separable { temporal, spatial, kept } = m else {
            return Err(Error::Unsupported(
                "rollout requires a separable model".into(),
            ));
        };
        if kept.is_some() || temporal.shape()[2] != temporal.shape()[3] {
            return Err(Error::Unsupported(
                "rollout requires a model without temporal down-sampling".into(),
            ));
        }
        t_layers.push(head_average(temporal));
        s_layers.push(head_average(spatial));
    }
    let t1 = t_layers[0].shape()[1];
    let p1 = s_layers[0].shape()[1];
    for (t, s) in t_layers.iter().zip(&s_layers) {
        if t.shape() != t_layers[0].shape() || s.shape() != s_layers[0].shape() {
            return Err(Error::Unsupported(
                "rollout requires layer-constant affinity shapes".into(),
            ));
        }
        let _ = (t, s);
    }
    let _ = (t1, p1);
    Ok(RolloutMasks {
        mask_t: product_over_layers(&t_layers, mode),
        mask_s: product_over_layers(&s_layers, mode),
    })
}

/// heads x n x r x r -> n x r x r arithmetic mean over heads.
fn head_average(maps: &Tensor) -> Tensor {
    let (heads, n, rows, cols) = (
        maps.shape()[0],
        maps.shape()[1],
        maps.shape()[2],
        maps.shape()[3],
    );
    let stride = n * rows * cols;
    let mut out = vec![0.0; stride];
    for h in 0..heads {
        for (o, &v) in out.iter_mut().zip(&maps.data()[h * stride..(h + 1) * stride]) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= heads as f64;
    }
    Tensor::new(vec![n, rows, cols], out).unwrap()
}

/// layers of n x r x r -> n x r x r, M = A_L ... A_1 per index.
fn product_over_layers(layers: &[Tensor], mode: RolloutMode) -> Tensor {
    let (n, r) = (layers[0].shape()[0], layers[0].shape()[1]);
    let factor = |layer: &Tensor, i: usize| -> Vec<f64> {
        let mut a = layer.data()[i * r * r..(i + 1) * r * r].to_vec();
        if mode == RolloutMode::ResidualAdjusted {
            for d in 0..r {
                for c in 0..r {
                    a[d * r + c] = 0.5 * a[d * r + c] + if d == c { 0.5 } else { 0.0 };
                }
            }
            for row in a.chunks_mut(r) {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
            }
        }
        a
    };
    let mut out = Vec::with_capacity(n * r * r);
    for i in 0..n {
        let mut acc = factor(&layers[0], i);
        for layer in &layers[1..] {
            let a = factor(layer, i);
            // acc = a * acc
            let mut next = vec![0.0; r * r];
            for row in 0..r {
                for k in 0..r {
                    let av = a[row * r + k];
                    if av == 0.0 {
                        continue;
                    }
                    for col in 0..r {
                        next[row * r + col] += av * acc[k * r + col];
                    }
                }
            }
            acc = next;
        }
        out.extend_from_slice(&acc);
    }
    Tensor::new(vec![n, r, r], out).unwrap()
}

/// Class-token rows of the accumulated masks: for every non-class grid
/// index, how much the class row attends to each non-class position.
/// Returns (P x T, T x P).
pub fn class_slices(masks: &RolloutMasks) -> Result<(Tensor, Tensor)> {
    let slice = |m: &Tensor| -> Tensor {
        let (n, r) = (m.shape()[0], m.shape()[1]);
        let mut out = Vec::with_capacity((n - 1) * (r - 1));
        for i in 1..n {
            for j in 1..r {
                out.push(m.at(&[i, 0, j]));
            }
        }
        Tensor::new(vec![n - 1, r - 1], out).unwrap()
    };
    if masks.mask_t.shape()[0] < 2 || masks.mask_t.shape()[1] < 2 {
        return Err(Error::Invalid {
            op: "class_slices",
            msg: format!("mask_t shape {:?} has no body", masks.mask_t.shape()),
        });
    }
    Ok((slice(&masks.mask_t), slice(&masks.mask_s)))
}

/// Transpose the temporal slice to T x P and multiply entrywise with the
/// spatial slice.
pub fn combine(mask_t_slice: &Tensor, mask_s_slice: &Tensor) -> Result<Tensor> {
    let tp = mask_t_slice.transpose2()?;
    if tp.shape() != mask_s_slice.shape() {
        return Err(Error::Shape {
            op: "combine",
            lhs: mask_t_slice.shape().to_vec(),
            rhs: mask_s_slice.shape().to_vec(),
        });
    }
    let data = tp
        .data()
        .iter()
        .zip(mask_s_slice.data())
        .map(|(a, b)| a * b)
        .collect();
    Tensor::new(tp.shape().to_vec(), data)
}

/// Marks the ceil(fraction * N) largest entries, ties toward the lower
/// flat index.
pub fn threshold_top(mask: &Tensor, fraction: f64) -> Result<Vec<bool>> {
    let n = mask.len();
    if n == 0 {
        return Err(Error::Invalid {
            op: "threshold_top",
            msg: "empty mask".into(),
        });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid {
            op: "threshold_top",
            msg: format!("fraction {fraction} outside (0, 1]"),
        });
    }
    // ceil, robust to the product landing one ulp past an integer.
    let scaled = fraction * n as f64;
    let k = if (scaled - scaled.round()).abs() < 1e-9 {
        scaled.round() as usize
    } else {
        scaled.ceil() as usize
    };
    let k = k.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        mask.data()[b]
            .partial_cmp(&mask.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![false; n];
    for &i in &idx[..k] {
        out[i] = true;
    }
    Ok(out)
}

fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Writes one binary PGM per frame (selected patch cells white, upscaled
/// to patch-size pixel blocks) and a CSV of the raw mask values.
pub fn render(
    raw: &Tensor,
    selected: &[bool],
    geom: &PatchGeom,
    out_dir: &Path,
) -> Result<()> {
    let t = geom.frame_blocks();
    let p = geom.patches_per_frame();
    if raw.shape() != [t, p] {
        return Err(Error::Shape {
            op: "render",
            lhs: raw.shape().to_vec(),
            rhs: vec![t, p],
        });
    }
    if selected.len() != t * p {
        return Err(Error::Invalid {
            op: "render",
            msg: format!("selection has {} entries, mask {}", selected.len(), t * p),
        });
    }
    fs::create_dir_all(out_dir)?;
    let (gw, gh, s) = (geom.grid_w(), geom.grid_h(), geom.patch_size);
    let (width, height) = (gw * s, gh * s);
    for fb in 0..t {
        let mut pixels = vec![0u8; width * height];
        // Image rows scan y, columns scan x; patch index is x-major.
        for (row, px_row) in pixels.chunks_mut(width).enumerate() {
            let gy = row / s;
            for (col, px) in px_row.iter_mut().enumerate() {
                let gx = col / s;
                if selected[fb * p + gx * gh + gy] {
                    *px = 255;
                }
            }
        }
        write_pgm(&out_dir.join(format!("frame_{fb:04}.pgm")), width, height, &pixels)?;
    }
    let mut csv = String::from("t,patch,value\n");
    for fb in 0..t {
        for patch in 0..p {
            csv.push_str(&format!("{fb},{patch},{}\n", raw.at(&[fb, patch])));
        }
    }
    fs::write(out_dir.join("mask.csv"), csv)?;
    Ok(())
}
