//! Temporal token pooling over post-softmax affinity rows.
//!
//! All three kinds treat row 0 (the class row) as untouchable: it is never
//! averaged, convolved or dropped. Selection for topK pooling orders rows
//! by the spread of their attention profile, the idea being that rows that
//! attend non-uniformly carry the temporal signal.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    None,
    TopKStd,
    Avg,
    Conv1d,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::None => "none",
            PoolKind::TopKStd => "topk_std",
            PoolKind::Avg => "avg",
            PoolKind::Conv1d => "conv1d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PoolKind::None),
            "topk_std" => Ok(PoolKind::TopKStd),
            "avg" => Ok(PoolKind::Avg),
            "conv1d" => Ok(PoolKind::Conv1d),
            other => Err(Error::Config(format!("unknown pool kind `{other}`"))),
        }
    }
}

/// Per-row mean and spread of the non-class rows of an affinity matrix.
#[derive(Clone, Debug)]
pub struct RowStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn check_affinity(attn: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = attn.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Invalid {
            op,
            msg: format!("affinity must be 2-d with a class row and at least one body row, got {s:?}"),
        });
    }
    Ok((s[0] - 1, s[1]))
}

/// Mean and sigma of each non-class row. Sigma is the root of the summed
/// squared deviation scaled by 1/t (not 1/(t+1)); only the ordering it
/// induces matters and that is invariant to the positive scale.
pub fn row_stats(attn: &Tensor) -> Result<RowStats> {
    let (t, cols) = check_affinity(attn, "row_stats")?;
    let mut mu = vec![0.0; t];
    let mut sigma = vec![0.0; t];
    for i in 0..t {
        let row = &attn.data()[(i + 1) * cols..(i + 2) * cols];
        let m = row.iter().sum::<f64>() / cols as f64;
        let ss: f64 = row.iter().map(|&v| (v - m) * (v - m)).sum();
        mu[i] = m;
        sigma[i] = ss.sqrt() / t as f64;
    }
    Ok(RowStats {
        mu: Tensor::new(vec![t], mu)?,
        sigma: Tensor::new(vec![t], sigma)?,
    })
}

/// Rows kept by topK selection, ascending, always starting with row 0.
/// `tau` may equal the body row count, in which case every row survives
/// and the result is the identity selection.
pub fn topk_selection(attn: &Tensor, tau: usize) -> Result<Vec<usize>> {
    let (t, _) = check_affinity(attn, "topk_selection")?;
    if tau < 1 || tau > t {
        return Err(Error::Invalid {
            op: "topk_selection",
            msg: format!("tau {tau} out of range 1..={t}"),
        });
    }
    let stats = row_stats(attn)?;
    // Sort body rows by sigma descending, ties toward the lower index.
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        stats.sigma.data()[b]
            .partial_cmp(&stats.sigma.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..tau].iter().map(|&i| i + 1).collect();
    kept.push(0);
    kept.sort_unstable();
    Ok(kept)
}

/// Keeps the class row plus the tau highest-sigma rows, re-emitted in
/// ascending temporal order. Requires tau < t; a full selection is the
/// job of `PoolKind::None`.
pub fn pool_topk_std(attn: &Tensor, tau: usize) -> Result<Tensor> {
    let (t, cols) = check_affinity(attn, "pool_topk_std")?;
    if tau < 1 || tau >= t {
        return Err(Error::Invalid {
            op: "pool_topk_std",
            msg: format!("tau {tau} out of range 1..{t}"),
        });
    }
    let kept = topk_selection(attn, tau)?;
    gather_rows(attn, &kept, cols)
}

/// Averages adjacent non-overlapping pairs of body rows; an odd tail row
/// passes through. Output body rows: ceil(t/2).
pub fn pool_avg(attn: &Tensor) -> Result<Tensor> {
    let (t, cols) = check_affinity(attn, "pool_avg")?;
    let out_rows = 1 + t.div_ceil(2);
    let mut data = vec![0.0; out_rows * cols];
    data[..cols].copy_from_slice(&attn.data()[..cols]);
    for b in 0..t / 2 {
        for j in 0..cols {
            data[(1 + b) * cols + j] =
                0.5 * (attn.data()[(1 + 2 * b) * cols + j] + attn.data()[(2 + 2 * b) * cols + j]);
        }
    }
    if t % 2 == 1 {
        data[(out_rows - 1) * cols..].copy_from_slice(&attn.data()[t * cols..(t + 1) * cols]);
    }
    Tensor::new(vec![out_rows, cols], data)
}

/// Strided 1-d convolution over body rows (kernel 3, stride 2, zero pad 1)
/// followed by clamping at `RENORM_FLOOR` and row renormalization, so the
/// output stays row-stochastic even for sign-changing kernels.
pub const RENORM_FLOOR: f64 = 1e-8;

pub fn pool_conv1d(attn: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (t, cols) = check_affinity(attn, "pool_conv1d")?;
    if kernel.shape() != [3] {
        return Err(Error::Invalid {
            op: "pool_conv1d",
            msg: format!("kernel must have shape [3], got {:?}", kernel.shape()),
        });
    }
    let out_rows = 1 + t.div_ceil(2);
    let mut data = vec![0.0; out_rows * cols];
    data[..cols].copy_from_slice(&attn.data()[..cols]);
    for j in 0..t.div_ceil(2) {
        for (d, &kd) in kernel.data().iter().enumerate() {
            let p = 2 * j + d; // zero-padded body position, 0..=t+1
            if p >= 1 && p <= t {
                for col in 0..cols {
                    data[(1 + j) * cols + col] += kd * attn.data()[p * cols + col];
                }
            }
        }
    }
    // Class row is already stochastic; renormalize body rows only.
    for i in 1..out_rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = v.max(RENORM_FLOOR);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(vec![out_rows, cols], data)
}

fn gather_rows(attn: &Tensor, rows: &[usize], cols: usize) -> Result<Tensor> {
    let mut data = vec![0.0; rows.len() * cols];
    for (i, &r) in rows.iter().enumerate() {
        data[i * cols..(i + 1) * cols].copy_from_slice(&attn.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows.len(), cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut sum = 0.0;
            for c in 0..cols {
                let v: f64 = rng.gen_range(0.01..1.0);
                data[r * cols + c] = v;
                sum += v;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn uniform_rows_have_zero_sigma() {
        let t = 6;
        let attn = Tensor::full(&[t + 1, t + 1], 1.0 / (t + 1) as f64);
        let stats = row_stats(&attn).unwrap();
        assert!(stats.sigma.data().iter().all(|&s| s.abs() < 1e-15));
        assert!(stats
            .mu
            .data()
            .iter()
            .all(|&m| (m - 1.0 / (t + 1) as f64).abs() < 1e-15));
    }

    #[test]
    fn sigma_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let attn = stochastic(&mut rng, 9, 9);
        let stats = row_stats(&attn).unwrap();
        for i in 0..8 {
            let row: Vec<f64> = (0..9).map(|j| attn.at(&[i + 1, j])).collect();
            let mu = row.iter().sum::<f64>() / 9.0;
            let sigma = (row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()).sqrt() / 8.0;
            assert!((stats.sigma.data()[i] - sigma).abs() < 1e-14);
        }
    }

    #[test]
    fn selection_matches_brute_force_and_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let t = rng.gen_range(2..=12usize);
            let tau = rng.gen_range(1..t);
            let mut attn = stochastic(&mut rng, t + 1, t + 1);
            if rng.gen_bool(0.3) && t >= 2 {
                // Engineer a tie by duplicating a body row.
                let cols = t + 1;
                let src: Vec<f64> = attn.data()[cols..2 * cols].to_vec();
                attn.data_mut()[2 * cols..3 * cols].copy_from_slice(&src);
            }
            let kept = topk_selection(&attn, tau).unwrap();
            // Brute force: stable sort over (sigma desc, index asc).
            let stats = row_stats(&attn).unwrap();
            let mut scored: Vec<(usize, f64)> =
                stats.sigma.data().iter().cloned().enumerate().collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut expect: Vec<usize> = scored[..tau].iter().map(|&(i, _)| i + 1).collect();
            expect.push(0);
            expect.sort_unstable();
            assert_eq!(kept, expect);
        }
    }

    #[test]
    fn topk_preserves_class_row_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = stochastic(&mut rng, 9, 9);
        let pooled = pool_topk_std(&attn, 6).unwrap();
        assert_eq!(pooled.shape(), &[7, 9]);
        for j in 0..9 {
            assert_eq!(pooled.at(&[0, j]), attn.at(&[0, j]));
        }
        // Every output row is (bitwise) one of the input rows.
        let kept = topk_selection(&attn, 6).unwrap();
        for (out_i, &src) in kept.iter().enumerate() {
            for j in 0..9 {
                assert_eq!(pooled.at(&[out_i, j]), attn.at(&[src, j]));
            }
        }
    }

    #[test]
    fn topk_rejects_full_tau() {
        let attn = Tensor::full(&[5, 5], 0.2);
        assert!(pool_topk_std(&attn, 4).is_err());
        assert!(pool_topk_std(&attn, 0).is_err());
        // The selection helper does allow the identity case.
        assert_eq!(topk_selection(&attn, 4).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn avg_pool_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &[4usize, 5, 8, 9] {
            let attn = stochastic(&mut rng, t + 1, t + 1);
            let pooled = pool_avg(&attn).unwrap();
            assert_eq!(pooled.shape()[0], 1 + t.div_ceil(2));
            for r in 0..pooled.shape()[0] {
                let sum: f64 = (0..t + 1).map(|j| pooled.at(&[r, j])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            // Odd tail passes through bit-identically.
            if t % 2 == 1 {
                let last = pooled.shape()[0] - 1;
                for j in 0..t + 1 {
                    assert_eq!(pooled.at(&[last, j]), attn.at(&[t, j]));
                }
            }
        }
    }

    #[test]
    fn conv_delta_kernel_is_strided_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 8;
        let attn = stochastic(&mut rng, t + 1, t + 1);
        let delta = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let pooled = pool_conv1d(&attn, &delta).unwrap();
        assert_eq!(pooled.shape(), &[5, 9]);
        // Body row j picks input body row 2j+1 (rows 1,3,5,7), then the
        // renormalization divides by a sum that is already 1.
        for (j, &src) in [1usize, 3, 5, 7].iter().enumerate() {
            for col in 0..9 {
                assert!((pooled.at(&[1 + j, col]) - attn.at(&[src, col])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rows_renormalize_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let attn = stochastic(&mut rng, 9, 9);
        let kernel = Tensor::new(vec![3], vec![-0.2, 0.9, 0.4]).unwrap();
        let pooled = pool_conv1d(&attn, &kernel).unwrap();
        for r in 0..pooled.shape()[0] {
            let sum: f64 = (0..9).map(|j| pooled.at(&[r, j])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..9 {
                assert!(pooled.at(&[r, j]) > 0.0);
            }
        }
    }
}
