//! Scaled dot-product attention and the multi-head self-attention module.
//!
//! Q, K and V come from grouped `K = 1` convolutions. Heads are contiguous
//! channel slices: head `h` owns channels `[h·d_k, (h+1)·d_k)`. With
//! `G_qkv = 4, H = 12, C = 768` each projection group spans three whole heads.
//! There is no output projection here; the block's FFN₁ plays that role.

use crate::error::{Error, Result};
use crate::layers::{grouped_conv1d, grouped_conv1d_unbiased, LayerWeights};
use crate::tensor::{matmul, softmax_rows, Tensor};

/// Additive score used for padded key positions.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q_proj: LayerWeights,
    pub k_proj: LayerWeights,
    pub v_proj: LayerWeights,
    num_heads: usize,
}

impl AttentionWeights {
    pub fn new(q_proj: LayerWeights, k_proj: LayerWeights, v_proj: LayerWeights, num_heads: usize) -> Result<Self> {
        let c = q_proj.out_channels();
        for (name, p) in [("q", &q_proj), ("k", &k_proj), ("v", &v_proj)] {
            if p.in_channels() != c || p.out_channels() != c || p.kernel_size() != 1 {
                return Err(Error::config(format!(
                    "{name} projection must be {c}→{c} with K=1, got {}→{} K={}",
                    p.in_channels(),
                    p.out_channels(),
                    p.kernel_size()
                )));
            }
        }
        if k_proj.groups() != q_proj.groups() || v_proj.groups() != q_proj.groups() {
            return Err(Error::config("q, k and v projections must share one group count"));
        }
        if num_heads == 0 || !c.is_multiple_of(num_heads) {
            return Err(Error::config(format!("num_heads={num_heads} does not divide channels={c}")));
        }
        Ok(Self { q_proj, k_proj, v_proj, num_heads })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn channels(&self) -> usize {
        self.q_proj.out_channels()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads
    }

    pub fn groups(&self) -> usize {
        self.q_proj.groups()
    }
}

/// Additive `P × P` mask hiding every key position whose flag is `false`.
pub fn key_padding_mask(visible: &[bool]) -> Tensor {
    let p = visible.len();
    let row: Vec<f64> = visible.iter().map(|&v| if v { 0.0 } else { MASKED_SCORE }).collect();
    Tensor::from_parts(vec![p, p], row.repeat(p))
}

/// `softmax(QKᵀ/√d_k + mask)`, one probability row per query position.
pub fn attention_probs(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (p, d) = q.dims2()?;
    let (pk, dk) = k.dims2()?;
    if (p, d) != (pk, dk) {
        return Err(Error::dim(format!("Q {:?} and K {:?} must match", q.shape(), k.shape())));
    }
    let scale = (d as f64).sqrt();
    let mut scores = matmul(q, &k.transpose()?)?.map(|s| s / scale);
    if let Some(m) = mask {
        if m.shape() != [p, p] {
            return Err(Error::dim(format!("mask shape {:?} does not match {p}×{p} scores", m.shape())));
        }
        scores = scores.add(m)?;
    }
    Ok(softmax_rows(&scores))
}

pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if v.shape() != q.shape() {
        return Err(Error::dim(format!("V {:?} must match Q {:?}", v.shape(), q.shape())));
    }
    matmul(&attention_probs(q, k, mask)?, v)
}

/// Q, K, V projections of `f`.
///
/// Keys are formed without the key bias: it adds `q·b` to every score in a
/// row, which softmax cancels, so leaving it out makes the output bitwise
/// independent of a parameter it depends on only in exact arithmetic.
pub fn project_qkv(f: &Tensor, w: &AttentionWeights) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c) = f.dims2()?;
    if c != w.channels() {
        return Err(Error::dim(format!("attention over {} channels got activation {:?}", w.channels(), f.shape())));
    }
    Ok((grouped_conv1d(f, &w.q_proj)?, grouped_conv1d_unbiased(f, &w.k_proj)?, grouped_conv1d(f, &w.v_proj)?))
}

/// Per-head attention over already-projected Q, K, V; heads concatenated in channel order.
pub fn attend_heads(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    let (_, c) = q.dims2()?;
    if num_heads == 0 || !c.is_multiple_of(num_heads) {
        return Err(Error::config(format!("num_heads={num_heads} does not divide channels={c}")));
    }
    let d = c / num_heads;
    let heads = (0..num_heads)
        .map(|h| {
            scaled_dot_attention(
                &q.column_slice(h * d, d)?,
                &k.column_slice(h * d, d)?,
                &v.column_slice(h * d, d)?,
                mask,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_columns(&heads)
}

pub fn multi_head_attention(f: &Tensor, w: &AttentionWeights, mask: Option<&Tensor>) -> Result<Tensor> {
    let (q, k, v) = project_qkv(f, w)?;
    attend_heads(&q, &k, &v, w.num_heads(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, c: usize, g: usize, h: usize) -> AttentionWeights {
        let mut layer = || LayerWeights::new(random(rng, &[c, c / g, 1]), random(rng, &[c]), g).unwrap();
        let (q, k, v) = (layer(), layer(), layer());
        AttentionWeights::new(q, k, v, h).unwrap()
    }

    #[test]
    fn single_position_returns_value_row() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![7.0, -3.0]]).unwrap();
        assert!(scaled_dot_attention(&q, &k, &v, None).unwrap().bitwise_eq(&v));
    }

    #[test]
    fn zero_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, &[4, 3]);
        let v = random(&mut rng, &[4, 3]);
        let out = scaled_dot_attention(&q, &Tensor::zeros(&[4, 3]), &v, None).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|p| v.get2(p, c)).sum::<f64>() / 4.0;
            for p in 0..4 {
                assert!((out.get2(p, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_position_hand_evaluation() {
        let q = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let e = std::f64::consts::E;
        let sigma = e / (e + 1.0);
        assert!((out.get2(0, 0) - (sigma * 2.0 + (1.0 - sigma) * 4.0)).abs() < 1e-12);
        assert!((out.get2(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(scaled_dot_attention(&a, &Tensor::zeros(&[3, 3]), &a, None), Err(Error::Dimension(_))));
        assert!(matches!(scaled_dot_attention(&a, &a, &Tensor::zeros(&[2, 2]), None), Err(Error::Dimension(_))));
        assert!(scaled_dot_attention(&a, &a, &a, Some(&Tensor::zeros(&[3, 3]))).is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        let layer = || LayerWeights::zeros(6, 6, 1, 1).unwrap();
        assert!(matches!(AttentionWeights::new(layer(), layer(), layer(), 4), Err(Error::Config(_))));
        let w = AttentionWeights::new(layer(), layer(), layer(), 3).unwrap();
        assert_eq!(w.head_dim(), 2);
    }

    #[test]
    fn bert_base_head_dim() {
        let layer = || LayerWeights::zeros(768, 768, 4, 1).unwrap();
        let w = AttentionWeights::new(layer(), layer(), layer(), 12).unwrap();
        assert_eq!(w.head_dim(), 64);
    }

    #[test]
    fn key_bias_is_ignored_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_weights(&mut rng, 4, 2, 2);
        let f = random(&mut rng, &[5, 4]);
        let mut shifted = w.clone();
        shifted.k_proj.bias_mut().data_mut().iter_mut().for_each(|b| *b += 0.7);
        let a = multi_head_attention(&f, &w, None).unwrap();
        assert!(a.bitwise_eq(&multi_head_attention(&f, &shifted, None).unwrap()));
        // Textbook form with biased keys agrees up to rounding.
        let (q, _, v) = project_qkv(&f, &shifted).unwrap();
        let k = grouped_conv1d(&f, &shifted.k_proj).unwrap();
        assert!(attend_heads(&q, &k, &v, 2, None).unwrap().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn one_head_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_weights(&mut rng, 4, 2, 1);
        let f = random(&mut rng, &[3, 4]);
        let (q, k, v) = project_qkv(&f, &w).unwrap();
        let want = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!(multi_head_attention(&f, &w, None).unwrap().bitwise_eq(&want));
    }

    #[test]
    fn two_heads_match_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_weights(&mut rng, 4, 1, 2);
        let f = random(&mut rng, &[5, 4]);
        let (q, k, v) = project_qkv(&f, &w).unwrap();
        // Straight-line attention per head without the library softmax.
        let mut out = vec![vec![0.0; 4]; 5];
        for h in 0..2 {
            for i in 0..5 {
                let scores: Vec<f64> = (0..5)
                    .map(|j| (0..2).map(|d| q.get2(i, 2 * h + d) * k.get2(j, 2 * h + d)).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for d in 0..2 {
                    out[i][2 * h + d] = (0..5).map(|j| scores[j].exp() / z * v.get2(j, 2 * h + d)).sum();
                }
            }
        }
        let oracle = Tensor::from_rows(&out).unwrap();
        assert!(multi_head_attention(&f, &w, None).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn probability_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = random(&mut rng, &[6, 4]);
        let k = random(&mut rng, &[6, 4]);
        let mask = key_padding_mask(&[true, true, true, false, true, false]);
        let a = attention_probs(&q, &k, Some(&mask)).unwrap();
        for p in 0..6 {
            assert!((a.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.row(p).iter().all(|&x| x >= 0.0));
            assert_eq!(a.get2(p, 3), 0.0);
            assert_eq!(a.get2(p, 5), 0.0);
        }
    }

    #[test]
    fn doubled_keys_double_the_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random(&mut rng, &[4, 2]);
        let k = random(&mut rng, &[4, 2]);
        let got = attention_probs(&q, &k.scale(2.0), None).unwrap();
        let scores = matmul(&q, &k.transpose().unwrap()).unwrap().map(|s| 2.0 * s / 2f64.sqrt());
        assert!(got.max_abs_diff(&softmax_rows(&scores)) < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random_weights(&mut rng, 6, 3, 3);
        let f = random(&mut rng, &[5, 6]);
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.row(i).to_vec()).collect();
        let fp = Tensor::from_rows(&rows).unwrap();
        let out = multi_head_attention(&f, &w, None).unwrap();
        let outp = multi_head_attention(&fp, &w, None).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in outp.row(new).iter().zip(out.row(old)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
