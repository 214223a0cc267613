//! Position-wise fully-connected, 1D convolution and grouped 1D convolution
//! layers, plus the token/position/segment embedding stage.
//!
//! Activations are `(P, C)` tensors: one row per sequence position, one column
//! per channel. All three layer kinds share [`LayerWeights`], whose kernel is
//! laid out `(C_out, C_in / G, K)` so the ungrouped `K = 1` case is a plain
//! `C_out × C_in` matrix.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, LayerNormParams, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    kernel: Tensor,
    bias: Tensor,
    groups: usize,
}

impl LayerWeights {
    pub fn new(kernel: Tensor, bias: Tensor, groups: usize) -> Result<Self> {
        let &[c_out, _, k] = kernel.shape() else {
            return Err(Error::dim(format!("kernel must be rank 3 (C_out, C_in/G, K), got {:?}", kernel.shape())));
        };
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::config(format!("groups={groups} does not divide C_out={c_out}")));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {k}")));
        }
        if bias.shape() != [c_out] {
            return Err(Error::dim(format!("bias shape {:?} does not match C_out={c_out}", bias.shape())));
        }
        Ok(Self { kernel, bias, groups })
    }

    /// Zero kernel and bias for a `c_in → c_out` layer.
    pub fn zeros(c_in: usize, c_out: usize, groups: usize, kernel_size: usize) -> Result<Self> {
        check_groups(c_in, c_out, groups)?;
        Self::new(Tensor::zeros(&[c_out, c_in / groups, kernel_size]), Tensor::zeros(&[c_out]), groups)
    }

    /// A `C_out × C_in` matrix as an ungrouped `K = 1` layer.
    pub fn dense(matrix: &Tensor, bias: Tensor) -> Result<Self> {
        let (c_out, c_in) = matrix.dims2()?;
        let kernel = Tensor::new(vec![c_out, c_in, 1], matrix.data().to_vec())?;
        Self::new(kernel, bias, 1)
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor {
        &mut self.kernel
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// Kernel element count, excluding bias.
    pub fn kernel_len(&self) -> usize {
        self.kernel.len()
    }

    /// Kernel element at output channel `c`, within-group input index `i`, tap `k`.
    pub fn w(&self, c: usize, i: usize, k: usize) -> f64 {
        let s = self.kernel.shape();
        self.kernel.data()[(c * s[1] + i) * s[2] + k]
    }

    /// Group that owns output channel `c`.
    pub fn group_of_output(&self, c: usize) -> usize {
        c * self.groups / self.out_channels()
    }

    /// Embeds a grouped layer into an equivalent ungrouped one (zeros off the block diagonal).
    pub fn to_dense(&self) -> Self {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel_size());
        let cin_g = c_in / self.groups;
        let mut kernel = vec![0.0; c_out * c_in * k];
        for c in 0..c_out {
            let g = self.group_of_output(c);
            for i in 0..cin_g {
                for t in 0..k {
                    kernel[(c * c_in + g * cin_g + i) * k + t] = self.w(c, i, t);
                }
            }
        }
        Self { kernel: Tensor::from_parts(vec![c_out, c_in, k], kernel), bias: self.bias.clone(), groups: 1 }
    }

    fn check_input(&self, f: &Tensor) -> Result<(usize, usize)> {
        let (p, c_in) = f.dims2()?;
        if c_in != self.in_channels() {
            return Err(Error::dim(format!(
                "layer expects {} input channels, activation has shape {:?}",
                self.in_channels(),
                f.shape()
            )));
        }
        Ok((p, c_in))
    }
}

pub(crate) fn check_groups(c_in: usize, c_out: usize, groups: usize) -> Result<()> {
    if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(Error::config(format!("groups={groups} must divide C_in={c_in} and C_out={c_out}")));
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// `out[p, c] = Σ_i w[c, i] · f[p, i] + bias[c]`, computed as a matrix product
/// against the transposed weight matrix.
pub fn positionwise_fc(f: &Tensor, w: &LayerWeights) -> Result<Tensor> {
    if w.groups() != 1 || w.kernel_size() != 1 {
        return Err(Error::config(format!(
            "position-wise FC needs G=1, K=1; got G={}, K={}",
            w.groups(),
            w.kernel_size()
        )));
    }
    let (p, c_in) = w.check_input(f)?;
    let c_out = w.out_channels();
    let mut wt = vec![0.0; c_in * c_out];
    for (c, row) in w.kernel().data().chunks(c_in).enumerate() {
        for (i, &v) in row.iter().enumerate() {
            wt[i * c_out + c] = v;
        }
    }
    let mut out = vec![0.0; p * c_out];
    gemm_acc(&mut out, f.data(), &wt, p, c_in, c_out);
    add_bias(&mut out, w.bias().data());
    Ok(Tensor::from_parts(vec![p, c_out], out))
}

/// Ungrouped "same"-padded 1D convolution:
/// `out[p, c] = Σ_i Σ_k w[c, i, k] · f[p − (K−1)/2 + k, i] + bias[c]`,
/// reading zero outside `[0, P)`.
pub fn conv1d(f: &Tensor, w: &LayerWeights) -> Result<Tensor> {
    if w.groups() != 1 {
        return Err(Error::config(format!("conv1d is ungrouped; got G={}", w.groups())));
    }
    let (p, c_in) = w.check_input(f)?;
    let (c_out, k) = (w.out_channels(), w.kernel_size());
    let off = (k - 1) / 2;
    let mut out = vec![0.0; p * c_out];
    for pos in 0..p {
        for c in 0..c_out {
            let mut acc = 0.0;
            for i in 0..c_in {
                for t in 0..k {
                    let Some(src) = (pos + t).checked_sub(off).filter(|&s| s < p) else {
                        continue;
                    };
                    acc += w.w(c, i, t) * f.data()[src * c_in + i];
                }
            }
            out[pos * c_out + c] = acc + w.bias().data()[c];
        }
    }
    Ok(Tensor::from_parts(vec![p, c_out], out))
}

/// Grouped 1D convolution. Output channel `c` belongs to group
/// `g = ⌊c·G / C_out⌋` and reads only input channels
/// `[g·C_in/G, (g+1)·C_in/G)`; each group is an ordinary convolution with its
/// own weights. Accumulation order per output element matches [`conv1d`].
pub fn grouped_conv1d(f: &Tensor, w: &LayerWeights) -> Result<Tensor> {
    let mut out = grouped_conv1d_unbiased(f, w)?;
    add_bias(out.data_mut(), w.bias().data());
    Ok(out)
}

/// [`grouped_conv1d`] without the bias term.
pub(crate) fn grouped_conv1d_unbiased(f: &Tensor, w: &LayerWeights) -> Result<Tensor> {
    let (p, c_in) = w.check_input(f)?;
    let c_out = w.out_channels();
    let groups = w.groups();
    check_groups(c_in, c_out, groups)?;
    let (cin_g, cout_g, k) = (c_in / groups, c_out / groups, w.kernel_size());
    let off = (k - 1) / 2;
    let kernel = w.kernel().data();
    let fd = f.data();

    let mut out = vec![0.0; p * c_out];
    let mut wt = vec![0.0; cin_g * k * cout_g];
    const TILE_ROWS: usize = 8;
    const TILE_COLS: usize = 256;
    for g in 0..groups {
        // (i, k) rows × output-channel columns for this group.
        for c in 0..cout_g {
            let src = &kernel[(g * cout_g + c) * cin_g * k..(g * cout_g + c + 1) * cin_g * k];
            for (ik, &v) in src.iter().enumerate() {
                wt[ik * cout_g + c] = v;
            }
        }
        for nb in (0..cout_g).step_by(TILE_COLS) {
            let ne = (nb + TILE_COLS).min(cout_g);
            for pb in (0..p).step_by(TILE_ROWS) {
                let pe = (pb + TILE_ROWS).min(p);
                for i in 0..cin_g {
                    for t in 0..k {
                        let brow = &wt[(i * k + t) * cout_g + nb..(i * k + t) * cout_g + ne];
                        for pp in pb..pe {
                            let Some(src) = (pp + t).checked_sub(off).filter(|&s| s < p) else {
                                continue;
                            };
                            let x = fd[src * c_in + g * cin_g + i];
                            let base = pp * c_out + g * cout_g;
                            for (o, &wv) in out[base + nb..base + ne].iter_mut().zip(brow) {
                                *o += x * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![p, c_out], out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub token_table: Tensor,
    pub position_table: Tensor,
    pub segment_table: Tensor,
    pub norm: LayerNormParams,
}

impl EmbeddingTables {
    pub fn channels(&self) -> usize {
        self.token_table.shape()[1]
    }

    /// `token_table[id_p] + position_table[p] + segment_table[seg_p]`, before normalization.
    pub fn summed(&self, token_ids: &[usize], segment_ids: &[usize]) -> Result<Tensor> {
        let p = token_ids.len();
        if segment_ids.len() != p {
            return Err(Error::dim(format!("{p} token ids but {} segment ids", segment_ids.len())));
        }
        if p == 0 {
            return Err(Error::dim("empty token sequence"));
        }
        let (vocab, c) = self.token_table.dims2()?;
        let (max_pos, _) = self.position_table.dims2()?;
        let (n_seg, _) = self.segment_table.dims2()?;
        if p > max_pos {
            return Err(Error::Index(format!("sequence length {p} exceeds the {max_pos} available positions")));
        }
        let mut out = Vec::with_capacity(p * c);
        for (pos, (&tok, &seg)) in token_ids.iter().zip(segment_ids).enumerate() {
            if tok >= vocab {
                return Err(Error::Index(format!("token id {tok} at position {pos} is outside vocabulary of {vocab}")));
            }
            if seg >= n_seg {
                return Err(Error::Index(format!("segment id {seg} at position {pos} must be below {n_seg}")));
            }
            let (t, q, s) = (self.token_table.row(tok), self.position_table.row(pos), self.segment_table.row(seg));
            out.extend((0..c).map(|j| t[j] + q[j] + s[j]));
        }
        Ok(Tensor::from_parts(vec![p, c], out))
    }
}

pub fn embed(token_ids: &[usize], segment_ids: &[usize], tables: &EmbeddingTables) -> Result<Tensor> {
    tables.norm.apply(&tables.summed(token_ids, segment_ids)?)
}
