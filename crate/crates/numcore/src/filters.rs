//! Filter-bank helpers.
//!
//! A filter bank is a tensor of shape `[m, n, s, s]` (or `[m, n]`, read as
//! `s = 1`): one `s x s` filter per (output channel, input channel) pair.
//! `[m, n, l]` banks hold flat filters of length `l`.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Norm floor for filters whose weights are all zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// `(m, n, s*s)` of a filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterDims {
    pub out_channels: usize,
    pub in_channels: usize,
    pub filter_len: usize,
}

impl FilterDims {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [m, n] => Ok(Self {
                out_channels: m,
                in_channels: n,
                filter_len: 1,
            }),
            [m, n, l] => Ok(Self {
                out_channels: m,
                in_channels: n,
                filter_len: l,
            }),
            [m, n, s, t] if s == t => Ok(Self {
                out_channels: m,
                in_channels: n,
                filter_len: s * s,
            }),
            _ => contract(format!("not a filter bank shape: {shape:?}")),
        }
    }

    pub fn filters(&self) -> usize {
        self.out_channels * self.in_channels
    }

    /// Shape of a per-filter scalar field (importance, fusion weight).
    pub fn field_shape(&self) -> [usize; 2] {
        [self.out_channels, self.in_channels]
    }
}

/// Result of [`filter_normalize`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub weights: Tensor,
    /// Flat indices `i * n + j` of filters whose norm fell under
    /// [`NORM_FLOOR`] and were divided by the floor instead.
    pub guarded: Vec<usize>,
}

/// Per-filter Euclidean norms, shaped `[m, n]`.
pub fn filter_norms(w: &Tensor) -> Result<Tensor> {
    let dims = FilterDims::of(w.shape())?;
    let f = dims.filter_len;
    let norms = w
        .data()
        .chunks_exact(f)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Tensor::new(dims.field_shape().to_vec(), norms)
}

/// Divides every filter by its own norm, `max(|w_ij|, NORM_FLOOR)`.
pub fn filter_normalize(w: &Tensor) -> Result<Normalized> {
    let dims = FilterDims::of(w.shape())?;
    let f = dims.filter_len;
    let mut out = w.clone();
    let mut guarded = Vec::new();
    for (idx, chunk) in out.data_mut().chunks_exact_mut(f).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            guarded.push(idx);
        }
        let denom = norm.max(NORM_FLOOR);
        chunk.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(Normalized {
        weights: out,
        guarded,
    })
}

/// Multiplies every filter of `bank` by the matching scalar of `field`.
pub fn scale_filters(field: &Tensor, bank: &Tensor) -> Result<Tensor> {
    let dims = FilterDims::of(bank.shape())?;
    if field.shape() != dims.field_shape() {
        return contract(format!(
            "per-filter field {:?} does not match bank {:?}",
            field.shape(),
            bank.shape()
        ));
    }
    let mut out = bank.clone();
    for (chunk, &a) in out
        .data_mut()
        .chunks_exact_mut(dims.filter_len)
        .zip(field.data())
    {
        chunk.iter_mut().for_each(|v| *v *= a);
    }
    Ok(out)
}
