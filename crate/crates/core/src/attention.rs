//! Reference attention mechanisms: full softmax attention, sliding-window
//! attention and linear attention in both its parallel-masked and
//! recurrent forms. These are the ground truth the sparse mechanisms are
//! checked against.
//!
//! No `1/sqrt(d)` scaling is applied here; callers that want it scale the
//! queries beforehand.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{causal_mask, dot, matmul, softmax_rows, Tensor};

/// Query/key/value rows for one head. `q` and `k` are `n x d`, `v` is `n x d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttnInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
            if t.shape().len() != 2 {
                return shape_err(format!("{name} must be a matrix, got {:?}", t.shape()));
            }
        }
        if q.shape() != k.shape() {
            return shape_err(format!("q {:?} vs k {:?}", q.shape(), k.shape()));
        }
        if v.rows() != q.rows() {
            return shape_err(format!("v has {} rows, q has {}", v.rows(), q.rows()));
        }
        if q.rows() == 0 {
            return shape_err("empty sequence");
        }
        Ok(Self { q, k, v })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }
}

/// Softmax-weighted average of `v` rows `s in positions` for query row `t`.
pub(crate) fn attend_positions(
    inp: &AttnInputs,
    t: usize,
    positions: impl Iterator<Item = usize> + Clone,
) -> Vec<f64> {
    let q = inp.q.row(t);
    let max = positions
        .clone()
        .map(|s| dot(q, inp.k.row(s)))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0; inp.value_dim()];
    let mut den = 0.0;
    for s in positions {
        let w = (dot(q, inp.k.row(s)) - max).exp();
        den += w;
        for (o, &v) in num.iter_mut().zip(inp.v.row(s)) {
            *o += w * v;
        }
    }
    for o in &mut num {
        *o /= den;
    }
    num
}

fn collect_rows(n: usize, dv: usize, mut row: impl FnMut(usize) -> Vec<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dv);
    for t in 0..n {
        data.extend(row(t));
    }
    let out = Tensor::new(vec![n, dv], data)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("attention"));
    }
    Ok(out)
}

/// Causal softmax attention, evaluated per query as a stabilized ratio of sums.
pub fn full_attention(inp: &AttnInputs) -> Result<Tensor> {
    collect_rows(inp.len(), inp.value_dim(), |t| {
        attend_positions(inp, t, 0..=t)
    })
}

/// Matrix form: `softmax(Q K^T + mask) V` for an arbitrary additive mask.
pub fn masked_attention(inp: &AttnInputs, mask: &Tensor) -> Result<Tensor> {
    let scores = matmul(&inp.q, &inp.k.transpose()?)?;
    let probs = softmax_rows(&scores, Some(mask))?;
    matmul(&probs, &inp.v)
}

/// Causal attention through the matrix route with the standard causal mask.
pub fn full_attention_matrix(inp: &AttnInputs) -> Result<Tensor> {
    masked_attention(inp, &causal_mask(inp.len(), None))
}

/// Sliding-window attention over the `window` most recent positions.
pub fn swa(inp: &AttnInputs, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    collect_rows(inp.len(), inp.value_dim(), |t| {
        attend_positions(inp, t, (t + 1).saturating_sub(window)..=t)
    })
}

/// `(Q K^T ⊙ M) V` with the lower-triangular 0/1 mask, no normalization.
pub fn linear_attention_parallel(inp: &AttnInputs) -> Result<Tensor> {
    let mut scores = matmul(&inp.q, &inp.k.transpose()?)?;
    let n = inp.len();
    for t in 0..n {
        for s in t + 1..n {
            scores.set(t, s, 0.0);
        }
    }
    matmul(&scores, &inp.v)
}

/// `S_t = S_{t-1} + k_t^T v_t`, `o_t = q_t S_t` with a zero initial state.
pub fn linear_attention_recurrent(inp: &AttnInputs) -> Result<Tensor> {
    let d = inp.head_dim();
    let dv = inp.value_dim();
    let mut state = vec![0.0; d * dv];
    collect_rows(inp.len(), dv, |t| {
        rank_one_update(&mut state, inp.k.row(t), inp.v.row(t), 1.0);
        read_state(&state, inp.q.row(t), dv)
    })
}

/// `state += weight * k^T v` for a row-major `d x d_v` state.
pub(crate) fn rank_one_update(state: &mut [f64], k: &[f64], v: &[f64], weight: f64) {
    let dv = v.len();
    for (i, &ki) in k.iter().enumerate() {
        let c = weight * ki;
        if c == 0.0 {
            continue;
        }
        for (s, &vj) in state[i * dv..(i + 1) * dv].iter_mut().zip(v) {
            *s += c * vj;
        }
    }
}

/// `q S` for a row-major `d x d_v` state.
pub(crate) fn read_state(state: &[f64], q: &[f64], dv: usize) -> Vec<f64> {
    let mut out = vec![0.0; dv];
    for (i, &qi) in q.iter().enumerate() {
        if qi == 0.0 {
            continue;
        }
        for (o, &s) in out.iter_mut().zip(&state[i * dv..(i + 1) * dv]) {
            *o += qi * s;
        }
    }
    out
}
