//! Mixture of Block Attention.
//!
//! Keys are mean-pooled per block of `b` tokens. Each query scores the
//! complete blocks before its own, keeps the best `k - 1` of them and always
//! keeps its own block, then runs exact softmax attention over the tokens in
//! those blocks (causally masked inside the current block).

use serde::{Deserialize, Serialize};

use crate::attention::{attend_positions, AttnInputs};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{dot, softmax_slice, top_k_indices, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPool {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MobaParams {
    pub block_size: usize,
    pub top_k: usize,
    #[serde(default)]
    pub pool: BlockPool,
}

impl MobaParams {
    pub fn new(block_size: usize, top_k: usize) -> Result<Self> {
        let p = Self {
            block_size,
            top_k,
            pool: BlockPool::Mean,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.top_k == 0 {
            return config_err(format!(
                "MoBA needs b >= 1 and k >= 1, got b={}, k={}",
                self.block_size, self.top_k
            ));
        }
        Ok(())
    }

    pub fn num_blocks(&self, n: usize) -> usize {
        n.div_ceil(self.block_size)
    }
}

/// Fraction of a length-`n` context one query attends to: `min(1, k*b/n)`.
pub fn activation_ratio(n: usize, p: &MobaParams) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let attended = p.top_k as f64 * p.block_size as f64;
    (attended / n as f64).min(1.0)
}

/// Mean of each block of `b` key rows; the last block may be partial.
pub fn block_pool_keys(keys: &Tensor, block_size: usize) -> Result<Tensor> {
    if block_size == 0 {
        return config_err("block size must be >= 1");
    }
    if keys.shape().len() != 2 {
        return shape_err("keys must be a matrix");
    }
    let (n, d) = (keys.rows(), keys.cols());
    let blocks = n.div_ceil(block_size);
    let mut out = Tensor::zeros(&[blocks, d]);
    for j in 0..blocks {
        let rows = j * block_size..((j + 1) * block_size).min(n);
        let len = rows.len() as f64;
        let dst = out.row_mut(j);
        for s in rows {
            for (o, &v) in dst.iter_mut().zip(keys.row(s)) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o /= len;
        }
    }
    Ok(out)
}

/// Selected key blocks for one query together with the gate scores it saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub query: usize,
    /// Ascending block indices; always ends with the query's own block.
    pub blocks: Vec<usize>,
    /// Softmax scores over the complete blocks preceding the query's block.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSelection {
    pub block_size: usize,
    pub top_k: usize,
    pub entries: Vec<SelectionEntry>,
}

impl BlockSelection {
    pub fn blocks_for(&self, t: usize) -> &[usize] {
        &self.entries[t].blocks
    }
}

/// Raw `q_t · pooled_j` for the complete blocks before `t`'s own block.
pub fn block_scores(q: &[f64], pooled: &Tensor, t: usize, block_size: usize) -> Vec<f64> {
    let current = t / block_size;
    (0..current).map(|j| dot(q, pooled.row(j))).collect()
}

pub fn moba_select(q: &[f64], pooled: &Tensor, t: usize, p: &MobaParams) -> Result<SelectionEntry> {
    p.validate()?;
    let current = t / p.block_size;
    if pooled.shape().len() != 2 || pooled.rows() <= current || pooled.cols() != q.len() {
        return shape_err(format!(
            "pooled keys {:?} do not cover block {current} for width {}",
            pooled.shape(),
            q.len()
        ));
    }
    let raw = block_scores(q, pooled, t, p.block_size);
    let scores = if raw.is_empty() {
        Vec::new()
    } else {
        softmax_slice(&raw, None).expect("unmasked softmax")
    };
    // The current block takes one of the k slots.
    let mut blocks = top_k_indices(&scores, p.top_k - 1);
    blocks.push(current);
    Ok(SelectionEntry {
        query: t,
        blocks,
        scores,
    })
}

#[derive(Debug, Clone)]
pub struct MobaOutput {
    pub output: Tensor,
    pub selection: BlockSelection,
}

pub fn moba_select_all(inp: &AttnInputs, p: &MobaParams) -> Result<BlockSelection> {
    p.validate()?;
    let pooled = block_pool_keys(&inp.k, p.block_size)?;
    let entries = (0..inp.len())
        .map(|t| moba_select(inp.q.row(t), &pooled, t, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockSelection {
        block_size: p.block_size,
        top_k: p.top_k,
        entries,
    })
}

/// Token positions a query attends to under a block selection.
pub fn attended_positions(t: usize, blocks: &[usize], block_size: usize) -> Vec<usize> {
    blocks
        .iter()
        .flat_map(|&j| j * block_size..((j + 1) * block_size).min(t + 1))
        .collect()
}

pub fn moba_forward(inp: &AttnInputs, p: &MobaParams) -> Result<MobaOutput> {
    let selection = moba_select_all(inp, p)?;
    let n = inp.len();
    let mut data = Vec::with_capacity(n * inp.value_dim());
    for t in 0..n {
        let positions = attended_positions(t, selection.blocks_for(t), p.block_size);
        data.extend(attend_positions(inp, t, positions.into_iter()));
    }
    let output = Tensor::new(vec![n, inp.value_dim()], data)?;
    if !output.is_finite() {
        return Err(Error::NonFinite("moba_forward"));
    }
    Ok(MobaOutput { output, selection })
}
