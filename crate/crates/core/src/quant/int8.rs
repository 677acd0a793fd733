//! Symmetric INT8 quantization: 128x128 weight blocks with a per-block
//! clipping search, and 1x128 activation groups whose scale is the group's
//! adaptive firing threshold.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

pub const WEIGHT_BLOCK: usize = 128;
pub const ACTIVATION_GROUP: usize = 128;
pub const INT8_MAX: i8 = 127;

/// Clip coefficients tried per block by default: 1.00, 0.95, ..., 0.50.
pub const DEFAULT_CLIP_GRID: [f64; 11] =
    [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5];

/// Round half away from zero, clamp to `[-127, 127]`.
pub fn quantize_value(v: f64, scale: f64) -> i8 {
    (v / scale).round().clamp(-127.0, 127.0) as i8
}

fn max_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlockMatrix {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    /// Row-major int8 payload of the whole matrix.
    pub values: Vec<i8>,
    /// One scale per block, blocks in row-major order.
    pub scales: Vec<f64>,
    /// Chosen clip coefficient per block.
    pub clips: Vec<f64>,
    /// Quantization MSE per block at the chosen clip.
    pub mse: Vec<f64>,
}

impl QuantizedBlockMatrix {
    pub fn blocks_down(&self) -> usize {
        self.rows.div_ceil(self.block_rows)
    }

    pub fn blocks_across(&self) -> usize {
        self.cols.div_ceil(self.block_cols)
    }

    pub fn block_of(&self, i: usize, j: usize) -> usize {
        (i / self.block_rows) * self.blocks_across() + j / self.block_cols
    }

    pub fn value(&self, i: usize, j: usize) -> i8 {
        self.values[i * self.cols + j]
    }

    pub fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scales[self.block_of(i, j)]
    }

    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.rows * self.cols)
            .map(|idx| {
                let (i, j) = (idx / self.cols, idx % self.cols);
                self.values[idx] as f64 * self.scale_at(i, j)
            })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("dims")
    }
}

/// MSE between `block` and its round trip through `scale`.
pub fn roundtrip_mse(block: &[f64], scale: f64) -> f64 {
    if block.is_empty() {
        return 0.0;
    }
    block
        .iter()
        .map(|&v| {
            let e = quantize_value(v, scale) as f64 * scale - v;
            e * e
        })
        .sum::<f64>()
        / block.len() as f64
}

/// Per block, try each clip `c` (scale `c * max|block| / 127`) and keep the
/// one with the lowest round-trip MSE; ties go to the larger `c`.
pub fn clip_search(block: &[f64], grid: &[f64]) -> (f64, f64, f64) {
    let amax = max_abs(block.iter().copied());
    if amax == 0.0 {
        return (1.0, 1.0, 0.0);
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &c in grid {
        let scale = c * amax / 127.0;
        let mse = roundtrip_mse(block, scale);
        best = match best {
            Some((bc, bs, bm)) if mse > bm || (mse == bm && c <= bc) => Some((bc, bs, bm)),
            _ => Some((c, scale, mse)),
        };
    }
    best.expect("non-empty grid")
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return config_err("clip grid is empty");
    }
    if let Some(c) = grid.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return config_err(format!("clip coefficient {c} outside (0, 1]"));
    }
    Ok(())
}

pub fn quantize_weight_blocks(w: &Tensor, grid: &[f64]) -> Result<QuantizedBlockMatrix> {
    quantize_weight_blocks_with(w, grid, WEIGHT_BLOCK, WEIGHT_BLOCK)
}

pub fn quantize_weight_blocks_with(
    w: &Tensor,
    grid: &[f64],
    block_rows: usize,
    block_cols: usize,
) -> Result<QuantizedBlockMatrix> {
    validate_grid(grid)?;
    if w.shape().len() != 2 {
        return shape_err("weights must be a matrix");
    }
    if block_rows == 0 || block_cols == 0 {
        return config_err("block dimensions must be >= 1");
    }
    let (rows, cols) = (w.rows(), w.cols());
    let mut out = QuantizedBlockMatrix {
        rows,
        cols,
        block_rows,
        block_cols,
        values: vec![0; rows * cols],
        scales: Vec::new(),
        clips: Vec::new(),
        mse: Vec::new(),
    };
    for bi in 0..out.blocks_down() {
        for bj in 0..out.blocks_across() {
            let r = bi * block_rows..((bi + 1) * block_rows).min(rows);
            let c = bj * block_cols..((bj + 1) * block_cols).min(cols);
            let block: Vec<f64> = r
                .clone()
                .flat_map(|i| c.clone().map(move |j| (i, j)))
                .map(|(i, j)| w.get(i, j))
                .collect();
            let (clip, scale, mse) = clip_search(&block, grid);
            for i in r.clone() {
                for j in c.clone() {
                    out.values[i * cols + j] = quantize_value(w.get(i, j), scale);
                }
            }
            out.scales.push(scale);
            out.clips.push(clip);
            out.mse.push(mse);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedGroupActivation {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub values: Vec<i8>,
    /// One scale per `(row, group)`, row-major.
    pub scales: Vec<f64>,
}

impl QuantizedGroupActivation {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scales[i * self.groups_per_row() + j / self.group_size]
    }

    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.rows * self.cols)
            .map(|idx| self.values[idx] as f64 * self.scale_at(idx / self.cols, idx % self.cols))
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("dims")
    }
}

pub fn quantize_activation_groups(x: &Tensor) -> Result<QuantizedGroupActivation> {
    quantize_activation_groups_with(x, ACTIVATION_GROUP)
}

/// Scale per group is `max|group| / 127` (1 for an all-zero group).
pub fn quantize_activation_groups_with(
    x: &Tensor,
    group_size: usize,
) -> Result<QuantizedGroupActivation> {
    if x.shape().len() != 2 {
        return shape_err("activations must be a matrix");
    }
    if group_size == 0 {
        return config_err("group size must be >= 1");
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut values = Vec::with_capacity(rows * cols);
    let mut scales = Vec::new();
    for i in 0..rows {
        for group in x.row(i).chunks(group_size) {
            let amax = max_abs(group.iter().copied());
            let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
            values.extend(group.iter().map(|&v| quantize_value(v, scale)));
            scales.push(scale);
        }
    }
    Ok(QuantizedGroupActivation {
        rows,
        cols,
        group_size,
        values,
        scales,
    })
}
