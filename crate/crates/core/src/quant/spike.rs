//! Bitwise spike coding of int8 activations and an event-driven matmul
//! simulator.
//!
//! Each activation `a` in `[-127, 127]` becomes a sign plus seven binary
//! magnitude planes, plane `j` holding bit `j` of `|a|`. A matmul then only
//! touches weights whose activation bit fired on a given plane: every event
//! is one signed integer add into each output column's adder tree, and the
//! per-plane partial sums are combined by shift-add.

use serde::{Deserialize, Serialize};

use super::int8::{QuantizedBlockMatrix, QuantizedGroupActivation};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGNITUDE_PLANES: usize = 7;
/// Largest inner dimension for which the i32 tile accumulators cannot overflow.
pub const MAX_INNER_DIM: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    /// Activation group scales carried over from quantization.
    pub scales: Vec<f64>,
    /// `+1` or `-1` per element (zero encodes as `+1`).
    pub signs: Vec<i8>,
    /// `planes[j][idx]` is bit `j` of `|value[idx]|`.
    pub planes: Vec<Vec<u8>>,
}

/// Spike-event counts over magnitude planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiringRate {
    pub fired: u64,
    /// `7 * elements`.
    pub slots: u64,
}

impl FiringRate {
    pub fn value(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.fired as f64 / self.slots as f64
        }
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.value()
    }
}

pub fn encode_values(values: &[i8]) -> (Vec<i8>, Vec<Vec<u8>>) {
    let mut signs = Vec::with_capacity(values.len());
    let mut planes = vec![Vec::with_capacity(values.len()); MAGNITUDE_PLANES];
    for &v in values {
        // -128 has no 7-bit magnitude; quantization never produces it.
        let v = v.max(-127);
        signs.push(if v < 0 { -1 } else { 1 });
        let mag = v.unsigned_abs();
        for (j, plane) in planes.iter_mut().enumerate() {
            plane.push((mag >> j) & 1);
        }
    }
    (signs, planes)
}

pub fn spike_encode(q: &QuantizedGroupActivation) -> SpikeTrain {
    let (signs, planes) = encode_values(&q.values);
    SpikeTrain {
        rows: q.rows,
        cols: q.cols,
        group_size: q.group_size,
        scales: q.scales.clone(),
        signs,
        planes,
    }
}

/// Reassembles `sign * sum_j plane_j * 2^j`.
pub fn spike_decode(train: &SpikeTrain) -> Vec<i8> {
    (0..train.signs.len())
        .map(|idx| {
            let mag: u8 = (0..MAGNITUDE_PLANES)
                .map(|j| train.planes[j][idx] << j)
                .sum();
            train.signs[idx] * mag as i8
        })
        .collect()
}

impl SpikeTrain {
    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn firing(&self) -> FiringRate {
        let fired = self
            .planes
            .iter()
            .map(|p| p.iter().map(|&b| b as u64).sum::<u64>())
            .sum();
        FiringRate {
            fired,
            slots: (MAGNITUDE_PLANES * self.len()) as u64,
        }
    }

    /// Per-plane firing fractions, plane 0 first.
    pub fn plane_rates(&self) -> Vec<f64> {
        self.planes
            .iter()
            .map(|p| {
                if p.is_empty() {
                    0.0
                } else {
                    p.iter().map(|&b| b as f64).sum::<f64>() / p.len() as f64
                }
            })
            .collect()
    }

    pub fn dequantize(&self) -> Tensor {
        let values = spike_decode(self);
        let gpr = self.cols.div_ceil(self.group_size);
        let data = values
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let (i, j) = (idx / self.cols, idx % self.cols);
                v as f64 * self.scales[i * gpr + j / self.group_size]
            })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("dims")
    }
}

/// Pooled firing statistics; every element counts once, so longer
/// sequences weigh proportionally more.
pub fn firing_rate(trains: &[SpikeTrain]) -> FiringRate {
    trains
        .iter()
        .fold(FiringRate { fired: 0, slots: 0 }, |acc, t| {
            let f = t.firing();
            FiringRate {
                fired: acc.fired + f.fired,
                slots: acc.slots + f.slots,
            }
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCountReport {
    /// Signed integer additions performed (one per fired bit per output column).
    pub add_events: u64,
    /// Bit-plane slots that did not fire and were skipped.
    pub skipped_events: u64,
    /// Multiply-accumulates of the equivalent dense matmul.
    pub dense_mac_equivalent: u64,
}

#[derive(Debug, Clone)]
pub struct SpikeMatmulOutput {
    pub output: Tensor,
    /// Integer partial sums, indexed `[(row * tiles + tile) * cols + col]`.
    pub tile_sums: Vec<i32>,
    pub tiles: usize,
    pub ops: OpCountReport,
    pub firing: FiringRate,
}

/// Turns per-tile integer sums into reals:
/// `out[i][j] = sum_tile sums[i,tile,j] * a_scale[i,tile] * w_scale[tile, j]`.
pub fn dequantize_tile_sums(
    tile_sums: &[i32],
    tiles: usize,
    rows: usize,
    a_scales: &[f64],
    w: &QuantizedBlockMatrix,
) -> Tensor {
    let n = w.cols;
    let mut out = Tensor::zeros(&[rows, n]);
    for i in 0..rows {
        for tile in 0..tiles {
            let a_scale = a_scales[i * tiles + tile];
            let base = (i * tiles + tile) * n;
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                let w_scale = w.scales[tile * w.blocks_across() + j / w.block_cols];
                *o += tile_sums[base + j] as f64 * a_scale * w_scale;
            }
        }
    }
    out
}

/// Event-driven `A W` with per-plane sparse accumulation and shift-add.
pub fn spike_matmul(a: &SpikeTrain, w: &QuantizedBlockMatrix) -> Result<SpikeMatmulOutput> {
    if a.cols != w.rows {
        return shape_err(format!(
            "activations {}x{} vs weights {}x{}",
            a.rows, a.cols, w.rows, w.cols
        ));
    }
    if a.group_size != w.block_rows {
        return shape_err(format!(
            "activation group {} must match weight block height {}",
            a.group_size, w.block_rows
        ));
    }
    if a.cols > MAX_INNER_DIM {
        return Err(Error::Overflow(format!(
            "inner dimension {} exceeds {MAX_INNER_DIM}",
            a.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, w.cols);
    let tiles = k.div_ceil(a.group_size);
    let mut tile_sums = vec![0i32; m * tiles * n];
    let mut partial = vec![0i32; n];
    let mut fired = Vec::with_capacity(a.group_size);
    let mut add_events = 0u64;

    for i in 0..m {
        for tile in 0..tiles {
            let cols = tile * a.group_size..((tile + 1) * a.group_size).min(k);
            let acc = &mut tile_sums[(i * tiles + tile) * n..(i * tiles + tile + 1) * n];
            for (bit, plane) in a.planes.iter().enumerate() {
                fired.clear();
                fired.extend(cols.clone().filter(|&kk| plane[i * k + kk] == 1));
                if fired.is_empty() {
                    continue;
                }
                partial.fill(0);
                for &kk in &fired {
                    let w_row = &w.values[kk * n..(kk + 1) * n];
                    if a.signs[i * k + kk] < 0 {
                        for (p, &wv) in partial.iter_mut().zip(w_row) {
                            *p -= wv as i32;
                        }
                    } else {
                        for (p, &wv) in partial.iter_mut().zip(w_row) {
                            *p += wv as i32;
                        }
                    }
                }
                add_events += (fired.len() * n) as u64;
                for (s, &p) in acc.iter_mut().zip(&partial) {
                    *s += p << bit;
                }
            }
        }
    }

    let dense = (m * k * n) as u64;
    let ops = OpCountReport {
        add_events,
        skipped_events: MAGNITUDE_PLANES as u64 * dense - add_events,
        dense_mac_equivalent: dense,
    };
    let output = dequantize_tile_sums(&tile_sums, tiles, m, &a.scales, w);
    Ok(SpikeMatmulOutput {
        output,
        tile_sums,
        tiles,
        ops,
        firing: a.firing(),
    })
}
