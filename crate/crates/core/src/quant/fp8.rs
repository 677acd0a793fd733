//! Software emulation of the FP8 E4M3 activation path.
//!
//! E4M3 here is the variant without infinities: exponent bias 7, the all-ones
//! exponent still encodes normal numbers except mantissa `111`, which is NaN.
//! The largest finite magnitude is `1.75 * 2^8 = 448`. Encoding rounds to
//! nearest-even and saturates to ±448.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{matmul, Tensor};

pub const E4M3_MAX: f64 = 448.0;
pub const E4M3_MAX_CODE: u8 = 0x7E;
const EXP_BIAS: i32 = 7;
const MIN_NORMAL_EXP: i32 = -6;

pub fn is_nan_code(code: u8) -> bool {
    code & 0x7F == 0x7F
}

/// Decodes one E4M3 byte; the two NaN codes decode to `f64::NAN`.
pub fn fp8_decode(code: u8) -> f64 {
    if is_nan_code(code) {
        return f64::NAN;
    }
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0x0F) as i32;
    let mant = (code & 0x07) as f64;
    let mag = if exp == 0 {
        mant / 8.0 * 2f64.powi(MIN_NORMAL_EXP)
    } else {
        (1.0 + mant / 8.0) * 2f64.powi(exp - EXP_BIAS)
    };
    sign * mag
}

/// Encodes a finite value with round-to-nearest-even, saturating at ±448.
pub fn fp8_encode(v: f64) -> Result<u8> {
    if v.is_nan() {
        return Err(Error::Config("NaN cannot be encoded as E4M3".into()));
    }
    let sign = if v.is_sign_negative() { 0x80u8 } else { 0 };
    let a = v.abs();
    if a >= E4M3_MAX {
        return Ok(sign | E4M3_MAX_CODE);
    }
    // Magnitudes are integers in units of the binade's mantissa step.
    let exp = if a < 2f64.powi(MIN_NORMAL_EXP) {
        MIN_NORMAL_EXP
    } else {
        f64_exponent(a)
    };
    let step = 2f64.powi(exp - 3);
    let units = (a / step).round_ties_even() as u32;
    let code = if exp == MIN_NORMAL_EXP && units < 8 {
        units as u8
    } else {
        // units in 8..=16; 16 carries into the next binade
        let (exp, units) = if units == 16 {
            (exp + 1, 8)
        } else {
            (exp, units)
        };
        let field = (exp + EXP_BIAS) as u8;
        (field << 3) | (units - 8) as u8
    };
    if code > E4M3_MAX_CODE {
        return Ok(sign | E4M3_MAX_CODE);
    }
    Ok(sign | code)
}

/// Unbiased binary exponent of a positive normal f64.
fn f64_exponent(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fp8Tensor {
    pub rows: usize,
    pub cols: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub codes: Vec<u8>,
    /// One scale per tile, tiles in row-major order.
    pub scales: Vec<f64>,
}

impl Fp8Tensor {
    pub fn tiles_across(&self) -> usize {
        self.cols.div_ceil(self.tile_cols)
    }

    pub fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scales[(i / self.tile_rows) * self.tiles_across() + j / self.tile_cols]
    }

    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.rows * self.cols)
            .map(|idx| {
                fp8_decode(self.codes[idx]) * self.scale_at(idx / self.cols, idx % self.cols)
            })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("dims")
    }
}

/// Tile-wise quantization with scale `max|tile| / 448` (1 for a zero tile).
pub fn fp8_quantize_tiled(x: &Tensor, tile_rows: usize, tile_cols: usize) -> Result<Fp8Tensor> {
    if x.shape().len() != 2 {
        return shape_err("FP8 input must be a matrix");
    }
    if tile_rows == 0 || tile_cols == 0 {
        return config_err("tile dimensions must be >= 1");
    }
    if !x.is_finite() {
        return Err(Error::Config("FP8 input contains non-finite values".into()));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Fp8Tensor {
        rows,
        cols,
        tile_rows,
        tile_cols,
        codes: vec![0; rows * cols],
        scales: Vec::new(),
    };
    for ti in 0..rows.div_ceil(tile_rows) {
        for tj in 0..cols.div_ceil(tile_cols) {
            let r = ti * tile_rows..((ti + 1) * tile_rows).min(rows);
            let c = tj * tile_cols..((tj + 1) * tile_cols).min(cols);
            let amax = r
                .clone()
                .flat_map(|i| c.clone().map(move |j| (i, j)))
                .fold(0.0f64, |m, (i, j)| m.max(x.get(i, j).abs()));
            let scale = if amax == 0.0 { 1.0 } else { amax / E4M3_MAX };
            for i in r.clone() {
                for j in c.clone() {
                    out.codes[i * cols + j] = fp8_encode(x.get(i, j) / scale)?;
                }
            }
            out.scales.push(scale);
        }
    }
    Ok(out)
}

/// Activation layout: 1x128 groups.
pub fn fp8_quantize(x: &Tensor) -> Result<Fp8Tensor> {
    fp8_quantize_tiled(x, 1, 128)
}

/// Weight layout: 128x128 blocks.
pub fn fp8_quantize_weights(w: &Tensor) -> Result<Fp8Tensor> {
    fp8_quantize_tiled(w, 128, 128)
}

/// Decodes both operands and multiplies in f64.
pub fn fp8_matmul_emulated(a: &Fp8Tensor, w: &Fp8Tensor) -> Result<Tensor> {
    matmul(&a.dequantize(), &w.dequantize())
}
