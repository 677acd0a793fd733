//! Binary container for quantized tensors.
//!
//! ```text
//! magic       8 bytes  b"DSSAQNT1"
//! kind        u32 LE   1 = int8 weight blocks, 2 = int8 activation groups, 3 = fp8 tiles
//! rows, cols  u32 LE
//! tile_rows   u32 LE   block height / 1 for groups
//! tile_cols   u32 LE   block width / group size
//! num_scales  u32 LE
//! scales      num_scales x f32 LE
//! payload     rows * cols bytes (int8 two's complement, or E4M3 codes)
//! ```
//!
//! Scales are stored as f32, so a decoded container carries f32-rounded scales.
//! Clip coefficients and MSE statistics are not stored.

use crate::error::{Error, Result};
use crate::io::Reader;

use super::fp8::Fp8Tensor;
use super::int8::{QuantizedBlockMatrix, QuantizedGroupActivation};

pub const QUANT_MAGIC: &[u8; 8] = b"DSSAQNT1";

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedContainer {
    Int8Blocks(QuantizedBlockMatrix),
    Int8Groups(QuantizedGroupActivation),
    Fp8(Fp8Tensor),
}

fn write_header(out: &mut Vec<u8>, kind: u32, dims: [usize; 4], scales: &[f64]) {
    out.extend_from_slice(QUANT_MAGIC);
    out.extend_from_slice(&kind.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(scales.len() as u32).to_le_bytes());
    for &s in scales {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
}

pub fn encode_container(c: &QuantizedContainer) -> Vec<u8> {
    let mut out = Vec::new();
    match c {
        QuantizedContainer::Int8Blocks(q) => {
            write_header(
                &mut out,
                1,
                [q.rows, q.cols, q.block_rows, q.block_cols],
                &q.scales,
            );
            out.extend(q.values.iter().map(|&v| v as u8));
        }
        QuantizedContainer::Int8Groups(q) => {
            write_header(&mut out, 2, [q.rows, q.cols, 1, q.group_size], &q.scales);
            out.extend(q.values.iter().map(|&v| v as u8));
        }
        QuantizedContainer::Fp8(q) => {
            write_header(
                &mut out,
                3,
                [q.rows, q.cols, q.tile_rows, q.tile_cols],
                &q.scales,
            );
            out.extend_from_slice(&q.codes);
        }
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<QuantizedContainer> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != QUANT_MAGIC {
        return Err(Error::Format("bad quantized-container magic".into()));
    }
    let kind = r.u32()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let tile_rows = r.u32()? as usize;
    let tile_cols = r.u32()? as usize;
    if tile_rows == 0 || tile_cols == 0 {
        return Err(Error::Format("zero tile dimension".into()));
    }
    let expected_scales = rows.div_ceil(tile_rows) * cols.div_ceil(tile_cols);
    let num_scales = r.u32()? as usize;
    if num_scales != expected_scales {
        return Err(Error::Format(format!(
            "{num_scales} scales for a {rows}x{cols} tensor in {tile_rows}x{tile_cols} tiles"
        )));
    }
    let scales = (0..num_scales)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Format("scales must be finite and positive".into()));
    }
    let payload = r.take(rows * cols)?;
    r.finish()?;
    let as_i8 = |p: &[u8]| -> Result<Vec<i8>> {
        p.iter()
            .map(|&b| match b as i8 {
                -128 => Err(Error::Format("int8 payload holds -128".into())),
                v => Ok(v),
            })
            .collect()
    };
    Ok(match kind {
        1 => QuantizedContainer::Int8Blocks(QuantizedBlockMatrix {
            rows,
            cols,
            block_rows: tile_rows,
            block_cols: tile_cols,
            values: as_i8(payload)?,
            clips: vec![f64::NAN; num_scales],
            mse: vec![f64::NAN; num_scales],
            scales,
        }),
        2 => {
            if tile_rows != 1 {
                return Err(Error::Format(
                    "activation groups must be one row tall".into(),
                ));
            }
            QuantizedContainer::Int8Groups(QuantizedGroupActivation {
                rows,
                cols,
                group_size: tile_cols,
                values: as_i8(payload)?,
                scales,
            })
        }
        3 => QuantizedContainer::Fp8(Fp8Tensor {
            rows,
            cols,
            tile_rows,
            tile_cols,
            codes: payload.to_vec(),
            scales,
        }),
        other => return Err(Error::Format(format!("unknown container kind {other}"))),
    })
}
