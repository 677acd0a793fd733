//! Distillation objectives for converting a full-attention teacher into the
//! hybrid student: SSE load balancing, top-K logit KL, layer-wise hidden-state
//! MSE, and the weighted combinations used for the language and
//! vision-language models.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{top_k_indices, Tensor};

/// Student probabilities below this are clamped before taking the log.
pub const KL_FLOOR: f64 = 1e-12;
/// Tolerance of the ratio-term cross-check in [`combined_loss_llm`].
pub const RATIO_IDENTITY_TOL: f64 = 1e-12;

pub const LLM_AUX_WEIGHT: f64 = 0.001;
pub const LLM_KD_WEIGHT: f64 = 0.1;
pub const LLM_MSE_WEIGHT: f64 = 0.1;
pub const VLM_KD_WEIGHT: f64 = 1.0;
pub const VLM_MSE_WEIGHT: f64 = 1.0;
pub const KD_TOP_K: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxLoss {
    /// `(N/k) Σ_t Σ_i f_t^i e_t^i`.
    pub raw: f64,
    /// `raw / n`.
    pub per_token: f64,
}

/// Load-balance loss over gate weights `e` and running selection frequencies
/// `f`, both `n x N`.
pub fn aux_loss(gates: &Tensor, freqs: &Tensor, top_k: usize) -> Result<AuxLoss> {
    if gates.shape().len() != 2 || gates.shape() != freqs.shape() {
        return shape_err(format!(
            "gates {:?} and frequencies {:?} must be equal-shaped matrices",
            gates.shape(),
            freqs.shape()
        ));
    }
    let (n, parts) = (gates.rows(), gates.cols());
    if top_k == 0 || top_k > parts {
        return config_err(format!("top_k {top_k} outside 1..={parts}"));
    }
    if !(gates.is_finite() && freqs.is_finite()) {
        return Err(Error::NonFinite("aux_loss inputs"));
    }
    if freqs.data().iter().any(|f| !(0.0..=1.0).contains(f)) {
        return config_err("frequencies must lie in [0, 1]");
    }
    let sum: f64 = gates
        .data()
        .iter()
        .zip(freqs.data())
        .map(|(e, f)| e * f)
        .sum();
    let raw = parts as f64 / top_k as f64 * sum;
    let per_token = if n == 0 { 0.0 } else { raw / n as f64 };
    Ok(AuxLoss { raw, per_token })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLoss {
    /// Token-averaged KL(teacher || student) on the teacher's top-K support.
    pub value: f64,
    /// Number of student probabilities that hit [`KL_FLOOR`].
    pub clamped: usize,
}

fn log_softmax_over(logits: &[f64], support: &[usize]) -> Vec<f64> {
    let m = support
        .iter()
        .map(|&j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = m + support
        .iter()
        .map(|&j| (logits[j] - m).exp())
        .sum::<f64>()
        .ln();
    support.iter().map(|&j| logits[j] - lse).collect()
}

/// Both distributions are renormalized over the teacher's top-K logits
/// (ties to the lower vocabulary index) before the KL is taken.
pub fn kd_topk_kl(teacher: &Tensor, student: &Tensor, top_k: usize) -> Result<KdLoss> {
    if teacher.shape().len() != 2 || teacher.shape() != student.shape() {
        return shape_err(format!(
            "teacher {:?} and student {:?} logits must be equal-shaped matrices",
            teacher.shape(),
            student.shape()
        ));
    }
    let (n, vocab) = (teacher.rows(), teacher.cols());
    if top_k == 0 || top_k > vocab {
        return config_err(format!("K = {top_k} outside 1..={vocab}"));
    }
    if !(teacher.is_finite() && student.is_finite()) {
        return Err(Error::NonFinite("kd_topk_kl logits"));
    }
    if n == 0 {
        return Ok(KdLoss {
            value: 0.0,
            clamped: 0,
        });
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for t in 0..n {
        let support = top_k_indices(teacher.row(t), top_k);
        let lt = log_softmax_over(teacher.row(t), &support);
        let ls = log_softmax_over(student.row(t), &support);
        for (a, b) in lt.iter().zip(&ls) {
            let p = a.exp();
            let log_q = if b.exp() < KL_FLOOR {
                clamped += 1;
                KL_FLOOR.ln()
            } else {
                *b
            };
            total += p * (a - log_q);
        }
    }
    Ok(KdLoss {
        value: total / n as f64,
        clamped,
    })
}

/// Mean over layers of `(1/n) Σ_t ||student_t - teacher_t||²`.
pub fn layerwise_mse(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return shape_err(format!(
            "need matching non-empty layer lists, got {} and {}",
            student.len(),
            teacher.len()
        ));
    }
    let mut sum = 0.0;
    for (l, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.shape().len() != 2 || s.shape() != t.shape() || s.rows() == 0 {
            return shape_err(format!("layer {l}: {:?} vs {:?}", s.shape(), t.shape()));
        }
        let sq: f64 = s
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sum += sq / s.rows() as f64;
    }
    let mse = sum / student.len() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("layerwise_mse"));
    }
    Ok(mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub aux: f64,
    pub kd: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFormula {
    Llm,
    Vlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub formula: LossFormula,
    pub ce: f64,
    pub aux: f64,
    pub kd: f64,
    pub mse: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    /// The MSE term as weighted by the active formula.
    pub mse_term: f64,
    pub combined: f64,
    /// Set when the MSE was zero and the ratio-weighted term was dropped.
    pub mse_term_zeroed: bool,
}

impl LossBreakdown {
    /// Recomputes `combined` from the stored parts.
    pub fn recompute(&self) -> f64 {
        match self.formula {
            LossFormula::Llm => self.ce + self.c * self.aux + self.alpha * self.kd + self.mse_term,
            LossFormula::Vlm => self.alpha * self.kd + self.beta * self.mse,
        }
    }
}

fn check_parts(parts: &LossParts, coeffs: &[f64]) -> Result<()> {
    let all = [parts.ce, parts.aux, parts.kd, parts.mse];
    if all.iter().chain(coeffs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss parts"));
    }
    if parts.mse < 0.0 {
        return config_err("MSE part must be non-negative");
    }
    Ok(())
}

/// `ce + c·aux + α·kd + β·|kd/mse|·mse`, with the last term computed literally
/// and checked against `β·|kd|`. A zero MSE drops that term.
pub fn combined_loss_llm(
    parts: &LossParts,
    c: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    check_parts(parts, &[c, alpha, beta])?;
    let (mse_term, zeroed) = if parts.mse > 0.0 {
        let literal = beta * (parts.kd / parts.mse).abs() * parts.mse;
        let simplified = beta * parts.kd.abs();
        let tol = RATIO_IDENTITY_TOL * simplified.abs().max(1.0);
        if (literal - simplified).abs() > tol {
            return Err(Error::Config(format!(
                "ratio term {literal} disagrees with its simplification {simplified}"
            )));
        }
        (literal, false)
    } else {
        (0.0, true)
    };
    let mut out = LossBreakdown {
        formula: LossFormula::Llm,
        ce: parts.ce,
        aux: parts.aux,
        kd: parts.kd,
        mse: parts.mse,
        c,
        alpha,
        beta,
        mse_term,
        combined: 0.0,
        mse_term_zeroed: zeroed,
    };
    out.combined = out.recompute();
    Ok(out)
}

/// `α·kd + β·mse`; CE and aux do not enter.
pub fn combined_loss_vlm(parts: &LossParts, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    check_parts(parts, &[alpha, beta])?;
    let mut out = LossBreakdown {
        formula: LossFormula::Vlm,
        ce: parts.ce,
        aux: parts.aux,
        kd: parts.kd,
        mse: parts.mse,
        c: 0.0,
        alpha,
        beta,
        mse_term: beta * parts.mse,
        combined: 0.0,
        mse_term_zeroed: false,
    };
    out.combined = out.recompute();
    Ok(out)
}
