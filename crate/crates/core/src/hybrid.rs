//! Layer plans mixing full attention, block-sparse attention and the
//! SSE + sliding-window composite, a desk-scale stack forward pass, and the
//! training-free greedy layer selection that decides which layers keep
//! softmax attention.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{full_attention, swa, AttnInputs};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fixtures::gaussian_tensor;
use crate::moba::{moba_forward, MobaParams};
use crate::sse::{sse_forward, FeatureMap, SseParams};
use crate::tensor::{matmul, rms_norm_rows, silu, Tensor};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Layers kept as block-sparse attention in the 36-layer default plan.
pub const DEFAULT_MOBA_LAYERS: [usize; 9] = [0, 1, 2, 3, 6, 12, 17, 21, 24];
pub const DEFAULT_NUM_LAYERS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SseSwaConfig {
    pub partitions: usize,
    pub top_k: usize,
    #[serde(default)]
    pub always_selected: Option<usize>,
    #[serde(default)]
    pub feature_map: FeatureMap,
    #[serde(default)]
    pub qk_l2_norm: bool,
    pub window: usize,
    pub dropout: f64,
}

impl Default for SseSwaConfig {
    fn default() -> Self {
        Self {
            partitions: 4,
            top_k: 2,
            always_selected: None,
            feature_map: FeatureMap::Silu,
            qk_l2_norm: true,
            window: 128,
            dropout: 0.5,
        }
    }
}

impl SseSwaConfig {
    fn validate(&self) -> Result<()> {
        if self.partitions == 0 || self.top_k == 0 || self.top_k > self.partitions {
            return config_err(format!(
                "SSE needs 1 <= k <= N, got k={}, N={}",
                self.top_k, self.partitions
            ));
        }
        if self.always_selected.is_some_and(|a| a >= self.partitions) {
            return config_err("always-selected partition out of range");
        }
        if self.window == 0 {
            return config_err("SWA window must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return config_err(format!("dropout {} outside [0, 1]", self.dropout));
        }
        Ok(())
    }

    /// Partitions touched per step, counting an always-selected extra.
    pub fn updated_partitions(&self) -> usize {
        self.top_k + usize::from(self.always_selected.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum Mechanism {
    Full,
    Moba(MobaParams),
    SseSwa(SseSwaConfig),
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Full => "FA",
            Mechanism::Moba(_) => "MoBA",
            Mechanism::SseSwa(_) => "SSE-SWA",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismCounts {
    pub full: usize,
    pub moba: usize,
    pub sse_swa: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    #[serde(default = "plan_schema_version")]
    pub schema_version: u32,
    pub layers: Vec<Mechanism>,
}

fn plan_schema_version() -> u32 {
    PLAN_SCHEMA_VERSION
}

impl LayerPlan {
    pub fn new(layers: Vec<Mechanism>) -> Result<Self> {
        let plan = Self {
            schema_version: PLAN_SCHEMA_VERSION,
            layers,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// MoBA on the given layers, full attention on the last layer and
    /// SSE-SWA everywhere else.
    pub fn with_moba_layers(
        num_layers: usize,
        moba_layers: &[usize],
        moba: MobaParams,
        sse: SseSwaConfig,
    ) -> Result<Self> {
        if num_layers == 0 {
            return config_err("plan needs at least one layer");
        }
        if let Some(&bad) = moba_layers.iter().find(|&&i| i + 1 >= num_layers) {
            return config_err(format!(
                "MoBA layer {bad} collides with the final full-attention layer or is out of range"
            ));
        }
        let layers = (0..num_layers)
            .map(|i| {
                if i + 1 == num_layers {
                    Mechanism::Full
                } else if moba_layers.contains(&i) {
                    Mechanism::Moba(moba)
                } else {
                    Mechanism::SseSwa(sse)
                }
            })
            .collect();
        Self::new(layers)
    }

    /// 36 layers: MoBA (b=4096, k=12) on [0,1,2,3,6,12,17,21,24], full
    /// attention on layer 35, SSE-SWA (N=4, k=2, window 128, dropout 0.5)
    /// on the remaining 26.
    pub fn default_plan() -> Self {
        Self::with_moba_layers(
            DEFAULT_NUM_LAYERS,
            &DEFAULT_MOBA_LAYERS,
            MobaParams::new(4096, 12).expect("valid"),
            SseSwaConfig::default(),
        )
        .expect("default plan is valid")
    }

    pub fn all_full(num_layers: usize) -> Self {
        Self::new(vec![Mechanism::Full; num_layers]).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config_err("plan has no layers");
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let res = match layer {
                Mechanism::Full => Ok(()),
                Mechanism::Moba(p) => p.validate(),
                Mechanism::SseSwa(c) => c.validate(),
            };
            res.map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn counts(&self) -> MechanismCounts {
        let mut c = MechanismCounts {
            full: 0,
            moba: 0,
            sse_swa: 0,
        };
        for layer in &self.layers {
            match layer {
                Mechanism::Full => c.full += 1,
                Mechanism::Moba(_) => c.moba += 1,
                Mechanism::SseSwa(_) => c.sse_swa += 1,
            }
        }
        c
    }

    pub fn indices_of(&self, pred: impl Fn(&Mechanism) -> bool) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, m)| pred(m))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Human-readable counts plus one row per layer.
    pub fn render_table(&self) -> String {
        let c = self.counts();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "layers: {}  FA: {}  MoBA: {}  SSE-SWA: {}",
            self.num_layers(),
            c.full,
            c.moba,
            c.sse_swa
        );
        let _ = writeln!(out, "{:>5}  {:<8}  params", "layer", "kind");
        for (i, layer) in self.layers.iter().enumerate() {
            let params = match layer {
                Mechanism::Full => String::new(),
                Mechanism::Moba(p) => format!("block_size={} top_k={}", p.block_size, p.top_k),
                Mechanism::SseSwa(s) => format!(
                    "partitions={} top_k={} always_selected={} window={} dropout={}",
                    s.partitions,
                    s.top_k,
                    s.always_selected
                        .map_or_else(|| "none".to_string(), |a| a.to_string()),
                    s.window,
                    s.dropout
                ),
            };
            let _ = writeln!(out, "{:>5}  {:<8}  {}", i, layer.name(), params);
        }
        out
    }
}

/// Draws the SWA-branch gate for one sequence: `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn sample_branch_gate<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate >= 1.0 {
        0.0
    } else if rate <= 0.0 {
        1.0
    } else if rng.random_bool(1.0 - rate) {
        1.0 / (1.0 - rate)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Training { seed: u64 },
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeNorm {
    pub sse_weight: Vec<f64>,
    pub swa_weight: Vec<f64>,
    pub eps: f64,
}

impl MergeNorm {
    pub fn ones(width: usize, eps: f64) -> Self {
        Self {
            sse_weight: vec![1.0; width],
            swa_weight: vec![1.0; width],
            eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    pub output: Tensor,
    pub swa_gate: f64,
}

/// `rms_norm(sse) + gate * rms_norm(swa)`.
pub fn sse_swa_block(
    sse_out: &Tensor,
    swa_out: &Tensor,
    merge: &MergeNorm,
    dropout_rate: f64,
    mode: BranchMode,
) -> Result<MergeOutput> {
    if sse_out.shape() != swa_out.shape() {
        return shape_err(format!(
            "branch outputs {:?} vs {:?}",
            sse_out.shape(),
            swa_out.shape()
        ));
    }
    if !(0.0..=1.0).contains(&dropout_rate) {
        return config_err(format!("dropout {dropout_rate} outside [0, 1]"));
    }
    let swa_gate = match mode {
        BranchMode::Inference => 1.0,
        BranchMode::Training { seed } => {
            sample_branch_gate(dropout_rate, &mut ChaCha8Rng::seed_from_u64(seed))
        }
    };
    let a = rms_norm_rows(sse_out, &merge.sse_weight, merge.eps)?;
    let b = rms_norm_rows(swa_out, &merge.swa_weight, merge.eps)?;
    let output = if swa_gate == 0.0 {
        a
    } else {
        a.add(&b.scale(swa_gate)?)?
    };
    Ok(MergeOutput { output, swa_gate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// Multiply softmax-attention queries by `1/sqrt(d_head)`.
    pub scale_qk: bool,
    /// Rotary position embedding on FA, MoBA and SWA queries/keys.
    pub rope: bool,
    /// Unit-weight RMS normalization of FA, MoBA and SWA queries/keys per head.
    pub qk_norm: bool,
    pub rope_base: f64,
    pub eps: f64,
    pub seed: u64,
    pub training: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            num_heads: 2,
            d_ff: 32,
            scale_qk: true,
            rope: false,
            qk_norm: false,
            rope_base: 10_000.0,
            eps: 1e-6,
            seed: 0,
            training: false,
        }
    }
}

impl StackConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return config_err(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.num_heads
            ));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return config_err("RoPE needs an even head dimension");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseBranchWeights {
    /// Gate projection `d_model x N`.
    pub gate: Tensor,
    pub wo_swa: Tensor,
    pub merge: MergeNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl FeedForward {
    /// `(silu(x W_g) ⊙ x W_u) W_d`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = silu(&matmul(x, &self.w_gate)?);
        let u = matmul(x, &self.w_up)?;
        let h = Tensor::new(
            g.shape().to_vec(),
            g.data().iter().zip(u.data()).map(|(a, b)| a * b).collect(),
        )?;
        matmul(&h, &self.w_down)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Output projection of the main attention branch (the SSE branch for SSE-SWA layers).
    pub wo: Tensor,
    pub sse: Option<SseBranchWeights>,
    pub ffn: FeedForward,
}

impl LayerWeights {
    /// Zeroes the parameters that do not exist in a full-attention layer:
    /// the SSE gate, the SWA output projection and both merge-norm weights.
    pub fn zero_new_params(&mut self) {
        if let Some(s) = &mut self.sse {
            s.gate = Tensor::zeros(s.gate.shape());
            s.wo_swa = Tensor::zeros(s.wo_swa.shape());
            s.merge.sse_weight.fill(0.0);
            s.merge.swa_weight.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackWeights {
    pub layers: Vec<LayerWeights>,
}

impl StackWeights {
    /// Gaussian projections with std `1/sqrt(fan_in)` and unit norm weights.
    pub fn random(plan: &LayerPlan, cfg: &StackConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (cfg.d_ff as f64).sqrt();
        let layers = plan
            .layers
            .iter()
            .map(|m| {
                let wq = gaussian_tensor(&mut rng, d, d, std_d);
                let wk = gaussian_tensor(&mut rng, d, d, std_d);
                let wv = gaussian_tensor(&mut rng, d, d, std_d);
                let wo = gaussian_tensor(&mut rng, d, d, std_d);
                let sse = match m {
                    Mechanism::SseSwa(c) => Some(SseBranchWeights {
                        gate: gaussian_tensor(&mut rng, d, c.partitions, std_d),
                        wo_swa: gaussian_tensor(&mut rng, d, d, std_d),
                        merge: MergeNorm::ones(d, cfg.eps),
                    }),
                    _ => None,
                };
                let ffn = FeedForward {
                    w_gate: gaussian_tensor(&mut rng, d, cfg.d_ff, std_d),
                    w_up: gaussian_tensor(&mut rng, d, cfg.d_ff, std_d),
                    w_down: gaussian_tensor(&mut rng, cfg.d_ff, d, std_ff),
                };
                LayerWeights {
                    attn_norm: vec![1.0; d],
                    ffn_norm: vec![1.0; d],
                    wq,
                    wk,
                    wv,
                    wo,
                    sse,
                    ffn,
                }
            })
            .collect();
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone)]
pub struct SseLayerTrace {
    /// Gate rows `e_t`, `n x N` (shared by all heads).
    pub gates: Tensor,
    /// Running selection frequencies `f_t`, `n x N`.
    pub running_freq: Tensor,
    pub top_k: usize,
    pub swa_gate: f64,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub mechanism: Mechanism,
    /// Attention sublayer output after the output projection (and merge norm).
    pub attention_output: Tensor,
    /// Residual stream after the attention sublayer.
    pub post_attention: Tensor,
    pub output: Tensor,
    pub sse: Option<SseLayerTrace>,
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    pub output: Tensor,
    pub layers: Vec<LayerTrace>,
}

/// Rotates consecutive coordinate pairs by `pos * base^(-2i/d)`.
pub fn apply_rope(x: &Tensor, base: f64) -> Result<Tensor> {
    let d = x.cols();
    if d % 2 != 0 {
        return config_err("RoPE needs an even width");
    }
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        for i in 0..d / 2 {
            let theta = t as f64 * base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

fn softmax_head_inputs(q: Tensor, k: Tensor, v: Tensor, cfg: &StackConfig) -> Result<AttnInputs> {
    let (mut q, mut k) = (q, k);
    if cfg.qk_norm {
        let ones = vec![1.0; q.cols()];
        q = rms_norm_rows(&q, &ones, cfg.eps)?;
        k = rms_norm_rows(&k, &ones, cfg.eps)?;
    }
    if cfg.rope {
        q = apply_rope(&q, cfg.rope_base)?;
        k = apply_rope(&k, cfg.rope_base)?;
    }
    if cfg.scale_qk {
        q = q.scale(1.0 / (q.cols() as f64).sqrt())?;
    }
    AttnInputs::new(q, k, v)
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the plan over token representations `x` (`n x d_model`) with pre-norm
/// residual blocks: `x + attn(norm(x))` followed by `x + ffn(norm(x))`.
pub fn stack_forward(
    plan: &LayerPlan,
    x: &Tensor,
    weights: &StackWeights,
    cfg: &StackConfig,
) -> Result<StackOutput> {
    cfg.validate()?;
    plan.validate()?;
    if weights.layers.len() != plan.num_layers() {
        return config_err(format!(
            "{} weight sets for {} layers",
            weights.layers.len(),
            plan.num_layers()
        ));
    }
    if x.shape().len() != 2 || x.cols() != cfg.d_model || x.rows() == 0 {
        return shape_err(format!("input {:?} vs d_model {}", x.shape(), cfg.d_model));
    }
    let n = x.rows();
    let dh = cfg.head_dim();
    let mut h = x.clone();
    let mut traces = Vec::with_capacity(plan.num_layers());

    for (li, (mech, w)) in plan.layers.iter().zip(&weights.layers).enumerate() {
        let xn = rms_norm_rows(&h, &w.attn_norm, cfg.eps)?;
        let q = matmul(&xn, &w.wq)?;
        let k = matmul(&xn, &w.wk)?;
        let v = matmul(&xn, &w.wv)?;

        let mut heads_main = Tensor::zeros(&[n, cfg.d_model]);
        let mut heads_swa = Tensor::zeros(&[n, cfg.d_model]);
        let mut sse_trace = None;

        for head in 0..cfg.num_heads {
            let start = head * dh;
            let qh = q.column_slice(start, dh)?;
            let kh = k.column_slice(start, dh)?;
            let vh = v.column_slice(start, dh)?;
            match mech {
                Mechanism::Full => {
                    let inp = softmax_head_inputs(qh, kh, vh, cfg)?;
                    heads_main.set_column_slice(start, &full_attention(&inp)?)?;
                }
                Mechanism::Moba(p) => {
                    let inp = softmax_head_inputs(qh, kh, vh, cfg)?;
                    heads_main.set_column_slice(start, &moba_forward(&inp, p)?.output)?;
                }
                Mechanism::SseSwa(c) => {
                    let branch = w
                        .sse
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("layer {li}: missing SSE weights")))?;
                    let mut params = SseParams::new(branch.gate.clone(), c.top_k)?
                        .with_feature_map(c.feature_map)
                        .with_qk_l2_norm(c.qk_l2_norm);
                    if let Some(a) = c.always_selected {
                        params = params.with_always_selected(a)?;
                    }
                    let sse_inp = AttnInputs::new(qh.clone(), kh.clone(), vh.clone())?;
                    let sse = sse_forward(&sse_inp, &xn, &params)?;
                    heads_main.set_column_slice(start, &sse.output)?;
                    let swa_inp = softmax_head_inputs(qh, kh, vh, cfg)?;
                    heads_swa.set_column_slice(start, &swa(&swa_inp, c.window)?)?;
                    if head == 0 {
                        sse_trace = Some(SseLayerTrace {
                            gates: sse.gates,
                            running_freq: sse.running_freq,
                            top_k: c.top_k,
                            swa_gate: 1.0,
                        });
                    }
                }
            }
        }

        let main = matmul(&heads_main, &w.wo)?;
        let attention_output = match (mech, &w.sse) {
            (Mechanism::SseSwa(c), Some(branch)) => {
                let swa_out = matmul(&heads_swa, &branch.wo_swa)?;
                let mode = if cfg.training {
                    BranchMode::Training {
                        seed: layer_seed(cfg.seed, li),
                    }
                } else {
                    BranchMode::Inference
                };
                let merged = sse_swa_block(&main, &swa_out, &branch.merge, c.dropout, mode)?;
                if let Some(t) = &mut sse_trace {
                    t.swa_gate = merged.swa_gate;
                }
                merged.output
            }
            _ => main,
        };
        let post_attention = h.add(&attention_output)?;
        let ffn_in = rms_norm_rows(&post_attention, &w.ffn_norm, cfg.eps)?;
        let output = post_attention.add(&w.ffn.forward(&ffn_in)?)?;
        traces.push(LayerTrace {
            mechanism: *mech,
            attention_output,
            post_attention,
            output: output.clone(),
            sse: sse_trace,
        });
        h = output;
    }
    Ok(StackOutput {
        output: h,
        layers: traces,
    })
}

/// Score of each candidate model obtained by swapping one layer to SSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub baseline: f64,
    pub scores: Vec<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Greedy deep-to-shallow scan: a layer is selected when its score falls more
/// than `drop_threshold` below the median of the layers already scanned and
/// not selected. The deepest layer seeds the reference. Returns ascending
/// indices.
pub fn select_moba_layers(profile: &SensitivityProfile, drop_threshold: f64) -> Result<Vec<usize>> {
    if profile.scores.is_empty() {
        return config_err("empty sensitivity profile");
    }
    if !drop_threshold.is_finite() || drop_threshold < 0.0 {
        return config_err(format!(
            "drop threshold {drop_threshold} must be finite and >= 0"
        ));
    }
    if profile.scores.iter().any(|s| !s.is_finite()) {
        return config_err("sensitivity profile contains non-finite scores");
    }
    let mut reference: Vec<f64> = Vec::new();
    let mut selected = Vec::new();
    for (i, &score) in profile.scores.iter().enumerate().rev() {
        if !reference.is_empty() {
            let mut scratch = reference.clone();
            if score < median(&mut scratch) - drop_threshold {
                selected.push(i);
                continue;
            }
        }
        reference.push(score);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// A sensitivity curve with a mild deep-to-shallow decline, small seeded
/// jitter, and sharp dips of `dip` at `dips`.
pub fn synthetic_sensitivity_profile(
    num_layers: usize,
    dips: &[usize],
    dip: f64,
    seed: u64,
) -> SensitivityProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..num_layers)
        .map(|i| {
            let ambient = 0.60 + 0.002 * i as f64 + rng.random_range(-0.003..0.003);
            if dips.contains(&i) {
                ambient - dip
            } else {
                ambient
            }
        })
        .collect();
    SensitivityProfile {
        baseline: 0.70,
        scores,
    }
}
