//! Analytical cost model for full-attention and hybrid stacks.
//!
//! FLOP counts cover the attention mixing only (no projections or FFN) so
//! ratios between stacks carry the scaling claims. Each query–key score and
//! each weighted value element is a multiply-add, counted as 2 FLOPs, giving
//! `4·d` per attended position per head with `d_k = d_v = d`. Counts are
//! causal and exact in closed form; they are stored as `u128`.
//!
//! | mechanism | attention FLOPs per head, summed over `t = 1..=n` |
//! |-----------|---------------------------------------------------|
//! | full      | `4d · t`                                          |
//! | MoBA      | `2d · ⌊(t-1)/b⌋` gating `+ 4d · min(t, k·b)`       |
//! | SSE       | `4d² · |T|` plus `2·d_model·N / H` gating          |
//! | SWA       | `4d · min(t, w)`                                   |
//!
//! `|T|` is the number of partitions updated per token. KV bytes: full and
//! MoBA layers cache `2·n·H·d` elements, SWA caches `2·min(n, w)·H·d`, and an
//! SSE layer keeps `N·H·d²` state elements.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::hybrid::{LayerPlan, Mechanism, SseSwaConfig};
use crate::moba::{activation_ratio, MobaParams};

pub const SCALING_CSV_HEADER: &str =
    "n,fa_cost,dssa_cost,ratio,fa_kv_bytes,dssa_kv_bytes,activation_ratio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub bytes_per_element: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            num_heads: 32,
            head_dim: 128,
            d_model: 2560,
            bytes_per_element: 2,
        }
    }
}

/// Where MoBA layers take `(b, k)` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobaSchedule {
    /// Whatever the plan stores.
    Plan,
    /// Length-dependent: up to 8k 512/4, up to 64k 1k/8, beyond that 4k/12.
    #[default]
    Training,
}

pub fn training_schedule(n: usize) -> MobaParams {
    let (b, k) = if n <= 8 * 1024 {
        (512, 4)
    } else if n <= 64 * 1024 {
        (1024, 8)
    } else {
        (4096, 12)
    };
    MobaParams::new(b, k).expect("valid schedule")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub dims: ModelDims,
    pub schedule: MobaSchedule,
    /// Extra FLOPs charged per layer per token (0 by default).
    pub layer_overhead_flops: u128,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            schedule: MobaSchedule::Training,
            layer_overhead_flops: 0,
        }
    }
}

impl CostModel {
    pub fn moba_params(&self, plan_params: &MobaParams, n: usize) -> MobaParams {
        match self.schedule {
            MobaSchedule::Plan => *plan_params,
            MobaSchedule::Training => training_schedule(n),
        }
    }
}

fn sum_min(n: u128, cap: u128) -> u128 {
    // Σ_{t=1..n} min(t, cap)
    if n <= cap {
        n * (n + 1) / 2
    } else {
        cap * (cap + 1) / 2 + (n - cap) * cap
    }
}

fn sum_floor_div(n: u128, b: u128) -> u128 {
    // Σ_{t=0..n-1} ⌊t/b⌋
    let (q, r) = (n / b, n % b);
    b * q * q.saturating_sub(1) / 2 + r * q
}

pub fn cost_fa(n: usize, dims: &ModelDims) -> u128 {
    let (n, d, h) = (n as u128, dims.head_dim as u128, dims.num_heads as u128);
    4 * d * h * n * (n + 1) / 2
}

pub fn cost_moba(n: usize, dims: &ModelDims, p: &MobaParams) -> u128 {
    let (n, d, h) = (n as u128, dims.head_dim as u128, dims.num_heads as u128);
    let (b, k) = (p.block_size as u128, p.top_k as u128);
    h * (2 * d * sum_floor_div(n, b) + 4 * d * sum_min(n, k * b))
}

pub fn cost_sse(n: usize, dims: &ModelDims, cfg: &SseSwaConfig) -> u128 {
    let (n, d, h) = (n as u128, dims.head_dim as u128, dims.num_heads as u128);
    let gate = 2 * dims.d_model as u128 * cfg.partitions as u128;
    let per_head = 4 * d * d * cfg.updated_partitions() as u128;
    n * (gate + h * per_head)
}

pub fn cost_swa(n: usize, dims: &ModelDims, window: usize) -> u128 {
    let (n, d, h) = (n as u128, dims.head_dim as u128, dims.num_heads as u128);
    4 * d * h * sum_min(n, window as u128)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub mechanism: String,
    pub attention_flops: u128,
    pub kv_bytes: u128,
    pub state_bytes: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n: usize,
    pub layers: Vec<LayerCost>,
    pub prefill_flops: u128,
    /// Cost of producing token `n` given `n - 1` cached tokens.
    pub decode_flops: u128,
    pub kv_bytes: u128,
    pub state_bytes: u128,
}

fn layer_flops(mech: &Mechanism, n: usize, model: &CostModel) -> u128 {
    let base = match mech {
        Mechanism::Full => cost_fa(n, &model.dims),
        Mechanism::Moba(p) => cost_moba(n, &model.dims, &model.moba_params(p, n)),
        Mechanism::SseSwa(c) => cost_sse(n, &model.dims, c) + cost_swa(n, &model.dims, c.window),
    };
    base + model.layer_overhead_flops * n as u128
}

fn layer_cost(mech: &Mechanism, n: usize, model: &CostModel) -> LayerCost {
    let dims = &model.dims;
    let elem = (dims.num_heads * dims.head_dim * dims.bytes_per_element) as u128;
    let (kv_bytes, state_bytes) = match mech {
        Mechanism::Full | Mechanism::Moba(_) => (2 * n as u128 * elem, 0),
        Mechanism::SseSwa(c) => (
            2 * n.min(c.window) as u128 * elem,
            c.partitions as u128 * dims.head_dim as u128 * elem,
        ),
    };
    LayerCost {
        mechanism: mech.name().to_string(),
        attention_flops: layer_flops(mech, n, model),
        kv_bytes,
        state_bytes,
    }
}

pub fn stack_cost(plan: &LayerPlan, n: usize, model: &CostModel) -> Result<CostReport> {
    plan.validate()?;
    let layers: Vec<LayerCost> = plan
        .layers
        .iter()
        .map(|m| layer_cost(m, n, model))
        .collect();
    let prefill_flops = layers.iter().map(|l| l.attention_flops).sum();
    let decode_flops = if n == 0 {
        0
    } else {
        // the training schedule may switch at n; charge the token under n's params
        plan.layers
            .iter()
            .map(|m| {
                let m = match (m, model.schedule) {
                    (Mechanism::Moba(_), MobaSchedule::Training) => {
                        Mechanism::Moba(training_schedule(n))
                    }
                    _ => *m,
                };
                let fixed = CostModel {
                    schedule: MobaSchedule::Plan,
                    ..*model
                };
                layer_flops(&m, n, &fixed) - layer_flops(&m, n - 1, &fixed)
            })
            .sum()
    };
    Ok(CostReport {
        n,
        prefill_flops,
        decode_flops,
        kv_bytes: layers.iter().map(|l| l.kv_bytes).sum(),
        state_bytes: layers.iter().map(|l| l.state_bytes).sum(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n: usize,
    pub batch: usize,
    /// Cache plus state bytes of the plan.
    pub plan_bytes: u128,
    /// Bytes of an all-full-attention stack with the same depth.
    pub full_stack_bytes: u128,
    /// `full_stack_bytes / plan_bytes`; 1 when both are zero.
    pub kv_ratio: f64,
}

pub fn memory_model(
    plan: &LayerPlan,
    n: usize,
    batch: usize,
    dims: &ModelDims,
) -> Result<MemoryReport> {
    let model = CostModel {
        dims: *dims,
        ..CostModel::default()
    };
    let hybrid = stack_cost(plan, n, &model)?;
    let full = stack_cost(&LayerPlan::all_full(plan.num_layers()), n, &model)?;
    let b = batch as u128;
    let plan_bytes = b * (hybrid.kv_bytes + hybrid.state_bytes);
    let full_stack_bytes = b * (full.kv_bytes + full.state_bytes);
    Ok(MemoryReport {
        n,
        batch,
        plan_bytes,
        full_stack_bytes,
        kv_ratio: ratio(full_stack_bytes, plan_bytes),
    })
}

fn ratio(num: u128, den: u128) -> f64 {
    match (num, den) {
        (0, 0) => 1.0,
        (_, 0) => f64::INFINITY,
        _ => num as f64 / den as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub fa_cost: u128,
    pub dssa_cost: u128,
    pub ratio: f64,
    pub fa_kv_bytes: u128,
    pub dssa_kv_bytes: u128,
    /// MoBA activation ratio at `n` (the first MoBA layer's, 1 if none).
    pub activation_ratio: f64,
}

pub fn scaling_table(
    plan: &LayerPlan,
    lengths: &[usize],
    model: &CostModel,
) -> Result<Vec<ScalingRow>> {
    let full = LayerPlan::all_full(plan.num_layers());
    let first_moba = plan.layers.iter().find_map(|m| match m {
        Mechanism::Moba(p) => Some(*p),
        _ => None,
    });
    lengths
        .iter()
        .map(|&n| {
            let fa = stack_cost(&full, n, model)?;
            let hy = stack_cost(plan, n, model)?;
            let fa_kv = fa.kv_bytes + fa.state_bytes;
            let hy_kv = hy.kv_bytes + hy.state_bytes;
            Ok(ScalingRow {
                n,
                fa_cost: fa.prefill_flops,
                dssa_cost: hy.prefill_flops,
                ratio: ratio(fa.prefill_flops, hy.prefill_flops),
                fa_kv_bytes: fa_kv,
                dssa_kv_bytes: hy_kv,
                activation_ratio: first_moba
                    .map_or(1.0, |p| activation_ratio(n, &model.moba_params(&p, n))),
            })
        })
        .collect()
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(SCALING_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{:.6}\n",
            r.n,
            r.fa_cost,
            r.dssa_cost,
            r.ratio,
            r.fa_kv_bytes,
            r.dssa_kv_bytes,
            r.activation_ratio
        ));
    }
    out
}

/// Parses `512`, `128k`, `4M` or `1G` with binary multipliers.
pub fn parse_length(s: &str) -> Result<usize> {
    let s = s.trim();
    let (digits, mult) = match s.char_indices().last() {
        Some((i, 'k' | 'K')) => (&s[..i], 1usize << 10),
        Some((i, 'm' | 'M')) => (&s[..i], 1 << 20),
        Some((i, 'g' | 'G')) => (&s[..i], 1 << 30),
        _ => (s, 1),
    };
    let v: usize = digits
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse length {s:?}")))?;
    match v.checked_mul(mult) {
        Some(0) => config_err("length must be positive"),
        Some(n) => Ok(n),
        None => config_err(format!("length {s:?} overflows")),
    }
}

pub fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(parse_length)
        .collect()
}
