use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dssa_core::attention::{
    full_attention, linear_attention_parallel, linear_attention_recurrent, masked_attention, swa,
    AttnInputs,
};
use dssa_core::fixtures::{gaussian_tensor, random_inputs, uniform_tensor};
use dssa_core::hybrid::{
    select_moba_layers, synthetic_sensitivity_profile, LayerPlan, SensitivityProfile,
    DEFAULT_MOBA_LAYERS, DEFAULT_NUM_LAYERS,
};
use dssa_core::io::{read_tensor, write_tensor};
use dssa_core::losses::{
    aux_loss, combined_loss_llm, combined_loss_vlm, kd_topk_kl, layerwise_mse, LossFormula,
    LossParts,
};
use dssa_core::moba::{moba_forward, MobaParams};
use dssa_core::perf::{parse_lengths, scaling_csv, CostModel, MobaSchedule};
use dssa_core::quant::container::{encode_container, QuantizedContainer};
use dssa_core::quant::fp8::fp8_quantize;
use dssa_core::quant::int8::{quantize_activation_groups, quantize_weight_blocks, roundtrip_mse};
use dssa_core::quant::spike::{spike_encode, spike_matmul};
use dssa_core::sse::{sse_forward, SseParams};
use dssa_core::tensor::{causal_mask, softmax_rows, Tensor};
use dssa_core::{Error, Result};

use crate::{FixtureKind, Schedule};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Outcome {
    pub ok: bool,
}

/// Rendered command output plus its check verdict.
pub struct Report {
    body: String,
    ok: bool,
}

impl Report {
    fn json(value: &impl Serialize, ok: bool) -> Result<Self> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        Ok(Self { body, ok })
    }

    pub fn emit(self, output: Option<&Path>) -> Result<Outcome> {
        match output {
            Some(p) => fs::write(p, &self.body)?,
            None => print!("{}", self.body),
        }
        Ok(Outcome { ok: self.ok })
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let s = s.trim().strip_prefix("n=").unwrap_or(s.trim());
    let items: std::result::Result<Vec<T>, _> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Config(format!("cannot parse {what} list {s:?}"))),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_plan(path: Option<&Path>) -> Result<LayerPlan> {
    match path {
        Some(p) => LayerPlan::from_json(&fs::read_to_string(p)?),
        None => Ok(LayerPlan::default_plan()),
    }
}

#[derive(Serialize)]
struct PropertyResult {
    property: &'static str,
    n: usize,
    d: usize,
    trials: usize,
    max_abs_error: f64,
    tolerance: f64,
    pass: bool,
}

type Check = fn(&AttnInputs, &mut ChaCha8Rng, bool) -> Result<(Tensor, Tensor)>;

fn check_linear(inp: &AttnInputs, _: &mut ChaCha8Rng, _: bool) -> Result<(Tensor, Tensor)> {
    Ok((
        linear_attention_parallel(inp)?,
        linear_attention_recurrent(inp)?,
    ))
}

fn check_sse(inp: &AttnInputs, rng: &mut ChaCha8Rng, _: bool) -> Result<(Tensor, Tensor)> {
    let x = uniform_tensor(rng, inp.len(), 3);
    let p = SseParams::new(uniform_tensor(rng, 3, 1), 1)?;
    Ok((
        sse_forward(inp, &x, &p)?.output,
        linear_attention_recurrent(inp)?,
    ))
}

fn check_moba(inp: &AttnInputs, _: &mut ChaCha8Rng, _: bool) -> Result<(Tensor, Tensor)> {
    let b = 4;
    let p = MobaParams::new(b, inp.len().div_ceil(b).max(1))?;
    Ok((moba_forward(inp, &p)?.output, full_attention(inp)?))
}

fn check_swa(inp: &AttnInputs, _: &mut ChaCha8Rng, _: bool) -> Result<(Tensor, Tensor)> {
    Ok((swa(inp, inp.len())?, full_attention(inp)?))
}

fn check_matrix_route(
    inp: &AttnInputs,
    _: &mut ChaCha8Rng,
    fault: bool,
) -> Result<(Tensor, Tensor)> {
    let n = inp.len();
    let mut mask = causal_mask(n, None);
    if fault {
        // hide the first key from the last query
        mask.set(n - 1, 0, f64::NEG_INFINITY);
    }
    Ok((masked_attention(inp, &mask)?, full_attention(inp)?))
}

pub fn attn_check(
    seed: u64,
    sizes: &str,
    dims: &str,
    trials: usize,
    tolerance: f64,
    fault: bool,
) -> Result<Report> {
    let sizes: Vec<usize> = parse_list(sizes, "size")?;
    let dims: Vec<usize> = parse_list(dims, "dimension")?;
    if sizes.contains(&0) || dims.contains(&0) || trials == 0 {
        return Err(Error::Config("sizes, dims and trials must be >= 1".into()));
    }
    let checks: [(&'static str, Check); 5] = [
        ("linear_parallel_vs_recurrent", check_linear),
        ("sse_single_partition_vs_linear", check_sse),
        ("moba_select_all_vs_full", check_moba),
        ("swa_full_window_vs_full", check_swa),
        ("masked_matrix_vs_scalar_full", check_matrix_route),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for (name, check) in checks {
        for &n in &sizes {
            for &d in &dims {
                let mut worst = 0.0f64;
                for _ in 0..trials {
                    let inp = random_inputs(&mut rng, n, d);
                    let err = match check(&inp, &mut rng, fault) {
                        Ok((a, b)) => a.max_abs_diff(&b)?,
                        Err(_) => f64::INFINITY,
                    };
                    worst = if err.is_nan() {
                        f64::INFINITY
                    } else {
                        worst.max(err)
                    };
                }
                results.push(PropertyResult {
                    property: name,
                    n,
                    d,
                    trials,
                    max_abs_error: worst,
                    tolerance,
                    pass: worst <= tolerance,
                });
            }
        }
    }
    let ok = results.iter().all(|r| r.pass);
    // JSON has no infinity; failed-to-run cases serialize as null
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "attn-check",
        "seed": seed,
        "inject_fault": fault,
        "properties": results,
        "pass": ok,
    });
    Report::json(&body, ok)
}

fn input_matrix(path: Option<&Path>, seed: u64, rows: usize, cols: usize) -> Result<Tensor> {
    match path {
        Some(p) => read_tensor(p),
        None => {
            if rows == 0 || cols == 0 {
                return Err(Error::Config("rows and cols must be >= 1".into()));
            }
            Ok(gaussian_tensor(
                &mut ChaCha8Rng::seed_from_u64(seed),
                rows,
                cols,
                1.0,
            ))
        }
    }
}

pub fn quant_report(
    input: Option<&Path>,
    seed: u64,
    rows: usize,
    cols: usize,
    grid: &str,
    container: Option<&Path>,
) -> Result<Report> {
    let x = input_matrix(input, seed, rows, cols)?;
    if x.shape().len() != 2 {
        return Err(Error::Shape("quant-report needs a matrix".into()));
    }
    let grid: Vec<f64> = parse_list(grid, "clip")?;
    let w = quantize_weight_blocks(&x, &grid)?;

    // per-block MSE at c = 1 for the dominance check
    let mut unit_mse = Vec::with_capacity(w.scales.len());
    for bi in 0..w.blocks_down() {
        for bj in 0..w.blocks_across() {
            let block: Vec<f64> = (bi * w.block_rows..((bi + 1) * w.block_rows).min(w.rows))
                .flat_map(|i| {
                    (bj * w.block_cols..((bj + 1) * w.block_cols).min(w.cols)).map(move |j| (i, j))
                })
                .map(|(i, j)| x.get(i, j))
                .collect();
            let amax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            unit_mse.push(if amax == 0.0 {
                0.0
            } else {
                roundtrip_mse(&block, amax / 127.0)
            });
        }
    }
    let dominance = !grid.contains(&1.0) || w.mse.iter().zip(&unit_mse).all(|(m, u)| m <= u);

    let a = quantize_activation_groups(&x)?;
    let back = a.dequantize();
    let mut worst_ratio = 0.0f64;
    for i in 0..a.rows {
        for j in 0..a.cols {
            worst_ratio = worst_ratio.max((back.get(i, j) - x.get(i, j)).abs() / a.scale_at(i, j));
        }
    }
    let firing = spike_encode(&a).firing();

    let f = fp8_quantize(&x)?;
    let fp8_err = f.dequantize().max_abs_diff(&x)?;

    if let Some(p) = container {
        fs::write(
            p,
            encode_container(&QuantizedContainer::Int8Blocks(w.clone())),
        )?;
    }
    let ok = dominance && worst_ratio <= 0.5 + 1e-12;
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "quant-report",
        "rows": x.rows(),
        "cols": x.cols(),
        "grid": grid,
        "weights": {
            "block_rows": w.block_rows,
            "block_cols": w.block_cols,
            "mse_per_block": w.mse,
            "mse_at_unit_clip": unit_mse,
            "chosen_clip": w.clips,
            "scales": w.scales,
            "search_dominates_unit_clip": dominance,
        },
        "activations": {
            "group_size": a.group_size,
            "groups": a.scales.len(),
            "max_error_over_scale": worst_ratio,
            "firing_rate": firing.value(),
        },
        "fp8": {
            "tiles": f.scales.len(),
            "max_abs_error": fp8_err,
        },
        "pass": ok,
    });
    Report::json(&body, ok)
}

pub fn spike_report(
    input: Option<&Path>,
    weights: Option<&Path>,
    seed: u64,
    rows: usize,
    cols: usize,
    out_features: usize,
) -> Result<Report> {
    let x = input_matrix(input, seed, rows, cols)?;
    if x.shape().len() != 2 {
        return Err(Error::Shape("spike-report needs a matrix".into()));
    }
    let w = match weights {
        Some(p) => read_tensor(p)?,
        None => {
            if out_features == 0 {
                return Err(Error::Config("out-features must be >= 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5753_4549_4748_5453);
            gaussian_tensor(&mut rng, x.cols(), out_features, 1.0)
        }
    };
    let grid = dssa_core::quant::int8::DEFAULT_CLIP_GRID;
    let qw = quantize_weight_blocks(&w, &grid)?;
    let train = spike_encode(&quantize_activation_groups(&x)?);
    let out = spike_matmul(&train, &qw)?;
    let firing = train.firing();
    let m = qw.cols as u64;
    let identity = out.ops.add_events == firing.fired * m
        && out.ops.add_events + out.ops.skipped_events == firing.slots * m;
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "spike-report",
        "rows": x.rows(),
        "inner_dim": x.cols(),
        "out_features": qw.cols,
        "firing_rate": firing.value(),
        "sparsity": firing.sparsity(),
        "fired": firing.fired,
        "slots": firing.slots,
        "plane_rates": train.plane_rates(),
        "add_events": out.ops.add_events,
        "skipped_events": out.ops.skipped_events,
        "dense_mac_equivalent": out.ops.dense_mac_equivalent,
        "counting_identity_holds": identity,
        "pass": identity,
    });
    Report::json(&body, identity)
}

pub fn scaling_table(
    lengths: &str,
    plan: Option<&Path>,
    schedule: Schedule,
    overhead: u64,
) -> Result<Report> {
    let plan = load_plan(plan)?;
    let lengths = parse_lengths(lengths)?;
    if lengths.is_empty() {
        return Err(Error::Config("no lengths given".into()));
    }
    let model = CostModel {
        schedule: match schedule {
            Schedule::Training => MobaSchedule::Training,
            Schedule::Plan => MobaSchedule::Plan,
        },
        layer_overhead_flops: overhead as u128,
        ..CostModel::default()
    };
    let rows = dssa_core::perf::scaling_table(&plan, &lengths, &model)?;
    Ok(Report {
        body: scaling_csv(&rows),
        ok: true,
    })
}

pub fn plan_show(plan: Option<&Path>, as_json: bool) -> Result<Report> {
    let plan = load_plan(plan)?;
    let counts = plan.counts();
    if as_json {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "command": "plan-show",
            "num_layers": plan.num_layers(),
            "counts": counts,
            "plan": plan,
        });
        return Report::json(&body, true);
    }
    let mut body = String::new();
    body.push_str(&plan.render_table());
    if !body.ends_with('\n') {
        body.push('\n');
    }
    Ok(Report { body, ok: true })
}

fn default_profile(seed: u64) -> SensitivityProfile {
    synthetic_sensitivity_profile(DEFAULT_NUM_LAYERS, &DEFAULT_MOBA_LAYERS, 0.15, seed)
}

pub fn layer_select(profile: Option<&Path>, threshold: f64, seed: u64) -> Result<Report> {
    let (profile, source) = match profile {
        Some(p) => (read_json::<SensitivityProfile>(p)?, "file"),
        None => (default_profile(seed), "synthetic"),
    };
    let selected = select_moba_layers(&profile, threshold)?;
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "layer-select",
        "source": source,
        "threshold": threshold,
        "num_layers": profile.scores.len(),
        "selected": selected,
        "count": selected.len(),
    });
    Report::json(&body, true)
}

/// Inputs of `loss-check`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossFixture {
    pub teacher_logits: Tensor,
    pub student_logits: Tensor,
    pub kd_top_k: usize,
    pub gates: Tensor,
    pub freqs: Tensor,
    pub sse_top_k: usize,
    pub student_hidden: Vec<Tensor>,
    pub teacher_hidden: Vec<Tensor>,
    pub ce: f64,
    pub formula: LossFormula,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn random_loss_fixture(seed: u64) -> Result<LossFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, vocab, parts, d) = (6, 32, 4, 8);
    let teacher = gaussian_tensor(&mut rng, n, vocab, 2.0);
    let noise = gaussian_tensor(&mut rng, n, vocab, 0.5);
    let gates = softmax_rows(&gaussian_tensor(&mut rng, n, parts, 1.0), None)?;
    let freqs = Tensor::new(
        vec![n, parts],
        (0..n * parts)
            .map(|_| rng.random_range(0.0..=1.0))
            .collect(),
    )?;
    let teacher_hidden: Vec<Tensor> = (0..3).map(|_| uniform_tensor(&mut rng, n, d)).collect();
    let student_hidden = teacher_hidden
        .iter()
        .map(|t| t.add(&uniform_tensor(&mut rng, n, d).scale(0.1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossFixture {
        student_logits: teacher.add(&noise)?,
        teacher_logits: teacher,
        kd_top_k: 8,
        gates,
        freqs,
        sse_top_k: 2,
        student_hidden,
        teacher_hidden,
        ce: rng.random_range(1.0..3.0),
        formula: LossFormula::Llm,
        c: dssa_core::losses::LLM_AUX_WEIGHT,
        alpha: dssa_core::losses::LLM_KD_WEIGHT,
        beta: dssa_core::losses::LLM_MSE_WEIGHT,
    })
}

pub fn loss_check(fixture: Option<&Path>, seed: u64) -> Result<Report> {
    let fx = match fixture {
        Some(p) => read_json::<LossFixture>(p)?,
        None => random_loss_fixture(seed)?,
    };
    let aux = aux_loss(&fx.gates, &fx.freqs, fx.sse_top_k)?;
    let kd = kd_topk_kl(&fx.teacher_logits, &fx.student_logits, fx.kd_top_k)?;
    let mse = layerwise_mse(&fx.student_hidden, &fx.teacher_hidden)?;
    let parts = LossParts {
        ce: fx.ce,
        aux: aux.per_token,
        kd: kd.value,
        mse,
    };
    let breakdown = match fx.formula {
        LossFormula::Llm => combined_loss_llm(&parts, fx.c, fx.alpha, fx.beta)?,
        LossFormula::Vlm => combined_loss_vlm(&parts, fx.alpha, fx.beta)?,
    };
    if breakdown.mse_term_zeroed {
        eprintln!("warning: layerwise MSE is zero; ratio-weighted MSE term set to 0");
    }
    let ok = breakdown.recompute() == breakdown.combined && kd.value >= 0.0 && aux.raw >= 0.0;
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "loss-check",
        "aux": aux,
        "kd": kd,
        "mse": mse,
        "breakdown": breakdown,
        "pass": ok,
    });
    Report::json(&body, ok)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttnFile {
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

pub fn moba_trace(
    inputs: Option<&Path>,
    seed: u64,
    n: usize,
    d: usize,
    block_size: usize,
    top_k: usize,
) -> Result<Report> {
    let inp = match inputs {
        Some(p) => {
            let f: AttnFile = read_json(p)?;
            AttnInputs::new(f.q, f.k, f.v)?
        }
        None => {
            if n == 0 || d == 0 {
                return Err(Error::Config("n and d must be >= 1".into()));
            }
            random_inputs(&mut ChaCha8Rng::seed_from_u64(seed), n, d)
        }
    };
    let p = MobaParams::new(block_size, top_k)?;
    let out = moba_forward(&inp, &p)?;
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "moba-trace",
        "n": inp.len(),
        "activation_ratio": dssa_core::moba::activation_ratio(inp.len(), &p),
        "selection": out.selection,
    });
    Report::json(&body, true)
}

pub fn make_fixture(
    kind: FixtureKind,
    output: &Path,
    seed: u64,
    rows: usize,
    cols: usize,
) -> Result<Outcome> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config("rows and cols must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let json_text = match kind {
        FixtureKind::Tensor => {
            write_tensor(output, &gaussian_tensor(&mut rng, rows, cols, 1.0))?;
            return Ok(Outcome { ok: true });
        }
        FixtureKind::AttnInputs => {
            let inp = random_inputs(&mut rng, rows, cols);
            serde_json::to_string_pretty(&AttnFile {
                q: inp.q,
                k: inp.k,
                v: inp.v,
            })?
        }
        FixtureKind::Profile => serde_json::to_string_pretty(&default_profile(seed))?,
        FixtureKind::Loss => serde_json::to_string_pretty(&random_loss_fixture(seed)?)?,
        FixtureKind::Plan => LayerPlan::default_plan().to_json()?,
    };
    fs::write(output, json_text + "\n")?;
    Ok(Outcome { ok: true })
}
