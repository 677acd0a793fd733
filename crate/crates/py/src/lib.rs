//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dssa_core::attention::{self, AttnInputs};
use dssa_core::hybrid::{self, SensitivityProfile};
use dssa_core::losses::{self, LossParts};
use dssa_core::moba::{self, MobaParams};
use dssa_core::perf::{self, CostModel, MobaSchedule, ModelDims};
use dssa_core::quant::{fp8, int8, spike};
use dssa_core::sse::{self, FeatureMap, SseParams};
use dssa_core::Tensor;

type Matrix = Vec<Vec<f64>>;

fn py_err(e: dssa_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

pub fn to_tensor(rows: &[Vec<f64>]) -> dssa_core::Result<Tensor> {
    Tensor::from_rows(rows)
}

pub fn from_tensor(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn inputs(q: Matrix, k: Matrix, v: Matrix) -> PyResult<AttnInputs> {
    AttnInputs::new(
        to_tensor(&q).map_err(py_err)?,
        to_tensor(&k).map_err(py_err)?,
        to_tensor(&v).map_err(py_err)?,
    )
    .map_err(py_err)
}

fn tensor(m: &[Vec<f64>]) -> PyResult<Tensor> {
    to_tensor(m).map_err(py_err)
}

#[pyfunction]
fn full_attention(q: Matrix, k: Matrix, v: Matrix) -> PyResult<Matrix> {
    let out = attention::full_attention(&inputs(q, k, v)?).map_err(py_err)?;
    Ok(from_tensor(&out))
}

#[pyfunction]
fn swa(q: Matrix, k: Matrix, v: Matrix, window: usize) -> PyResult<Matrix> {
    let out = attention::swa(&inputs(q, k, v)?, window).map_err(py_err)?;
    Ok(from_tensor(&out))
}

/// `form` is `"recurrent"` or `"parallel"`.
#[pyfunction]
#[pyo3(signature = (q, k, v, form = "recurrent"))]
fn linear_attention(q: Matrix, k: Matrix, v: Matrix, form: &str) -> PyResult<Matrix> {
    let inp = inputs(q, k, v)?;
    let out = match form {
        "recurrent" => attention::linear_attention_recurrent(&inp),
        "parallel" => attention::linear_attention_parallel(&inp),
        other => return Err(PyValueError::new_err(format!("unknown form {other:?}"))),
    }
    .map_err(py_err)?;
    Ok(from_tensor(&out))
}

#[pyfunction]
#[pyo3(signature = (q, k, v, x, gate_proj, top_k, always_selected = None, feature_map = "identity", qk_l2_norm = false))]
#[allow(clippy::too_many_arguments)]
fn sse_forward<'py>(
    py: Python<'py>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    x: Matrix,
    gate_proj: Matrix,
    top_k: usize,
    always_selected: Option<usize>,
    feature_map: &str,
    qk_l2_norm: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let fm = match feature_map {
        "identity" => FeatureMap::Identity,
        "silu" => FeatureMap::Silu,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown feature map {other:?}"
            )))
        }
    };
    let mut p = SseParams::new(tensor(&gate_proj)?, top_k).map_err(py_err)?;
    if let Some(a) = always_selected {
        p = p.with_always_selected(a).map_err(py_err)?;
    }
    let p = p.with_feature_map(fm).with_qk_l2_norm(qk_l2_norm);
    let out = sse::sse_forward(&inputs(q, k, v)?, &tensor(&x)?, &p).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("output", from_tensor(&out.output))?;
    d.set_item("gates", from_tensor(&out.gates))?;
    d.set_item("running_freq", from_tensor(&out.running_freq))?;
    d.set_item("selections", out.selections)?;
    Ok(d)
}

/// Returns `(output, blocks)` where `blocks[t]` lists query `t`'s key blocks.
#[pyfunction]
fn moba_forward(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    block_size: usize,
    top_k: usize,
) -> PyResult<(Matrix, Vec<Vec<usize>>)> {
    let p = MobaParams::new(block_size, top_k).map_err(py_err)?;
    let out = moba::moba_forward(&inputs(q, k, v)?, &p).map_err(py_err)?;
    let blocks = out
        .selection
        .entries
        .into_iter()
        .map(|e| e.blocks)
        .collect();
    Ok((from_tensor(&out.output), blocks))
}

#[pyfunction]
fn activation_ratio(n: usize, block_size: usize, top_k: usize) -> PyResult<f64> {
    Ok(moba::activation_ratio(
        n,
        &MobaParams::new(block_size, top_k).map_err(py_err)?,
    ))
}

#[pyfunction]
#[pyo3(signature = (w, grid = None))]
fn quantize_weight_blocks<'py>(
    py: Python<'py>,
    w: Matrix,
    grid: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let grid = grid.unwrap_or_else(|| int8::DEFAULT_CLIP_GRID.to_vec());
    let q = int8::quantize_weight_blocks(&tensor(&w)?, &grid).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("values", &q.values)?;
    d.set_item("scales", &q.scales)?;
    d.set_item("chosen_clip", &q.clips)?;
    d.set_item("mse_per_block", &q.mse)?;
    d.set_item("dequantized", from_tensor(&q.dequantize()))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (x, group_size = 128))]
fn quantize_activation_groups<'py>(
    py: Python<'py>,
    x: Matrix,
    group_size: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let q = int8::quantize_activation_groups_with(&tensor(&x)?, group_size).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("values", &q.values)?;
    d.set_item("scales", &q.scales)?;
    d.set_item("dequantized", from_tensor(&q.dequantize()))?;
    Ok(d)
}

/// Spike-encodes `x`, runs the event-driven matmul against `w` and reports
/// event counts.
#[pyfunction]
fn spike_matmul<'py>(py: Python<'py>, x: Matrix, w: Matrix) -> PyResult<Bound<'py, PyDict>> {
    let qa = int8::quantize_activation_groups(&tensor(&x)?).map_err(py_err)?;
    let qw =
        int8::quantize_weight_blocks(&tensor(&w)?, &int8::DEFAULT_CLIP_GRID).map_err(py_err)?;
    let train = spike::spike_encode(&qa);
    let out = spike::spike_matmul(&train, &qw).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("output", from_tensor(&out.output))?;
    d.set_item("firing_rate", out.firing.value())?;
    d.set_item("plane_rates", train.plane_rates())?;
    d.set_item("add_events", out.ops.add_events)?;
    d.set_item("skipped_events", out.ops.skipped_events)?;
    d.set_item("dense_mac_equivalent", out.ops.dense_mac_equivalent)?;
    Ok(d)
}

#[pyfunction]
fn fp8_encode(v: f64) -> PyResult<u8> {
    fp8::fp8_encode(v).map_err(py_err)
}

#[pyfunction]
fn fp8_decode(code: u8) -> f64 {
    fp8::fp8_decode(code)
}

#[pyfunction]
fn fp8_quantize<'py>(py: Python<'py>, x: Matrix) -> PyResult<Bound<'py, PyDict>> {
    let q = fp8::fp8_quantize(&tensor(&x)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("codes", &q.codes)?;
    d.set_item("scales", &q.scales)?;
    d.set_item("dequantized", from_tensor(&q.dequantize()))?;
    Ok(d)
}

/// Returns `(raw, per_token)`.
#[pyfunction]
fn aux_loss(gates: Matrix, freqs: Matrix, top_k: usize) -> PyResult<(f64, f64)> {
    let a = losses::aux_loss(&tensor(&gates)?, &tensor(&freqs)?, top_k).map_err(py_err)?;
    Ok((a.raw, a.per_token))
}

/// Returns `(value, clamped)`.
#[pyfunction]
fn kd_topk_kl(teacher: Matrix, student: Matrix, top_k: usize) -> PyResult<(f64, usize)> {
    let kd = losses::kd_topk_kl(&tensor(&teacher)?, &tensor(&student)?, top_k).map_err(py_err)?;
    Ok((kd.value, kd.clamped))
}

#[pyfunction]
fn layerwise_mse(student: Vec<Matrix>, teacher: Vec<Matrix>) -> PyResult<f64> {
    let s = student
        .iter()
        .map(|m| tensor(m))
        .collect::<PyResult<Vec<_>>>()?;
    let t = teacher
        .iter()
        .map(|m| tensor(m))
        .collect::<PyResult<Vec<_>>>()?;
    losses::layerwise_mse(&s, &t).map_err(py_err)
}

fn breakdown_dict<'py>(py: Python<'py>, b: &losses::LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (key, value) in [
        ("ce", b.ce),
        ("aux", b.aux),
        ("kd", b.kd),
        ("mse", b.mse),
        ("c", b.c),
        ("alpha", b.alpha),
        ("beta", b.beta),
        ("mse_term", b.mse_term),
        ("combined", b.combined),
    ] {
        d.set_item(key, value)?;
    }
    d.set_item("mse_term_zeroed", b.mse_term_zeroed)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (ce, aux, kd, mse, c = losses::LLM_AUX_WEIGHT, alpha = losses::LLM_KD_WEIGHT, beta = losses::LLM_MSE_WEIGHT))]
#[allow(clippy::too_many_arguments)]
fn combined_loss_llm<'py>(
    py: Python<'py>,
    ce: f64,
    aux: f64,
    kd: f64,
    mse: f64,
    c: f64,
    alpha: f64,
    beta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let b = losses::combined_loss_llm(&LossParts { ce, aux, kd, mse }, c, alpha, beta)
        .map_err(py_err)?;
    breakdown_dict(py, &b)
}

#[pyfunction]
#[pyo3(signature = (kd, mse, alpha = losses::VLM_KD_WEIGHT, beta = losses::VLM_MSE_WEIGHT))]
fn combined_loss_vlm<'py>(
    py: Python<'py>,
    kd: f64,
    mse: f64,
    alpha: f64,
    beta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let parts = LossParts {
        ce: 0.0,
        aux: 0.0,
        kd,
        mse,
    };
    let b = losses::combined_loss_vlm(&parts, alpha, beta).map_err(py_err)?;
    breakdown_dict(py, &b)
}

#[pyfunction]
#[pyo3(signature = (scores, threshold = 0.08))]
fn select_moba_layers(scores: Vec<f64>, threshold: f64) -> PyResult<Vec<usize>> {
    let profile = SensitivityProfile {
        baseline: 0.0,
        scores,
    };
    hybrid::select_moba_layers(&profile, threshold).map_err(py_err)
}

#[pyclass(name = "LayerPlan", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyLayerPlan {
    inner: hybrid::LayerPlan,
}

#[pymethods]
impl PyLayerPlan {
    #[staticmethod]
    fn default_plan() -> Self {
        Self {
            inner: hybrid::LayerPlan::default_plan(),
        }
    }

    #[staticmethod]
    fn all_full(num_layers: usize) -> Self {
        Self {
            inner: hybrid::LayerPlan::all_full(num_layers),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: hybrid::LayerPlan::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    /// `{"full": .., "moba": .., "sse_swa": ..}`.
    fn counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.counts();
        let d = PyDict::new(py);
        d.set_item("full", c.full)?;
        d.set_item("moba", c.moba)?;
        d.set_item("sse_swa", c.sse_swa)?;
        Ok(d)
    }

    fn table(&self) -> String {
        self.inner.render_table()
    }

    fn __len__(&self) -> usize {
        self.inner.num_layers()
    }

    fn __repr__(&self) -> String {
        let c = self.inner.counts();
        format!(
            "LayerPlan(full={}, moba={}, sse_swa={})",
            c.full, c.moba, c.sse_swa
        )
    }
}

/// One dict per length with the scaling-table columns.
#[pyfunction]
#[pyo3(signature = (lengths, plan = None, schedule = "training"))]
fn scaling_table<'py>(
    py: Python<'py>,
    lengths: Vec<usize>,
    plan: Option<PyRef<'py, PyLayerPlan>>,
    schedule: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let plan = plan.map_or_else(hybrid::LayerPlan::default_plan, |p| p.inner.clone());
    let schedule = match schedule {
        "training" => MobaSchedule::Training,
        "plan" => MobaSchedule::Plan,
        other => return Err(PyValueError::new_err(format!("unknown schedule {other:?}"))),
    };
    let model = CostModel {
        schedule,
        ..CostModel::default()
    };
    let rows = perf::scaling_table(&plan, &lengths, &model).map_err(py_err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("n", r.n)?;
            d.set_item("fa_cost", r.fa_cost)?;
            d.set_item("dssa_cost", r.dssa_cost)?;
            d.set_item("ratio", r.ratio)?;
            d.set_item("fa_kv_bytes", r.fa_kv_bytes)?;
            d.set_item("dssa_kv_bytes", r.dssa_kv_bytes)?;
            d.set_item("activation_ratio", r.activation_ratio)?;
            Ok(d)
        })
        .collect()
}

/// Full-attention-stack over plan KV bytes at length `n`.
#[pyfunction]
#[pyo3(signature = (n, plan = None, batch = 1))]
fn kv_ratio<'py>(n: usize, plan: Option<PyRef<'py, PyLayerPlan>>, batch: usize) -> PyResult<f64> {
    let plan = plan.map_or_else(hybrid::LayerPlan::default_plan, |p| p.inner.clone());
    Ok(perf::memory_model(&plan, n, batch, &ModelDims::default())
        .map_err(py_err)?
        .kv_ratio)
}

#[pyfunction]
fn parse_length(s: &str) -> PyResult<usize> {
    perf::parse_length(s).map_err(py_err)
}

#[pymodule]
fn dssa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLayerPlan>()?;
    m.add_function(wrap_pyfunction!(full_attention, m)?)?;
    m.add_function(wrap_pyfunction!(swa, m)?)?;
    m.add_function(wrap_pyfunction!(linear_attention, m)?)?;
    m.add_function(wrap_pyfunction!(sse_forward, m)?)?;
    m.add_function(wrap_pyfunction!(moba_forward, m)?)?;
    m.add_function(wrap_pyfunction!(activation_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_weight_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_activation_groups, m)?)?;
    m.add_function(wrap_pyfunction!(spike_matmul, m)?)?;
    m.add_function(wrap_pyfunction!(fp8_encode, m)?)?;
    m.add_function(wrap_pyfunction!(fp8_decode, m)?)?;
    m.add_function(wrap_pyfunction!(fp8_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(aux_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_topk_kl, m)?)?;
    m.add_function(wrap_pyfunction!(layerwise_mse, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss_llm, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss_vlm, m)?)?;
    m.add_function(wrap_pyfunction!(select_moba_layers, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_table, m)?)?;
    m.add_function(wrap_pyfunction!(kv_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(parse_length, m)?)?;
    Ok(())
}
