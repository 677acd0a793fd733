//! Sparse State Expansion: linear attention whose state is split into `N`
//! partitions, of which only the top-k gated ones are updated and read at
//! each step.

use serde::{Deserialize, Serialize};

use crate::attention::{rank_one_update, read_state, AttnInputs};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{l2_normalize_rows, matmul, silu, softmax_slice, top_k_indices, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    #[default]
    Identity,
    Silu,
}

/// State decay dynamics. Only the undecayed update is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseParams {
    /// Gate projection, `d_model x partitions`.
    gate_proj: Tensor,
    top_k: usize,
    pub always_selected: Option<usize>,
    pub feature_map: FeatureMap,
    pub qk_l2_norm: bool,
    pub decay: Decay,
}

impl SseParams {
    pub fn new(gate_proj: Tensor, top_k: usize) -> Result<Self> {
        if gate_proj.shape().len() != 2 {
            return shape_err("gate projection must be a matrix");
        }
        let n = gate_proj.cols();
        if n == 0 || top_k == 0 || top_k > n {
            return config_err(format!("need 1 <= k <= N, got k={top_k}, N={n}"));
        }
        Ok(Self {
            gate_proj,
            top_k,
            always_selected: None,
            feature_map: FeatureMap::Identity,
            qk_l2_norm: false,
            decay: Decay::None,
        })
    }

    pub fn with_always_selected(mut self, idx: usize) -> Result<Self> {
        if idx >= self.partitions() {
            return config_err(format!(
                "always-selected partition {idx} out of {}",
                self.partitions()
            ));
        }
        self.always_selected = Some(idx);
        Ok(self)
    }

    pub fn with_feature_map(mut self, fm: FeatureMap) -> Self {
        self.feature_map = fm;
        self
    }

    pub fn with_qk_l2_norm(mut self, on: bool) -> Self {
        self.qk_l2_norm = on;
        self
    }

    pub fn partitions(&self) -> usize {
        self.gate_proj.cols()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn gate_proj(&self) -> &Tensor {
        &self.gate_proj
    }

    pub fn model_dim(&self) -> usize {
        self.gate_proj.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Softmax gate over all partitions.
    pub weights: Vec<f64>,
    /// Partitions updated and read this step, ascending.
    pub selected: Vec<usize>,
}

/// `e_t = softmax(x_t W_e)` and the top-k partition set (plus the
/// always-selected partition, appended rather than displacing a winner).
pub fn sse_gate(x: &[f64], p: &SseParams) -> Result<GateOutput> {
    if x.len() != p.model_dim() {
        return shape_err(format!(
            "gate input {} vs W_e rows {}",
            x.len(),
            p.model_dim()
        ));
    }
    let logits = matmul(&Tensor::row_vector(x.to_vec()), &p.gate_proj)?;
    let weights = softmax_slice(logits.data(), None).expect("unmasked softmax");
    let mut selected = top_k_indices(&weights, p.top_k);
    if let Some(a) = p.always_selected {
        if let Err(pos) = selected.binary_search(&a) {
            selected.insert(pos, a);
        }
    }
    Ok(GateOutput { weights, selected })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseState {
    head_dim: usize,
    value_dim: usize,
    partitions: Vec<Vec<f64>>,
    freq: Vec<u64>,
    steps: u64,
}

impl SseState {
    pub fn new(partitions: usize, head_dim: usize, value_dim: usize) -> Self {
        Self {
            head_dim,
            value_dim,
            partitions: vec![vec![0.0; head_dim * value_dim]; partitions],
            freq: vec![0; partitions],
            steps: 0,
        }
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Row-major `d x d_v` state of partition `i`.
    pub fn partition(&self, i: usize) -> &[f64] {
        &self.partitions[i]
    }

    pub fn partition_tensor(&self, i: usize) -> Tensor {
        Tensor::new(
            vec![self.head_dim, self.value_dim],
            self.partitions[i].clone(),
        )
        .expect("state dims")
    }

    /// Number of steps in which each partition was selected.
    pub fn selection_counts(&self) -> &[u64] {
        &self.freq
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Selection count divided by the number of steps taken so far.
    pub fn running_frequency(&self) -> Vec<f64> {
        if self.steps == 0 {
            return vec![0.0; self.freq.len()];
        }
        self.freq
            .iter()
            .map(|&c| c as f64 / self.steps as f64)
            .collect()
    }
}

/// One recurrence step: update the selected partitions, then read them.
pub fn sse_step(
    state: &mut SseState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gate: &GateOutput,
) -> Result<Vec<f64>> {
    if q.len() != state.head_dim || k.len() != state.head_dim || v.len() != state.value_dim {
        return shape_err(format!(
            "step rows q={} k={} v={} vs state {}x{}",
            q.len(),
            k.len(),
            v.len(),
            state.head_dim,
            state.value_dim
        ));
    }
    if gate.weights.len() != state.num_partitions() {
        return shape_err("gate width does not match partition count");
    }
    if let Some(&bad) = gate.selected.iter().find(|&&i| i >= state.num_partitions()) {
        return shape_err(format!("selected partition {bad} out of range"));
    }
    let mut out = vec![0.0; state.value_dim];
    for &i in &gate.selected {
        let e = gate.weights[i];
        rank_one_update(&mut state.partitions[i], k, v, e);
        state.freq[i] += 1;
        for (o, r) in out
            .iter_mut()
            .zip(read_state(&state.partitions[i], q, state.value_dim))
        {
            *o += e * r;
        }
    }
    state.steps += 1;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SseOutput {
    pub output: Tensor,
    pub state: SseState,
    /// Gate rows `e_t`, `n x N`.
    pub gates: Tensor,
    /// Running selection frequency `f_t` after each step, `n x N`.
    pub running_freq: Tensor,
    pub selections: Vec<Vec<usize>>,
}

/// Applies the feature map and optional L2 normalization to queries and keys.
pub fn prepare_qk(inp: &AttnInputs, p: &SseParams) -> Result<(Tensor, Tensor)> {
    let (mut q, mut k) = match p.feature_map {
        FeatureMap::Identity => (inp.q.clone(), inp.k.clone()),
        FeatureMap::Silu => (silu(&inp.q), silu(&inp.k)),
    };
    if p.qk_l2_norm {
        q = l2_normalize_rows(&q)?.tensor;
        k = l2_normalize_rows(&k)?.tensor;
    }
    Ok((q, k))
}

/// Sequential scan over the sequence. `x` holds the layer inputs that drive the gate.
pub fn sse_forward(inp: &AttnInputs, x: &Tensor, p: &SseParams) -> Result<SseOutput> {
    let n = inp.len();
    if x.shape().len() != 2 || x.rows() != n {
        return shape_err(format!(
            "gate inputs {:?} vs sequence length {n}",
            x.shape()
        ));
    }
    let (q, k) = prepare_qk(inp, p)?;
    let parts = p.partitions();
    let mut state = SseState::new(parts, inp.head_dim(), inp.value_dim());
    let mut out = Vec::with_capacity(n * inp.value_dim());
    let mut gates = Vec::with_capacity(n * parts);
    let mut freqs = Vec::with_capacity(n * parts);
    let mut selections = Vec::with_capacity(n);
    for t in 0..n {
        let gate = sse_gate(x.row(t), p)?;
        out.extend(sse_step(
            &mut state,
            q.row(t),
            k.row(t),
            inp.v.row(t),
            &gate,
        )?);
        gates.extend_from_slice(&gate.weights);
        freqs.extend(state.running_frequency());
        selections.push(gate.selected);
    }
    Ok(SseOutput {
        output: Tensor::new(vec![n, inp.value_dim()], out)?.ensure_finite("sse_forward")?,
        state,
        gates: Tensor::new(vec![n, parts], gates)?,
        running_freq: Tensor::new(vec![n, parts], freqs)?,
        selections,
    })
}
