//! From-scratch LSTM with forget gates plus a scalar linear head.
//!
//! One layer of H independent memory cells. Every gate path consumes the
//! concatenation of the current feature vector and the previous hidden
//! output. The cell state is the additive "constant error carousel": while
//! the forget gate is open and the input gate closed, state circulates
//! unchanged, which is what lets gradients survive long sequences.
//!
//! The forward pass caches every activation so the backward pass can run
//! exact (untruncated) backpropagation through time. Gradients here are
//! analytic; the test suite checks them against central finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::Breath;

/// Feature dimension produced by [`featurize`].
pub const FEATURE_DIM: usize = 6;

/// Checkpoint format tag.
pub const CHECKPOINT_FORMAT: &str = "ventsim-lstm-v1";

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what}[{index}]")]
    NonFinite { what: &'static str, index: usize },
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("backward pass got {grads} prediction gradients for {caches} cached steps")]
    CacheMismatch { caches: usize, grads: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// All trainable parameters.
///
/// Each of the four paths (cell candidate plus input/forget/output gates)
/// owns an H x (D+H) weight matrix over the concatenated [x_t, y_{t-1}]
/// and a bias of length H, stored row-major. The head maps the hidden
/// vector to one scalar. Gradients reuse this same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub dim_in: usize,
    pub hidden: usize,
    pub w_cell: Vec<f64>,
    pub b_cell: Vec<f64>,
    pub w_input: Vec<f64>,
    pub b_input: Vec<f64>,
    pub w_forget: Vec<f64>,
    pub b_forget: Vec<f64>,
    pub w_output: Vec<f64>,
    pub b_output: Vec<f64>,
    pub w_head: Vec<f64>,
    pub b_head: f64,
}

/// (cell, hidden) state pair; both start at zero for every new sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            cell: vec![0.0; hidden],
            hidden: vec![0.0; hidden],
        }
    }
}

/// Everything the backward pass needs about one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub prev_hidden: Vec<f64>,
    pub prev_cell: Vec<f64>,
    pub z_cell: Vec<f64>,
    pub z_input: Vec<f64>,
    pub z_forget: Vec<f64>,
    pub z_output: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub output_gate: Vec<f64>,
    /// g(z_cell), the squashed cell input.
    pub cell_candidate: Vec<f64>,
    pub cell: Vec<f64>,
    /// h(cell), the squashed state feeding the output gate.
    pub cell_tanh: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// out[r] = b[r] + W[r, :] . [x, h], row-major W of width x.len()+h.len().
fn affine_concat(w: &[f64], b: &[f64], x: &[f64], h: &[f64], out: &mut [f64]) {
    let d = x.len();
    let n = d + h.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let mut acc = b[r];
        for (wv, xv) in row[..d].iter().zip(x) {
            acc += wv * xv;
        }
        for (wv, hv) in row[d..].iter().zip(h) {
            acc += wv * hv;
        }
        *o = acc;
    }
}

/// dw[r, :] += dz[r] * [x, h]
fn add_outer(dw: &mut [f64], dz: &[f64], x: &[f64], h: &[f64]) {
    let d = x.len();
    let n = d + h.len();
    for (r, &g) in dz.iter().enumerate() {
        let row = &mut dw[r * n..(r + 1) * n];
        for (wv, xv) in row[..d].iter_mut().zip(x) {
            *wv += g * xv;
        }
        for (wv, hv) in row[d..].iter_mut().zip(h) {
            *wv += g * hv;
        }
    }
}

/// (dx, dh) += W^T dz, with W row-major of width dx.len()+dh.len().
fn add_transpose_mul(w: &[f64], dz: &[f64], dx: &mut [f64], dh: &mut [f64]) {
    let d = dx.len();
    let n = d + dh.len();
    for (r, &g) in dz.iter().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        for (o, wv) in dx.iter_mut().zip(&row[..d]) {
            *o += g * wv;
        }
        for (o, wv) in dh.iter_mut().zip(&row[d..]) {
            *o += g * wv;
        }
    }
}

impl LstmParams {
    /// All-zero parameters (also the gradient accumulator shape).
    pub fn zeros(dim_in: usize, hidden: usize) -> Self {
        let w = vec![0.0; hidden * (dim_in + hidden)];
        let b = vec![0.0; hidden];
        Self {
            dim_in,
            hidden,
            w_cell: w.clone(),
            b_cell: b.clone(),
            w_input: w.clone(),
            b_input: b.clone(),
            w_forget: w.clone(),
            b_forget: b.clone(),
            w_output: w,
            b_output: b.clone(),
            w_head: b,
            b_head: 0.0,
        }
    }

    /// Random initialization: weights uniform in +-1/sqrt(D+H), biases at
    /// zero except the forget-gate bias at +1 so fresh cells retain state.
    pub fn init(dim_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dim_in, hidden);
        let scale = 1.0 / ((dim_in + hidden) as f64).sqrt();
        for w in [&mut p.w_cell, &mut p.w_input, &mut p.w_forget, &mut p.w_output, &mut p.w_head] {
            for v in w.iter_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
        for v in p.b_forget.iter_mut() {
            *v = 1.0;
        }
        p
    }

    /// Parameter blocks in a fixed order (used by the optimizer, the
    /// checkpoint format, and the gradient checks).
    pub fn blocks(&self) -> [(&'static str, &[f64]); 10] {
        [
            ("w_cell", &self.w_cell[..]),
            ("b_cell", &self.b_cell[..]),
            ("w_input", &self.w_input[..]),
            ("b_input", &self.b_input[..]),
            ("w_forget", &self.w_forget[..]),
            ("b_forget", &self.b_forget[..]),
            ("w_output", &self.w_output[..]),
            ("b_output", &self.b_output[..]),
            ("w_head", &self.w_head[..]),
            ("b_head", std::slice::from_ref(&self.b_head)),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        [
            ("w_cell", self.w_cell.as_mut_slice()),
            ("b_cell", self.b_cell.as_mut_slice()),
            ("w_input", self.w_input.as_mut_slice()),
            ("b_input", self.b_input.as_mut_slice()),
            ("w_forget", self.w_forget.as_mut_slice()),
            ("b_forget", self.b_forget.as_mut_slice()),
            ("w_output", self.w_output.as_mut_slice()),
            ("b_output", self.b_output.as_mut_slice()),
            ("w_head", self.w_head.as_mut_slice()),
            ("b_head", std::slice::from_mut(&mut self.b_head)),
        ]
    }

    /// Row-major shape of a named block.
    pub fn block_shape(&self, name: &str) -> Option<Vec<usize>> {
        match name {
            "w_cell" | "w_input" | "w_forget" | "w_output" => {
                Some(vec![self.hidden, self.dim_in + self.hidden])
            }
            "b_cell" | "b_input" | "b_forget" | "b_output" | "w_head" => Some(vec![self.hidden]),
            "b_head" => Some(vec![1]),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// self += k * other, blockwise.
    pub fn add_scaled(&mut self, other: &LstmParams, k: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.1.iter_mut().zip(src.1) {
                *d += k * s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, block) in self.blocks_mut() {
            for v in block.iter_mut() {
                *v *= k;
            }
        }
    }

    /// Global L2 norm over every parameter.
    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Serializes to the versioned key/value checkpoint document.
    pub fn to_checkpoint(&self) -> String {
        let mut params = serde_json::Map::new();
        for (name, block) in self.blocks() {
            params.insert(
                name.to_string(),
                serde_json::json!({
                    "shape": self.block_shape(name).unwrap(),
                    "data": block,
                }),
            );
        }
        serde_json::to_string(&serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "dim_in": self.dim_in,
            "hidden": self.hidden,
            "params": serde_json::Value::Object(params),
        }))
        .expect("checkpoint serialization cannot fail")
    }

    /// Parses a checkpoint document, verifying the format tag and every
    /// block shape.
    pub fn from_checkpoint(text: &str) -> Result<Self, LstmError> {
        #[derive(Deserialize, Serialize)]
        struct BlockDoc {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct CheckpointDoc {
            format: String,
            dim_in: usize,
            hidden: usize,
            params: std::collections::BTreeMap<String, BlockDoc>,
        }

        let doc: CheckpointDoc = serde_json::from_str(text)
            .map_err(|e| LstmError::Checkpoint(format!("parse error: {e}")))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(LstmError::Checkpoint(format!(
                "unsupported format tag '{}' (expected '{}')",
                doc.format, CHECKPOINT_FORMAT
            )));
        }

        let mut out = Self::zeros(doc.dim_in, doc.hidden);
        for (name, dst) in out.blocks_mut() {
            let block = doc
                .params
                .get(name)
                .ok_or_else(|| LstmError::Checkpoint(format!("missing block '{name}'")))?;
            let expected = block.shape.iter().product::<usize>();
            if block.data.len() != expected || dst.len() != expected {
                return Err(LstmError::Checkpoint(format!(
                    "block '{name}' has {} values for shape {:?} (expected {})",
                    block.data.len(),
                    block.shape,
                    dst.len()
                )));
            }
            dst.copy_from_slice(&block.data);
        }
        Ok(out)
    }
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<(), LstmError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LstmError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// One LSTM step.
///
/// With v = [x_t, y_{t-1}]: the cell candidate is tanh(W_cell v + b), each
/// gate is the logistic sigmoid of its own affine map, the new state is
/// forget .* prev_cell + input .* candidate, and the hidden output is
/// output .* tanh(state).
pub fn lstm_cell_forward(
    params: &LstmParams,
    x: &[f64],
    prev: &LstmState,
) -> Result<(LstmState, StepCache), LstmError> {
    let (d, h) = (params.dim_in, params.hidden);
    if x.len() != d {
        return Err(LstmError::ShapeMismatch { what: "input", expected: d, got: x.len() });
    }
    if prev.cell.len() != h || prev.hidden.len() != h {
        return Err(LstmError::ShapeMismatch {
            what: "state",
            expected: h,
            got: prev.cell.len(),
        });
    }

    let mut z_cell = vec![0.0; h];
    let mut z_input = vec![0.0; h];
    let mut z_forget = vec![0.0; h];
    let mut z_output = vec![0.0; h];
    affine_concat(&params.w_cell, &params.b_cell, x, &prev.hidden, &mut z_cell);
    affine_concat(&params.w_input, &params.b_input, x, &prev.hidden, &mut z_input);
    affine_concat(&params.w_forget, &params.b_forget, x, &prev.hidden, &mut z_forget);
    affine_concat(&params.w_output, &params.b_output, x, &prev.hidden, &mut z_output);
    check_finite("z_cell", &z_cell)?;
    check_finite("z_input", &z_input)?;
    check_finite("z_forget", &z_forget)?;
    check_finite("z_output", &z_output)?;

    let cell_candidate: Vec<f64> = z_cell.iter().map(|&z| z.tanh()).collect();
    let input_gate: Vec<f64> = z_input.iter().map(|&z| sigmoid(z)).collect();
    let forget_gate: Vec<f64> = z_forget.iter().map(|&z| sigmoid(z)).collect();
    let output_gate: Vec<f64> = z_output.iter().map(|&z| sigmoid(z)).collect();

    let cell: Vec<f64> = (0..h)
        .map(|i| forget_gate[i] * prev.cell[i] + input_gate[i] * cell_candidate[i])
        .collect();
    check_finite("cell", &cell)?;
    let cell_tanh: Vec<f64> = cell.iter().map(|&s| s.tanh()).collect();
    let hidden: Vec<f64> = (0..h).map(|i| output_gate[i] * cell_tanh[i]).collect();

    let state = LstmState { cell: cell.clone(), hidden: hidden.clone() };
    let cache = StepCache {
        x: x.to_vec(),
        prev_hidden: prev.hidden.clone(),
        prev_cell: prev.cell.clone(),
        z_cell,
        z_input,
        z_forget,
        z_output,
        input_gate,
        forget_gate,
        output_gate,
        cell_candidate,
        cell,
        cell_tanh,
        hidden,
    };
    Ok((state, cache))
}

/// Runs the cell over a whole sequence from the zero state and applies the
/// linear head at every step. Returns per-step scalar predictions and the
/// caches the backward pass consumes.
pub fn lstm_forward(
    params: &LstmParams,
    xs: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<StepCache>), LstmError> {
    if xs.is_empty() {
        return Err(LstmError::EmptySequence);
    }
    let mut state = LstmState::zeros(params.hidden);
    let mut predictions = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, cache) = lstm_cell_forward(params, x, &state)?;
        let pred = params
            .w_head
            .iter()
            .zip(&cache.hidden)
            .map(|(w, y)| w * y)
            .sum::<f64>()
            + params.b_head;
        predictions.push(pred);
        caches.push(cache);
        state = next;
    }
    Ok((predictions, caches))
}

/// Exact backpropagation through time.
///
/// `grad_predictions[t]` is dLoss/dPrediction_t. Returns dLoss/dTheta for
/// every parameter, accumulated over all steps by the reverse recursion
/// through the additive state update.
pub fn lstm_backward(
    params: &LstmParams,
    caches: &[StepCache],
    grad_predictions: &[f64],
) -> Result<LstmParams, LstmError> {
    if caches.len() != grad_predictions.len() {
        return Err(LstmError::CacheMismatch {
            caches: caches.len(),
            grads: grad_predictions.len(),
        });
    }
    let (d, h) = (params.dim_in, params.hidden);
    let mut grads = LstmParams::zeros(d, h);

    // Gradients flowing into the next-earlier step.
    let mut d_hidden_next = vec![0.0; h];
    let mut d_cell_next = vec![0.0; h];

    // Scratch reused across steps.
    let mut d_hidden = vec![0.0; h];
    let mut d_cell = vec![0.0; h];
    let mut dz = vec![0.0; h];
    let mut dx_sink = vec![0.0; d];

    for (cache, &g_pred) in caches.iter().zip(grad_predictions).rev() {
        // Head: prediction = w_head . hidden + b_head.
        for i in 0..h {
            grads.w_head[i] += g_pred * cache.hidden[i];
            d_hidden[i] = g_pred * params.w_head[i] + d_hidden_next[i];
        }
        grads.b_head += g_pred;

        // hidden = output_gate .* tanh(cell)
        for i in 0..h {
            let dtanh = 1.0 - cache.cell_tanh[i] * cache.cell_tanh[i];
            d_cell[i] = d_hidden[i] * cache.output_gate[i] * dtanh + d_cell_next[i];
        }

        dx_sink.iter_mut().for_each(|v| *v = 0.0);
        d_hidden_next.iter_mut().for_each(|v| *v = 0.0);

        // Output gate path: dz_out = d_hidden .* tanh(cell) .* sigma'.
        for i in 0..h {
            let o = cache.output_gate[i];
            dz[i] = d_hidden[i] * cache.cell_tanh[i] * o * (1.0 - o);
        }
        add_outer(&mut grads.w_output, &dz, &cache.x, &cache.prev_hidden);
        for (b, &g) in grads.b_output.iter_mut().zip(&dz) {
            *b += g;
        }
        add_transpose_mul(&params.w_output, &dz, &mut dx_sink, &mut d_hidden_next);

        // Forget gate path: dz_f = d_cell .* prev_cell .* sigma'.
        for i in 0..h {
            let f = cache.forget_gate[i];
            dz[i] = d_cell[i] * cache.prev_cell[i] * f * (1.0 - f);
        }
        add_outer(&mut grads.w_forget, &dz, &cache.x, &cache.prev_hidden);
        for (b, &g) in grads.b_forget.iter_mut().zip(&dz) {
            *b += g;
        }
        add_transpose_mul(&params.w_forget, &dz, &mut dx_sink, &mut d_hidden_next);

        // Input gate path: dz_i = d_cell .* candidate .* sigma'.
        for i in 0..h {
            let ig = cache.input_gate[i];
            dz[i] = d_cell[i] * cache.cell_candidate[i] * ig * (1.0 - ig);
        }
        add_outer(&mut grads.w_input, &dz, &cache.x, &cache.prev_hidden);
        for (b, &g) in grads.b_input.iter_mut().zip(&dz) {
            *b += g;
        }
        add_transpose_mul(&params.w_input, &dz, &mut dx_sink, &mut d_hidden_next);

        // Cell candidate path: dz_c = d_cell .* input_gate .* tanh'.
        for i in 0..h {
            let cand = cache.cell_candidate[i];
            dz[i] = d_cell[i] * cache.input_gate[i] * (1.0 - cand * cand);
        }
        add_outer(&mut grads.w_cell, &dz, &cache.x, &cache.prev_hidden);
        for (b, &g) in grads.b_cell.iter_mut().zip(&dz) {
            *b += g;
        }
        add_transpose_mul(&params.w_cell, &dz, &mut dx_sink, &mut d_hidden_next);

        // State carries to the previous step through the forget gate.
        for i in 0..h {
            d_cell_next[i] = d_cell[i] * cache.forget_gate[i];
        }
    }

    Ok(grads)
}

/// Per-step feature vector for one breath (D = 6):
/// `[u_in/100, u_out, R/50, C/50, dt since previous step, cumulative
/// sum of u_in*dt / 100]`. The cumulative term is a volume proxy.
pub fn featurize(b: &Breath) -> Vec<Vec<f64>> {
    let r_scaled = b.settings.r / 50.0;
    let c_scaled = b.settings.c / 50.0;
    let mut features = Vec::with_capacity(b.steps.len());
    let mut prev_time = None;
    let mut cumulative = 0.0;
    for step in &b.steps {
        let dt = match prev_time {
            Some(t) => step.time_s - t,
            None => 0.0,
        };
        prev_time = Some(step.time_s);
        cumulative += step.u_in * dt / 100.0;
        features.push(vec![
            step.u_in / 100.0,
            step.u_out,
            r_scaled,
            c_scaled,
            dt,
            cumulative,
        ]);
    }
    features
}
