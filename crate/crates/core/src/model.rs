//! The bag-level regressor: per-instance projection, bidirectional LSTM
//! context encoder, additive attention pooling with mask support, and a
//! linear head.
//!
//! With `prefix_dim == 0` the model runs in single-stream mode; otherwise the
//! response and prefix embeddings are concatenated before projection. Masking
//! acts at the attention layer only: masked instances still flow through the
//! BiLSTM but receive exactly zero attention weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub response_dim: usize,
    /// 0 switches the model to single-stream mode.
    pub prefix_dim: usize,
    pub proj_dim: usize,
    /// Hidden width per LSTM direction.
    pub lstm_hidden: usize,
    pub attn_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            response_dim: 16,
            prefix_dim: 0,
            proj_dim: 64,
            lstm_hidden: 32,
            attn_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("response_dim", self.response_dim),
            ("proj_dim", self.proj_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("attn_dim", self.attn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.response_dim + self.prefix_dim
    }

    pub fn context_dim(&self) -> usize {
        2 * self.lstm_hidden
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    pub input: GateParams,
    pub forget: GateParams,
    pub cell: GateParams,
    pub output: GateParams,
}

/// All trainable weights. Buffer names and order are fixed; checkpoints and
/// optimizer state rely on them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
    pub attn_v: Tensor,
    pub attn_w: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

const FWD_GATE_NAMES: [[&str; 3]; 4] = [
    ["fwd_input_w", "fwd_input_u", "fwd_input_b"],
    ["fwd_forget_w", "fwd_forget_u", "fwd_forget_b"],
    ["fwd_cell_w", "fwd_cell_u", "fwd_cell_b"],
    ["fwd_output_w", "fwd_output_u", "fwd_output_b"],
];
const BWD_GATE_NAMES: [[&str; 3]; 4] = [
    ["bwd_input_w", "bwd_input_u", "bwd_input_b"],
    ["bwd_forget_w", "bwd_forget_u", "bwd_forget_b"],
    ["bwd_cell_w", "bwd_cell_u", "bwd_cell_b"],
    ["bwd_output_w", "bwd_output_u", "bwd_output_b"],
];

impl LstmDirection {
    fn gates(&self) -> [&GateParams; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }

    fn gates_mut(&mut self) -> [&mut GateParams; 4] {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.cell,
            &mut self.output,
        ]
    }
}

impl ModelParams {
    /// Named buffers in their canonical order.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> =
            vec![("proj_w", &self.proj_w), ("proj_b", &self.proj_b)];
        for (gate, names) in self.fwd.gates().into_iter().zip(FWD_GATE_NAMES) {
            out.push((names[0], &gate.w));
            out.push((names[1], &gate.u));
            out.push((names[2], &gate.b));
        }
        for (gate, names) in self.bwd.gates().into_iter().zip(BWD_GATE_NAMES) {
            out.push((names[0], &gate.w));
            out.push((names[1], &gate.u));
            out.push((names[2], &gate.b));
        }
        out.push(("attn_v", &self.attn_v));
        out.push(("attn_w", &self.attn_w));
        out.push(("head_w", &self.head_w));
        out.push(("head_b", &self.head_b));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> =
            vec![("proj_w", &mut self.proj_w), ("proj_b", &mut self.proj_b)];
        for (gate, names) in self.fwd.gates_mut().into_iter().zip(FWD_GATE_NAMES) {
            out.push((names[0], &mut gate.w));
            out.push((names[1], &mut gate.u));
            out.push((names[2], &mut gate.b));
        }
        for (gate, names) in self.bwd.gates_mut().into_iter().zip(BWD_GATE_NAMES) {
            out.push((names[0], &mut gate.w));
            out.push((names[1], &mut gate.u));
            out.push((names[2], &mut gate.b));
        }
        out.push(("attn_v", &mut self.attn_v));
        out.push(("attn_w", &mut self.attn_w));
        out.push(("head_w", &mut self.head_w));
        out.push(("head_b", &mut self.head_b));
        out
    }

    pub fn to_buffer_map(&self) -> BTreeMap<String, Tensor> {
        self.buffers()
            .into_iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect()
    }

    /// Rebuild params from a checkpoint buffer map, validating every shape
    /// against the config.
    pub fn from_buffer_map(
        config: &ModelConfig,
        mut buffers: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut template = init_params(config)?;
        for (name, slot) in template.buffers_mut() {
            let tensor = buffers.remove(name).ok_or_else(|| Error::Config(format!(
                "checkpoint is missing buffer {name}"
            )))?;
            if tensor.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: format!("checkpoint buffer {name}"),
                    lhs: tensor.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            if !tensor.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("checkpoint buffer {name}"),
                });
            }
            *slot = tensor;
        }
        if let Some((name, _)) = buffers.into_iter().next() {
            return Err(Error::Config(format!(
                "checkpoint has unexpected buffer {name}"
            )));
        }
        Ok(template)
    }

    /// Register every buffer as a leaf on a tape.
    pub fn register(&self, tape: &Tape) -> ParamVars {
        let reg_gate = |g: &GateParams| GateVars {
            w: tape.leaf(&g.w),
            u: tape.leaf(&g.u),
            b: tape.leaf(&g.b),
        };
        ParamVars {
            proj_w: tape.leaf(&self.proj_w),
            proj_b: tape.leaf(&self.proj_b),
            fwd: LstmDirectionVars {
                input: reg_gate(&self.fwd.input),
                forget: reg_gate(&self.fwd.forget),
                cell: reg_gate(&self.fwd.cell),
                output: reg_gate(&self.fwd.output),
            },
            bwd: LstmDirectionVars {
                input: reg_gate(&self.bwd.input),
                forget: reg_gate(&self.bwd.forget),
                cell: reg_gate(&self.bwd.cell),
                output: reg_gate(&self.bwd.output),
            },
            attn_v: tape.leaf(&self.attn_v),
            attn_w: tape.leaf(&self.attn_w),
            head_w: tape.leaf(&self.head_w),
            head_b: tape.leaf(&self.head_b),
        }
    }
}

/// Seeded parameter initialization: weights uniform in
/// [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = SplitMix64::new(config.seed);
    // Fan-in is the trailing (input) dimension.
    let mut fill = |count: usize, fan_in: usize| -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..count).map(|_| rng.uniform(-bound, bound)).collect()
    };
    let h = config.lstm_hidden;
    let proj = config.proj_dim;
    let mut matrix =
        |rows: usize, cols: usize| Tensor::matrix(rows, cols, fill(rows * cols, cols)).unwrap();
    let direction = |m: &mut dyn FnMut(usize, usize) -> Tensor| {
        let mut gate = || GateParams {
            w: m(h, proj),
            u: m(h, h),
            b: Tensor::zeros(vec![h]),
        };
        LstmDirection {
            input: gate(),
            forget: gate(),
            cell: gate(),
            output: gate(),
        }
    };
    let proj_w = matrix(proj, config.input_dim());
    let proj_b = Tensor::zeros(vec![proj]);
    let fwd = direction(&mut matrix);
    let bwd = direction(&mut matrix);
    let attn_v = matrix(config.attn_dim, config.context_dim());
    let mut vector = |len: usize| Tensor::vector(fill(len, len));
    let attn_w = vector(config.attn_dim);
    let head_w = vector(config.context_dim());
    let head_b = Tensor::scalar(0.0);
    Ok(ModelParams {
        proj_w,
        proj_b,
        fwd,
        bwd,
        attn_v,
        attn_w,
        head_w,
        head_b,
    })
}

// ---------------------------------------------------------------------------
// Tape-side mirrors
// ---------------------------------------------------------------------------

pub struct GateVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

pub struct LstmDirectionVars {
    pub input: GateVars,
    pub forget: GateVars,
    pub cell: GateVars,
    pub output: GateVars,
}

pub struct ParamVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub fwd: LstmDirectionVars,
    pub bwd: LstmDirectionVars,
    pub attn_v: Var,
    pub attn_w: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl LstmDirectionVars {
    fn gates(&self) -> [&GateVars; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }
}

impl ParamVars {
    /// Vars in the same order as [`ModelParams::buffers`].
    pub fn all(&self) -> Vec<&Var> {
        let mut out = vec![&self.proj_w, &self.proj_b];
        for gate in self.fwd.gates() {
            out.extend([&gate.w, &gate.u, &gate.b]);
        }
        for gate in self.bwd.gates() {
            out.extend([&gate.w, &gate.u, &gate.b]);
        }
        out.extend([&self.attn_v, &self.attn_w, &self.head_w, &self.head_b]);
        out
    }

    /// Gradients in buffer order; backward must have run on the tape.
    pub fn grads(&self) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .map(|v| v.grad().expect("backward must run before grads()"))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn gate_preact(gate: &GateVars, x: &Var, h: &Var) -> Result<Var> {
    gate.w.matvec(x)?.add(&gate.u.matvec(h)?)?.add(&gate.b)
}

fn lstm_direction_forward(
    tape: &Tape,
    gates: &LstmDirectionVars,
    inputs: &[&Var],
) -> Result<Vec<Var>> {
    let hidden = gates.input.b.len();
    let mut h = tape.leaf(&Tensor::zeros(vec![hidden]));
    let mut c = tape.leaf(&Tensor::zeros(vec![hidden]));
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        let i = gate_preact(&gates.input, x, &h)?.sigmoid()?;
        let f = gate_preact(&gates.forget, x, &h)?.sigmoid()?;
        let g = gate_preact(&gates.cell, x, &h)?.tanh()?;
        let o = gate_preact(&gates.output, x, &h)?.sigmoid()?;
        c = f.mul(&c)?.add(&i.mul(&g)?)?;
        h = o.mul(&c.tanh()?)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Left-to-right and right-to-left LSTM over the projected sequence; output
/// position j is the concatenation [h_fwd_j ; h_bwd_j]. Both passes start
/// from zero states.
pub fn bilstm_forward(tape: &Tape, params: &ParamVars, projected: &[Var]) -> Result<Vec<Var>> {
    if projected.is_empty() {
        return Err(Error::EmptyBag {
            bag_id: "<bilstm input>".into(),
        });
    }
    let fwd_in: Vec<&Var> = projected.iter().collect();
    let fwd = lstm_direction_forward(tape, &params.fwd, &fwd_in)?;
    let bwd_in: Vec<&Var> = projected.iter().rev().collect();
    let mut bwd = lstm_direction_forward(tape, &params.bwd, &bwd_in)?;
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect()
}

/// Differentiable forward pass of one bag, recorded on `tape`.
pub struct BagForwardVars {
    pub prediction: Var,
    pub attention: Var,
    pub hidden: Vec<Var>,
}

pub fn forward_bag(
    tape: &Tape,
    params: &ParamVars,
    config: &ModelConfig,
    bag: &Bag,
    mask: Option<&[bool]>,
) -> Result<BagForwardVars> {
    let n = bag.len();
    if n == 0 {
        return Err(Error::EmptyBag {
            bag_id: bag.id.clone(),
        });
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape {
                op: format!("mask for bag {}", bag.id),
                lhs: vec![n],
                rhs: vec![m.len()],
            });
        }
        if m.iter().all(|&x| x) {
            return Err(Error::DegenerateMask);
        }
    }

    let mut projected = Vec::with_capacity(n);
    for inst in &bag.instances {
        if inst.response.len() != config.response_dim {
            return Err(Error::Shape {
                op: format!("bag {}: response embedding", bag.id),
                lhs: vec![inst.response.len()],
                rhs: vec![config.response_dim],
            });
        }
        let mut input = inst.response.clone();
        if config.prefix_dim > 0 {
            let prefix = inst.prefix.as_deref().unwrap_or(&[]);
            if prefix.len() != config.prefix_dim {
                return Err(Error::Shape {
                    op: format!("bag {}: prefix embedding", bag.id),
                    lhs: vec![prefix.len()],
                    rhs: vec![config.prefix_dim],
                });
            }
            input.extend_from_slice(prefix);
        }
        let x = tape.leaf(&Tensor::vector(input));
        projected.push(params.proj_w.matvec(&x)?.add(&params.proj_b)?.tanh()?);
    }

    let hidden = bilstm_forward(tape, params, &projected)?;

    let mut logits = Vec::with_capacity(n);
    for h in &hidden {
        logits.push(params.attn_w.dot(&params.attn_v.matvec(h)?.tanh()?)?);
    }
    let logit_refs: Vec<&Var> = logits.iter().collect();
    let attention = tape.concat(&logit_refs)?.masked_softmax(mask)?;

    let hidden_refs: Vec<&Var> = hidden.iter().collect();
    let stacked = tape.stack_rows(&hidden_refs)?;
    let context = attention.vecmat(&stacked)?;
    let prediction = params.head_w.dot(&context)?.add(&params.head_b)?;

    Ok(BagForwardVars {
        prediction,
        attention,
        hidden,
    })
}

/// Plain-value forward result for inference and diagnostics.
#[derive(Clone, Debug)]
pub struct BagForward {
    pub prediction: f64,
    pub attention: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
}

/// Run one bag through the model on a fresh tape and extract plain values.
pub fn encode_bag(
    params: &ModelParams,
    config: &ModelConfig,
    bag: &Bag,
    mask: Option<&[bool]>,
) -> Result<BagForward> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    let out = forward_bag(&tape, &vars, config, bag, mask)?;
    Ok(BagForward {
        prediction: out.prediction.item(),
        attention: out.attention.value().data().to_vec(),
        hidden: out
            .hidden
            .iter()
            .map(|h| h.value().data().to_vec())
            .collect(),
    })
}

/// Mean squared error over aligned prediction/target lists, on the tape.
pub fn mse_loss(preds: &[Var], targets: &[f64]) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Shape {
            op: "mse_loss".into(),
            lhs: vec![preds.len()],
            rhs: vec![targets.len()],
        });
    }
    let mut acc: Option<Var> = None;
    for (p, t) in preds.iter().zip(targets) {
        let diff = p.add_const(-t)?;
        let sq = diff.mul(&diff)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => a.add(&sq)?,
        });
    }
    acc.unwrap().scale(1.0 / preds.len() as f64)
}
