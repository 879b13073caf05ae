//! Invertible network: alternating fixed permutations and affine coupling
//! blocks.
//!
//! The map is `T = T_L . P_L . ... . T_1 . P_1` where each `P` is a
//! permutation of the coordinates and each `T` a coupling block
//!
//! ```text
//! x1 = xi1 * exp(s2(xi2)) + t2(xi2)
//! x2 = xi2 * exp(s1(x1))  + t1(x1)
//! ```
//!
//! with elementwise products and exponentials. The scale-subnet outputs are
//! soft-clamped to `c * tanh(s / c)` before exponentiation so early training
//! cannot overflow; `clamp = inf` switches back to the raw exponential. The
//! inverse needs no subnet inversion, and the log-determinant of the Jacobian
//! is the sum of the clamped scale outputs across blocks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{
    init_mlp, mlp_backward_acc, mlp_eval_into, mlp_forward, InitScheme, MlpParams, NetGrads, Tape,
};

/// Soft clamp `c * tanh(s / c)`; identity when `c` is infinite.
fn clamp_scale(s: f64, c: f64) -> f64 {
    if c.is_finite() {
        c * (s / c).tanh()
    } else {
        s
    }
}

/// Derivative of [`clamp_scale`] with respect to the raw value.
fn clamp_scale_deriv(s: f64, c: f64) -> f64 {
    if c.is_finite() {
        let t = (s / c).tanh();
        1.0 - t * t
    } else {
        1.0
    }
}

/// One affine coupling block over a `(d1, d2)` split of the coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    d1: usize,
    d2: usize,
    /// Scale and shift driving the first half from the second: `R^d2 -> R^d1`.
    s2: MlpParams,
    t2: MlpParams,
    /// Scale and shift driving the second half from the (updated) first: `R^d1 -> R^d2`.
    s1: MlpParams,
    t1: MlpParams,
    clamp: f64,
}

/// Activation record for one block, kept by [`flow_forward`] for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct BlockTape {
    xi1: Vec<f64>,
    xi2: Vec<f64>,
    s2_raw: Vec<f64>,
    s1_raw: Vec<f64>,
    e2: Vec<f64>,
    e1: Vec<f64>,
    s2_tape: Tape,
    t2_tape: Tape,
    s1_tape: Tape,
    t1_tape: Tape,
}

/// Parameter gradients for the four subnetworks of one block.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub s2: NetGrads,
    pub t2: NetGrads,
    pub s1: NetGrads,
    pub t1: NetGrads,
}

impl CouplingBlock {
    /// Validates that the four subnetworks are consistent with one split.
    pub fn new(
        s2: MlpParams,
        t2: MlpParams,
        s1: MlpParams,
        t1: MlpParams,
        clamp: f64,
    ) -> Result<Self> {
        let d1 = s2.output_dim();
        let d2 = s2.input_dim();
        let ok = t2.input_dim() == d2
            && t2.output_dim() == d1
            && s1.input_dim() == d1
            && s1.output_dim() == d2
            && t1.input_dim() == d1
            && t1.output_dim() == d2;
        if !ok {
            return Err(Error::Shape(
                "coupling subnet dims do not agree on one (d1, d2) split".into(),
            ));
        }
        if !(clamp > 0.0) {
            return Err(Error::InvalidArgument("clamp must be positive".into()));
        }
        Ok(Self { d1, d2, s2, t2, s1, t1, clamp })
    }

    pub fn split(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn subnets(&self) -> [&MlpParams; 4] {
        [&self.s2, &self.t2, &self.s1, &self.t1]
    }

    pub fn subnets_mut(&mut self) -> [&mut MlpParams; 4] {
        [&mut self.s2, &mut self.t2, &mut self.s1, &mut self.t1]
    }

    /// Forward map of the block; returns the output, the block's
    /// log-det contribution, and the tape.
    pub fn forward(&self, v: &[f64]) -> Result<(Vec<f64>, f64, BlockTape)> {
        if v.len() != self.dim() {
            return Err(Error::Shape("block input dimension".into()));
        }
        let (xi1, xi2) = v.split_at(self.d1);
        let (s2_raw, s2_tape) = mlp_forward(&self.s2, xi2)?;
        let (t2_val, t2_tape) = mlp_forward(&self.t2, xi2)?;
        let mut log_det = 0.0;
        let mut e2 = Vec::with_capacity(self.d1);
        let mut x1 = Vec::with_capacity(self.d1);
        for i in 0..self.d1 {
            let sh = clamp_scale(s2_raw[i], self.clamp);
            log_det += sh;
            let e = sh.exp();
            e2.push(e);
            x1.push(xi1[i] * e + t2_val[i]);
        }
        let (s1_raw, s1_tape) = mlp_forward(&self.s1, &x1)?;
        let (t1_val, t1_tape) = mlp_forward(&self.t1, &x1)?;
        let mut e1 = Vec::with_capacity(self.d2);
        let mut out = x1.clone();
        out.reserve(self.d2);
        for j in 0..self.d2 {
            let sh = clamp_scale(s1_raw[j], self.clamp);
            log_det += sh;
            let e = sh.exp();
            e1.push(e);
            out.push(xi2[j] * e + t1_val[j]);
        }
        let tape = BlockTape {
            xi1: xi1.to_vec(),
            xi2: xi2.to_vec(),
            s2_raw,
            s1_raw,
            e2,
            e1,
            s2_tape,
            t2_tape,
            s1_tape,
            t1_tape,
        };
        Ok((out, log_det, tape))
    }

    /// Closed-form inverse of the block.
    pub fn inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape("block input dimension".into()));
        }
        let (x1, x2) = v.split_at(self.d1);
        let (s1_raw, _) = mlp_forward(&self.s1, x1)?;
        let (t1_val, _) = mlp_forward(&self.t1, x1)?;
        let xi2: Vec<f64> = (0..self.d2)
            .map(|j| (x2[j] - t1_val[j]) * (-clamp_scale(s1_raw[j], self.clamp)).exp())
            .collect();
        let (s2_raw, _) = mlp_forward(&self.s2, &xi2)?;
        let (t2_val, _) = mlp_forward(&self.t2, &xi2)?;
        let mut out: Vec<f64> = (0..self.d1)
            .map(|i| (x1[i] - t2_val[i]) * (-clamp_scale(s2_raw[i], self.clamp)).exp())
            .collect();
        out.extend_from_slice(&xi2);
        Ok(out)
    }

    /// Backward pass: gradients of `<d_out, block(v)> + d_logdet * logdet`
    /// are added into `acc`; returns the gradient with respect to the block
    /// input.
    fn backward_acc(
        &self,
        tape: &BlockTape,
        d_out: &[f64],
        d_logdet: f64,
        acc: &mut BlockGrads,
    ) -> Result<Vec<f64>> {
        if d_out.len() != self.dim() {
            return Err(Error::Shape("block upstream dimension".into()));
        }
        let (g1, g2) = d_out.split_at(self.d1);

        // Second stage: x2 = xi2 * e1 + t1(x1), logdet += sum(shat1).
        let d_s1_raw: Vec<f64> = (0..self.d2)
            .map(|j| {
                (tape.xi2[j] * tape.e1[j] * g2[j] + d_logdet)
                    * clamp_scale_deriv(tape.s1_raw[j], self.clamp)
            })
            .collect();
        let d_x1_s1 = mlp_backward_acc(&self.s1, &tape.s1_tape, &d_s1_raw, &mut acc.s1)?;
        let d_x1_t1 = mlp_backward_acc(&self.t1, &tape.t1_tape, g2, &mut acc.t1)?;

        // Total gradient reaching x1: direct, plus through s1 and t1.
        let g1_total: Vec<f64> = (0..self.d1)
            .map(|i| g1[i] + d_x1_s1[i] + d_x1_t1[i])
            .collect();

        // First stage: x1 = xi1 * e2 + t2(xi2), logdet += sum(shat2).
        let d_s2_raw: Vec<f64> = (0..self.d1)
            .map(|i| {
                (tape.xi1[i] * tape.e2[i] * g1_total[i] + d_logdet)
                    * clamp_scale_deriv(tape.s2_raw[i], self.clamp)
            })
            .collect();
        let d_xi2_s2 = mlp_backward_acc(&self.s2, &tape.s2_tape, &d_s2_raw, &mut acc.s2)?;
        let d_xi2_t2 = mlp_backward_acc(&self.t2, &tape.t2_tape, &g1_total, &mut acc.t2)?;

        let mut d_in = Vec::with_capacity(self.dim());
        for i in 0..self.d1 {
            d_in.push(tape.e2[i] * g1_total[i]);
        }
        for j in 0..self.d2 {
            d_in.push(tape.e1[j] * g2[j] + d_xi2_s2[j] + d_xi2_t2[j]);
        }
        Ok(d_in)
    }
}

/// The full invertible network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowJson", into = "FlowJson")]
pub struct FlowModel {
    dim: usize,
    blocks: Vec<CouplingBlock>,
    perms: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct BlockJson {
    perm: Vec<usize>,
    s2: MlpParams,
    t2: MlpParams,
    s1: MlpParams,
    t1: MlpParams,
}

#[derive(Serialize, Deserialize)]
struct FlowJson {
    dim: usize,
    /// `null` means unclamped (raw exponential).
    clamp: Option<f64>,
    blocks: Vec<BlockJson>,
}

impl From<FlowModel> for FlowJson {
    fn from(m: FlowModel) -> Self {
        let clamp = m.blocks.first().map(|b| b.clamp).filter(|c| c.is_finite());
        let blocks = m
            .blocks
            .into_iter()
            .zip(m.perms)
            .map(|(b, perm)| BlockJson {
                perm,
                s2: b.s2,
                t2: b.t2,
                s1: b.s1,
                t1: b.t1,
            })
            .collect();
        FlowJson {
            dim: m.dim,
            clamp,
            blocks,
        }
    }
}

impl TryFrom<FlowJson> for FlowModel {
    type Error = Error;

    fn try_from(j: FlowJson) -> Result<Self> {
        let clamp = j.clamp.unwrap_or(f64::INFINITY);
        let mut blocks = Vec::with_capacity(j.blocks.len());
        let mut perms = Vec::with_capacity(j.blocks.len());
        for b in j.blocks {
            blocks.push(CouplingBlock::new(b.s2, b.t2, b.s1, b.t1, clamp)?);
            perms.push(b.perm);
        }
        FlowModel::new(j.dim, blocks, perms)
    }
}

/// Result of [`flow_forward`]: the mapped point, the log-determinant of the
/// Jacobian, and the per-block tapes for [`flow_backward`].
#[derive(Debug, Clone)]
pub struct FlowEval {
    pub output: Vec<f64>,
    pub log_det: f64,
    tapes: Vec<BlockTape>,
}

/// Gradients of a scalar function of (output, log_det) with respect to every
/// subnet parameter, plus the gradient with respect to the flow input.
#[derive(Debug, Clone)]
pub struct FlowGradients {
    pub blocks: Vec<BlockGrads>,
    pub d_input: Vec<f64>,
}

impl FlowGradients {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    s2: NetGrads::zeros_like(&b.s2),
                    t2: NetGrads::zeros_like(&b.t2),
                    s1: NetGrads::zeros_like(&b.s1),
                    t1: NetGrads::zeros_like(&b.t1),
                })
                .collect(),
            d_input: vec![0.0; model.dim],
        }
    }

    /// `self += scale * other` over every subnet gradient (input gradient
    /// included).
    pub fn add_scaled(&mut self, other: &FlowGradients, scale: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.s2.add_scaled(&b.s2, scale);
            a.t2.add_scaled(&b.t2, scale);
            a.s1.add_scaled(&b.s1, scale);
            a.t1.add_scaled(&b.t1, scale);
        }
        for (x, y) in self.d_input.iter_mut().zip(&other.d_input) {
            *x += scale * y;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.s2.scale(s);
            b.t2.scale(s);
            b.s1.scale(s);
            b.t1.scale(s);
        }
        self.d_input.iter_mut().for_each(|v| *v *= s);
    }

    /// Global L2 norm over the parameter gradients (input gradient excluded).
    pub fn param_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                b.s2.squared_norm()
                    + b.t2.squared_norm()
                    + b.s1.squared_norm()
                    + b.t1.squared_norm()
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl FlowModel {
    /// Assembles a flow from blocks and per-block permutations, validating
    /// that each permutation is a bijection on `0..dim` and that every block
    /// acts on `dim` coordinates.
    pub fn new(dim: usize, blocks: Vec<CouplingBlock>, perms: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("flow needs at least one block".into()));
        }
        if blocks.len() != perms.len() {
            return Err(Error::Shape("one permutation per block".into()));
        }
        for (l, b) in blocks.iter().enumerate() {
            if b.dim() != dim {
                return Err(Error::Shape(format!("block {l} acts on {} != {dim}", b.dim())));
            }
        }
        for (l, p) in perms.iter().enumerate() {
            let mut seen = vec![false; dim];
            if p.len() != dim || p.iter().any(|&i| i >= dim || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::InvalidArgument(format!(
                    "permutation {l} is not a bijection on 0..{dim}"
                )));
            }
        }
        Ok(Self { dim, blocks, perms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [CouplingBlock] {
        &mut self.blocks
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn n_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.subnets().iter().map(|n| n.n_params()).sum::<usize>())
            .sum()
    }

    /// Re-draws every subnet with he-uniform weights scaled by `scale`,
    /// producing a non-identity flow. Useful for randomized round-trip and
    /// Jacobian checks; moderate scales keep the per-block gains small enough
    /// that inverse round-trips stay near machine precision.
    pub fn randomize_subnets<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for block in &mut self.blocks {
            for net in block.subnets_mut() {
                let dims = net.layer_dims().to_vec();
                let mut fresh = init_mlp(&dims, InitScheme::HeUniform, rng).expect("valid dims");
                fresh.for_each_param_mut(|v| *v *= scale);
                *net = fresh;
            }
        }
    }
}

fn apply_perm(perm: &[usize], v: &[f64]) -> Vec<f64> {
    perm.iter().map(|&i| v[i]).collect()
}

fn apply_perm_inverse(perm: &[usize], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = v[i];
    }
    out
}

/// Evaluates `T(xi)` together with `log |det dT(xi)|` and the tapes.
pub fn flow_forward(model: &FlowModel, xi: &[f64]) -> Result<FlowEval> {
    if xi.len() != model.dim {
        return Err(Error::Shape(format!(
            "input length {} vs flow dim {}",
            xi.len(),
            model.dim
        )));
    }
    let mut v = xi.to_vec();
    let mut log_det = 0.0;
    let mut tapes = Vec::with_capacity(model.blocks.len());
    for (l, (block, perm)) in model.blocks.iter().zip(&model.perms).enumerate() {
        v = apply_perm(perm, &v);
        let (out, ld, tape) = block.forward(&v)?;
        if !out.iter().all(|x| x.is_finite()) || !ld.is_finite() {
            return Err(Error::NonFinite(format!("flow block {l} output")));
        }
        v = out;
        log_det += ld;
        tapes.push(tape);
    }
    Ok(FlowEval {
        output: v,
        log_det,
        tapes,
    })
}

/// Evaluates `T^{-1}(x)` using the closed-form block inverses.
pub fn flow_inverse(model: &FlowModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.dim {
        return Err(Error::Shape(format!(
            "input length {} vs flow dim {}",
            x.len(),
            model.dim
        )));
    }
    let mut v = x.to_vec();
    for (l, (block, perm)) in model.blocks.iter().zip(&model.perms).enumerate().rev() {
        v = block.inverse(&v)?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("inverse of flow block {l}")));
        }
        v = apply_perm_inverse(perm, &v);
    }
    Ok(v)
}

/// Exact gradient of `<d_output, T(xi)> + d_logdet * log|det dT(xi)|` with
/// respect to every subnet parameter (and the input).
pub fn flow_backward(
    model: &FlowModel,
    eval: &FlowEval,
    d_output: &[f64],
    d_logdet: f64,
) -> Result<FlowGradients> {
    let mut acc = FlowGradients::zeros_like(model);
    flow_backward_acc(model, eval, d_output, d_logdet, &mut acc)?;
    Ok(acc)
}

/// Accumulating variant of [`flow_backward`]: parameter gradients are added
/// into `acc`, and `acc.d_input` receives the input gradient of this call.
pub fn flow_backward_acc(
    model: &FlowModel,
    eval: &FlowEval,
    d_output: &[f64],
    d_logdet: f64,
    acc: &mut FlowGradients,
) -> Result<()> {
    if eval.tapes.len() != model.blocks.len() || acc.blocks.len() != model.blocks.len() {
        return Err(Error::Shape("stale tape: block count mismatch".into()));
    }
    if d_output.len() != model.dim {
        return Err(Error::Shape("upstream dimension".into()));
    }
    let mut delta = d_output.to_vec();
    for (l, (block, perm)) in model.blocks.iter().zip(&model.perms).enumerate().rev() {
        let d_in = block.backward_acc(&eval.tapes[l], &delta, d_logdet, &mut acc.blocks[l])?;
        delta = apply_perm_inverse(perm, &d_in);
    }
    for (a, d) in acc.d_input.iter_mut().zip(&delta) {
        *a += d;
    }
    Ok(())
}

/// Reusable buffers for [`flow_map`].
#[derive(Debug, Default)]
pub struct FlowScratch {
    h1: Vec<f64>,
    h2: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
}

/// Tape-free forward map `T(xi)`, writing the output into `out`.
///
/// Functionally identical to [`flow_forward`] without the log-det or tapes;
/// used on the sampling hot path where millions of small allocations would
/// otherwise dominate.
pub fn flow_map(
    model: &FlowModel,
    xi: &[f64],
    scratch: &mut FlowScratch,
    out: &mut Vec<f64>,
) -> Result<()> {
    if xi.len() != model.dim {
        return Err(Error::Shape("input length vs flow dim".into()));
    }
    scratch.v.clear();
    scratch.v.extend_from_slice(xi);
    for (l, (block, perm)) in model.blocks.iter().zip(&model.perms).enumerate() {
        let FlowScratch { h1, h2, s, t, v, p } = scratch;
        p.clear();
        p.extend(perm.iter().map(|&i| v[i]));
        let (d1, d2) = (block.d1, block.d2);
        let (xi1, xi2) = p.split_at(d1);
        mlp_eval_into(&block.s2, xi2, h1, h2, s)?;
        mlp_eval_into(&block.t2, xi2, h1, h2, t)?;
        v.clear();
        for i in 0..d1 {
            v.push(xi1[i] * clamp_scale(s[i], block.clamp).exp() + t[i]);
        }
        mlp_eval_into(&block.s1, &v[..d1], h1, h2, s)?;
        mlp_eval_into(&block.t1, &v[..d1], h1, h2, t)?;
        for j in 0..d2 {
            v.push(xi2[j] * clamp_scale(s[j], block.clamp).exp() + t[j]);
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("flow block {l} output")));
        }
    }
    out.clear();
    out.extend_from_slice(&scratch.v);
    Ok(())
}

/// Builds a fresh flow: split `d1 = floor(d/2)`, uniformly random
/// permutations drawn from `rng`, and zero-last-layer subnet initialization
/// so the new model is the identity map.
pub fn build_flow<R: Rng>(
    dim: usize,
    n_blocks: usize,
    subnet_width: usize,
    subnet_depth: usize,
    clamp: f64,
    rng: &mut R,
) -> Result<FlowModel> {
    if dim < 2 {
        return Err(Error::InvalidArgument(
            "coupling flows need dim >= 2 (both halves nonempty)".into(),
        ));
    }
    if n_blocks == 0 {
        return Err(Error::InvalidArgument("need at least one block".into()));
    }
    if subnet_width == 0 || subnet_depth == 0 {
        return Err(Error::InvalidArgument("subnet width/depth must be >= 1".into()));
    }
    let d1 = dim / 2;
    let d2 = dim - d1;
    let dims = |din: usize, dout: usize| {
        let mut v = vec![din];
        v.extend(std::iter::repeat(subnet_width).take(subnet_depth));
        v.push(dout);
        v
    };
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut perms = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        perms.push(perm);
        let s2 = init_mlp(&dims(d2, d1), InitScheme::ZeroLastLayer, rng)?;
        let t2 = init_mlp(&dims(d2, d1), InitScheme::ZeroLastLayer, rng)?;
        let s1 = init_mlp(&dims(d1, d2), InitScheme::ZeroLastLayer, rng)?;
        let t1 = init_mlp(&dims(d1, d2), InitScheme::ZeroLastLayer, rng)?;
        blocks.push(CouplingBlock::new(s2, t2, s1, t1, clamp)?);
    }
    FlowModel::new(dim, blocks, perms)
}
