//! Dense tensors and reverse-mode differentiation.
//!
//! Parameters and checkpoints store single-precision values ([`Tensor`]).
//! [`Graph`] records a tape of operations generically over [`Scalar`], so the
//! same network code runs in `f32` for training and in `f64` for
//! finite-difference gradient checks.

mod graph;
mod nn;

pub use graph::{log_softmax_row, Graph, NodeId};
pub use nn::{
    ffn, label_smoothed_cross_entropy, layer_norm, multi_head_attention, scaled_dot_attention,
    MhaWeights, Reduction,
};

use crate::error::{Error, Result};

/// Element type of a computation graph. `f32` and `f64` are the only
/// implementors; the GEMM hook dispatches to `matrixmultiply`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` over row-major buffers with explicit
    /// strides, where A is m×k, B is k×n, C is m×n.
    ///
    /// # Safety
    /// Pointers must be valid for the strided extents.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Additive attention-mask penalty large enough that `exp` underflows to
    /// exactly zero after row-max subtraction.
    fn mask_penalty() -> Self {
        Self::from_f64(-1e9)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Plain single-precision tensor: shape, contiguous row-major values, and a
/// flag saying whether gradients should be tracked when it enters a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// View as a matrix: 1-D tensors are a single row.
    pub fn as_2d(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sinusoidal position table: row `pos` holds
/// `sin(pos / 10000^(2i/d))` at column `2i` and the matching `cos` at `2i+1`.
pub fn positional_encoding(max_pos: usize, d_model: usize) -> Result<Tensor> {
    if max_pos == 0 {
        return Err(Error::invalid("positional_encoding: max_pos must be >= 1"));
    }
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!(
            "positional_encoding: d_model must be even and positive, got {d_model}"
        )));
    }
    let mut data = vec![0.0f32; max_pos * d_model];
    for pos in 0..max_pos {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin() as f32;
            data[pos * d_model + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::from_vec(&[max_pos, d_model], data)
}

/// Adam moments and step counter for one ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], beta1: f32, beta2: f32, eps: f32) -> Self {
        OptimizerState {
            step: 0,
            beta1,
            beta2,
            eps,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update over an ordered parameter list.
///
/// Gradients are validated for finiteness before any parameter or moment is
/// touched, so a failing call leaves everything unchanged.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::invalid("adam_step: gradient shape mismatch"));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
    }

    let t = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (&gj, pj)) in g.iter().zip(p.data_mut()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}
