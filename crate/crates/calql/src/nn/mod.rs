//! Dense networks with reverse-mode autodiff and Adam.

mod graph;
mod mlp;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use mlp::{Activation, Mlp};
pub use tensor::{logsumexp, logsumexp_axis, softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called for a node that was not recorded")]
    NoTape,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes tensors as `ndim, dims..., values...`, all little-endian (u64 then f64).
pub fn write_tensors(path: &std::path::Path, tensors: &[&Tensor]) -> Result<(), NnError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tensors {
        f.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for d in &t.shape {
            f.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_tensors(path: &std::path::Path) -> Result<Vec<Tensor>, NnError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let next = |pos: &mut usize| -> Result<u64, NnError> {
        let b = bytes.get(*pos..*pos + 8).ok_or_else(|| NnError::Format("truncated tensor file".into()))?;
        *pos += 8;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let ndim = next(&mut pos)? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| next(&mut pos).map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| next(&mut pos).map(f64::from_bits)).collect::<Result<_, _>>()?;
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        let zeros = |t: &&Tensor| Tensor { shape: t.shape.clone(), data: vec![0.0; t.len()] };
        AdamState { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch("parameter, gradient and state counts differ".into()));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        if p.shape != g.shape || p.shape != m.shape {
            return Err(NnError::ShapeMismatch(format!("{:?} vs {:?}", p.shape, g.shape)));
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            p.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Network plus its optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub net: Mlp,
    pub opt: AdamState,
    pub cfg: AdamConfig,
}

impl Trainable {
    pub fn new(net: Mlp, lr: f64) -> Self {
        let opt = AdamState::for_params(&net.params());
        Trainable { net, opt, cfg: AdamConfig::with_lr(lr) }
    }

    /// Applies one Adam step with gradients read from `grads` at `leaves`.
    pub fn apply(&mut self, grads: &Gradients, leaves: &[Var]) -> Result<(), NnError> {
        let gs: Vec<Tensor> = self.net.params().iter().zip(leaves).map(|(p, &l)| grads.get_or_zeros(l, p)).collect();
        let mut params = self.net.params_mut();
        adam_step(&mut params, &gs, &mut self.opt, &self.cfg)?;
        if !self.net.is_finite() {
            return Err(NnError::Format("non-finite parameter after optimiser step".into()));
        }
        Ok(())
    }
}
