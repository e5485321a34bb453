//! Speaker-conditioned gating.
//!
//! The fused embedding is transformed once into a global target filter
//! (GTF) and a global target bias (GTB), both shaped (D, F, 1), shared by
//! every block. Each block owns learnable (D, F, 1) tensors alpha and beta
//! that adapt the shared conditioning to its abstraction level:
//!
//!   omega = sigmoid(GTF * alpha)
//!   phi   = tanh(GTB * beta)
//!   o_w   = omega * o_tfg + phi
//!
//! with elementwise products and the trailing singleton broadcasting over
//! the T axis of the (D, T, F) feature map. A FiLM layer over the same
//! embedding is provided as the ablation alternative.

use crate::params::{Binder, Init, LayoutBuilder, ParamRef};
use crate::tensor::{Graph, Value};
use crate::{Error, Result};

/// Shared conditioning tensors, generated once per forward pass.
pub struct GateConditioning {
    /// Global target filter, (D, F, 1).
    pub gtf: Value,
    /// Global target bias, (D, F, 1).
    pub gtb: Value,
}

/// Generator: one linear map from the fused embedding to both tensors.
pub struct CondGenerator {
    w: ParamRef,
    b: ParamRef,
    pub d: usize,
    pub f: usize,
    pub e_in: usize,
}

impl CondGenerator {
    pub fn register(lb: &mut LayoutBuilder, e_in: usize, d: usize, f: usize) -> Self {
        let bound = 1.0 / (e_in as f64).sqrt();
        let w = lb.tensor("gen.w", &[e_in, 2 * d * f], Init::Uniform(bound));
        let b = lb.tensor("gen.b", &[2 * d * f], Init::Zeros);
        Self { w, b, d, f, e_in }
    }

    /// Transforms the fused embedding into GTF and GTB.
    pub fn make_conditioning(
        &self,
        g: &Graph,
        binder: &Binder,
        e: &Value,
    ) -> Result<GateConditioning> {
        if e.tensor().numel() != self.e_in {
            return Err(Error::DimMismatch {
                what: "make_conditioning",
                expected: self.e_in,
                got: e.tensor().numel(),
            });
        }
        let row = g.reshape(e, &[1, self.e_in])?;
        let lin = g.matmul(&row, binder.get(self.w))?;
        let out = g.add(&lin, binder.get(self.b))?;
        let df = self.d * self.f;
        let gtf_flat = g.slice(&out, 1, 0, df)?;
        let gtb_flat = g.slice(&out, 1, df, 2 * df)?;
        Ok(GateConditioning {
            gtf: g.reshape(&gtf_flat, &[self.d, self.f, 1])?,
            gtb: g.reshape(&gtb_flat, &[self.d, self.f, 1])?,
        })
    }
}

/// Per-block learnable gate parameters.
pub struct BlockGate {
    pub alpha: ParamRef,
    pub beta: ParamRef,
    d: usize,
    f: usize,
}

impl BlockGate {
    pub fn register(lb: &mut LayoutBuilder, prefix: &str, d: usize, f: usize) -> Self {
        Self {
            alpha: lb.tensor(format!("{prefix}.alpha"), &[d, f, 1], Init::Uniform(0.5)),
            beta: lb.tensor(format!("{prefix}.beta"), &[d, f, 1], Init::Uniform(0.5)),
            d,
            f,
        }
    }

    /// Applies the gate to a (D, T, F) feature map.
    pub fn gate(
        &self,
        g: &Graph,
        binder: &Binder,
        o_tfg: &Value,
        cond: &GateConditioning,
    ) -> Result<Value> {
        let shape = o_tfg.shape();
        if shape.len() != 3 || shape[0] != self.d || shape[2] != self.f {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "gate",
                detail: format!("feature map {:?} vs gate (D={}, F={})", shape, self.d, self.f),
            }));
        }
        let omega = g.sigmoid(&g.mul(&cond.gtf, binder.get(self.alpha))?)?;
        let phi = g.tanh(&g.mul(&cond.gtb, binder.get(self.beta))?)?;
        // (D, F, 1) and (D, 1, F) share a row-major layout, so the move to
        // time-broadcast position is a pure reshape.
        let omega_t = g.reshape(&omega, &[self.d, 1, self.f])?;
        let phi_t = g.reshape(&phi, &[self.d, 1, self.f])?;
        Ok(g.add(&g.mul(&omega_t, o_tfg)?, &phi_t)?)
    }

    /// Batched gate over (B, D, T, F) with one conditioning per item.
    pub fn gate_batch(
        &self,
        g: &Graph,
        binder: &Binder,
        o_tfg: &Value,
        conds: &[GateConditioning],
    ) -> Result<Value> {
        let shape = o_tfg.shape();
        if shape.len() != 4 || shape[0] != conds.len() || shape[1] != self.d || shape[3] != self.f
        {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "gate",
                detail: format!(
                    "batched map {:?} vs {} conditionings of (D={}, F={})",
                    shape,
                    conds.len(),
                    self.d,
                    self.f
                ),
            }));
        }
        let mut omegas = Vec::with_capacity(conds.len());
        let mut phis = Vec::with_capacity(conds.len());
        for cond in conds {
            let omega = g.sigmoid(&g.mul(&cond.gtf, binder.get(self.alpha))?)?;
            let phi = g.tanh(&g.mul(&cond.gtb, binder.get(self.beta))?)?;
            omegas.push(g.reshape(&omega, &[1, self.d, 1, self.f])?);
            phis.push(g.reshape(&phi, &[1, self.d, 1, self.f])?);
        }
        let or: Vec<&Value> = omegas.iter().collect();
        let pr: Vec<&Value> = phis.iter().collect();
        let omega4 = if or.len() == 1 { omegas[0].clone() } else { g.concat(&or, 0)? };
        let phi4 = if pr.len() == 1 { phis[0].clone() } else { g.concat(&pr, 0)? };
        Ok(g.add(&g.mul(&omega4, o_tfg)?, &phi4)?)
    }
}

/// FiLM conditioning: per-block linear maps of the embedding to a (D, 1, 1)
/// scale and shift, broadcast over both time and frequency.
pub struct FilmLayer {
    w_gamma: ParamRef,
    b_gamma: ParamRef,
    w_delta: ParamRef,
    b_delta: ParamRef,
    d: usize,
    e_in: usize,
}

impl FilmLayer {
    pub fn register(lb: &mut LayoutBuilder, prefix: &str, e_in: usize, d: usize) -> Self {
        let bound = 1.0 / (e_in as f64).sqrt();
        Self {
            w_gamma: lb.tensor(format!("{prefix}.w_gamma"), &[e_in, d], Init::Uniform(bound)),
            b_gamma: lb.tensor(format!("{prefix}.b_gamma"), &[d], Init::Ones),
            w_delta: lb.tensor(format!("{prefix}.w_delta"), &[e_in, d], Init::Uniform(bound)),
            b_delta: lb.tensor(format!("{prefix}.b_delta"), &[d], Init::Zeros),
            d,
            e_in,
        }
    }

    pub fn film(&self, g: &Graph, binder: &Binder, o_tfg: &Value, e: &Value) -> Result<Value> {
        if e.tensor().numel() != self.e_in {
            return Err(Error::DimMismatch {
                what: "film",
                expected: self.e_in,
                got: e.tensor().numel(),
            });
        }
        let row = g.reshape(e, &[1, self.e_in])?;
        let gamma = g.add(&g.matmul(&row, binder.get(self.w_gamma))?, binder.get(self.b_gamma))?;
        let delta = g.add(&g.matmul(&row, binder.get(self.w_delta))?, binder.get(self.b_delta))?;
        let gamma3 = g.reshape(&gamma, &[self.d, 1, 1])?;
        let delta3 = g.reshape(&delta, &[self.d, 1, 1])?;
        Ok(g.add(&g.mul(&gamma3, o_tfg)?, &delta3)?)
    }

    /// Batched FiLM over (B, D, T, F) with one embedding per item.
    pub fn film_batch(
        &self,
        g: &Graph,
        binder: &Binder,
        o_tfg: &Value,
        embeddings: &[Value],
    ) -> Result<Value> {
        let shape = o_tfg.shape();
        if shape.len() != 4 || shape[0] != embeddings.len() || shape[1] != self.d {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "film",
                detail: format!("batched map {:?} vs {} embeddings", shape, embeddings.len()),
            }));
        }
        let mut gammas = Vec::with_capacity(embeddings.len());
        let mut deltas = Vec::with_capacity(embeddings.len());
        for e in embeddings {
            if e.tensor().numel() != self.e_in {
                return Err(Error::DimMismatch {
                    what: "film",
                    expected: self.e_in,
                    got: e.tensor().numel(),
                });
            }
            let row = g.reshape(e, &[1, self.e_in])?;
            let gamma =
                g.add(&g.matmul(&row, binder.get(self.w_gamma))?, binder.get(self.b_gamma))?;
            let delta =
                g.add(&g.matmul(&row, binder.get(self.w_delta))?, binder.get(self.b_delta))?;
            gammas.push(g.reshape(&gamma, &[1, self.d, 1, 1])?);
            deltas.push(g.reshape(&delta, &[1, self.d, 1, 1])?);
        }
        let gr: Vec<&Value> = gammas.iter().collect();
        let dr: Vec<&Value> = deltas.iter().collect();
        let gamma4 = if gr.len() == 1 { gammas[0].clone() } else { g.concat(&gr, 0)? };
        let delta4 = if dr.len() == 1 { deltas[0].clone() } else { g.concat(&dr, 0)? };
        Ok(g.add(&g.mul(&gamma4, o_tfg)?, &delta4)?)
    }
}
