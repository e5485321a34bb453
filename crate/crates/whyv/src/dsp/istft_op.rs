//! Differentiable inverse STFT.
//!
//! Synthesis is linear in the spectrogram, so the backward pass is its
//! transpose: scatter the waveform gradient back through the overlap-add
//! normalization, window each frame, and take a forward DFT with one-sided
//! weighting (2/N on interior bins, 1/N on DC and Nyquist, zero gradient on
//! their dead imaginary inputs).


use num_complex::Complex64;

use super::{istft_core, istft_plan, plan_forward, StftConfig};
use crate::tensor::{Graph, Tensor, TensorError, Value};

/// ISTFT as a graph op. `channels` is a (2, T, F) real/imaginary stack as
/// produced by the decoder; the output is the (origin_len,) waveform.
pub fn istft_value(
    g: &Graph,
    channels: &Value,
    cfg: &StftConfig,
    origin_len: usize,
) -> super::Result<Value> {
    let shape = channels.shape();
    if shape.len() != 3 || shape[0] != 2 || shape[2] != cfg.bins() {
        return Err(super::DspError::Tensor(TensorError::ShapeMismatch {
            op: "istft",
            detail: format!("expected (2, T, {}), got {:?}", cfg.bins(), shape),
        }));
    }
    let frames = shape[1];
    let bins = cfg.bins();
    let plane = frames * bins;
    let data = channels.data();
    let samples = istft_core(
        |m, k| data[m * bins + k],
        |m, k| data[plane + m * bins + k],
        cfg,
        frames,
        origin_len,
    )?;
    let out = Tensor::from_parts(vec![origin_len], samples);
    let cfg_back = cfg.clone();
    let v = g.push("istft", out, &[channels], move |_| {
        Box::new(IstftBack { cfg: cfg_back, frames, origin_len })
    })?;
    Ok(v)
}

struct IstftBack {
    cfg: StftConfig,
    frames: usize,
    origin_len: usize,
}

impl crate::tensor::graph::Backward for IstftBack {
    fn backward(&self, grad: &Tensor) -> crate::tensor::Result<Vec<Tensor>> {
        let cfg = &self.cfg;
        let n = cfg.n_fft();
        let bins = cfg.bins();
        let plane = self.frames * bins;
        let plan = istft_plan(cfg, self.frames);

        // Waveform gradient, padded back out and divided by the OLA norm.
        let mut dn = vec![0.0; plan.total];
        for (t, &gv) in grad.data().iter().enumerate().take(self.origin_len) {
            let idx = plan.pad + t;
            dn[idx] = gv / plan.denom[idx].max(1e-12);
        }

        let fft = plan_forward(n);
        let mut dchannels = vec![0.0; 2 * plane];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let window = cfg.window();
        for m in 0..self.frames {
            let start = m * cfg.hop();
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(dn[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            let row = m * bins;
            let scale = 1.0 / n as f64;
            dchannels[row] = buf[0].re * scale;
            dchannels[row + bins - 1] = buf[n / 2].re * scale;
            for k in 1..bins - 1 {
                dchannels[row + k] = 2.0 * buf[k].re * scale;
                dchannels[plane + row + k] = 2.0 * buf[k].im * scale;
            }
            // imaginary parts of DC and Nyquist stay zero: dead inputs
        }
        Ok(vec![Tensor::from_parts(vec![2, self.frames, bins], dchannels)])
    }

    fn name(&self) -> &'static str {
        "istft"
    }
}
