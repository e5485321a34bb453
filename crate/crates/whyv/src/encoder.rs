//! Voice encoder: waveform in, unit-norm speaker embedding out.
//!
//! Log-power spectrogram features feed two recurrent layers over time;
//! mean+std pooling and a linear head produce an E-dimensional vector that
//! is L2-normalized. The same encoder (shared weights) embeds both the
//! reference clip and the mixture ("environment"), and the two embeddings
//! are concatenated for conditioning.

use crate::dsp::{stft, StftConfig, Waveform};
use crate::params::{Binder, Init, LayoutBuilder, ParamRef};
use crate::tensor::{gru_scan, Graph, Tensor, Value};
use crate::{Error, Result};

/// Minimum clip duration accepted by the encoder.
pub const MIN_CLIP_SECONDS: f64 = 0.5;
const NORM_EPS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Reference,
    Environment,
}

/// Unit-L2-norm E-dimensional speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Concatenation (reference, environment), 2E-dimensional.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub values: Vec<f64>,
}

impl FusedEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// fuse(e_ref, e_env): order is fixed as (reference, environment).
pub fn fuse(e_ref: &SpeakerEmbedding, e_env: &SpeakerEmbedding) -> Result<FusedEmbedding> {
    if e_ref.dim() != e_env.dim() {
        return Err(Error::DimMismatch {
            what: "fuse",
            expected: e_ref.dim(),
            got: e_env.dim(),
        });
    }
    let mut values = e_ref.values.clone();
    values.extend_from_slice(&e_env.values);
    Ok(FusedEmbedding { values })
}

/// Variant without the environment embedding: plain passthrough of e_ref.
pub fn fuse_ref_only(e_ref: &SpeakerEmbedding) -> FusedEmbedding {
    FusedEmbedding { values: e_ref.values.clone() }
}

/// Splits a 2E fused embedding back into its halves.
pub fn split(fused: &FusedEmbedding) -> Result<(SpeakerEmbedding, SpeakerEmbedding)> {
    if fused.dim() % 2 != 0 {
        return Err(Error::DimMismatch { what: "split", expected: fused.dim() + 1, got: fused.dim() });
    }
    let e = fused.dim() / 2;
    Ok((
        SpeakerEmbedding { values: fused.values[..e].to_vec(), source: EmbeddingSource::Reference },
        SpeakerEmbedding {
            values: fused.values[e..].to_vec(),
            source: EmbeddingSource::Environment,
        },
    ))
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { what: "cosine", expected: a.len(), got: b.len() });
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Parameter handles for the encoder submodule.
pub struct EncoderParams {
    gru0: GruRefs,
    gru1: GruRefs,
    out_w: ParamRef,
    out_b: ParamRef,
    pub hidden: usize,
    pub e_dim: usize,
}

struct GruRefs {
    w_x: ParamRef,
    w_h: ParamRef,
    b: ParamRef,
}

fn register_gru(lb: &mut LayoutBuilder, prefix: &str, c_in: usize, hidden: usize) -> GruRefs {
    let bound_x = 1.0 / (c_in as f64).sqrt();
    let bound_h = 1.0 / (hidden as f64).sqrt();
    GruRefs {
        w_x: lb.tensor(format!("{prefix}.w_x"), &[c_in, 3 * hidden], Init::Uniform(bound_x)),
        w_h: lb.tensor(format!("{prefix}.w_h"), &[hidden, 3 * hidden], Init::Uniform(bound_h)),
        b: lb.tensor(format!("{prefix}.b"), &[3 * hidden], Init::Zeros),
    }
}

impl EncoderParams {
    pub fn register(lb: &mut LayoutBuilder, f_bins: usize, hidden: usize, e_dim: usize) -> Self {
        let gru0 = register_gru(lb, "enc.gru0", f_bins, hidden);
        let gru1 = register_gru(lb, "enc.gru1", hidden, hidden);
        let bound = 1.0 / (2.0 * hidden as f64).sqrt();
        let out_w = lb.tensor("enc.out.w", &[2 * hidden, e_dim], Init::Uniform(bound));
        let out_b = lb.tensor("enc.out.b", &[e_dim], Init::Zeros);
        Self { gru0, gru1, out_w, out_b, hidden, e_dim }
    }

    /// Per-utterance normalized log-power spectrogram, shaped (1, T, F).
    fn features(wave: &Waveform, cfg: &StftConfig) -> Result<Tensor> {
        let spec = stft(wave, cfg)?;
        let (t, f) = (spec.frames(), spec.bins());
        let mut data: Vec<f64> = spec.data().iter().map(|c| (c.norm_sqr() + 1e-8).ln()).collect();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / data.len() as f64;
        let rstd = 1.0 / (var + 1e-8).sqrt();
        data.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
        Ok(Tensor::from_parts(vec![1, t, f], data))
    }

    /// In-graph embedding of a waveform: returns a unit-norm (E,) value.
    pub fn embed_value(
        &self,
        g: &Graph,
        binder: &Binder,
        wave: &Waveform,
        cfg: &StftConfig,
    ) -> Result<Value> {
        if wave.duration_s() < MIN_CLIP_SECONDS {
            return Err(Error::TooShort { got_s: wave.duration_s(), need_s: MIN_CLIP_SECONDS });
        }
        let x = g.constant(Self::features(wave, cfg)?);
        let h0 = gru_scan(g, &x, binder.get(self.gru0.w_x), binder.get(self.gru0.w_h), binder.get(self.gru0.b), false)?;
        let h1 = gru_scan(g, &h0, binder.get(self.gru1.w_x), binder.get(self.gru1.w_h), binder.get(self.gru1.b), false)?;
        // mean + std pooling over time
        let mean = g.mean(&h1, Some(1), false)?; // (1, H)
        let mean3 = g.reshape(&mean, &[1, 1, self.hidden])?;
        let centered = g.sub(&h1, &mean3)?;
        let sq = g.square(&centered)?;
        let var = g.mean(&sq, Some(1), false)?; // (1, H)
        let var_eps = g.add_scalar(&var, 1e-12)?;
        let std = g.sqrt(&var_eps)?;
        let pooled = g.concat(&[&mean, &std], 1)?; // (1, 2H)
        let proj = g.matmul(&pooled, binder.get(self.out_w))?;
        let e = g.add(&proj, binder.get(self.out_b))?; // (1, E)
        // L2 normalize
        let esq = g.square(&e)?;
        let energy = g.sum_all(&esq)?;
        let energy_eps = g.add_scalar(&energy, NORM_EPS)?;
        let norm = g.sqrt(&energy_eps)?; // (1,)
        let unit = g.div(&e, &norm)?;
        Ok(g.reshape(&unit, &[self.e_dim])?)
    }

    /// Plain (non-recorded) embedding.
    pub fn embed(
        &self,
        theta: &[f64],
        layout: &crate::params::ParamLayout,
        wave: &Waveform,
        cfg: &StftConfig,
        source: EmbeddingSource,
    ) -> Result<SpeakerEmbedding> {
        let g = Graph::inference();
        let binder = Binder::bind(&g, layout, theta, |_| true);
        let v = self.embed_value(&g, &binder, wave, cfg)?;
        Ok(SpeakerEmbedding { values: v.data().to_vec(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_concatenates_in_order() {
        let r = SpeakerEmbedding { values: vec![1.0, 0.0], source: EmbeddingSource::Reference };
        let e = SpeakerEmbedding { values: vec![0.0, 1.0], source: EmbeddingSource::Environment };
        assert_eq!(fuse(&r, &e).unwrap().values, vec![1.0, 0.0, 0.0, 1.0]);
        let same = fuse(&r, &SpeakerEmbedding { values: r.values.clone(), source: EmbeddingSource::Environment })
            .unwrap();
        assert_eq!(same.values, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(fuse_ref_only(&r).values, r.values);
    }

    #[test]
    fn fuse_then_split_is_identity() {
        let r = SpeakerEmbedding { values: vec![0.6, -0.8], source: EmbeddingSource::Reference };
        let e = SpeakerEmbedding { values: vec![0.0, 1.0], source: EmbeddingSource::Environment };
        let f = fuse(&r, &e).unwrap();
        let (r2, e2) = split(&f).unwrap();
        assert_eq!(r2.values, r.values);
        assert_eq!(e2.values, e.values);
    }

    #[test]
    fn fuse_rejects_dim_mismatch() {
        let r = SpeakerEmbedding { values: vec![1.0], source: EmbeddingSource::Reference };
        let e = SpeakerEmbedding { values: vec![0.0, 1.0], source: EmbeddingSource::Environment };
        assert!(matches!(fuse(&r, &e), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn cosine_basics() {
        let x = [0.3, -0.4, 0.5];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &x[..2]), Err(Error::ZeroVector)));
    }

    #[test]
    fn embed_is_deterministic_and_unit_norm() {
        let mut lb = LayoutBuilder::new();
        let enc = EncoderParams::register(&mut lb, 17, 8, 6);
        let layout = lb.finish();
        let theta = layout.init_theta(3);
        let cfg = StftConfig::sqrt_hann(32, 16).unwrap();
        let samples: Vec<f64> =
            (0..8000).map(|i| (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 8000.0).sin() * 0.4).collect();
        let w = Waveform::new(samples, 8000).unwrap();
        let a = enc.embed(&theta, &layout, &w, &cfg, EmbeddingSource::Reference).unwrap();
        let b = enc.embed(&theta, &layout, &w, &cfg, EmbeddingSource::Reference).unwrap();
        assert_eq!(a.values, b.values);
        let norm: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9, "norm {norm}");
    }

    #[test]
    fn embed_rejects_short_clips() {
        let mut lb = LayoutBuilder::new();
        let enc = EncoderParams::register(&mut lb, 17, 8, 6);
        let layout = lb.finish();
        let theta = layout.init_theta(3);
        let cfg = StftConfig::sqrt_hann(32, 16).unwrap();
        let w = Waveform::new(vec![0.1; 1000], 8000).unwrap(); // 0.125 s
        assert!(matches!(
            enc.embed(&theta, &layout, &w, &cfg, EmbeddingSource::Reference),
            Err(Error::TooShort { .. })
        ));
    }
}
