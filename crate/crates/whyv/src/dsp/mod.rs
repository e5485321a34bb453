//! STFT/ISTFT front end and waveform plumbing.
//!
//! Analysis uses reflection padding of `n_fft/2` on both ends and a
//! one-sided spectrum (real signals). Synthesis is weighted overlap-add
//! normalized by the accumulated squared window, so reconstruction is exact
//! wherever the denominator is nonzero; the original length is stored for
//! exact-length inversion.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

mod istft_op;
pub mod wav;

pub use istft_op::istft_value;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("waveform too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("bad analysis window: {0}")]
    BadWindow(String),
    #[error("bad stft config: {0}")]
    BadConfig(String),
    #[error("unsupported sample rate: expected {expected} Hz, got {got} Hz")]
    UnsupportedRate { expected: u32, got: u32 },
    #[error("malformed wav file: {0}")]
    BadWav(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(DspError::TooShort { got: 0, need: 1 });
        }
        if sample_rate == 0 {
            return Err(DspError::BadConfig("sample rate must be positive".into()));
        }
        if !samples.iter().all(|x| x.is_finite()) {
            return Err(DspError::BadWav("non-finite sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// STFT analysis/synthesis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
}

impl StftConfig {
    /// Validates extents and the constant-overlap-add property of the
    /// squared window at the chosen hop (relative deviation <= 1e-8 over
    /// the fully covered region).
    pub fn new(n_fft: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if n_fft == 0 || !n_fft.is_power_of_two() {
            return Err(DspError::BadConfig(format!("n_fft must be a power of two, got {n_fft}")));
        }
        if hop == 0 || hop > n_fft {
            return Err(DspError::BadConfig(format!("hop must satisfy 0 < hop <= n_fft, got {hop}")));
        }
        if window.len() != n_fft {
            return Err(DspError::BadWindow(format!(
                "window length {} != n_fft {n_fft}",
                window.len()
            )));
        }
        if !window.iter().all(|x| x.is_finite()) {
            return Err(DspError::BadWindow("non-finite window sample".into()));
        }
        let cfg = Self { n_fft, hop, window };
        let dev = cfg.cola_deviation();
        if dev > 1e-8 {
            return Err(DspError::BadWindow(format!(
                "window is not COLA at hop {hop}: relative deviation {dev:.3e}"
            )));
        }
        Ok(cfg)
    }

    /// Square-root Hann (periodic) window, COLA-exact at hop = n_fft/2 and
    /// n_fft/4.
    pub fn sqrt_hann(n_fft: usize, hop: usize) -> Result<Self> {
        let window = (0..n_fft)
            .map(|n| (std::f64::consts::PI * n as f64 / n_fft as f64).sin())
            .collect();
        Self::new(n_fft, hop, window)
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Relative deviation from constancy of the squared-window overlap-add
    /// over the fully covered region.
    pub fn cola_deviation(&self) -> f64 {
        let total = 4 * self.n_fft;
        let mut acc = vec![0.0; total];
        let mut start = 0;
        while start + self.n_fft <= total {
            for (i, w) in self.window.iter().enumerate() {
                acc[start + i] += w * w;
            }
            start += self.hop;
        }
        let steady = &acc[self.n_fft..total - self.n_fft];
        let mean = steady.iter().sum::<f64>() / steady.len() as f64;
        if mean <= 0.0 {
            return f64::INFINITY;
        }
        let max = steady.iter().cloned().fold(f64::MIN, f64::max);
        let min = steady.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / mean
    }
}

/// One-sided complex STFT, frames x bins, with the config and original
/// length needed for inversion.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    frames: usize,
    config: StftConfig,
    origin_len: usize,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn origin_len(&self) -> usize {
        self.origin_len
    }

    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins() + bin]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn from_parts(
        data: Vec<Complex64>,
        frames: usize,
        config: StftConfig,
        origin_len: usize,
    ) -> Result<Self> {
        if data.len() != frames * config.bins() {
            return Err(DspError::BadConfig(format!(
                "{} values cannot fill {} frames x {} bins",
                data.len(),
                frames,
                config.bins()
            )));
        }
        if !data.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(DspError::BadConfig("non-finite spectrogram entry".into()));
        }
        Ok(Self { data, frames, config, origin_len })
    }

    /// Total energy sum |X|^2 (test helper for Parseval checks).
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Reflection padding (edge samples not repeated) of `pad` samples on both
/// ends, then zero extension so every frame is complete.
fn padded_signal(samples: &[f64], cfg: &StftConfig) -> Result<(Vec<f64>, usize)> {
    let pad = cfg.n_fft / 2;
    let len = samples.len();
    if len < pad + 1 {
        return Err(DspError::TooShort { got: len, need: pad + 1 });
    }
    let frames = 1 + len.div_ceil(cfg.hop);
    let total = cfg.n_fft + (frames - 1) * cfg.hop;
    let mut out = vec![0.0; total];
    for i in 0..pad {
        out[pad - 1 - i] = samples[i + 1];
    }
    out[pad..pad + len].copy_from_slice(samples);
    for i in 0..pad.min(len.saturating_sub(1)) {
        out[pad + len + i] = samples[len - 2 - i];
    }
    Ok((out, frames))
}

/// Forward STFT.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let (padded, frames) = padded_signal(w.samples(), cfg)?;
    let bins = cfg.bins();
    let fft = plan_forward(cfg.n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    let mut data = Vec::with_capacity(frames * bins);
    for m in 0..frames {
        let start = m * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * cfg.window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::from_parts(data, frames, cfg.clone(), w.len())
}

/// Rebuilds the real time-domain frame of one spectral slice. The imaginary
/// parts of bins 0 and n_fft/2 are ignored: a real frame has none, and the
/// differentiable synthesis path must treat them as dead inputs.
fn frame_from_bins(re: impl Fn(usize) -> f64, im: impl Fn(usize) -> f64, n_fft: usize) -> Vec<f64> {
    let bins = n_fft / 2 + 1;
    let mut full = vec![Complex64::new(0.0, 0.0); n_fft];
    full[0] = Complex64::new(re(0), 0.0);
    full[n_fft / 2] = Complex64::new(re(bins - 1), 0.0);
    for k in 1..bins - 1 {
        let c = Complex64::new(re(k), im(k));
        full[k] = c;
        full[n_fft - k] = c.conj();
    }
    let ifft = plan_inverse(n_fft);
    ifft.process(&mut full);
    let scale = 1.0 / n_fft as f64;
    full.iter().map(|c| c.re * scale).collect()
}

/// Accumulated squared synthesis window, per output sample.
fn ola_denominator(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let total = cfg.n_fft + (frames - 1) * cfg.hop;
    let mut denom = vec![0.0; total];
    for m in 0..frames {
        let start = m * cfg.hop;
        for (i, w) in cfg.window.iter().enumerate() {
            denom[start + i] += w * w;
        }
    }
    denom
}

pub(crate) struct IstftPlan {
    pub denom: Vec<f64>,
    pub total: usize,
    pub pad: usize,
}

pub(crate) fn istft_plan(cfg: &StftConfig, frames: usize) -> IstftPlan {
    let denom = ola_denominator(cfg, frames);
    let total = denom.len();
    IstftPlan { denom, total, pad: cfg.n_fft / 2 }
}

/// Core weighted overlap-add synthesis shared by the plain and
/// differentiable inverse paths.
pub(crate) fn istft_core(
    re: impl Fn(usize, usize) -> f64,
    im: impl Fn(usize, usize) -> f64,
    cfg: &StftConfig,
    frames: usize,
    origin_len: usize,
) -> Result<Vec<f64>> {
    let plan = istft_plan(cfg, frames);
    if plan.pad + origin_len > plan.total {
        return Err(DspError::BadConfig(format!(
            "{frames} frames cannot cover {origin_len} output samples"
        )));
    }
    let mut acc = vec![0.0; plan.total];
    for m in 0..frames {
        let frame = frame_from_bins(|k| re(m, k), |k| im(m, k), cfg.n_fft);
        let start = m * cfg.hop;
        for (i, (&f, &w)) in frame.iter().zip(&cfg.window).enumerate() {
            acc[start + i] += f * w;
        }
    }
    let mut out = Vec::with_capacity(origin_len);
    for t in 0..origin_len {
        let idx = plan.pad + t;
        out.push(acc[idx] / plan.denom[idx].max(1e-12));
    }
    Ok(out)
}

/// Inverse STFT back to the original length.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let bins = s.bins();
    let samples = istft_core(
        |m, k| s.data[m * bins + k].re,
        |m, k| s.data[m * bins + k].im,
        &s.config,
        s.frames,
        s.origin_len,
    )?;
    // Sample rate is not carried by the spectrogram; callers re-attach it.
    Waveform::new(samples, 1).map_err(Into::into)
}

/// Inverse STFT with an explicit sample rate for the output waveform.
pub fn istft_at_rate(s: &ComplexSpectrogram, sample_rate: u32) -> Result<Waveform> {
    let w = istft(s)?;
    Waveform::new(w.samples, sample_rate)
}

/// Lossless stacking of real/imaginary parts into a (2, T, F) tensor.
pub fn spec_as_channels(s: &ComplexSpectrogram) -> Tensor {
    let (t, f) = (s.frames(), s.bins());
    let mut data = vec![0.0; 2 * t * f];
    for (i, c) in s.data.iter().enumerate() {
        data[i] = c.re;
        data[t * f + i] = c.im;
    }
    Tensor::from_parts(vec![2, t, f], data)
}

/// Inverse of [`spec_as_channels`]; exact to the bit.
pub fn channels_as_spec(
    t: &Tensor,
    cfg: &StftConfig,
    origin_len: usize,
) -> Result<ComplexSpectrogram> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 2 || shape[2] != cfg.bins() {
        return Err(DspError::Tensor(TensorError::ShapeMismatch {
            op: "channels_as_spec",
            detail: format!("expected (2, T, {}), got {:?}", cfg.bins(), shape),
        }));
    }
    let frames = shape[1];
    let plane = frames * cfg.bins();
    let data = (0..plane)
        .map(|i| Complex64::new(t.data()[i], t.data()[plane + i]))
        .collect();
    ComplexSpectrogram::from_parts(data, frames, cfg.clone(), origin_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(rng: &mut ChaCha8Rng, len: usize) -> Waveform {
        let samples = (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect();
        Waveform::new(samples, 8000).unwrap()
    }

    /// Direct DFT-sum oracle: X_k = sum_n w[n] x[n] e^{-2 pi i k n / N}.
    fn dft_oracle(frame: &[f64], window: &[f64], k: usize) -> Complex64 {
        let n = frame.len() as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
            let theta = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n;
            acc += Complex64::new(theta.cos(), theta.sin()) * (x * w);
        }
        acc
    }

    #[test]
    fn constant_signal_concentrates_in_dc_bin() {
        // A rectangular window keeps a constant frame purely DC; shaped
        // windows would fold their own spectrum in.
        // Length a multiple of the hop so no frame sees the zero tail.
        let n_fft = 128;
        let w = Waveform::new(vec![1.0; 4096], 8000).unwrap();
        let cfg = StftConfig::new(n_fft, n_fft, vec![1.0; n_fft]).unwrap();
        let s = stft(&w, &cfg).unwrap();
        for m in 0..s.frames() {
            let dc = s.at(m, 0).norm();
            assert!(dc > 0.0);
            for k in 1..s.bins() {
                assert!(s.at(m, k).norm() < 1e-10 * dc, "frame {m} bin {k}");
            }
        }
    }

    #[test]
    fn bin_aligned_sinusoid_peaks_at_that_bin() {
        // Rectangular window, hop = n_fft, so each frame is a plain DFT the
        // oracle can predict: magnitude n_fft/2 at bin k.
        let n_fft = 128;
        let k = 9;
        let cfg = StftConfig::new(n_fft, n_fft, vec![1.0; n_fft]).unwrap();
        let len = n_fft * 8;
        let samples: Vec<f64> = (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / n_fft as f64).sin())
            .collect();
        let w = Waveform::new(samples.clone(), 8000).unwrap();
        let s = stft(&w, &cfg).unwrap();
        // Frame 1 starts at sample n_fft/2 into the signal (reflect pad of
        // n_fft/2): grab the same slice and compare against the oracle.
        let start = 1 * n_fft - n_fft / 2;
        let frame: Vec<f64> = samples[start..start + n_fft].to_vec();
        for bin in 0..s.bins() {
            let want = dft_oracle(&frame, cfg.window(), bin);
            let got = s.at(1, bin);
            assert!((want - got).norm() < 1e-9, "bin {bin}: {want} vs {got}");
        }
        let peak = s.at(1, k).norm();
        assert!((peak - n_fft as f64 / 2.0).abs() < 1e-9);
        for bin in 0..s.bins() {
            if bin != k {
                assert!(s.at(1, bin).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram_and_back() {
        let w = Waveform::new(vec![0.0; 1000], 8000).unwrap();
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let s = stft(&w, &cfg).unwrap();
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 1000);
        assert!(back.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_is_tight_across_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n_fft in &[128usize, 256] {
            for &hop in &[n_fft / 2, n_fft / 4] {
                let cfg = StftConfig::sqrt_hann(n_fft, hop).unwrap();
                for _ in 0..5 {
                    let len = rng.gen_range(8000..32000);
                    let w = random_wave(&mut rng, len);
                    let s = stft(&w, &cfg).unwrap();
                    let back = istft(&s).unwrap();
                    assert_eq!(back.len(), w.len());
                    let err = w
                        .samples()
                        .iter()
                        .zip(back.samples())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(err <= 1e-6, "n_fft={n_fft} hop={hop}: err {err}");
                }
            }
        }
    }

    #[test]
    fn stft_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let a = random_wave(&mut rng, 5000);
        let b = random_wave(&mut rng, 5000);
        let sum = Waveform::new(
            a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect(),
            8000,
        )
        .unwrap();
        let (sa, sb, ss) = (stft(&a, &cfg).unwrap(), stft(&b, &cfg).unwrap(), stft(&sum, &cfg).unwrap());
        for i in 0..ss.data().len() {
            let lin = sa.data()[i] + sb.data()[i];
            assert!((lin - ss.data()[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn istft_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let a = stft(&random_wave(&mut rng, 4000), &cfg).unwrap();
        let b = stft(&random_wave(&mut rng, 4000), &cfg).unwrap();
        let mut sum = a.clone();
        for (s, bv) in sum.data_mut().iter_mut().zip(b.data()) {
            *s += bv;
        }
        let (wa, wb, ws) = (istft(&a).unwrap(), istft(&b).unwrap(), istft(&sum).unwrap());
        for i in 0..ws.len() {
            assert!((wa.samples()[i] + wb.samples()[i] - ws.samples()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval_energy_matches_windowed_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let w = random_wave(&mut rng, 6000);
        let s = stft(&w, &cfg).unwrap();
        let (padded, frames) = padded_signal(w.samples(), &cfg).unwrap();
        let n = cfg.n_fft();
        for m in 0..frames {
            let time_energy: f64 = (0..n)
                .map(|i| {
                    let v = padded[m * cfg.hop() + i] * cfg.window()[i];
                    v * v
                })
                .sum();
            let mut freq_energy = s.at(m, 0).norm_sqr() + s.at(m, s.bins() - 1).norm_sqr();
            for k in 1..s.bins() - 1 {
                freq_energy += 2.0 * s.at(m, k).norm_sqr();
            }
            freq_energy /= n as f64;
            let rel = (time_energy - freq_energy).abs() / time_energy.max(1e-30);
            assert!(rel < 1e-6, "frame {m}: rel {rel}");
        }
    }

    #[test]
    fn channels_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let w = random_wave(&mut rng, 3000);
        let s = stft(&w, &cfg).unwrap();
        let ch = spec_as_channels(&s);
        assert_eq!(ch.shape(), &[2, s.frames(), s.bins()]);
        let back = channels_as_spec(&ch, &cfg, s.origin_len()).unwrap();
        assert_eq!(back.data(), s.data());
    }

    #[test]
    fn purely_real_spec_has_zero_imag_channel() {
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let w = Waveform::new(vec![1.0; 1000], 8000).unwrap();
        let mut s = stft(&w, &cfg).unwrap();
        for c in s.data_mut() {
            *c = Complex64::new(c.re, 0.0);
        }
        let ch = spec_as_channels(&s);
        let plane = s.frames() * s.bins();
        assert!(ch.data()[plane..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_short_input_is_rejected() {
        let cfg = StftConfig::sqrt_hann(128, 64).unwrap();
        let w = Waveform::new(vec![0.1; 10], 8000).unwrap();
        assert!(matches!(stft(&w, &cfg), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn non_cola_window_is_rejected() {
        // A ramp window does not overlap-add to a constant at hop n/2.
        let n = 128;
        let window: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        assert!(matches!(StftConfig::new(n, 64, window), Err(DspError::BadWindow(_))));
    }
}
