//! Mixture synthesis: the additive signal model, SNR-controlled noise,
//! synthetic speakers, the clustered speaker-sampling procedure, and
//! dataset rendering for the T1/T2/T3 train and E1/E2 eval presets.
//!
//! Synthetic speakers replace a real corpus at desk scale: each profile is
//! a harmonic source with its own fundamental range, spectral decay, and
//! formant-like bands, so speakers are separable in exactly the way the
//! gating architecture exploits.
//!
//! Rendered items quantize target and epsilon to 16-bit first and form the
//! mixture by integer addition, so `mixture = target + epsilon` survives
//! the wav round trip exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::{to_pcm16, write_wav, write_wav_pcm16};
use crate::dsp::{StftConfig, Waveform};
use crate::encoder::{EncoderParams, EmbeddingSource};
use crate::params::LayoutBuilder;
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;
pub const CLIP_SECONDS: f64 = 4.0;
pub const CLIP_SAMPLES: usize = 32000;

// ── conditions ──────────────────────────────────────────────────────

/// Mixing conditions: T* are training presets, E* evaluation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    /// two clean speakers
    T1,
    /// two clean speakers + ambient noise
    T2,
    /// two clean speakers + a third speaker
    T3,
    /// eval: two clean speakers
    E1,
    /// eval: two clean speakers + ambient noise
    E2,
}

impl Condition {
    pub fn speaker_count(&self) -> usize {
        match self {
            Condition::T3 => 3,
            _ => 2,
        }
    }

    pub fn has_noise(&self) -> bool {
        matches!(self, Condition::T2 | Condition::E2)
    }

    pub fn is_eval(&self) -> bool {
        matches!(self, Condition::E1 | Condition::E2)
    }

    pub const ALL: [Condition; 5] =
        [Condition::T1, Condition::T2, Condition::T3, Condition::E1, Condition::E2];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::T1 => "T1",
            Condition::T2 => "T2",
            Condition::T3 => "T3",
            Condition::E1 => "E1",
            Condition::E2 => "E2",
        };
        f.write_str(s)
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T1" => Ok(Condition::T1),
            "T2" => Ok(Condition::T2),
            "T3" => Ok(Condition::T3),
            "E1" => Ok(Condition::E1),
            "E2" => Ok(Condition::E2),
            other => Err(Error::BadConfig(format!("unknown condition `{other}`"))),
        }
    }
}

// ── snr scaling and the additive model ──────────────────────────────

/// Scales `noise` so that 10*log10(P_signal / P_noise) equals `snr_db`.
pub fn scale_noise_to_snr(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    let p_sig: f64 = signal.iter().map(|x| x * x).sum::<f64>() / signal.len().max(1) as f64;
    let p_noise: f64 = noise.iter().map(|x| x * x).sum::<f64>() / noise.len().max(1) as f64;
    if p_sig <= 0.0 || p_noise <= 0.0 {
        return Err(Error::ZeroPower);
    }
    let scale = (p_sig / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(noise.iter().map(|x| x * scale).collect())
}

/// One mixture to render: C source waveforms, the target index, and an
/// optional noise bed scaled to `snr_db` against the summed speech.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub target_index: usize,
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
    pub snr_db: f64,
    pub condition: Condition,
}

/// Applies the additive model: mixture = target + epsilon with
/// epsilon = sum of interferers + scaled noise. The mixture is computed as
/// that exact sum, so the identity holds samplewise.
pub fn mix(spec: &MixtureSpec) -> Result<(Waveform, Waveform, Waveform)> {
    if spec.target_index >= spec.sources.len() || spec.sources.len() < 2 {
        return Err(Error::BadConfig(format!(
            "target index {} out of {} sources",
            spec.target_index,
            spec.sources.len()
        )));
    }
    let len = spec.sources[0].len();
    let rate = spec.sources[0].sample_rate();
    for s in &spec.sources {
        if s.len() != len {
            return Err(Error::LengthMismatch { a: len, b: s.len() });
        }
    }
    let target = spec.sources[spec.target_index].clone();
    let mut epsilon = vec![0.0; len];
    let mut speech_sum = vec![0.0; len];
    for (k, s) in spec.sources.iter().enumerate() {
        for (acc, &v) in speech_sum.iter_mut().zip(s.samples()) {
            *acc += v;
        }
        if k != spec.target_index {
            for (acc, &v) in epsilon.iter_mut().zip(s.samples()) {
                *acc += v;
            }
        }
    }
    if let Some(noise) = &spec.noise {
        if noise.len() != len {
            return Err(Error::LengthMismatch { a: len, b: noise.len() });
        }
        let scaled = scale_noise_to_snr(&speech_sum, noise.samples(), spec.snr_db)?;
        for (acc, v) in epsilon.iter_mut().zip(scaled) {
            *acc += v;
        }
    }
    let mixture: Vec<f64> =
        target.samples().iter().zip(&epsilon).map(|(t, e)| t + e).collect();
    Ok((
        Waveform::new(mixture, rate)?,
        target,
        Waveform::new(epsilon, rate)?,
    ))
}

// ── synthetic speakers ──────────────────────────────────────────────

/// A spectral region the speaker's energy concentrates in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub center_hz: f64,
    pub half_width_hz: f64,
}

/// Harmonic-source speaker profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Per-harmonic amplitude decay factor in (0, 1).
    pub decay: f64,
    /// Fundamental region plus formant-like bands.
    pub bands: Vec<Band>,
    pub jitter_seed: u64,
}

const GAIN_FLOOR: f64 = 0.02;

impl SpeakerProfile {
    fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(80.0..=400.0).contains(&self.f0_min_hz)
            || !(80.0..=400.0).contains(&self.f0_max_hz)
            || self.f0_min_hz > self.f0_max_hz
        {
            return Err(Error::BadProfile(format!(
                "f0 range [{}, {}] outside [80, 400] Hz",
                self.f0_min_hz, self.f0_max_hz
            )));
        }
        if !(0.0 < self.decay && self.decay < 1.0) {
            return Err(Error::BadProfile(format!("decay {} outside (0, 1)", self.decay)));
        }
        if self.bands.is_empty() {
            return Err(Error::BadProfile("no bands".into()));
        }
        for b in &self.bands {
            if b.center_hz <= 0.0 || b.center_hz >= nyquist || b.half_width_hz <= 0.0 {
                return Err(Error::BadProfile(format!("band {b:?} outside (0, {nyquist}) Hz")));
            }
        }
        Ok(())
    }

    fn gain(&self, freq_hz: f64) -> f64 {
        let peak = self
            .bands
            .iter()
            .map(|b| {
                let z = (freq_hz - b.center_hz) / b.half_width_hz;
                (-z * z).exp()
            })
            .fold(0.0, f64::max);
        peak.max(GAIN_FLOOR)
    }

    /// Whether `freq_hz` counts as inside the profile's bands (within two
    /// half-widths of some center); the band-energy oracle uses this.
    pub fn covers(&self, freq_hz: f64) -> bool {
        self.bands
            .iter()
            .any(|b| (freq_hz - b.center_hz).abs() <= 2.0 * b.half_width_hz)
    }
}

/// Forty profiles: twenty lower-pitched (fundamental 80-180 Hz) and twenty
/// higher-pitched (160-400 Hz), each with two formant-like bands drawn from
/// the profile's own seeded generator.
pub fn default_profiles() -> Vec<SpeakerProfile> {
    let mut out = Vec::with_capacity(40);
    for i in 0..40usize {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + i as u64);
        let (f0_min, f0_max) = if i < 20 {
            let c = 88.0 + 4.5 * i as f64; // 88 .. 173.5
            (c - 6.0, c + 6.0)
        } else {
            let c = 172.0 + 11.0 * (i - 20) as f64; // 172 .. 381
            (c - 10.0, c + 10.0)
        };
        let f0_c = 0.5 * (f0_min + f0_max);
        let f1 = rng.gen_range(350.0..900.0);
        let f2 = rng.gen_range(1100.0..3200.0);
        let bands = vec![
            Band { center_hz: f0_c, half_width_hz: (f0_c * 0.8).max(100.0) },
            Band { center_hz: f1, half_width_hz: rng.gen_range(100.0..220.0) },
            Band { center_hz: f2, half_width_hz: rng.gen_range(120.0..280.0) },
        ];
        out.push(SpeakerProfile {
            id: i,
            f0_min_hz: f0_min,
            f0_max_hz: f0_max,
            decay: rng.gen_range(0.55..0.8),
            bands,
            jitter_seed: rng.gen(),
        });
    }
    out
}

/// Renders one utterance: a jittered f0 contour drives a harmonic stack
/// shaped by the profile bands and a syllabic amplitude envelope, peak
/// normalized to 0.5.
pub fn synth_speaker(profile: &SpeakerProfile, duration_s: f64, seed: u64) -> Result<Waveform> {
    profile.validate()?;
    if !(0.5..=10.0).contains(&duration_s) {
        return Err(Error::BadProfile(format!("duration {duration_s} s outside [0.5, 10] s")));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.jitter_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let f0_c = 0.5 * (profile.f0_min_hz + profile.f0_max_hz);
    let dev = 0.5 * (profile.f0_max_hz - profile.f0_min_hz);
    let wander_hz = rng.gen_range(0.2..0.8);
    let wander_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let vibrato_hz = rng.gen_range(4.0..7.0);
    let vibrato_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let syllable_hz = rng.gen_range(1.5..3.5);
    let syllable_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let k_max = ((0.95 * SAMPLE_RATE as f64 / 2.0) / profile.f0_max_hz).floor() as usize;
    let k_max = k_max.max(1);
    let amps: Vec<f64> = (1..=k_max)
        .map(|k| profile.decay.powi(k as i32 - 1) * profile.gain(k as f64 * f0_c))
        .collect();
    let phases: Vec<f64> = (0..k_max).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut phase = 0.0f64;
    let mut samples = vec![0.0; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 * dt;
        let f0 = f0_c
            + 0.8 * dev * (std::f64::consts::TAU * wander_hz * t + wander_phase).sin()
            + 0.15 * dev * (std::f64::consts::TAU * vibrato_hz * t + vibrato_phase).sin();
        phase += f0 * dt;
        let env = 0.35 + 0.65 * (0.5 + 0.5 * (std::f64::consts::TAU * syllable_hz * t + syllable_phase).sin());
        let mut acc = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            acc += a * (std::f64::consts::TAU * (k + 1) as f64 * phase + p).sin();
        }
        *s = env * acc;
    }
    let peak = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak <= 0.0 {
        return Err(Error::BadProfile("profile rendered silence".into()));
    }
    let scale = 0.5 / peak;
    samples.iter_mut().for_each(|x| *x *= scale);
    Ok(Waveform::new(samples, SAMPLE_RATE)?)
}

/// Band-limited ambient noise: a dense comb of incoherent sinusoids inside
/// a random band, peak normalized to 0.5.
pub fn synth_noise(len: usize, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0B1_C2D3);
    let lo: f64 = rng.gen_range(200.0..1200.0);
    let hi = (lo + rng.gen_range(500.0..2000.0)).min(3800.0);
    let comps = 64;
    let freqs: Vec<f64> = (0..comps).map(|_| rng.gen_range(lo..hi)).collect();
    let amps: Vec<f64> = (0..comps).map(|_| rng.gen_range(0.5..1.0)).collect();
    let phases: Vec<f64> = (0..comps).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut samples = vec![0.0; len];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 * dt;
        let mut acc = 0.0;
        for c in 0..comps {
            acc += amps[c] * (std::f64::consts::TAU * freqs[c] * t + phases[c]).sin();
        }
        *s = acc;
    }
    let peak = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let scale = 0.5 / peak.max(1e-12);
    samples.iter_mut().for_each(|x| *x *= scale);
    Ok(Waveform::new(samples, SAMPLE_RATE)?)
}

// ── clustering and sampling ─────────────────────────────────────────

/// K-means assignment of speakers plus the geometry the sampler needs.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub k: usize,
    /// cluster id per speaker
    pub assignments: Vec<usize>,
    /// Euclidean distance to own cluster center, per speaker
    pub distances: Vec<f64>,
    /// softmax temperature over distances
    pub temperature: f64,
}

impl SamplingPlan {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }

    /// Softmax(distance / temperature) over the members of one cluster.
    /// Larger distance (closer to the boundary) means larger probability.
    pub fn selection_probabilities(&self, cluster: usize) -> Vec<(usize, f64)> {
        let members = self.members(cluster);
        let mx = members.iter().map(|&i| self.distances[i]).fold(f64::MIN, f64::max);
        let mut weights: Vec<f64> = members
            .iter()
            .map(|&i| ((self.distances[i] - mx) / self.temperature).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        members.into_iter().zip(weights).collect()
    }
}

fn normalize_rows(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    embeddings
        .iter()
        .map(|e| {
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                e.iter().map(|x| x / n).collect()
            } else {
                e.clone()
            }
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic k-means over unit-normalized embeddings; restarts with a
/// fresh seeded draw if a cluster empties, capped at 100 iterations.
pub fn cluster_speakers(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<SamplingPlan> {
    if embeddings.len() < k || k == 0 {
        return Err(Error::TooFewSpeakers { have: embeddings.len(), need: k.max(1) });
    }
    let points = normalize_rows(embeddings);
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'restart: for _attempt in 0..32 {
        // distinct random initial centers
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        while chosen.len() < k {
            let c = rng.gen_range(0..n);
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
        let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
        let mut assignments = vec![0usize; n];
        for _iter in 0..100 {
            let mut moved = false;
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::MAX;
                for (c, center) in centers.iter().enumerate() {
                    let d = dist2(p, center);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                if assignments[i] != best {
                    assignments[i] = best;
                    moved = true;
                }
            }
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            if counts.iter().any(|&c| c == 0) {
                continue 'restart;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                center.iter_mut().for_each(|v| *v = 0.0);
                for (i, p) in points.iter().enumerate() {
                    if assignments[i] == c {
                        for (cv, pv) in center.iter_mut().zip(p) {
                            *cv += pv;
                        }
                    }
                }
                center.iter_mut().for_each(|v| *v /= counts[c] as f64);
            }
            if !moved {
                break;
            }
        }
        let distances: Vec<f64> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| dist2(p, &centers[a]).sqrt())
            .collect();
        return Ok(SamplingPlan { k, assignments, distances, temperature: 1.0 });
    }
    Err(Error::TooFewSpeakers { have: embeddings.len(), need: k })
}

/// Selected speakers plus the clusters that were too small to sample from
/// (their members are taken wholesale).
#[derive(Debug, Clone)]
pub struct SpeakerSelection {
    pub ids: Vec<usize>,
    pub degenerate_clusters: Vec<usize>,
}

/// Within each cluster, draws `per_cluster` members without replacement
/// with probabilities softmax(distance-to-center); clusters smaller than
/// `per_cluster` are taken whole and flagged.
pub fn sample_speakers(plan: &SamplingPlan, per_cluster: usize, seed: u64) -> SpeakerSelection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut degenerate = Vec::new();
    for cluster in 0..plan.k {
        let mut pool = plan.selection_probabilities(cluster);
        if pool.len() <= per_cluster {
            if pool.len() < per_cluster {
                degenerate.push(cluster);
            }
            ids.extend(pool.iter().map(|(i, _)| *i));
            continue;
        }
        for _ in 0..per_cluster {
            let z: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut u = rng.gen_range(0.0..z);
            let mut pick = pool.len() - 1;
            for (j, (_, w)) in pool.iter().enumerate() {
                if u < *w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            ids.push(pool.remove(pick).0);
        }
    }
    ids.sort_unstable();
    SpeakerSelection { ids, degenerate_clusters: degenerate }
}

// ── dataset rendering ───────────────────────────────────────────────

/// One rendered mixture and where its files live (paths relative to the
/// manifest).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub mixture_path: PathBuf,
    pub target_path: PathBuf,
    pub reference_path: PathBuf,
    pub epsilon_path: PathBuf,
    pub target_index: usize,
    pub n_speakers: usize,
    pub snr_db: f64,
    pub condition: Condition,
    pub seed: u64,
    /// Not serialized; which profile ids the item drew (target first).
    pub speaker_ids: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub items: Vec<DatasetItem>,
    /// Directory the relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for it in &self.items {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{}\t{}\n",
                it.mixture_path.display(),
                it.target_path.display(),
                it.reference_path.display(),
                it.epsilon_path.display(),
                it.target_index,
                it.n_speakers,
                it.snr_db,
                it.condition,
                it.seed
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 9 {
                return Err(Error::BadManifest(format!(
                    "line {}: expected 9 tab-separated fields, got {}",
                    ln + 1,
                    fields.len()
                )));
            }
            let parse_err = |what: &str| Error::BadManifest(format!("line {}: bad {what}", ln + 1));
            items.push(DatasetItem {
                mixture_path: PathBuf::from(fields[0]),
                target_path: PathBuf::from(fields[1]),
                reference_path: PathBuf::from(fields[2]),
                epsilon_path: PathBuf::from(fields[3]),
                target_index: fields[4].parse().map_err(|_| parse_err("target index"))?,
                n_speakers: fields[5].parse().map_err(|_| parse_err("speaker count"))?,
                snr_db: fields[6].parse().map_err(|_| parse_err("snr"))?,
                condition: fields[7].parse()?,
                seed: fields[8].parse().map_err(|_| parse_err("seed"))?,
                speaker_ids: Vec::new(),
            });
        }
        Ok(Self { items, base_dir })
    }
}

/// Profile split: training conditions draw from the first 28 profiles,
/// evaluation conditions from the remaining 12, so the sets are disjoint.
pub fn speaker_split(condition: Condition) -> Vec<SpeakerProfile> {
    let all = default_profiles();
    if condition.is_eval() {
        all[28..].to_vec()
    } else {
        all[..28].to_vec()
    }
}

/// Embeds one rendered clip per profile with a small fixed-seed probe
/// encoder; these embeddings drive the clustering step.
pub fn profile_embeddings(profiles: &[SpeakerProfile]) -> Result<Vec<Vec<f64>>> {
    let mut lb = LayoutBuilder::new();
    let cfg = StftConfig::sqrt_hann(128, 64)?;
    let enc = EncoderParams::register(&mut lb, cfg.bins(), 16, 16);
    let layout = lb.finish();
    let theta = layout.init_theta(0xE5BEDD1);
    let mut out = Vec::with_capacity(profiles.len());
    for p in profiles {
        let clip = synth_speaker(p, 1.5, 0xC11F)?;
        let e = enc.embed(&theta, &layout, &clip, &cfg, EmbeddingSource::Reference)?;
        out.push(e.values);
    }
    Ok(out)
}

/// Renders `n_items` mixtures for `condition` under `out_dir` and writes
/// `manifest.tsv` there. Speakers come from the split for the condition,
/// clustered into 7 groups and sampled 18-per-cluster (clusters smaller
/// than that are taken whole).
pub fn make_dataset(
    condition: Condition,
    n_items: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let profiles = speaker_split(condition);
    let embeddings = profile_embeddings(&profiles)?;
    let plan = cluster_speakers(&embeddings, 7, seed ^ 0xC1A5)?;
    let selection = sample_speakers(&plan, 18, seed ^ 0x5A3B);
    let pool: Vec<&SpeakerProfile> = selection.ids.iter().map(|&i| &profiles[i]).collect();
    if pool.len() < condition.speaker_count() {
        return Err(Error::TooFewSpeakers {
            have: pool.len(),
            need: condition.speaker_count(),
        });
    }

    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let item_seed = seed
            .wrapping_mul(0x0100_0000_01B3)
            .wrapping_add(i as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let c = condition.speaker_count();
        // distinct speakers
        let mut picked: Vec<usize> = Vec::with_capacity(c);
        while picked.len() < c {
            let cand = rng.gen_range(0..pool.len());
            if !picked.contains(&cand) {
                picked.push(cand);
            }
        }
        let target_index = rng.gen_range(0..c);
        let utter_seeds: Vec<u64> = (0..c).map(|_| rng.gen()).collect();
        let reference_seed: u64 = rng.gen();
        let mut sources = Vec::with_capacity(c);
        for (j, &pi) in picked.iter().enumerate() {
            let mut w = synth_speaker(pool[pi], CLIP_SECONDS, utter_seeds[j])?;
            if j != target_index {
                let gain_db: f64 = rng.gen_range(-2.0..2.0);
                let gain = 10f64.powf(gain_db / 20.0);
                let scaled: Vec<f64> = w.samples().iter().map(|x| x * gain).collect();
                w = Waveform::new(scaled, SAMPLE_RATE)?;
            }
            sources.push(w);
        }
        let (noise, snr_db) = if condition.has_noise() {
            let snr = rng.gen_range(0.0..20.0);
            (Some(synth_noise(CLIP_SAMPLES, rng.gen())?), snr)
        } else {
            (None, f64::INFINITY)
        };
        let spec = MixtureSpec { target_index, sources, noise, snr_db, condition };
        let (mixture, target, epsilon) = mix(&spec)?;
        let reference = synth_speaker(pool[picked[target_index]], CLIP_SECONDS, reference_seed)?;

        // Joint headroom scale, then quantize target/epsilon and form the
        // mixture by integer addition so the identity survives the files.
        let peak = mixture
            .samples()
            .iter()
            .chain(target.samples())
            .chain(epsilon.samples())
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale = if peak > 0.97 { 0.97 / peak } else { 1.0 };
        let quant = |w: &Waveform| -> Vec<i16> {
            to_pcm16(&w.samples().iter().map(|x| x * scale).collect::<Vec<f64>>())
        };
        let t16 = quant(&target);
        let e16 = quant(&epsilon);
        let m16: Vec<i16> = t16.iter().zip(&e16).map(|(a, b)| a + b).collect();

        let name = |kind: &str| PathBuf::from(format!("{i:05}_{kind}.wav"));
        let item = DatasetItem {
            mixture_path: name("mixture"),
            target_path: name("target"),
            reference_path: name("reference"),
            epsilon_path: name("epsilon"),
            target_index,
            n_speakers: c,
            snr_db,
            condition,
            seed: item_seed,
            speaker_ids: picked.iter().map(|&pi| pool[pi].id).collect(),
        };
        write_wav_pcm16(&out_dir.join(&item.mixture_path), &m16, SAMPLE_RATE)?;
        write_wav_pcm16(&out_dir.join(&item.target_path), &t16, SAMPLE_RATE)?;
        write_wav_pcm16(&out_dir.join(&item.epsilon_path), &e16, SAMPLE_RATE)?;
        write_wav(&out_dir.join(&item.reference_path), &reference)?;
        items.push(item);
    }
    let manifest = Manifest { items, base_dir: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
