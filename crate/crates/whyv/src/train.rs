//! Training loop, evaluation harness, and gradient verification.
//!
//! Training samples random crops of the rendered 4-second items, runs one
//! recorded forward/backward per batch item, accumulates gradients into the
//! flat parameter buffer, and applies adaptive moment estimation. The whole
//! loop is deterministic for a fixed seed: fixed data order, fixed crops,
//! fixed reduction orders. Wall-clock time is kept out of the deterministic
//! log records.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::read_wav_expecting;
use crate::dsp::Waveform;
use crate::encoder::MIN_CLIP_SECONDS;
use crate::metrics::{self, MetricReport};
use crate::model::{EncoderMode, WhyvModel};
use crate::synth::{speaker_split, synth_speaker, Condition, Manifest};
use crate::tensor::Graph;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Training mixing preset (T1/T2/T3); used by callers that synthesize
    /// their own data.
    pub condition: Condition,
    /// Evaluation preset (E1/E2).
    pub eval_condition: Condition,
    /// Save a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    /// Evaluate on the eval manifest every this many steps (0: never).
    pub eval_every: u64,
    /// Random training crop length; evaluation always uses full clips.
    pub crop_seconds: f64,
    /// Contrastive encoder pretraining steps used by the frozen mode.
    pub pretrain_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            condition: Condition::T1,
            eval_condition: Condition::E1,
            checkpoint_every: 0,
            eval_every: 0,
            crop_seconds: 0.5,
            pretrain_steps: 150,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::BadConfig("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::BadConfig("learning rate must be finite and >= 0".into()));
        }
        if self.crop_seconds < MIN_CLIP_SECONDS {
            return Err(Error::BadConfig(format!(
                "crop_seconds {} below the encoder minimum {MIN_CLIP_SECONDS}",
                self.crop_seconds
            )));
        }
        if self.condition.is_eval() || !self.eval_condition.is_eval() {
            return Err(Error::BadConfig(
                "training preset must be T1/T2/T3 and eval preset E1/E2".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("train.steps".into(), self.steps.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.lr".into(), format!("{:?}", self.learning_rate)),
            ("train.beta1".into(), format!("{:?}", self.beta1)),
            ("train.beta2".into(), format!("{:?}", self.beta2)),
            ("train.adam_eps".into(), format!("{:?}", self.adam_eps)),
            ("train.seed".into(), self.seed.to_string()),
            ("train.condition".into(), self.condition.to_string()),
            ("train.eval_condition".into(), self.eval_condition.to_string()),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("train.eval_every".into(), self.eval_every.to_string()),
            ("train.crop_seconds".into(), format!("{:?}", self.crop_seconds)),
            ("train.pretrain_steps".into(), self.pretrain_steps.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::BadConfig(format!("bad value `{value}` for {what}"));
        match key {
            "train.steps" => self.steps = value.parse().map_err(|_| bad(key))?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "train.lr" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "train.beta1" => self.beta1 = value.parse().map_err(|_| bad(key))?,
            "train.beta2" => self.beta2 = value.parse().map_err(|_| bad(key))?,
            "train.adam_eps" => self.adam_eps = value.parse().map_err(|_| bad(key))?,
            "train.seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "train.condition" => self.condition = value.parse()?,
            "train.eval_condition" => self.eval_condition = value.parse()?,
            "train.checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "train.eval_every" => self.eval_every = value.parse().map_err(|_| bad(key))?,
            "train.crop_seconds" => self.crop_seconds = value.parse().map_err(|_| bad(key))?,
            "train.pretrain_steps" => self.pretrain_steps = value.parse().map_err(|_| bad(key))?,
            other => return Err(Error::BadConfig(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Per-step records plus wall-clock kept aside so the records themselves
/// are bit-identical across reruns with the same seed.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    records: Vec<String>,
    pub wall_clock_s: f64,
}

impl TrainLog {
    pub fn push(&mut self, line: String) {
        debug_assert!(!line.contains('\n'));
        self.records.push(line);
    }

    pub fn records(&self) -> &[String] {
        &self.records
    }

    /// The deterministic portion: one record per line.
    pub fn deterministic_text(&self) -> String {
        let mut s = self.records.join("\n");
        s.push('\n');
        s
    }

    /// Deterministic text plus a trailing wall-clock comment.
    pub fn full_text(&self) -> String {
        format!("{}# wall_clock_s={:.3}\n", self.deterministic_text(), self.wall_clock_s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.full_text())?;
        Ok(())
    }
}

struct TrainItem {
    mixture: Waveform,
    target: Waveform,
    reference: Waveform,
}

fn load_items(manifest: &Manifest, rate: u32) -> Result<Vec<TrainItem>> {
    if manifest.items.is_empty() {
        return Err(Error::EmptyManifest);
    }
    manifest
        .items
        .iter()
        .map(|it| {
            Ok(TrainItem {
                mixture: read_wav_expecting(&manifest.resolve(&it.mixture_path), rate)?,
                target: read_wav_expecting(&manifest.resolve(&it.target_path), rate)?,
                reference: read_wav_expecting(&manifest.resolve(&it.reference_path), rate)?,
            })
        })
        .collect()
}

fn crop(w: &Waveform, start: usize, len: usize) -> Waveform {
    let s = &w.samples()[start..start + len];
    Waveform::new(s.to_vec(), w.sample_rate()).expect("crop of a valid waveform")
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Contrastive pretraining of the encoder on synthetic speakers: pull
/// same-speaker clip embeddings together, push different speakers below a
/// margin. Used by the frozen-encoder mode before the main loop.
pub fn pretrain_encoder(model: &mut WhyvModel, steps: u64, seed: u64) -> Result<()> {
    let profiles = speaker_split(Condition::T1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE4C0);
    let total = model.layout().total_len();
    let mut adam = Adam::new(total);
    let cfg = TrainConfig { learning_rate: 2e-3, ..TrainConfig::default() };
    let margin = 0.2;
    for _ in 0..steps {
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < 6 {
            let c = rng.gen_range(0..profiles.len());
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        let g = Graph::new();
        // bind everything trainable here: this pass runs before freezing
        let binder = crate::params::Binder::bind(&g, model.layout(), &model.theta, |_| false);
        let mut pairs = Vec::new();
        for &p in &picked {
            let a = synth_speaker(&profiles[p], 1.0, rng.gen())?;
            let b = synth_speaker(&profiles[p], 1.0, rng.gen())?;
            let ea = model.embed_for_pretrain(&g, &binder, &a)?;
            let eb = model.embed_for_pretrain(&g, &binder, &b)?;
            pairs.push((ea, eb));
        }
        // same-speaker terms: 1 - cos
        let mut loss = None;
        for (ea, eb) in &pairs {
            let dot = g.sum_all(&g.mul(ea, eb)?)?;
            let term = g.add_scalar(&g.neg(&dot)?, 1.0)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(&acc, &term)?,
            });
        }
        // different-speaker terms: relu(cos - margin), sampled pairs
        for _ in 0..12 {
            let i = rng.gen_range(0..pairs.len());
            let mut j = rng.gen_range(0..pairs.len());
            while j == i {
                j = rng.gen_range(0..pairs.len());
            }
            let dot = g.sum_all(&g.mul(&pairs[i].0, &pairs[j].1)?)?;
            let term = g.relu(&g.add_scalar(&dot, -margin)?)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(&acc, &term)?,
            });
        }
        let root = loss.expect("at least one pair");
        let grads = g.backward(&root)?;
        let mut flat = vec![0.0; total];
        binder.accumulate_grads(model.layout(), &grads, &mut flat);
        adam.step(&mut model.theta, &flat, &cfg);
    }
    Ok(())
}

/// Runs the optimization loop. Checkpoints are written under `out_dir`;
/// the final one is `checkpoint_final.ckpt`. Deterministic for a fixed
/// seed. On divergence the last good checkpoint is saved and an error
/// returned.
pub fn train(
    model: &mut WhyvModel,
    manifest: &Manifest,
    eval_manifest: Option<&Manifest>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainLog> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let rate = model.config().sample_rate;
    let items = load_items(manifest, rate)?;
    let eval_items = eval_manifest.map(|m| load_items(m, rate)).transpose()?;

    if model.config().encoder_mode == EncoderMode::Frozen && cfg.pretrain_steps > 0 {
        pretrain_encoder(model, cfg.pretrain_steps, cfg.seed)?;
    }

    let crop_len = ((cfg.crop_seconds * rate as f64).round() as usize).max(1);
    for it in &items {
        if it.mixture.len() < crop_len {
            return Err(Error::TooShort {
                got_s: it.mixture.duration_s(),
                need_s: cfg.crop_seconds,
            });
        }
    }

    let total = model.layout().total_len();
    let mut adam = Adam::new(total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut deck: Vec<usize> = (0..items.len()).collect();
    deck.shuffle(&mut rng);
    let mut deck_pos = 0usize;
    let mut grad = vec![0.0; total];

    for step in 1..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        // draw the batch: crops of distinct deck positions
        let mut batch: Vec<(Waveform, Waveform, Waveform)> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if deck_pos == deck.len() {
                deck.shuffle(&mut rng);
                deck_pos = 0;
            }
            let item = &items[deck[deck_pos]];
            deck_pos += 1;
            let mix_start = rng.gen_range(0..=item.mixture.len() - crop_len);
            let ref_start = rng.gen_range(0..=item.reference.len() - crop_len);
            let mixture = crop(&item.mixture, mix_start, crop_len);
            let target = crop(&item.target, mix_start, crop_len);
            let reference = crop(&item.reference, ref_start, crop_len);
            if target.samples().iter().map(|x| x * x).sum::<f64>() <= 1e-12 {
                // silent target crop carries no signal; redraw
                continue;
            }
            batch.push((mixture, target, reference));
        }

        let g = Graph::new();
        let binder = model.bind(&g);
        let step_result: crate::Result<f64> = (|| {
            let pairs: Vec<(&Waveform, &Waveform)> =
                batch.iter().map(|(m, _, r)| (m, r)).collect();
            let ests = model.forward_batch_value(&g, &binder, &pairs)?;
            let mut total: Option<crate::tensor::Value> = None;
            for (est, (_, target, _)) in ests.iter().zip(&batch) {
                let target_t = crate::tensor::Tensor::from_vec(target.samples().to_vec())?;
                let loss = metrics::loss_value(&g, est, &target_t)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => g.add(&acc, &loss)?,
                });
            }
            let mean = g.scale(&total.expect("batch nonempty"), 1.0 / cfg.batch_size as f64)?;
            let value = mean.tensor().item()?;
            let grads = g.backward(&mean)?;
            binder.accumulate_grads(model.layout(), &grads, &mut grad);
            Ok(value)
        })();
        let mean_loss = match step_result {
            Ok(v) => v,
            Err(Error::Tensor(crate::tensor::TensorError::NonFinite { .. })) => {
                model.save_checkpoint(&out_dir.join("checkpoint_final.ckpt"), step, log.records())?;
                return Err(Error::TrainingDiverged { step });
            }
            Err(e) => return Err(e),
        };
        adam.step(&mut model.theta, &grad, cfg);
        if !mean_loss.is_finite() {
            model.save_checkpoint(&out_dir.join("checkpoint_final.ckpt"), step, log.records())?;
            return Err(Error::TrainingDiverged { step });
        }
        log.push(format!("step={step} loss={mean_loss:?}"));

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some(ev) = &eval_items {
                let summary = evaluate_items(model, ev)?;
                log.push(format!(
                    "eval step={step} si_sdr={:?} sdr={:?} si_sdri={:?} sdri={:?}",
                    summary.mean.si_sdr_db,
                    summary.mean.sdr_db,
                    summary.mean.si_sdri_db,
                    summary.mean.sdri_db
                ));
            }
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            model.save_checkpoint(
                &out_dir.join(format!("checkpoint_step{step}.ckpt")),
                step,
                log.records(),
            )?;
        }
    }
    model.save_checkpoint(&out_dir.join("checkpoint_final.ckpt"), cfg.steps, log.records())?;
    log.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(log)
}

/// One evaluated item.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub index: usize,
    pub mixture_path: PathBuf,
    pub report: MetricReport,
}

/// Mean metrics plus per-item rows, in manifest order.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub mean: MetricReport,
    pub rows: Vec<EvalRow>,
}

impl EvalSummary {
    /// `key=value` header plus a tab-separated per-item table.
    pub fn to_report_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_items={}\n", self.rows.len()));
        s.push_str(&format!("mean_si_sdr_db={:?}\n", self.mean.si_sdr_db));
        s.push_str(&format!("mean_sdr_db={:?}\n", self.mean.sdr_db));
        s.push_str(&format!("mean_si_sdri_db={:?}\n", self.mean.si_sdri_db));
        s.push_str(&format!("mean_sdri_db={:?}\n", self.mean.sdri_db));
        s.push_str("index\tmixture\tsi_sdr_db\tsdr_db\tsi_sdri_db\tsdri_db\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
                r.index,
                r.mixture_path.display(),
                r.report.si_sdr_db,
                r.report.sdr_db,
                r.report.si_sdri_db,
                r.report.sdri_db
            ));
        }
        s
    }
}

fn mean_report(rows: &[EvalRow]) -> MetricReport {
    let n = rows.len() as f64;
    let mut acc = MetricReport { si_sdr_db: 0.0, sdr_db: 0.0, si_sdri_db: 0.0, sdri_db: 0.0 };
    for r in rows {
        acc.si_sdr_db += r.report.si_sdr_db;
        acc.sdr_db += r.report.sdr_db;
        acc.si_sdri_db += r.report.si_sdri_db;
        acc.sdri_db += r.report.sdri_db;
    }
    acc.si_sdr_db /= n;
    acc.sdr_db /= n;
    acc.si_sdri_db /= n;
    acc.sdri_db /= n;
    acc
}

fn evaluate_items(model: &WhyvModel, items: &[TrainItem]) -> Result<EvalSummary> {
    if items.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let threads = threads.min(items.len()).max(1);
    let chunk = items.len().div_ceil(threads);
    let mut rows: Vec<Option<EvalRow>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (tid, slot_chunk) in rows.chunks_mut(chunk).enumerate() {
            let start = tid * chunk;
            let items_ref = &items[start..(start + slot_chunk.len())];
            handles.push(scope.spawn(move || -> Result<()> {
                for (off, (slot, item)) in slot_chunk.iter_mut().zip(items_ref).enumerate() {
                    let est = model.forward(&item.mixture, &item.reference)?;
                    let report = metrics::report(&est, &item.mixture, &item.target)?;
                    *slot = Some(EvalRow {
                        index: start + off,
                        mixture_path: PathBuf::new(),
                        report,
                    });
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("eval worker panicked")?;
        }
        Ok(())
    })?;
    let rows: Vec<EvalRow> = rows.into_iter().map(|r| r.expect("all slots filled")).collect();
    Ok(EvalSummary { mean: mean_report(&rows), rows })
}

/// Evaluates a model on every item of a manifest; per-item rows come back
/// in manifest order with their mixture paths attached.
pub fn evaluate(model: &WhyvModel, manifest: &Manifest) -> Result<EvalSummary> {
    let items = load_items(manifest, model.config().sample_rate)?;
    let mut summary = evaluate_items(model, &items)?;
    for (row, it) in summary.rows.iter_mut().zip(&manifest.items) {
        row.mixture_path = it.mixture_path.clone();
    }
    Ok(summary)
}

/// Compares analytic gradients of the loss against central differences on
/// a deterministic random sample of the parameters (always including each
/// block's alpha and beta). Returns the maximum relative error.
pub fn grad_check_model(
    model: &WhyvModel,
    mixture: &Waveform,
    reference: &Waveform,
    target: &Waveform,
    sample_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let layout = model.layout();
    let total = layout.total_len();

    let loss_of = |theta: &[f64]| -> Result<f64> {
        let g = Graph::inference();
        let binder = crate::params::Binder::bind(&g, layout, theta, |_| true);
        let est = model.forward_value(&g, &binder, mixture, reference)?;
        let t = crate::tensor::Tensor::from_vec(target.samples().to_vec())?;
        let loss = metrics::loss_value(&g, &est, &t)?;
        Ok(loss.tensor().item()?)
    };

    // analytic gradient
    let g = Graph::new();
    let binder = model.bind(&g);
    let est = model.forward_value(&g, &binder, mixture, reference)?;
    let t = crate::tensor::Tensor::from_vec(target.samples().to_vec())?;
    let loss = metrics::loss_value(&g, &est, &t)?;
    let grads = g.backward(&loss)?;
    let mut analytic = vec![0.0; total];
    binder.accumulate_grads(layout, &grads, &mut analytic);

    // deterministic index sample with forced alpha/beta coverage
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sample = ((total as f64 * sample_fraction).ceil() as usize).clamp(1, total);
    let mut indices: Vec<usize> = Vec::with_capacity(n_sample + 2 * model.config().n_blocks);
    for spec in layout.specs() {
        if spec.name.ends_with(".alpha") || spec.name.ends_with(".beta") {
            indices.push(spec.offset + rng.gen_range(0..spec.numel()));
        }
    }
    while indices.len() < n_sample {
        indices.push(rng.gen_range(0..total));
    }
    indices.sort_unstable();
    indices.dedup();

    let eps = 1e-4;
    let mut theta = model.theta.clone();
    let mut worst: f64 = 0.0;
    for &i in &indices {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss_of(&theta)?;
        theta[i] = orig - eps;
        let minus = loss_of(&theta)?;
        theta[i] = orig;
        let central = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(central.abs()).max(1e-12);
        worst = worst.max((analytic[i] - central).abs() / denom);
    }
    Ok(worst)
}

/// The parameter indices [`grad_check_model`] would probe; exposed so tests
/// can assert coverage and determinism.
pub fn grad_check_sample_indices(
    model: &WhyvModel,
    sample_fraction: f64,
    seed: u64,
) -> Vec<usize> {
    let layout = model.layout();
    let total = layout.total_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sample = ((total as f64 * sample_fraction).ceil() as usize).clamp(1, total);
    let mut indices = Vec::new();
    for spec in layout.specs() {
        if spec.name.ends_with(".alpha") || spec.name.ends_with(".beta") {
            indices.push(spec.offset + rng.gen_range(0..spec.numel()));
        }
    }
    while indices.len() < n_sample {
        indices.push(rng.gen_range(0..total));
    }
    indices.sort_unstable();
    indices.dedup();
    indices
}
