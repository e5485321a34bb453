//! Command-line pipeline: data synthesis, training, extraction,
//! evaluation, gradient verification, the fusion ablation, and parameter
//! accounting.
//!
//! Configuration is a flat `key=value` file with dotted namespaces
//! (`model.d`, `train.lr`); `--set key=value` overrides win over the file,
//! and `--seed` overrides both the model and training seeds. All output
//! artifacts land under `--out`.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::dsp::wav::{read_wav_expecting, write_wav};
use crate::model::{ModelConfig, WhyvModel};
use crate::synth::{make_dataset, synth_speaker, speaker_split, Condition, Manifest, MixtureSpec};
use crate::train::{evaluate, grad_check_model, train, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Threshold for the gradcheck subcommand's pass/fail verdict.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "whyv", version, about = "Target-speaker extraction pipeline")]
struct Cli {
    /// Flat key=value config file (model.* and train.* keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Master seed: overrides model.seed and train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config overrides, e.g. --set model.d=8 --set train.steps=100.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic mixture dataset with its manifest.
    SynthData {
        /// Mixing condition: T1, T2, T3, E1, or E2.
        #[arg(long)]
        condition: String,
        /// Number of items to render.
        #[arg(long)]
        n: usize,
    },
    /// Train a model on a rendered dataset manifest.
    Train {
        /// Training manifest (manifest.tsv).
        #[arg(long)]
        data: PathBuf,
        /// Optional evaluation manifest for periodic metrics.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Extract the target speaker from a mixture using a reference clip.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Output wav path, relative to --out.
        #[arg(long)]
        out_wav: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify model gradients against central finite differences.
    Gradcheck,
    /// Train both fusion variants on identical data and report both.
    Ablate {
        /// Training manifest; synthesized when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation manifest; synthesized when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Items per synthesized split when no manifests are given.
        #[arg(long, default_value_t = 24)]
        n: usize,
    },
    /// Print the exact parameter count for the configured model.
    Params,
}

/// Model + training settings assembled from defaults, the config file, and
/// command-line overrides, in that order.
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Settings {
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        if key.starts_with("model.") {
            self.model.apply_kv(key, value)
        } else if key.starts_with("train.") {
            self.train.apply_kv(key, value)
        } else {
            Err(Error::BadConfig(format!("unknown config key `{key}`")))
        }
    }

    fn load(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut s = Settings { model: ModelConfig::default(), train: TrainConfig::default() };
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::BadConfig(format!("{}:{}: expected key=value", path.display(), ln + 1))
                })?;
                s.apply_kv(k.trim(), v.trim())?;
            }
        }
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("override `{ov}` is not key=value")))?;
            s.apply_kv(k.trim(), v.trim())?;
        }
        if let Some(seed) = seed {
            s.model.seed = seed;
            s.train.seed = seed;
        }
        s.model.validate()?;
        s.train.validate()?;
        Ok(s)
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::BadConfig(_) => EXIT_USAGE,
        Error::Tensor(_) | Error::TrainingDiverged { .. } | Error::Metric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Runs the CLI on the given argument list; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::SynthData { condition, n } => {
            let condition: Condition = condition.parse()?;
            let seed = cli.seed.unwrap_or(0);
            let manifest = make_dataset(condition, n, seed, out)?;
            println!("manifest={}", out.join("manifest.tsv").display());
            println!("items={}", manifest.items.len());
            println!("files={}", 4 * manifest.items.len());
            Ok(())
        }
        Command::Train { data, eval_data } => {
            let manifest = Manifest::load(&data)?;
            let eval_manifest = eval_data.map(|p| Manifest::load(&p)).transpose()?;
            let mut model = WhyvModel::new(settings.model.clone())?;
            let log = train(&mut model, &manifest, eval_manifest.as_ref(), &settings.train, out)?;
            log.save(&out.join("train_log.txt"))?;
            println!("checkpoint={}", out.join("checkpoint_final.ckpt").display());
            println!("train_log={}", out.join("train_log.txt").display());
            println!("steps={}", settings.train.steps);
            Ok(())
        }
        Command::Extract { checkpoint, mixture, reference, out_wav } => {
            let (model, _, _) = WhyvModel::load_checkpoint(&checkpoint)?;
            let rate = model.config().sample_rate;
            let mix = read_wav_expecting(&mixture, rate)?;
            let reference = read_wav_expecting(&reference, rate)?;
            let est = model.forward(&mix, &reference)?;
            let out_path = out.join(out_wav);
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_wav(&out_path, &est)?;
            println!("output={}", out_path.display());
            println!("samples={}", est.len());
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let (model, step, _) = WhyvModel::load_checkpoint(&checkpoint)?;
            let manifest = Manifest::load(&data)?;
            let summary = evaluate(&model, &manifest)?;
            let report_path = out.join("report.txt");
            std::fs::write(&report_path, summary.to_report_text())?;
            println!("report={}", report_path.display());
            println!("checkpoint_step={step}");
            println!("mean_si_sdri_db={:?}", summary.mean.si_sdri_db);
            println!("mean_sdri_db={:?}", summary.mean.sdri_db);
            Ok(())
        }
        Command::Gradcheck => {
            // tiny geometry regardless of the requested width
            let mut cfg = settings.model.clone();
            cfg.d = cfg.d.min(8);
            cfg.n_blocks = cfg.n_blocks.min(2);
            cfg.e = cfg.e.min(8);
            cfg.encoder_hidden = cfg.encoder_hidden.min(8);
            cfg.n_fft = 32;
            cfg.hop = 16;
            cfg.heads = 1;
            let model = WhyvModel::new(cfg)?;
            let profiles = speaker_split(Condition::T1);
            let seed = cli.seed.unwrap_or(0);
            let a = synth_speaker(&profiles[0], 0.5, seed ^ 1)?;
            let b = synth_speaker(&profiles[1], 0.5, seed ^ 2)?;
            let reference = synth_speaker(&profiles[0], 0.5, seed ^ 3)?;
            let spec = MixtureSpec {
                target_index: 0,
                sources: vec![a, b],
                noise: None,
                snr_db: f64::INFINITY,
                condition: Condition::T1,
            };
            let (mixture, target, _) = crate::synth::mix(&spec)?;
            let err = grad_check_model(&model, &mixture, &reference, &target, 0.01, seed)?;
            println!("max_rel_error={err:?}");
            println!("tolerance={GRADCHECK_TOLERANCE:?}");
            if err > GRADCHECK_TOLERANCE {
                return Err(Error::Tensor(crate::tensor::TensorError::NonFinite {
                    op: "gradcheck exceeded tolerance",
                }));
            }
            println!("verdict=pass");
            Ok(())
        }
        Command::Ablate { data, eval_data, n } => {
            let seed = cli.seed.unwrap_or(0);
            let train_manifest = match data {
                Some(p) => Manifest::load(&p)?,
                None => make_dataset(settings.train.condition, n, seed, &out.join("ablate_train"))?,
            };
            let eval_manifest = match eval_data {
                Some(p) => Manifest::load(&p)?,
                None => {
                    make_dataset(settings.train.eval_condition, n.div_ceil(2).max(4), seed ^ 0xE7A1, &out.join("ablate_eval"))?
                }
            };
            let data_hash = hash_manifest_data(&train_manifest)? ^ hash_manifest_data(&eval_manifest)?;
            let mut report = String::new();
            report.push_str(&format!("steps={}\n", settings.train.steps));
            report.push_str(&format!("items={}\n", train_manifest.items.len()));
            report.push_str("fusion\tdata_hash\tparams\tmean_si_sdr_db\tmean_sdr_db\tmean_si_sdri_db\tmean_sdri_db\n");
            for fusion in [crate::model::Fusion::WhyvGate, crate::model::Fusion::Film] {
                let mut cfg = settings.model.clone();
                cfg.fusion = fusion;
                let mut model = WhyvModel::new(cfg)?;
                let run_dir = out.join(format!("ablate_{fusion}"));
                train(&mut model, &train_manifest, None, &settings.train, &run_dir)?;
                let summary = evaluate(&model, &eval_manifest)?;
                report.push_str(&format!(
                    "{fusion}\t{data_hash:016x}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
                    model.param_count(),
                    summary.mean.si_sdr_db,
                    summary.mean.sdr_db,
                    summary.mean.si_sdri_db,
                    summary.mean.sdri_db
                ));
            }
            let report_path = out.join("ablation_report.txt");
            std::fs::write(&report_path, &report)?;
            print!("{report}");
            println!("report={}", report_path.display());
            Ok(())
        }
        Command::Params => {
            let model = WhyvModel::new(settings.model.clone())?;
            let count = model.param_count();
            let formula = WhyvModel::param_count_formula(&settings.model);
            println!("params={count}");
            println!("params_formula={formula}");
            println!("params_millions={:.3}", count as f64 / 1e6);
            Ok(())
        }
    }
}

/// FNV-1a over the manifest file plus every referenced wav, so two runs on
/// the same data report the same hash.
fn hash_manifest_data(manifest: &Manifest) -> Result<u64> {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for it in &manifest.items {
        for path in [&it.mixture_path, &it.target_path, &it.reference_path, &it.epsilon_path] {
            feed(&std::fs::read(manifest.resolve(path))?);
        }
        feed(it.condition.to_string().as_bytes());
    }
    Ok(h)
}
