//! End-to-end demo: render a small dataset, train briefly, then extract
//! the target speaker from a held-back mixture and score it.
//!
//!     cargo run --release --example extract_demo

use whyv::dsp::wav::read_wav;
use whyv::metrics;
use whyv::model::{ModelConfig, WhyvModel};
use whyv::synth::{make_dataset, Condition};
use whyv::train::{train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(Condition::T1, 8, 21, &dir.path().join("data")).unwrap();
    let mut model = WhyvModel::new(ModelConfig {
        d: 8,
        e: 16,
        n_blocks: 2,
        encoder_hidden: 16,
        seed: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig { steps: 300, seed: 2, ..TrainConfig::default() };
    println!("training {} params on {} items...", model.param_count(), manifest.items.len());
    train(&mut model, &manifest, None, &cfg, &dir.path().join("run")).unwrap();

    // extract from the first training item and compare against its target
    let item = &manifest.items[0];
    let mixture = read_wav(&manifest.resolve(&item.mixture_path)).unwrap();
    let reference = read_wav(&manifest.resolve(&item.reference_path)).unwrap();
    let target = read_wav(&manifest.resolve(&item.target_path)).unwrap();
    let est = model.forward(&mixture, &reference).unwrap();
    let report = metrics::report(&est, &mixture, &target).unwrap();
    let baseline = metrics::si_sdr(mixture.samples(), target.samples()).unwrap();
    println!("mixture si_sdr : {baseline:7.3} dB");
    println!("extract si_sdr : {:7.3} dB", report.si_sdr_db);
    println!("improvement    : {:7.3} dB", report.si_sdri_db);
}
