//! Overfit smoke test: a small model on a single mixture. The loss is the
//! negative scale-invariant SDR, so watching it fall below zero means the
//! extraction is beating the mixture on its own training item.
//!
//!     cargo run --release --example train_overfit

use whyv::model::{ModelConfig, WhyvModel};
use whyv::synth::{make_dataset, Condition};
use whyv::train::{train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(Condition::T1, 1, 11, &dir.path().join("data")).unwrap();
    let mut model = WhyvModel::new(ModelConfig {
        d: 8,
        e: 8,
        n_blocks: 2,
        encoder_hidden: 8,
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig { steps: 500, batch_size: 2, seed: 4, ..TrainConfig::default() };
    let log = train(&mut model, &manifest, None, &cfg, &dir.path().join("run")).unwrap();
    for line in log.records().iter().step_by(50) {
        println!("{line}");
    }
    println!("{}", log.records().last().unwrap());
    println!("wall clock: {:.1} s", log.wall_clock_s);
}
