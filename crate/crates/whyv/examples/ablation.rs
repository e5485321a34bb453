//! Gate-versus-FiLM fusion comparison on identical data: short trainings
//! of both variants, evaluated on a shared noisy split.
//!
//!     cargo run --release --example ablation

use whyv::model::{Fusion, ModelConfig, WhyvModel};
use whyv::synth::{make_dataset, Condition};
use whyv::train::{evaluate, train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let train_m = make_dataset(Condition::T2, 12, 31, &dir.path().join("train")).unwrap();
    let eval_m = make_dataset(Condition::E2, 8, 32, &dir.path().join("eval")).unwrap();
    println!("fusion      params  mean_si_sdri_db");
    for fusion in [Fusion::WhyvGate, Fusion::Film] {
        let mut model = WhyvModel::new(ModelConfig {
            d: 8,
            e: 16,
            n_blocks: 2,
            encoder_hidden: 16,
            fusion,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig { steps: 200, seed: 3, ..TrainConfig::default() };
        train(&mut model, &train_m, None, &cfg, &dir.path().join(format!("run_{fusion}"))).unwrap();
        let summary = evaluate(&model, &eval_m).unwrap();
        println!("{fusion:10}  {:6}  {:7.3}", model.param_count(), summary.mean.si_sdri_db);
    }
}
