// Temporary: full-scale criterion-7 rehearsal.
use std::time::Instant;
use whyv::model::{ModelConfig, WhyvModel};
use whyv::synth::{make_dataset, Condition};
use whyv::train::{evaluate, train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(Condition::T1, 200, 7, &dir.path().join("train")).unwrap();
    let eval_manifest = make_dataset(Condition::E1, 40, 8, &dir.path().join("eval")).unwrap();
    let mut model = WhyvModel::new(ModelConfig::default()).unwrap();
    let cfg = TrainConfig { steps: 2000, eval_every: 250, seed: 0, ..TrainConfig::default() };
    let t1 = Instant::now();
    let log = train(&mut model, &manifest, Some(&eval_manifest), &cfg, &dir.path().join("run")).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    println!("train wall: {:.1} s ({:.3} s/step)", dt, dt / 2000.0);
    for line in log.records().iter().filter(|l| l.starts_with("eval")) { println!("{line}"); }
    let sum = evaluate(&model, &eval_manifest).unwrap();
    println!("FINAL mean si_sdri: {:.3} dB", sum.mean.si_sdri_db);
}
