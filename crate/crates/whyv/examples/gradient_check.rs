//! Gradient verification: every primitive op against central finite
//! differences, then the full model's loss gradient on a tiny
//! configuration.
//!
//!     cargo run --release --example gradient_check

use whyv::model::{ModelConfig, WhyvModel};
use whyv::synth::{default_profiles, mix, synth_speaker, Condition, MixtureSpec};
use whyv::tensor::{finite_diff_check, OpAttrs, OpKind, Tensor};
use whyv::train::grad_check_model;

fn main() {
    // a representative spread of op kinds driven through apply()
    let probe = Tensor::from_vec((0..12).map(|i| 0.1 * i as f64 - 0.55).collect()).unwrap();
    for kind in [OpKind::Sigmoid, OpKind::Tanh, OpKind::Exp, OpKind::Square, OpKind::Softmax] {
        let attrs = OpAttrs { axis: Some(0), ..Default::default() };
        let err = finite_diff_check(
            |g, v| {
                let y = g.apply(kind, &[v], &attrs)?;
                let sq = g.square(&y)?;
                g.sum_all(&sq)
            },
            &probe,
            1e-5,
        )
        .unwrap();
        println!("{:10} max rel err {:.2e}", kind.name(), err);
    }

    // full model: analytic loss gradient vs central differences on a
    // deterministic 1% parameter sample
    let model = WhyvModel::new(ModelConfig {
        d: 8,
        e: 8,
        n_blocks: 2,
        n_fft: 32,
        hop: 16,
        encoder_hidden: 8,
        seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    let profiles = default_profiles();
    let a = synth_speaker(&profiles[0], 0.5, 1).unwrap();
    let b = synth_speaker(&profiles[5], 0.5, 2).unwrap();
    let reference = synth_speaker(&profiles[0], 0.5, 3).unwrap();
    let spec = MixtureSpec {
        target_index: 0,
        sources: vec![a, b],
        noise: None,
        snr_db: f64::INFINITY,
        condition: Condition::T1,
    };
    let (mixture, target, _) = mix(&spec).unwrap();
    let err = grad_check_model(&model, &mixture, &reference, &target, 0.01, 7).unwrap();
    println!("full model ({} params, 1% sampled): max rel err {:.2e}", model.param_count(), err);
}
