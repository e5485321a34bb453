//! Parameter accounting: exact counts across the architecture variants,
//! from both the layout enumeration and the closed-form formula.
//!
//!     cargo run --release --example param_count

use whyv::model::{Fusion, ModelConfig, WhyvModel};

fn main() {
    println!("variant                      enumerated    formula");
    for (label, use_env, fusion) in [
        ("gate, with env embedding", true, Fusion::WhyvGate),
        ("gate, reference only", false, Fusion::WhyvGate),
        ("film, with env embedding", true, Fusion::Film),
    ] {
        let config = ModelConfig { use_env_embedding: use_env, fusion, ..ModelConfig::default() };
        let model = WhyvModel::new(config.clone()).unwrap();
        println!(
            "{label:28} {:>10} {:>10}",
            model.param_count(),
            WhyvModel::param_count_formula(&config)
        );
    }
    for n_blocks in [2usize, 4, 8] {
        let config = ModelConfig { n_blocks, ..ModelConfig::default() };
        println!(
            "gate, N={n_blocks:<2} blocks           {:>10} {:>10}",
            WhyvModel::param_count_formula(&config),
            WhyvModel::new(config.clone()).unwrap().param_count()
        );
    }
}
