//! The speaker-selection procedure: embed every training-split profile,
//! cluster the embeddings into 7 groups, and sample within each group with
//! probability softmax(distance to the cluster center) — members near the
//! boundary are preferred.
//!
//!     cargo run --release --example speaker_sampling

use whyv::synth::{cluster_speakers, profile_embeddings, sample_speakers, speaker_split, Condition};

fn main() {
    let profiles = speaker_split(Condition::T1);
    println!("training split: {} synthetic speakers", profiles.len());
    let embeddings = profile_embeddings(&profiles).unwrap();
    let plan = cluster_speakers(&embeddings, 7, 3).unwrap();
    for cluster in 0..plan.k {
        let probs = plan.selection_probabilities(cluster);
        let ids: Vec<String> =
            probs.iter().map(|(i, p)| format!("{}:{:.3}", profiles[*i].id, p)).collect();
        println!("cluster {cluster}: {}", ids.join(" "));
    }
    let selection = sample_speakers(&plan, 18, 9);
    println!(
        "selected {} speakers; clusters smaller than 18 taken whole: {:?}",
        selection.ids.len(),
        selection.degenerate_clusters
    );
}
