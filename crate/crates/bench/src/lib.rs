//! Fixtures shared by the criterion benches.

use boundnet_core::synth::{generate_synthetic, FamilyMix, SyntheticSpec};
use boundnet_core::trainer::{make_batch, Batch, TrainingExample};
use boundnet_core::{FrameFeatureSequence, Model, ModelConfig};

/// Desk-profile model with seeded random weights.
pub fn desk_model(seed: u64) -> Model {
    Model::new(ModelConfig::desk(), seed).expect("desk config is valid")
}

/// `n` mixed-family videos at the default size (T = 100, C = 32).
pub fn videos(n: usize, seed: u64) -> Vec<TrainingExample> {
    let ds = generate_synthetic(&SyntheticSpec {
        n_videos: n,
        families: FamilyMix::Mixed,
        seed,
        ..SyntheticSpec::default()
    })
    .expect("default spec is feasible");
    ds.videos
        .into_iter()
        .map(|v| TrainingExample {
            features: v.features,
            boundaries: v.boundaries,
        })
        .collect()
}

pub fn sequence(ex: &TrainingExample) -> FrameFeatureSequence {
    FrameFeatureSequence::from_raw(ex.features.clone()).expect("finite features")
}

pub fn batch(examples: &[TrainingExample], window: usize) -> Batch {
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    make_batch(&refs, 1.0, window).expect("equal-length videos")
}
