//! Shared fixtures for the benchmark targets: deterministic random
//! matrices, a rendered scene frame, and a ready-to-train clip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use simtrack_core::{
    sample_clip, sequence_frames, Clip, Matrix, ModelConfig, SceneConfig, SimDecoderModel,
    TrainConfig,
};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite random data")
}

pub fn model() -> SimDecoderModel {
    SimDecoderModel::new(ModelConfig::default(), 7).expect("default model")
}

/// One moderately busy scene draw under the default configuration.
pub fn scene_frames() -> Vec<simtrack_core::ClipFrame> {
    sequence_frames(&SceneConfig::default(), 3).expect("default scene renders")
}

pub fn training_clip() -> Clip {
    let frames = scene_frames();
    let cfg = TrainConfig::default();
    sample_clip(&frames, &cfg, Some(0), &mut rng(9)).expect("clip fits the sequence")
}
