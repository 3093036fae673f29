//! Seeded inputs shared by the benchmarks.

use memflow_core::{synth, Frame, Mask, Model, ModelConfig, SynthConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` values drawn uniformly from `[-1, 1)`.
pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(n, seed)).expect("shape matches data")
}

/// An untrained compact model and one synthetic clip at `res x res`.
pub fn clip(res: usize, len: usize) -> (Model, Vec<Frame>, Mask) {
    let model = Model::new(ModelConfig::compact((res, res)), 0).expect("compact config is valid");
    let cfg = SynthConfig {
        resolution: (res, res),
        video_length: len,
        num_videos: 1,
        ..SynthConfig::default()
    };
    let video = synth::generate_video(&cfg, 0).expect("synthetic video").video;
    let first = video.masks[0].clone();
    (model, video.frames, first)
}
