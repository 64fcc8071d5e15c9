//! Workload generators shared by the criterion benches.

use detfuse::synth::{self, SceneConfig, SynthConfig};
use detfuse::{pool, BBox, CalibratedSample, Detection, EnsembleOutputs, GroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` clustered detections in one image, spread over four categories.
pub fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64)> = (0..(n / 8).max(1))
        .map(|_| (rng.random_range(0.0..600.0), rng.random_range(0.0..440.0)))
        .collect();
    (0..n)
        .map(|i| {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            let x = cx + rng.random_range(-6.0..6.0);
            let y = cy + rng.random_range(-6.0..6.0);
            let w = rng.random_range(20.0..60.0);
            let h = rng.random_range(20.0..80.0);
            Detection {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                category: rng.random_range(1..=4),
                score: rng.random_range(0.0..1.0),
                model_id: i % 3,
                image_id: 1,
            }
        })
        .collect()
}

pub fn random_samples(n: usize, seed: u64) -> Vec<CalibratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c: f64 = rng.random();
            CalibratedSample::new(c, rng.random_bool(c))
        })
        .collect()
}

/// Synthetic three-model ensemble over `images` images.
pub fn ensemble(images: usize) -> (EnsembleOutputs, GroundTruth) {
    let gt = synth::random_scene(&SceneConfig {
        images,
        ..SceneConfig::default()
    })
    .unwrap();
    let ens = synth::generate(&gt, &SynthConfig::default()).unwrap();
    (ens, gt)
}

/// Pooled detections of the first image of `ensemble(1)`.
pub fn pooled_image() -> (Vec<Detection>, usize) {
    let (ens, _) = ensemble(1);
    (pool(&ens, 1), ens.n_models())
}
