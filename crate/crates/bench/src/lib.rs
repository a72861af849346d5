//! Fixtures shared by the criterion benches.

use grassmap_core::synth::{random_box, random_class, synthetic_run, SyntheticRun};
use grassmap_core::{Detection, DetectionFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A frame of `n` random detections.
pub fn dense_frame(n: usize, seed: u64) -> DetectionFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DetectionFrame {
        frame_index: 0,
        timestamp_ms: 0,
        detections: (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut rng),
                cls: random_class(&mut rng),
                confidence: rng.gen(),
            })
            .collect(),
    }
}

/// A 5 s capture at 30 fps.
pub fn five_second_capture(image_size: (u32, u32)) -> SyntheticRun {
    synthetic_run(150, image_size, 1)
}
