//! Deterministic fixtures shared by the throughput benchmarks.

use weakmil::{render_base_video, FeatureBag, SceneSpec, SplitMix64, Video, BUILTIN_DIM};

/// One rendered 112×112 segment of default length.
pub fn segment_video() -> Video {
    let spec = SceneSpec {
        height: weakmil::video::FRAME_SIDE,
        width: weakmil::video::FRAME_SIDE,
        motion: weakmil::synth::Motion::BouncingRects,
        palette_seed: 1,
    };
    render_base_video(&spec, weakmil::video::SEG_LEN, 2).expect("valid scene")
}

/// A bag of uniform descriptors in `[0, 1)` with the built-in dimension.
pub fn random_bag(id: &str, seed: u64) -> FeatureBag {
    let segs = weakmil::video::BAG_LEN / weakmil::video::SEG_LEN;
    let mut rng = SplitMix64::new(seed);
    let values = (0..segs * BUILTIN_DIM).map(|_| rng.next_f64()).collect();
    FeatureBag::new(id, segs, BUILTIN_DIM, values).expect("consistent shape")
}

/// `n` clean scores in `(0, 1)`.
pub fn clean_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_f64()).collect()
}
