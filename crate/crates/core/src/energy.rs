//! Patch-energy baseline: blank or flat regions have low residual energy.
//!
//! Frames are resized to the bag resolution and center-cropped so the patch
//! grid tiles them exactly (96×96 → 3×3 patches of 32). A patch's energy is
//! the L2 norm of its values after subtracting the per-channel patch mean. A
//! frame's score is the mean of its `k` lowest patch energies, optionally
//! after dividing each by the same patch's mean energy over the preceding
//! `window` frames. Low scores indicate anomalies, so segment scores are
//! negated minima and a bag is flagged by the usual max rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{center_crop, resize_frame, BagGeometry, Frame, Video, CHANNELS, FRAME_SIDE};

const DIVISOR_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub patch: usize,
    pub k: usize,
    pub window: usize,
    pub normalize: bool,
    /// Side of the centered square kept from each resized frame.
    pub crop: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            k: 3,
            window: 3,
            normalize: false,
            crop: 96,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.crop == 0 || !self.crop.is_multiple_of(self.patch) || self.crop > FRAME_SIDE {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of patch {} and at most {FRAME_SIDE}",
                self.crop, self.patch
            )));
        }
        let n = (self.crop / self.patch).pow(2);
        if self.k == 0 || self.k > n {
            return Err(Error::Config(format!("k = {} must be in 1..={n}", self.k)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Energies of the non-overlapping `patch × patch` tiles, row-major over the grid.
pub fn patch_energy(frame: &Frame, patch: usize) -> Result<Vec<f64>> {
    let (h, w) = (frame.height(), frame.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}×{w} frame is not tiled by {patch}-pixel patches")));
    }
    let n = (patch * patch) as f64;
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let rows = || (py * patch..(py + 1) * patch).map(|y| &frame.row(y)[px * patch * CHANNELS..(px + 1) * patch * CHANNELS]);
            let mut sum = [0u64; CHANNELS];
            for r in rows() {
                for (i, &v) in r.iter().enumerate() {
                    sum[i % CHANNELS] += v as u64;
                }
            }
            let mean = sum.map(|s| s as f64 / n);
            let mut e = 0.0;
            for r in rows() {
                for (i, &v) in r.iter().enumerate() {
                    let d = v as f64 - mean[i % CHANNELS];
                    e += d * d;
                }
            }
            out.push(e.sqrt());
        }
    }
    Ok(out)
}

fn mean_of_lowest(mut values: Vec<f64>, k: usize) -> f64 {
    values.sort_by(f64::total_cmp);
    values[..k].iter().sum::<f64>() / k as f64
}

fn normalized(energies: &[f64], history: &[Vec<f64>]) -> Vec<f64> {
    energies
        .iter()
        .enumerate()
        .map(|(p, &e)| {
            let div = history.iter().map(|h| h[p]).sum::<f64>() / history.len() as f64;
            if div < DIVISOR_FLOOR {
                1.0
            } else {
                e / div
            }
        })
        .collect()
}

/// Score of an already cropped frame. With normalization on, `history` must
/// hold at least `window` preceding frames; the last `window` are used.
pub fn frame_score(frame: &Frame, config: &EnergyConfig, history: &[Frame]) -> Result<f64> {
    let e = patch_energy(frame, config.patch)?;
    if config.k == 0 || config.k > e.len() {
        return Err(Error::Config(format!("k = {} with {} patches", config.k, e.len())));
    }
    if !config.normalize {
        return Ok(mean_of_lowest(e, config.k));
    }
    if history.len() < config.window {
        return Err(Error::EmptyInput(format!(
            "normalization needs {} preceding frames, got {}",
            config.window,
            history.len()
        )));
    }
    let hist = history[history.len() - config.window..]
        .iter()
        .map(|f| patch_energy(f, config.patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of_lowest(normalized(&e, &hist), config.k))
}

/// Resize to the bag resolution, then crop.
pub fn prepare_frame(frame: &Frame, config: &EnergyConfig) -> Result<Frame> {
    if frame.height() == FRAME_SIDE && frame.width() == FRAME_SIDE {
        center_crop(frame, config.crop)
    } else {
        center_crop(&resize_frame(frame, FRAME_SIDE, FRAME_SIDE)?, config.crop)
    }
}

/// Per-frame scores of a whole video; `None` for frames without enough
/// history when normalization is on.
pub fn video_frame_scores(video: &Video, config: &EnergyConfig) -> Result<Vec<Option<f64>>> {
    config.validate()?;
    let energies = video
        .frames()
        .iter()
        .map(|f| patch_energy(&prepare_frame(f, config)?, config.patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(energies
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if !config.normalize {
                Some(mean_of_lowest(e.clone(), config.k))
            } else if i < config.window {
                None
            } else {
                Some(mean_of_lowest(normalized(e, &energies[i - config.window..i]), config.k))
            }
        })
        .collect())
}

/// Segment scores (negated minimum frame score) for every complete bag,
/// with the bag's start frame.
pub fn video_segment_scores(video: &Video, geometry: BagGeometry, config: &EnergyConfig) -> Result<Vec<(usize, Vec<f64>)>> {
    geometry.validate()?;
    if config.normalize && config.window >= geometry.seg_len {
        return Err(Error::Config(format!(
            "window {} leaves no scorable frame in the first {}-frame segment",
            config.window, geometry.seg_len
        )));
    }
    let scores = video_frame_scores(video, config)?;
    Ok(geometry
        .bag_ranges(video.len())
        .map(|(start, end)| {
            let segs = scores[start..end]
                .chunks_exact(geometry.seg_len)
                .map(|seg| -seg.iter().flatten().copied().fold(f64::INFINITY, f64::min))
                .collect();
            (start, segs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::synth::{inject, render_base_video, CorruptionEvent, CorruptionKind, Motion, SceneSpec};
    use proptest::prelude::*;

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = SplitMix64::new(seed);
        let data = (0..h * w * CHANNELS).map(|_| rng.below(256) as u8).collect();
        Frame::new(h, w, data).unwrap()
    }

    // Per-pixel loops with no shared code path.
    fn naive_energy(f: &Frame, patch: usize) -> Vec<f64> {
        let mut out = vec![];
        for py in 0..f.height() / patch {
            for px in 0..f.width() / patch {
                let mut total = 0.0;
                for c in 0..CHANNELS {
                    let mut mu = 0.0;
                    for y in 0..patch {
                        for x in 0..patch {
                            mu += f.pixel(py * patch + y, px * patch + x)[c] as f64;
                        }
                    }
                    mu /= (patch * patch) as f64;
                    for y in 0..patch {
                        for x in 0..patch {
                            let d = f.pixel(py * patch + y, px * patch + x)[c] as f64 - mu;
                            total += d * d;
                        }
                    }
                }
                out.push(total.sqrt());
            }
        }
        out
    }

    fn naive_score(f: &Frame, k: usize, hist: &[Frame]) -> f64 {
        let e = naive_energy(f, 32);
        let mut r: Vec<f64> = if hist.is_empty() {
            e
        } else {
            let he: Vec<Vec<f64>> = hist.iter().map(|h| naive_energy(h, 32)).collect();
            (0..e.len())
                .map(|p| {
                    let mut d = 0.0;
                    for h in &he {
                        d += h[p];
                    }
                    d /= he.len() as f64;
                    if d < 1e-9 {
                        1.0
                    } else {
                        e[p] / d
                    }
                })
                .collect()
        };
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        r[..k].iter().sum::<f64>() / k as f64
    }

    #[test]
    fn flat_patches_have_zero_energy() {
        for v in [0u8, 77, 255] {
            let f = Frame::filled(96, 96, [v, 255 - v, v / 2]);
            assert!(patch_energy(&f, 32).unwrap().iter().all(|&e| e == 0.0));
        }
        assert!(matches!(patch_energy(&Frame::filled(100, 96, [0; 3]), 32), Err(Error::Shape(_))));
    }

    #[test]
    fn one_bright_pixel() {
        let mut f = Frame::filled(32, 32, [0; 3]);
        f.set_pixel(5, 9, [255, 0, 0]);
        let mu = 255.0 / 1024.0;
        let expected = ((255.0 - mu) * (255.0f64 - mu) + 1023.0 * mu * mu).sqrt();
        let e = patch_energy(&f, 32).unwrap();
        assert!((e[0] - expected).abs() < 1e-9);
        assert!((e[0] - naive_energy(&f, 32)[0]).abs() < 1e-9);
    }

    #[test]
    fn textured_frame_matches_oracle() {
        for seed in 0..5 {
            let f = random_frame(96, 96, seed);
            let hist: Vec<Frame> = (0..3).map(|i| random_frame(96, 96, 100 + seed + i)).collect();
            for normalize in [false, true] {
                let cfg = EnergyConfig { normalize, ..EnergyConfig::default() };
                let got = frame_score(&f, &cfg, &hist).unwrap();
                let want = naive_score(&f, 3, if normalize { &hist } else { &[] });
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn history_requirements() {
        let cfg = EnergyConfig { normalize: true, ..EnergyConfig::default() };
        let f = random_frame(96, 96, 1);
        assert!(matches!(frame_score(&f, &cfg, std::slice::from_ref(&f)), Err(Error::EmptyInput(_))));
        let bad = EnergyConfig { k: 10, ..EnergyConfig::default() };
        assert!(bad.validate().is_err());
        assert!(EnergyConfig { crop: 100, ..EnergyConfig::default() }.validate().is_err());
    }

    #[test]
    fn blackout_scores_zero_and_static_scores_one() {
        let normal: Vec<Frame> = (0..3).map(|i| random_frame(96, 96, i)).collect();
        let black = Frame::filled(96, 96, [0; 3]);
        let on = EnergyConfig { normalize: true, ..EnergyConfig::default() };
        assert_eq!(frame_score(&black, &on, &normal).unwrap(), 0.0);
        assert_eq!(frame_score(&black, &EnergyConfig::default(), &[]).unwrap(), 0.0);
        let f = random_frame(96, 96, 42);
        let stat = vec![f.clone(); 3];
        assert!((frame_score(&f, &on, &stat).unwrap() - 1.0).abs() < 1e-12);
        let green = Frame::filled(96, 96, [0, 255, 0]);
        assert_eq!(frame_score(&green, &EnergyConfig::default(), &[]).unwrap(), 0.0);
    }

    #[test]
    fn blackout_bags_outrank_clean_bags() {
        let spec = SceneSpec {
            height: 112,
            width: 112,
            motion: Motion::BouncingRects,
            palette_seed: 3,
        };
        let geometry = BagGeometry { bag_len: 64, seg_len: 16 };
        for normalize in [false, true] {
            let cfg = EnergyConfig { normalize, ..EnergyConfig::default() };
            let clean = render_base_video(&spec, 128, 5).unwrap();
            let bad = inject(&clean, &CorruptionEvent::new(CorruptionKind::SuddenBlackout, 70, 10)).unwrap();
            let clean_max = video_segment_scores(&clean, geometry, &cfg)
                .unwrap()
                .into_iter()
                .flat_map(|(_, s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            let bags = video_segment_scores(&bad, geometry, &cfg).unwrap();
            let flagged = bags[1].1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(flagged, 0.0);
            assert!(flagged > clean_max);
        }
    }

    #[test]
    fn frames_without_history_are_skipped() {
        let spec = SceneSpec {
            height: 112,
            width: 112,
            motion: Motion::DriftingGradient,
            palette_seed: 1,
        };
        let v = render_base_video(&spec, 32, 2).unwrap();
        let cfg = EnergyConfig { normalize: true, ..EnergyConfig::default() };
        let s = video_frame_scores(&v, &cfg).unwrap();
        assert!(s[..3].iter().all(Option::is_none));
        assert!(s[3..].iter().all(Option::is_some));
        let g = BagGeometry { bag_len: 32, seg_len: 2 };
        assert!(matches!(video_segment_scores(&v, g, &cfg), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn energies_permute_with_patches(seed in any::<u64>(), a in 0usize..9, b in 0usize..9) {
            let f = random_frame(96, 96, seed);
            let mut g = f.clone();
            let (ay, ax, by, bx) = (a / 3 * 32, a % 3 * 32, b / 3 * 32, b % 3 * 32);
            for y in 0..32 {
                for x in 0..32 {
                    g.set_pixel(ay + y, ax + x, f.pixel(by + y, bx + x));
                    g.set_pixel(by + y, bx + x, f.pixel(ay + y, ax + x));
                }
            }
            let ef = patch_energy(&f, 32).unwrap();
            let mut eg = patch_energy(&g, 32).unwrap();
            eg.swap(a, b);
            prop_assert_eq!(ef, eg);
        }

        #[test]
        fn constant_offset_invariance(seed in any::<u64>(), p in 0usize..9, add in 0u8..64) {
            let mut f = random_frame(96, 96, seed);
            for v in f.data_mut() {
                *v = (*v).min(191);
            }
            let mut g = f.clone();
            let (py, px) = (p / 3 * 32, p % 3 * 32);
            for y in 0..32 {
                for x in 0..32 {
                    let px_val = g.pixel(py + y, px + x);
                    g.set_pixel(py + y, px + x, px_val.map(|c| c + add));
                }
            }
            let cfg = EnergyConfig::default();
            let (sf, sg) = (frame_score(&f, &cfg, &[]).unwrap(), frame_score(&g, &cfg, &[]).unwrap());
            prop_assert!((sf - sg).abs() <= 1e-9 * sf.max(1.0));
        }

        #[test]
        fn periodic_static_video_normalizes_to_one(seed in any::<u64>(), period in 1usize..4) {
            let frames: Vec<Frame> = (0..period).map(|i| random_frame(96, 96, seed.wrapping_add(i as u64))).collect();
            let cfg = EnergyConfig { normalize: true, window: period, ..EnergyConfig::default() };
            let f = &frames[0];
            let hist: Vec<Frame> = (0..period).map(|i| frames[i].clone()).collect();
            let s = frame_score(f, &cfg, &hist).unwrap();
            if period == 1 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(s.is_finite() && s > 0.0);
            }
        }
    }
}
