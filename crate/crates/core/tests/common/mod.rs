#![allow(dead_code)]

use dtrack::metrics::{GroundtruthEntry, GroundtruthSequence};
use dtrack::pyramid::{FeatureMap, FeaturePyramid};
use dtrack::synth::{Keyframe, Scene, SceneObject, SceneSpec};
use dtrack::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Parameters of a seeded distractor suite. Every object moves linearly
/// inside its own horizontal band, so boxes never overlap and the only way
/// to lose the target is to prefer a look-alike.
#[derive(Debug, Clone, Copy)]
pub struct Suite {
    pub image: usize,
    pub frames: usize,
    pub depth: usize,
    pub distractors: usize,
    pub overlap: f64,
    pub sigma: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for Suite {
    fn default() -> Self {
        Self {
            image: 128,
            frames: 50,
            depth: 16,
            distractors: 1,
            overlap: 0.95,
            sigma: 0.08,
            min_size: 24.0,
            max_size: 36.0,
        }
    }
}

impl Suite {
    pub fn scene(&self, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bands = self.distractors + 1;
        let side = self.image as f64;
        let band = side / bands as f64;
        let mut order: Vec<usize> = (0..bands).collect();
        let first = rng.random_range(0..bands);
        order.swap(0, first);
        let last = self.frames - 1;
        let objects = order
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let size = rng.random_range(self.min_size..self.max_size).min(band - 1.0);
                let place = |rng: &mut ChaCha8Rng| {
                    let x = rng.random_range(0.0..side - size);
                    let y = b as f64 * band + rng.random_range(0.0..band - size);
                    BoundingBox::new(x, y, size, size).unwrap()
                };
                let start = place(&mut rng);
                let end = place(&mut rng);
                SceneObject {
                    identity: None,
                    trajectory: vec![Keyframe { frame: 0, bbox: start }, Keyframe { frame: last, bbox: end }],
                    is_target: j == 0,
                    absent: vec![],
                }
            })
            .collect();
        Scene::new(SceneSpec {
            image_width: self.image,
            image_height: self.image,
            frames: self.frames,
            depth: self.depth,
            num_levels: 4,
            objects,
            noise_sigma: self.sigma,
            distractor_overlap: self.overlap,
            seed,
        })
        .unwrap()
    }
}

pub fn groundtruth(scene: &Scene) -> GroundtruthSequence {
    GroundtruthSequence::new(
        (0..scene.frames())
            .map(|frame| {
                let bbox = scene.target_box(frame);
                GroundtruthEntry {
                    frame,
                    present: bbox.is_some(),
                    bbox,
                    mask: None,
                }
            })
            .collect(),
    )
    .unwrap()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Lower end of the two-sided percentile bootstrap interval for the mean.
pub fn bootstrap_lower(samples: &[f64], resamples: usize, confidence: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let idx = (((1.0 - confidence) / 2.0) * resamples as f64).floor() as usize;
    means[idx.min(resamples - 1)]
}

/// Random pyramid with consecutive levels; `arbitrary_bits` draws every
/// finite `f32` bit pattern instead of standard-normal values.
pub fn random_pyramid(rng: &mut ChaCha8Rng, arbitrary_bits: bool) -> FeaturePyramid {
    let (w, h) = (rng.random_range(1..=96usize), rng.random_range(1..=96usize));
    let first = rng.random_range(0..=3u32);
    let count = rng.random_range(1..=4u32);
    let depth = rng.random_range(1..=8usize);
    let levels = (first..first + count)
        .map(|k| {
            let s = 1usize << k;
            let (lh, lw) = (h.div_ceil(s), w.div_ceil(s));
            let data = (0..lh * lw * depth)
                .map(|_| {
                    if arbitrary_bits {
                        loop {
                            let v = f32::from_bits(rng.random());
                            if v.is_finite() {
                                break v;
                            }
                        }
                    } else {
                        rng.sample::<f32, _>(StandardNormal)
                    }
                })
                .collect();
            FeatureMap::new(k, lh, lw, depth, data).unwrap()
        })
        .collect();
    FeaturePyramid::new(w, h, levels).unwrap()
}

pub fn bits(p: &FeaturePyramid) -> Vec<(u32, usize, usize, usize, Vec<u32>)> {
    p.levels()
        .iter()
        .map(|m| (m.level(), m.height(), m.width(), m.depth(), m.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
