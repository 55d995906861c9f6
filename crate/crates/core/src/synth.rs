//! Synthetic feature pyramids rendered from parametric scenes.
//!
//! Every object carries a unit identity embedding. A pyramid cell whose
//! receptive-field center falls inside an object's box holds that identity
//! scaled by a separable cosine window (1 at the box center, 0 at its
//! edges), plus per-channel Gaussian noise. Earlier objects in the list
//! occlude later ones. Noise comes from a ChaCha stream keyed by
//! `(seed, frame)`, so frames render identically in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{extract_template_with, BoundingBox, FeatureMap, FeaturePyramid, LevelConfig, Mask};
use crate::template::{cosine, TemplateVector};
use crate::tracker::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Unit-norm embedding. Generated from the scene seed when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<Vec<f64>>,
    /// Box keyframes, linearly interpolated and held constant past the ends.
    pub trajectory: Vec<Keyframe>,
    #[serde(default)]
    pub is_target: bool,
    /// Half-open frame ranges `[start, end)` during which the object is gone.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<[usize; 2]>,
}

impl SceneObject {
    pub fn box_at(&self, frame: usize) -> BoundingBox {
        let kf = &self.trajectory;
        let i = kf.partition_point(|k| k.frame <= frame);
        if i == 0 {
            return kf[0].bbox;
        }
        if i == kf.len() {
            return kf[kf.len() - 1].bbox;
        }
        let (a, b) = (&kf[i - 1], &kf[i]);
        let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        let lerp = |p: f64, q: f64| p + (q - p) * t;
        BoundingBox {
            x: lerp(a.bbox.x, b.bbox.x),
            y: lerp(a.bbox.y, b.bbox.y),
            w: lerp(a.bbox.w, b.bbox.w),
            h: lerp(a.bbox.h, b.bbox.h),
        }
    }

    pub fn visible_at(&self, frame: usize) -> bool {
        !self.absent.iter().any(|&[s, e]| frame >= s && frame < e)
    }
}

fn default_levels() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub frames: usize,
    pub depth: usize,
    /// Number of pyramid levels, starting at level 2.
    #[serde(default = "default_levels")]
    pub num_levels: usize,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Cosine between the target identity and each generated distractor identity.
    #[serde(default)]
    pub distractor_overlap: f64,
    #[serde(default)]
    pub seed: u64,
}

/// A validated scene with resolved identities.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    spec: SceneSpec,
    identities: Vec<Vec<f64>>,
}

pub const FIRST_LEVEL: u32 = 2;

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        if spec.image_width == 0 || spec.image_height == 0 || spec.frames == 0 || spec.depth == 0 {
            return Err(Error::invalid("scene needs positive image size, frame count and depth"));
        }
        if spec.num_levels == 0 || spec.num_levels > 8 {
            return Err(Error::invalid("scene num_levels must be in 1..=8"));
        }
        if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&spec.distractor_overlap) {
            return Err(Error::invalid("distractor_overlap must lie in [0, 1]"));
        }
        let targets = spec.objects.iter().filter(|o| o.is_target).count();
        if !spec.objects.is_empty() && targets != 1 {
            return Err(Error::invalid(format!(
                "scene must have exactly one target object, found {targets}"
            )));
        }
        let (w, h) = (spec.image_width as f64, spec.image_height as f64);
        for (i, obj) in spec.objects.iter().enumerate() {
            if obj.trajectory.is_empty() {
                return Err(Error::invalid(format!("object {i} has an empty trajectory")));
            }
            if obj.trajectory.windows(2).any(|p| p[1].frame <= p[0].frame) {
                return Err(Error::invalid(format!("object {i} keyframes must be strictly increasing")));
            }
            // interpolated boxes stay inside whenever every keyframe is inside
            for k in &obj.trajectory {
                let b = k.bbox;
                if b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
                    return Err(Error::invalid(format!(
                        "object {i} keyframe at frame {} leaves the {w}x{h} image",
                        k.frame
                    )));
                }
            }
            if let Some(id) = &obj.identity {
                if id.len() != spec.depth {
                    return Err(Error::invalid(format!("object {i} identity has wrong depth")));
                }
                if (crate::template::norm(id) - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("object {i} identity is not unit norm")));
                }
            }
        }
        let identities = resolve_identities(&spec);
        Ok(Self { spec, identities })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn identities(&self) -> &[Vec<f64>] {
        &self.identities
    }

    pub fn target_index(&self) -> Option<usize> {
        self.spec.objects.iter().position(|o| o.is_target)
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    /// Groundtruth target box at `frame`, `None` while the target is absent.
    pub fn target_box(&self, frame: usize) -> Option<BoundingBox> {
        let obj = &self.spec.objects[self.target_index()?];
        obj.visible_at(frame).then(|| obj.box_at(frame))
    }
}

fn random_unit(rng: &mut ChaCha8Rng, depth: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..depth).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::template::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn resolve_identities(spec: &SceneSpec) -> Vec<Vec<f64>> {
    // separate stream from frame noise, which uses streams 0..frames
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let d = spec.depth;
    let target = match spec.objects.iter().find(|o| o.is_target) {
        Some(o) => o.identity.clone().unwrap_or_else(|| random_unit(&mut rng, d)),
        None => random_unit(&mut rng, d),
    };
    let o = spec.distractor_overlap;
    spec.objects
        .iter()
        .map(|obj| {
            if let Some(id) = &obj.identity {
                return id.clone();
            }
            if obj.is_target {
                return target.clone();
            }
            if d == 1 {
                return vec![target[0]];
            }
            // component orthogonal to the target, then mix to the requested cosine
            let mut v = random_unit(&mut rng, d);
            let proj = crate::template::dot(&v, &target);
            v.iter_mut().zip(&target).for_each(|(x, t)| *x -= proj * t);
            let n = crate::template::norm(&v);
            let s = (1.0 - o * o).max(0.0).sqrt();
            v.iter().zip(&target).map(|(x, t)| o * t + s * x / n).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    pub object: usize,
    pub is_target: bool,
    pub bbox: BoundingBox,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub pyramid: FeaturePyramid,
    /// Visible objects only, in scene order.
    pub truths: Vec<ObjectTruth>,
}

impl RenderedFrame {
    pub fn target(&self) -> Option<&ObjectTruth> {
        self.truths.iter().find(|t| t.is_target)
    }
}

fn falloff(bbox: &BoundingBox, px: f64, py: f64) -> f64 {
    let (cx, cy) = bbox.center();
    let fx = (std::f64::consts::FRAC_PI_2 * (px - cx) / (bbox.w / 2.0)).cos();
    let fy = (std::f64::consts::FRAC_PI_2 * (py - cy) / (bbox.h / 2.0)).cos();
    fx.max(0.0) * fy.max(0.0)
}

pub fn render_frame(scene: &Scene, frame: usize) -> Result<RenderedFrame> {
    let spec = &scene.spec;
    if frame >= spec.frames {
        return Err(Error::invalid(format!(
            "frame {frame} outside scene of {} frames",
            spec.frames
        )));
    }
    let visible: Vec<(usize, BoundingBox)> = spec
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.visible_at(frame))
        .map(|(i, o)| (i, o.box_at(frame)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(frame as u64);
    let d = spec.depth;
    let levels = (0..spec.num_levels as u32)
        .map(|i| {
            let level = FIRST_LEVEL + i;
            let s = 1usize << level;
            let (h, w) = (spec.image_height.div_ceil(s), spec.image_width.div_ceil(s));
            let mut map = FeatureMap::zeros(level, h, w, d);
            for r in 0..h {
                for c in 0..w {
                    let (px, py) = map.cell_center(r, c);
                    let owner = visible.iter().find(|(_, b)| b.contains(px, py));
                    let cell = map.cell_mut(r, c);
                    if let Some(&(i, b)) = owner {
                        let f = falloff(&b, px, py);
                        for (v, id) in cell.iter_mut().zip(&scene.identities[i]) {
                            *v = (id * f) as f32;
                        }
                    }
                    if spec.noise_sigma > 0.0 {
                        for v in cell.iter_mut() {
                            let n: f64 = rng.sample(StandardNormal);
                            *v = (*v as f64 + spec.noise_sigma * n) as f32;
                        }
                    }
                }
            }
            map
        })
        .collect();
    let pyramid = FeaturePyramid::new(spec.image_width, spec.image_height, levels)?;
    let truths = visible
        .into_iter()
        .map(|(i, b)| ObjectTruth {
            object: i,
            is_target: spec.objects[i].is_target,
            bbox: b,
            mask: Mask::from_box(&b, spec.image_height, spec.image_width),
        })
        .collect();
    Ok(RenderedFrame { pyramid, truths })
}

/// `k` proposal boxes per visible object: the true box first, then seeded
/// copies shifted by up to `jitter` of the box extent and rescaled by up to
/// `jitter` of its size.
pub fn propose_boxes(truths: &[ObjectTruth], jitter: f64, k: usize, seed: u64) -> Result<Vec<BoundingBox>> {
    if k == 0 {
        return Err(Error::invalid("candidates per object must be at least 1"));
    }
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(Error::invalid("jitter must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(truths.len() * k);
    for t in truths {
        out.push(t.bbox);
        for _ in 1..k {
            let b = t.bbox;
            let dx = jitter * b.w * rng.random_range(-1.0..=1.0);
            let dy = jitter * b.h * rng.random_range(-1.0..=1.0);
            let s = (1.0 + jitter * rng.random_range(-1.0..=1.0)).max(0.1);
            let (cx, cy) = b.center();
            out.push(BoundingBox::new(0.0, 0.0, b.w * s, b.h * s)?.recentered(cx + dx, cy + dy));
        }
    }
    Ok(out)
}

/// Confidence of a box under a template: the cosine between the box's
/// center feature and the template, clipped to `[0, 1]`.
pub fn score_box(pyramid: &FeaturePyramid, bbox: &BoundingBox, template: &TemplateVector, levels: &LevelConfig) -> Result<f64> {
    let feature = extract_template_with(pyramid, bbox, levels)?;
    if feature.depth() != template.depth() {
        return Err(Error::invalid("template depth does not match pyramid depth"));
    }
    Ok(cosine(feature.values(), template.values()).max(0.0))
}

pub fn score_boxes(
    pyramid: &FeaturePyramid,
    boxes: &[BoundingBox],
    template: &TemplateVector,
    levels: &LevelConfig,
) -> Result<Vec<Detection>> {
    boxes
        .iter()
        .map(|b| Detection::new(*b, score_box(pyramid, b, template, levels)?, None))
        .collect()
}

pub fn synth_candidates(
    pyramid: &FeaturePyramid,
    truths: &[ObjectTruth],
    template: &TemplateVector,
    jitter: f64,
    k: usize,
    seed: u64,
) -> Result<Vec<Detection>> {
    let boxes = propose_boxes(truths, jitter, k, seed)?;
    score_boxes(pyramid, &boxes, template, &LevelConfig::default())
}

/// Renders scene frames and scores proposals against the active template.
#[derive(Debug, Clone)]
pub struct SynthProvider<'a> {
    scene: &'a Scene,
    pub jitter: f64,
    pub per_object: usize,
    pub seed: u64,
    cache: Vec<Option<RenderedFrame>>,
}

impl<'a> SynthProvider<'a> {
    pub fn new(scene: &'a Scene, jitter: f64, per_object: usize, seed: u64) -> Self {
        Self {
            scene,
            jitter,
            per_object,
            seed,
            cache: vec![None; scene.frames()],
        }
    }

    pub fn frame(&mut self, frame: usize) -> Result<&RenderedFrame> {
        if frame >= self.cache.len() {
            return Err(Error::invalid(format!("frame {frame} outside scene")));
        }
        if self.cache[frame].is_none() {
            self.cache[frame] = Some(render_frame(self.scene, frame)?);
        }
        Ok(self.cache[frame].as_ref().expect("rendered above"))
    }

    pub fn frame_seed(&self, frame: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64)
    }
}

impl crate::tracker::CandidateProvider for SynthProvider<'_> {
    fn candidates(&mut self, index: usize, template: &TemplateVector) -> Result<Vec<Detection>> {
        let (jitter, k, seed) = (self.jitter, self.per_object, self.frame_seed(index));
        let rendered = self.frame(index)?;
        synth_candidates(&rendered.pyramid, &rendered.truths, template, jitter, k, seed)
    }
}
