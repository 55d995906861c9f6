//! Per-frame selection with optional temporal smoothing.
//!
//! Smoothing reranks each candidate as `α c + (1 − α) j`, where `j` is its
//! overlap with the previous selection. Smoothing switches off as soon as two
//! consecutive selections overlap by less than `alpha_low`, and switches back
//! on once `recover_frames` consecutive selections overlap by more than
//! `alpha_recover`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{box_iou, mask_iou};
use crate::pyramid::{BoundingBox, FeaturePyramid, Mask};
use crate::template::{build_template, TemplateConfig, TemplateVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64, mask: Option<Mask>) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self { bbox, confidence, mask })
    }

    fn with_confidence(&self, confidence: f64) -> Self {
        Self {
            confidence,
            ..self.clone()
        }
    }
}

/// Mask IoU when both detections carry masks on the same canvas, box IoU
/// otherwise.
pub fn overlap(a: &Detection, b: &Detection) -> f64 {
    match (&a.mask, &b.mask) {
        (Some(ma), Some(mb)) => mask_iou(ma, mb).unwrap_or_else(|_| box_iou(&a.bbox, &b.bbox)),
        _ => box_iou(&a.bbox, &b.bbox),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub alpha: f64,
    pub alpha_low: f64,
    pub alpha_recover: f64,
    pub recover_frames: u32,
    pub presence_threshold: f64,
    pub smoothing_enabled: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            alpha_low: 0.1,
            alpha_recover: 0.3,
            recover_frames: 30,
            presence_threshold: 0.3,
            smoothing_enabled: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("alpha_low", self.alpha_low),
            ("alpha_recover", self.alpha_recover),
            ("presence_threshold", self.presence_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.recover_frames == 0 {
            return Err(Error::invalid("recover_frames must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackerState {
    pub previous_selection: Option<Detection>,
    pub smoothing_active: bool,
    pub consecutive_smooth: u32,
}

impl TrackerState {
    pub fn initial(init: Detection) -> Self {
        Self {
            previous_selection: Some(init),
            smoothing_active: true,
            consecutive_smooth: 0,
        }
    }
}

pub fn rerank(candidates: &[Detection], previous: &Detection, alpha: f64) -> Vec<f64> {
    candidates
        .iter()
        .map(|c| alpha * c.confidence + (1.0 - alpha) * overlap(c, previous))
        .collect()
}

/// First index of the maximum.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: TrackerState,
    pub selection: Detection,
    pub present: bool,
}

/// One tracking step. The selected detection carries the score it was
/// selected by (reranked while smoothing is active).
pub fn step(state: &TrackerState, candidates: &[Detection], config: &TrackerConfig) -> Result<StepOutcome> {
    if candidates.is_empty() {
        let previous = state
            .previous_selection
            .as_ref()
            .ok_or_else(|| Error::invalid("no candidates and no previous selection to carry forward"))?;
        return Ok(StepOutcome {
            state: state.clone(),
            selection: previous.with_confidence(0.0),
            present: false,
        });
    }

    let smoothing = config.smoothing_enabled && state.smoothing_active;
    let scores = match (&state.previous_selection, smoothing) {
        (Some(prev), true) => rerank(candidates, prev, config.alpha),
        _ => candidates.iter().map(|c| c.confidence).collect(),
    };
    let best = argmax(&scores);
    let selection = candidates[best].with_confidence(scores[best].clamp(0.0, 1.0));
    let present = selection.confidence >= config.presence_threshold;

    let mut next = state.clone();
    if let Some(prev) = &state.previous_selection {
        let iou = overlap(&selection, prev);
        if next.smoothing_active {
            if iou < config.alpha_low {
                next.smoothing_active = false;
                next.consecutive_smooth = 0;
            }
        } else {
            next.consecutive_smooth = if iou > config.alpha_recover {
                next.consecutive_smooth + 1
            } else {
                0
            };
            if next.consecutive_smooth >= config.recover_frames {
                next.smoothing_active = true;
                next.consecutive_smooth = 0;
            }
        }
    }
    next.previous_selection = Some(selection.clone());
    Ok(StepOutcome {
        state: next,
        selection,
        present,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame: usize,
    pub detection: Detection,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Track {
    entries: Vec<TrackEntry>,
}

impl Track {
    pub fn new(entries: Vec<TrackEntry>) -> Result<Self> {
        if entries.windows(2).any(|p| p[1].frame <= p[0].frame) {
            return Err(Error::invalid("track frame indices must be strictly increasing"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TrackEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: TrackEntry) -> Result<()> {
        if self.entries.last().is_some_and(|e| e.frame >= entry.frame) {
            return Err(Error::invalid("track frame indices must be strictly increasing"));
        }
        self.entries.push(entry);
        Ok(())
    }
}

/// Supplies per-frame candidates given the active template.
pub trait CandidateProvider {
    fn candidates(&mut self, index: usize, template: &TemplateVector) -> Result<Vec<Detection>>;
}

/// Precomputed candidate lists, one per frame; the template is ignored.
impl CandidateProvider for Vec<Vec<Detection>> {
    fn candidates(&mut self, index: usize, _template: &TemplateVector) -> Result<Vec<Detection>> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no candidate list for frame {index}")))
    }
}

/// Stateful wrapper around [`step`].
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    state: TrackerState,
}

impl Tracker {
    pub fn new(config: TrackerConfig, init_box: BoundingBox) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: TrackerState::initial(Detection::new(init_box, 1.0, None)?),
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn step(&mut self, candidates: &[Detection]) -> Result<(Detection, bool)> {
        let out = step(&self.state, candidates, &self.config)?;
        self.state = out.state;
        Ok((out.selection, out.present))
    }
}

/// Builds the template once from the first frame and tracks through
/// `frames`, querying `provider` by position. The template is never updated.
pub fn run_track<P: CandidateProvider + ?Sized>(
    provider: &mut P,
    frames: &[usize],
    init_box: BoundingBox,
    init_pyramid: &FeaturePyramid,
    config: &TrackerConfig,
    template: &TemplateConfig,
) -> Result<Track> {
    if frames.is_empty() {
        return Err(Error::invalid("sequence must contain at least one frame"));
    }
    let template = build_template(init_pyramid, &init_box, template)?;
    run_track_with_template(provider, frames, init_box, &template, config)
}

pub fn run_track_with_template<P: CandidateProvider + ?Sized>(
    provider: &mut P,
    frames: &[usize],
    init_box: BoundingBox,
    template: &TemplateVector,
    config: &TrackerConfig,
) -> Result<Track> {
    let mut tracker = Tracker::new(*config, init_box)?;
    let mut track = Track::default();
    for (i, &frame) in frames.iter().enumerate() {
        let candidates = provider.candidates(i, template)?;
        let (detection, present) = tracker.step(&candidates)?;
        track.push(TrackEntry {
            frame,
            detection,
            present,
        })?;
    }
    Ok(track)
}
