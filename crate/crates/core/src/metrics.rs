//! Tracking and segmentation benchmark metrics: box and mask IoU, GOT-style
//! average overlap and success rate, OxUvA presence rates with ROC AUC,
//! long-term precision/recall/F, and DAVIS region-similarity statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{BoundingBox, Mask};
use crate::tracker::Track;

pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_LOCALIZATION_THRESHOLD: f64 = 0.5;

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// `|a ∩ b| / |a ∪ b|`; 1 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (ia, ib) = (a.intervals(), b.intervals());
    let (mut i, mut j, mut inter) = (0, 0, 0u64);
    while i < ia.len() && j < ib.len() {
        let lo = ia[i].0.max(ib[j].0);
        let hi = ia[i].1.min(ib[j].1);
        if hi > lo {
            inter += hi - lo;
        }
        if ia[i].1 < ib[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundtruthEntry {
    pub frame: usize,
    pub present: bool,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundtruthSequence {
    entries: Vec<GroundtruthEntry>,
}

impl GroundtruthSequence {
    pub fn new(entries: Vec<GroundtruthEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.present && e.bbox.is_none()) {
            return Err(Error::invalid(format!("groundtruth frame {} is present but has no box", e.frame)));
        }
        if entries.windows(2).any(|p| p[1].frame <= p[0].frame) {
            return Err(Error::invalid("groundtruth frame indices must be strictly increasing"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[GroundtruthEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-frame `(confidence, gt_present, overlap)`, overlap 0 when the target
/// is absent.
struct Aligned {
    confidence: f64,
    present: bool,
    overlap: f64,
}

fn align(track: &Track, gt: &GroundtruthSequence) -> Result<Vec<Aligned>> {
    if track.len() != gt.len() {
        return Err(Error::invalid(format!(
            "track has {} frames, groundtruth has {}",
            track.len(),
            gt.len()
        )));
    }
    track
        .entries()
        .iter()
        .zip(gt.entries())
        .map(|(t, g)| {
            if t.frame != g.frame {
                return Err(Error::invalid(format!(
                    "frame mismatch: track frame {} vs groundtruth frame {}",
                    t.frame, g.frame
                )));
            }
            let overlap = match (&g.bbox, g.present) {
                (Some(b), true) => box_iou(&t.detection.bbox, b),
                _ => 0.0,
            };
            Ok(Aligned {
                confidence: t.detection.confidence,
                present: g.present,
                overlap,
            })
        })
        .collect()
}

/// Per-frame box IoU with groundtruth; `None` where the target is absent.
pub fn frame_overlaps(track: &Track, gt: &GroundtruthSequence) -> Result<Vec<Option<f64>>> {
    Ok(align(track, gt)?
        .into_iter()
        .map(|a| a.present.then_some(a.overlap))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AverageOverlap {
    pub ao: f64,
    pub sr: f64,
}

pub fn average_overlap(track: &Track, gt: &GroundtruthSequence) -> Result<AverageOverlap> {
    average_overlap_with(track, gt, DEFAULT_SUCCESS_THRESHOLD)
}

pub fn average_overlap_with(track: &Track, gt: &GroundtruthSequence, success_threshold: f64) -> Result<AverageOverlap> {
    let overlaps: Vec<f64> = frame_overlaps(track, gt)?.into_iter().flatten().collect();
    overlap_stats(&overlaps, success_threshold)
}

/// AO and SR over a list of per-frame overlaps.
pub fn overlap_stats(overlaps: &[f64], success_threshold: f64) -> Result<AverageOverlap> {
    if overlaps.is_empty() {
        return Err(Error::UndefinedMetric("average overlap needs at least one present frame".into()));
    }
    let n = overlaps.len() as f64;
    Ok(AverageOverlap {
        ao: overlaps.iter().sum::<f64>() / n,
        sr: overlaps.iter().filter(|&&o| o > success_threshold).count() as f64 / n,
    })
}

/// Presence rates; a rate is `None` when its denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresenceRates {
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
}

impl PresenceRates {
    pub fn tpr(&self) -> Result<f64> {
        self.tpr
            .ok_or_else(|| Error::UndefinedMetric("TPR needs at least one frame with the target present".into()))
    }

    pub fn tnr(&self) -> Result<f64> {
        self.tnr
            .ok_or_else(|| Error::UndefinedMetric("TNR needs at least one frame with the target absent".into()))
    }

    pub fn gm(&self) -> Result<f64> {
        Ok(geometric_mean(self.tpr()?, self.tnr()?))
    }
}

pub fn oxuva_rates(track: &Track, gt: &GroundtruthSequence, theta: f64) -> Result<PresenceRates> {
    oxuva_rates_with(track, gt, theta, DEFAULT_LOCALIZATION_THRESHOLD)
}

pub fn oxuva_rates_with(track: &Track, gt: &GroundtruthSequence, theta: f64, localization: f64) -> Result<PresenceRates> {
    Ok(rates_at(&align(track, gt)?, theta, localization))
}

fn rates_at(frames: &[Aligned], theta: f64, localization: f64) -> PresenceRates {
    let (mut pos, mut tp, mut neg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for f in frames {
        let predicted = f.confidence >= theta;
        if f.present {
            pos += 1;
            tp += usize::from(predicted && f.overlap > localization);
        } else {
            neg += 1;
            tn += usize::from(!predicted);
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    PresenceRates {
        tpr: rate(tp, pos),
        tnr: rate(tn, neg),
    }
}

pub fn geometric_mean(tpr: f64, tnr: f64) -> f64 {
    (tpr * tnr).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub auc: f64,
    /// `(FPR, TPR)` points in increasing FPR order, swept from the strictest
    /// threshold (nothing predicted present) to the loosest.
    pub points: Vec<(f64, f64)>,
}

pub fn roc_auc(track: &Track, gt: &GroundtruthSequence) -> Result<RocCurve> {
    roc_auc_with(track, gt, DEFAULT_LOCALIZATION_THRESHOLD)
}

pub fn roc_auc_with(track: &Track, gt: &GroundtruthSequence, localization: f64) -> Result<RocCurve> {
    let frames = align(track, gt)?;
    let mut thresholds: Vec<f64> = frames.iter().map(|f| f.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for theta in std::iter::once(f64::INFINITY).chain(thresholds) {
        let r = rates_at(&frames, theta, localization);
        points.push((1.0 - r.tnr()?, r.tpr()?));
    }
    let auc = points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0)
        .sum();
    Ok(RocCurve { auc, points })
}

pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTermPrf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub threshold: f64,
    /// `(threshold, precision, recall, f)` for every candidate threshold.
    pub curve: Vec<(f64, f64, f64, f64)>,
}

pub fn longterm_prf(track: &Track, gt: &GroundtruthSequence) -> Result<LongTermPrf> {
    let frames = align(track, gt)?;
    let n_present = frames.iter().filter(|f| f.present).count();
    if n_present == 0 {
        return Err(Error::UndefinedMetric("recall needs at least one frame with the target present".into()));
    }
    let mut thresholds: Vec<f64> = frames.iter().map(|f| f.confidence).collect();
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();
    let mut curve = Vec::with_capacity(thresholds.len());
    for theta in thresholds {
        let predicted: Vec<&Aligned> = frames.iter().filter(|f| f.confidence >= theta).collect();
        let precision = if predicted.is_empty() {
            0.0
        } else {
            predicted.iter().map(|f| f.overlap).sum::<f64>() / predicted.len() as f64
        };
        let recall = predicted.iter().filter(|f| f.present).map(|f| f.overlap).sum::<f64>() / n_present as f64;
        curve.push((theta, precision, recall, f_measure(precision, recall)));
    }
    let best = curve
        .iter()
        .enumerate()
        .fold(0, |best, (i, c)| if c.3 > curve[best].3 { i } else { best });
    let (threshold, precision, recall, f) = curve[best];
    Ok(LongTermPrf {
        precision,
        recall,
        f,
        threshold,
        curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JStatistics {
    pub mean: f64,
    pub recall: f64,
    /// `None` for sequences shorter than four frames.
    pub decay: Option<f64>,
}

impl JStatistics {
    pub fn decay(&self) -> Result<f64> {
        self.decay
            .ok_or_else(|| Error::UndefinedMetric("J decay needs at least four frames".into()))
    }
}

pub fn davis_j(track_masks: &[Mask], gt_masks: &[Mask]) -> Result<JStatistics> {
    if track_masks.len() != gt_masks.len() {
        return Err(Error::invalid(format!(
            "{} predicted masks vs {} groundtruth masks",
            track_masks.len(),
            gt_masks.len()
        )));
    }
    let j = track_masks
        .iter()
        .zip(gt_masks)
        .map(|(a, b)| mask_iou(a, b))
        .collect::<Result<Vec<_>>>()?;
    j_statistics(&j)
}

/// Mean, recall (`J > 0.5`) and decay over per-frame J values. Decay is the
/// mean of the first temporal quartile minus that of the last, with the
/// quartile boundaries placed as in the DAVIS toolkit.
pub fn j_statistics(j: &[f64]) -> Result<JStatistics> {
    if j.is_empty() {
        return Err(Error::UndefinedMetric("J statistics need at least one frame".into()));
    }
    let n = j.len();
    let mean = j.iter().sum::<f64>() / n as f64;
    let recall = j.iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
    let decay = (n >= 4).then(|| {
        let bounds: Vec<usize> = (0..=4)
            .map(|i| {
                let pos = 1.0 + (n as f64 - 1.0) * i as f64 / 4.0;
                (pos + 1e-10).round() as usize - 1
            })
            .collect();
        let bin_mean = |b: usize| {
            let s = &j[bounds[b]..=bounds[b + 1]];
            s.iter().sum::<f64>() / s.len() as f64
        };
        bin_mean(0) - bin_mean(3)
    });
    Ok(JStatistics { mean, recall, decay })
}

/// Named scalar results and curves for one evaluation protocol.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub protocol: String,
    /// `None` marks an undefined metric.
    pub scalars: BTreeMap<String, Option<f64>>,
    pub curves: BTreeMap<String, Vec<Vec<f64>>>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(protocol: &str) -> Self {
        Self {
            protocol: protocol.to_string(),
            ..Self::default()
        }
    }

    pub fn scalar(&mut self, name: &str, value: Option<f64>) -> &mut Self {
        self.scalars.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied().flatten()
    }

    /// Byte-stable JSON: sorted keys, numbers with six significant digits.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        out.push_str("  \"curves\": {");
        let curves: Vec<String> = self
            .curves
            .iter()
            .map(|(k, rows)| {
                let rows: Vec<String> = rows
                    .iter()
                    .map(|r| format!("[{}]", r.iter().map(|&v| format_sig6(v)).collect::<Vec<_>>().join(", ")))
                    .collect();
                format!("\n    {}: [{}]", json_string(k), rows.join(", "))
            })
            .collect();
        out.push_str(&curves.join(","));
        out.push_str(if curves.is_empty() { "},\n" } else { "\n  },\n" });
        let notes: Vec<String> = self.notes.iter().map(|n| json_string(n)).collect();
        out.push_str(&format!("  \"notes\": [{}],\n", notes.join(", ")));
        out.push_str(&format!("  \"protocol\": {},\n", json_string(&self.protocol)));
        out.push_str("  \"results\": {");
        let scalars: Vec<String> = self
            .scalars
            .iter()
            .map(|(k, v)| {
                let v = v.map_or_else(|| "null".to_string(), format_sig6);
                format!("\n    {}: {v}", json_string(k))
            })
            .collect();
        out.push_str(&scalars.join(","));
        out.push_str(if scalars.is_empty() { "}\n" } else { "\n  }\n" });
        out.push_str("}\n");
        out
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Six significant digits in fixed notation (scientific outside
/// `1e-4 ..= 1e6`). Non-finite values become `null`.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() {
        return "null".into();
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let exp = v.abs().log10().floor() as i32;
    // rounding can carry into the next decade, e.g. 9.999999 -> 10.0000
    let rounded = format!("{:.5e}", v);
    let exp = rounded
        .split('e')
        .nth(1)
        .and_then(|e| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if !(-4..6).contains(&exp) {
        return rounded;
    }
    let decimals = (5 - exp).max(0) as usize;
    format!("{:.*}", decimals, v)
}

/// Mean of each scalar across reports keyed by sequence id, reduced in id
/// order. A scalar undefined in every report stays undefined.
pub fn aggregate(protocol: &str, reports: &BTreeMap<String, MetricReport>) -> MetricReport {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for report in reports.values() {
        for (k, v) in &report.scalars {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            if let Some(v) = v {
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let mut out = MetricReport::new(protocol);
    for (k, (sum, n)) in sums {
        out.scalar(&k, (n > 0).then(|| sum / n as f64));
    }
    out.notes.push(format!("mean over {} sequences: {}", reports.len(), reports.keys().cloned().collect::<Vec<_>>().join(", ")));
    out
}
