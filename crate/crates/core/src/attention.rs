//! Template attention over a feature pyramid.
//!
//! Each level gets a similarity map of per-cell inner products with the
//! template (a 1x1 cross-correlation), and every cell's feature vector is
//! then scaled by its score. Detection mode skips the module entirely,
//! which is the same as a uniform attention of one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{FeatureMap, FeaturePyramid};
use crate::template::TemplateVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    level: u32,
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(level: u32, height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::invalid(format!(
                "similarity map has {} scores, expected {height}x{width}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("similarity map contains non-finite scores"));
        }
        Ok(Self {
            level,
            height,
            width,
            scores,
        })
    }

    pub fn uniform(level: u32, height: usize, width: usize, value: f64) -> Self {
        Self::new(level, height, width, vec![value; height * width]).expect("finite uniform map")
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    /// Cell with the highest score; the first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Rescales scores into `[0, 1]` by the level's min and max. A constant
    /// map becomes all ones.
    pub fn min_max_normalized(&self) -> Self {
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scores = if hi > lo {
            self.scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; self.scores.len()]
        };
        Self { scores, ..*self }
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let data = self.scores.iter().map(|&s| s as f32).collect();
        FeatureMap::new(self.level, self.height, self.width, 1, data)
    }
}

pub fn similarity(level_map: &FeatureMap, template: &TemplateVector) -> Result<SimilarityMap> {
    if template.depth() != level_map.depth() {
        return Err(Error::invalid(format!(
            "template depth {} does not match level {} depth {}",
            template.depth(),
            level_map.level(),
            level_map.depth()
        )));
    }
    let t = template.values();
    let scores = level_map
        .data()
        .chunks_exact(level_map.depth())
        .map(|cell| cell.iter().zip(t).map(|(&f, &w)| f as f64 * w).sum())
        .collect();
    SimilarityMap::new(level_map.level(), level_map.height(), level_map.width(), scores)
}

pub fn reweight(level_map: &FeatureMap, sim: &SimilarityMap) -> Result<FeatureMap> {
    if sim.height != level_map.height() || sim.width != level_map.width() {
        return Err(Error::invalid(format!(
            "similarity map {}x{} does not match level {} grid {}x{}",
            sim.height,
            sim.width,
            level_map.level(),
            level_map.height(),
            level_map.width()
        )));
    }
    let d = level_map.depth();
    let mut data = level_map.data().to_vec();
    for (cell, &s) in data.chunks_exact_mut(d).zip(&sim.scores) {
        for v in cell {
            *v = (*v as f64 * s) as f32;
        }
    }
    FeatureMap::new(level_map.level(), level_map.height(), level_map.width(), d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Tracking,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionConfig {
    /// Min-max normalize each level's scores before reweighting.
    pub normalize_levels: bool,
}

pub fn similarity_maps(pyramid: &FeaturePyramid, template: &TemplateVector) -> Result<Vec<SimilarityMap>> {
    pyramid.levels().iter().map(|m| similarity(m, template)).collect()
}

pub fn attend_pyramid(pyramid: &FeaturePyramid, template: &TemplateVector, mode: AttentionMode) -> Result<FeaturePyramid> {
    attend_pyramid_with(pyramid, template, mode, AttentionConfig::default())
}

pub fn attend_pyramid_with(
    pyramid: &FeaturePyramid,
    template: &TemplateVector,
    mode: AttentionMode,
    config: AttentionConfig,
) -> Result<FeaturePyramid> {
    match mode {
        AttentionMode::Detection => Ok(pyramid.clone()),
        AttentionMode::Tracking => {
            let levels = pyramid
                .levels()
                .iter()
                .map(|m| {
                    let mut s = similarity(m, template)?;
                    if config.normalize_levels {
                        s = s.min_max_normalized();
                    }
                    reweight(m, &s)
                })
                .collect::<Result<Vec<_>>>()?;
            FeaturePyramid::new(pyramid.image_width(), pyramid.image_height(), levels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::TemplateKind;

    fn tpl(v: &[f64]) -> TemplateVector {
        TemplateVector::new(v.to_vec(), TemplateKind::Center).unwrap()
    }

    fn one_cell(v: &[f32]) -> FeatureMap {
        FeatureMap::new(2, 1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let m = one_cell(&[2.0, 0.0]);
        assert_eq!(similarity(&m, &tpl(&[1.0, 0.0])).unwrap().scores(), &[2.0]);
        assert_eq!(similarity(&m, &tpl(&[0.0, 0.0])).unwrap().scores(), &[0.0]);
        assert_eq!(similarity(&m, &tpl(&[0.0, 3.0])).unwrap().scores(), &[0.0]);
        assert!(similarity(&m, &tpl(&[1.0])).is_err());
    }

    #[test]
    fn negative_scores_pass_through() {
        let m = one_cell(&[1.0, 1.0]);
        let s = similarity(&m, &tpl(&[-2.0, 0.5])).unwrap();
        assert_eq!(s.scores(), &[-1.5]);
        assert_eq!(reweight(&m, &s).unwrap().data(), &[-1.5, -1.5]);
    }

    #[test]
    fn reweight_examples() {
        let m = one_cell(&[2.0, 0.0]);
        let two = SimilarityMap::uniform(2, 1, 1, 2.0);
        assert_eq!(reweight(&m, &two).unwrap().data(), &[4.0, 0.0]);
        let ones = SimilarityMap::uniform(2, 1, 1, 1.0);
        assert_eq!(reweight(&m, &ones).unwrap(), m);
        let zero = SimilarityMap::uniform(2, 1, 1, 0.0);
        assert_eq!(reweight(&m, &zero).unwrap().data(), &[0.0, 0.0]);
        assert!(reweight(&m, &SimilarityMap::uniform(2, 2, 1, 1.0)).is_err());
    }

    #[test]
    fn tracking_mode_orthogonal_template_zeroes_pyramid() {
        let a = FeatureMap::new(2, 2, 2, 2, vec![1.0, 0.0, 3.0, 0.0, -2.0, 0.0, 0.5, 0.0]).unwrap();
        let b = FeatureMap::new(3, 1, 1, 2, vec![7.0, 0.0]).unwrap();
        let p = FeaturePyramid::new(8, 8, vec![a, b]).unwrap();
        let out = attend_pyramid(&p, &tpl(&[0.0, 1.0]), AttentionMode::Tracking).unwrap();
        assert!(out.levels().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        let same = attend_pyramid(&p, &tpl(&[0.0, 1.0]), AttentionMode::Detection).unwrap();
        assert_eq!(same, p);
    }

    #[test]
    fn argmax_and_normalization() {
        let s = SimilarityMap::new(2, 2, 2, vec![0.0, 3.0, 3.0, -1.0]).unwrap();
        assert_eq!(s.argmax(), (0, 1));
        let n = s.min_max_normalized();
        assert_eq!(n.scores(), &[0.25, 1.0, 1.0, 0.0]);
        assert_eq!(SimilarityMap::uniform(2, 1, 2, 5.0).min_max_normalized().scores(), &[1.0, 1.0]);
        assert!(SimilarityMap::new(2, 1, 2, vec![1.0]).is_err());
    }
}
