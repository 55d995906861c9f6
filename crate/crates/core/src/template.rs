//! Object templates: the center feature, the sampled-mean baselines, and the
//! closed-form ridge-regression discriminative template with its backward
//! pass.
//!
//! The ridge template minimizes `‖A t − y‖² + λ‖t‖²` where row 0 of `A` is the
//! positive template, the remaining rows are sampled negatives and
//! `y = (1, 0, …, 0)`. The minimizer is `(AᵀA + λI)⁻¹ Aᵀ y`, computed with a
//! Cholesky factorization rather than an explicit inverse.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{center_cell, extract_template_with, BoundingBox, FeaturePyramid, LevelConfig};

/// Systems whose estimated condition number exceeds this are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Center,
    MeanPos,
    MeanDiff,
    Ridge,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::Center,
        TemplateKind::MeanPos,
        TemplateKind::MeanDiff,
        TemplateKind::Ridge,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateVector {
    values: Vec<f64>,
    kind: TemplateKind,
}

impl TemplateVector {
    pub fn new(values: Vec<f64>, kind: TemplateKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("template must have at least one value"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("template contains non-finite values"));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn depth(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            kind: self.kind,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n > 0.0 {
        (dot(a, b) / n).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Ridge problem with the positive template in row 0 of the data matrix and
/// labels `(1, 0, …, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    data: DMatrix<f64>,
    labels: DVector<f64>,
    lambda: f64,
}

impl RegressionProblem {
    pub fn new(positive: &[f64], negatives: &[Vec<f64>], lambda: f64) -> Result<Self> {
        let d = positive.len();
        if let Some(n) = negatives.iter().find(|n| n.len() != d) {
            return Err(Error::invalid(format!(
                "negative has depth {}, template has depth {d}",
                n.len()
            )));
        }
        let rows = 1 + negatives.len();
        let data = DMatrix::from_fn(rows, d, |r, c| {
            if r == 0 {
                positive[c]
            } else {
                negatives[r - 1][c]
            }
        });
        Self::from_matrix(data, lambda)
    }

    pub fn from_matrix(data: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("data matrix must be non-empty"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if lambda == 0.0 && data.nrows() < data.ncols() {
            return Err(Error::invalid(format!(
                "lambda must be > 0 when the data matrix has fewer rows ({}) than columns ({})",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data matrix contains non-finite values"));
        }
        let mut labels = DVector::zeros(data.nrows());
        labels[0] = 1.0;
        Ok(Self { data, labels, lambda })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn depth(&self) -> usize {
        self.data.ncols()
    }

    pub fn num_negatives(&self) -> usize {
        self.data.nrows() - 1
    }

    /// `‖A t − y‖² + λ‖t‖²`.
    pub fn objective(&self, t: &[f64]) -> f64 {
        let t = DVector::from_column_slice(t);
        let r = &self.data * &t - &self.labels;
        r.norm_squared() + self.lambda * t.norm_squared()
    }

    fn factor(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let d = self.depth();
        let gram = self.data.transpose() * &self.data + DMatrix::identity(d, d) * self.lambda;
        let chol = gram.cholesky().ok_or_else(|| Error::Solver {
            reason: "AᵀA + λI is not positive definite".into(),
            lambda: self.lambda,
        })?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
        let cond = (hi / lo).powi(2);
        if !(cond <= CONDITION_LIMIT) {
            return Err(Error::Solver {
                reason: format!("condition estimate {cond:.3e} exceeds {CONDITION_LIMIT:.0e}"),
                lambda: self.lambda,
            });
        }
        Ok(chol)
    }
}

/// Discriminative template `(AᵀA + λI)⁻¹ Aᵀ y`.
pub fn solve_ridge(problem: &RegressionProblem) -> Result<TemplateVector> {
    let chol = problem.factor()?;
    let rhs = problem.data.transpose() * &problem.labels;
    let t = chol.solve(&rhs);
    TemplateVector::new(t.iter().copied().collect(), TemplateKind::Ridge)
}

/// Gradient of `L = gᵀ t(A)` with respect to the data matrix, where `t(A)`
/// is the ridge solution. With `M = (AᵀA + λI)⁻¹` and `h = M g` this is
/// `(y − A t) hᵀ − (A h) tᵀ`.
pub fn ridge_backward(problem: &RegressionProblem, upstream: &[f64]) -> Result<DMatrix<f64>> {
    if upstream.len() != problem.depth() {
        return Err(Error::invalid(format!(
            "upstream gradient has length {}, expected {}",
            upstream.len(),
            problem.depth()
        )));
    }
    let chol = problem.factor()?;
    let a = &problem.data;
    let t = chol.solve(&(a.transpose() * &problem.labels));
    let h = chol.solve(&DVector::from_column_slice(upstream));
    let residual = &problem.labels - a * &t;
    let ah = a * &h;
    Ok(residual * h.transpose() - ah * t.transpose())
}

pub fn template_mean_pos(positives: &[Vec<f64>]) -> Result<TemplateVector> {
    let m = mean(positives, "positives")?;
    TemplateVector::new(m, TemplateKind::MeanPos)
}

pub fn template_mean_diff(positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<TemplateVector> {
    let p = mean(positives, "positives")?;
    let n = mean(negatives, "negatives")?;
    if p.len() != n.len() {
        return Err(Error::invalid("positives and negatives differ in depth"));
    }
    TemplateVector::new(p.iter().zip(&n).map(|(a, b)| a - b).collect(), TemplateKind::MeanDiff)
}

fn mean(vectors: &[Vec<f64>], what: &str) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} must be non-empty")))?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        if v.len() != d {
            return Err(Error::invalid(format!("{what} have inconsistent depth")));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Sampled feature vectors; `shortfall` counts how many fewer than requested
/// were available.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    pub shortfall: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NegativeSampling {
    /// Draw an equal share from every level instead of uniformly over cells.
    pub balanced_levels: bool,
}

fn read_cell(pyramid: &FeaturePyramid, (level, r, c): (u32, usize, usize)) -> Vec<f64> {
    let map = pyramid.level(level).expect("cell from this pyramid");
    map.cell(r, c).iter().map(|&v| v as f64).collect()
}

fn draw(cells: &[(u32, usize, usize)], n: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, usize, usize)> {
    let n = n.min(cells.len());
    index::sample(rng, cells.len(), n).iter().map(|i| cells[i]).collect()
}

/// `q` features drawn uniformly over all levels from cells whose center lies
/// outside `gt_box`.
pub fn sample_negatives(pyramid: &FeaturePyramid, gt_box: &BoundingBox, q: usize, seed: u64) -> Result<Sample> {
    sample_negatives_with(pyramid, gt_box, q, seed, NegativeSampling::default())
}

pub fn sample_negatives_with(
    pyramid: &FeaturePyramid,
    gt_box: &BoundingBox,
    q: usize,
    seed: u64,
    options: NegativeSampling,
) -> Result<Sample> {
    if q == 0 {
        return Err(Error::invalid("number of negatives must be at least 1"));
    }
    let outside = |map: &crate::pyramid::FeatureMap| -> Vec<(u32, usize, usize)> {
        map.cells()
            .filter(|&(r, c)| {
                let (px, py) = map.cell_center(r, c);
                !gt_box.contains(px, py)
            })
            .map(|(r, c)| (map.level(), r, c))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = if options.balanced_levels {
        let levels = pyramid.levels();
        let per = q / levels.len();
        let extra = q % levels.len();
        levels
            .iter()
            .enumerate()
            .flat_map(|(i, map)| {
                let want = per + usize::from(i < extra);
                draw(&outside(map), want, &mut rng)
            })
            .collect::<Vec<_>>()
    } else {
        let all: Vec<_> = pyramid.levels().iter().flat_map(outside).collect();
        draw(&all, q, &mut rng)
    };
    Ok(Sample {
        shortfall: q - chosen.len(),
        features: chosen.into_iter().map(|cell| read_cell(pyramid, cell)).collect(),
    })
}

/// `p` features from the assigned level of `gt_box`; the center cell is
/// always first, the rest are drawn from cells centered inside the box.
pub fn sample_positives(pyramid: &FeaturePyramid, gt_box: &BoundingBox, p: usize, seed: u64) -> Result<Sample> {
    sample_positives_with(pyramid, gt_box, p, seed, &LevelConfig::default())
}

pub fn sample_positives_with(
    pyramid: &FeaturePyramid,
    gt_box: &BoundingBox,
    p: usize,
    seed: u64,
    config: &LevelConfig,
) -> Result<Sample> {
    if p == 0 {
        return Err(Error::invalid("number of positives must be at least 1"));
    }
    let level = pyramid.assign_level(gt_box, config)?;
    let center = center_cell(gt_box, pyramid, level)?;
    let map = pyramid.level(level).expect("assigned level exists");
    let inside: Vec<_> = map
        .cells()
        .filter(|&rc| rc != center && {
            let (px, py) = map.cell_center(rc.0, rc.1);
            gt_box.contains(px, py)
        })
        .map(|(r, c)| (level, r, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = vec![(level, center.0, center.1)];
    cells.extend(draw(&inside, p - 1, &mut rng));
    Ok(Sample {
        shortfall: p - cells.len(),
        features: cells.into_iter().map(|cell| read_cell(pyramid, cell)).collect(),
    })
}

/// How to build the tracking template from the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateConfig {
    pub kind: TemplateKind,
    pub lambda: f64,
    pub negatives: usize,
    pub positives: usize,
    pub seed: u64,
    pub balanced_levels: bool,
    /// L2-normalize every sampled feature before combining.
    pub normalize: bool,
    pub levels: LevelConfig,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            kind: TemplateKind::Ridge,
            lambda: 0.1,
            negatives: 256,
            positives: 16,
            seed: 0,
            balanced_levels: false,
            normalize: false,
            levels: LevelConfig::default(),
        }
    }
}

impl TemplateConfig {
    pub fn with_kind(kind: TemplateKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

pub fn build_template(pyramid: &FeaturePyramid, gt_box: &BoundingBox, config: &TemplateConfig) -> Result<TemplateVector> {
    let prep = |mut vs: Vec<Vec<f64>>| {
        if config.normalize {
            vs.iter_mut().for_each(|v| *v = l2_normalized(v));
        }
        vs
    };
    let negatives = || -> Result<Vec<Vec<f64>>> {
        let options = NegativeSampling {
            balanced_levels: config.balanced_levels,
        };
        // offset keeps the negative stream independent of the positive one
        let s = sample_negatives_with(pyramid, gt_box, config.negatives, config.seed ^ 0x9e37_79b9, options)?;
        Ok(prep(s.features))
    };
    let positives = || -> Result<Vec<Vec<f64>>> {
        let s = sample_positives_with(pyramid, gt_box, config.positives, config.seed, &config.levels)?;
        Ok(prep(s.features))
    };
    match config.kind {
        TemplateKind::Center => {
            let t = extract_template_with(pyramid, gt_box, &config.levels)?;
            let values = prep(vec![t.values().to_vec()]).remove(0);
            TemplateVector::new(values, TemplateKind::Center)
        }
        TemplateKind::MeanPos => template_mean_pos(&positives()?),
        TemplateKind::MeanDiff => template_mean_diff(&positives()?, &negatives()?),
        TemplateKind::Ridge => {
            let t = extract_template_with(pyramid, gt_box, &config.levels)?;
            let t = prep(vec![t.values().to_vec()]).remove(0);
            let problem = RegressionProblem::new(&t, &negatives()?, config.lambda)?;
            solve_ridge(&problem)
        }
    }
}
