mod common;

use common::{bits, random_pyramid, Suite};
use dtrack::attention::{reweight, similarity};
use dtrack::io::{self, CandidateRecord, TemplateRecord};
use dtrack::metrics::{
    average_overlap, box_iou, geometric_mean, j_statistics, longterm_prf, roc_auc, GroundtruthEntry, GroundtruthSequence,
};
use dtrack::pyramid::{extract_template, FeaturePyramid, LevelConfig, Mask};
use dtrack::synth::{self, Scene};
use dtrack::template::{
    build_template, dot, ridge_backward, sample_negatives, solve_ridge, RegressionProblem, TemplateConfig, TemplateKind,
    TemplateVector,
};
use dtrack::tracker::{Detection, Track, TrackEntry};
use dtrack::BoundingBox;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn pyramid(seed: u64) -> FeaturePyramid {
    random_pyramid(&mut ChaCha8Rng::seed_from_u64(seed), false)
}

fn template_for(p: &FeaturePyramid, seed: u64) -> TemplateVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TemplateVector::new((0..p.depth()).map(|_| rng.sample(StandardNormal)).collect(), TemplateKind::Ridge).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..100.0f64, 0.0..100.0f64, 1.0..60.0f64, 1.0..60.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

/// Track and groundtruth over the same frames, with a confidence per frame.
fn arb_sequence() -> impl Strategy<Value = (Track, GroundtruthSequence)> {
    prop::collection::vec((arb_box(), arb_box(), 0.0..=1.0f64, any::<bool>(), prop::bool::weighted(0.8)), 2..30).prop_map(|rows| {
        let track = Track::new(
            rows.iter()
                .enumerate()
                .map(|(i, (p, _, c, present, _))| TrackEntry {
                    frame: i,
                    detection: Detection::new(*p, *c, None).unwrap(),
                    present: *present,
                })
                .collect(),
        )
        .unwrap();
        let gt = GroundtruthSequence::new(
            rows.iter()
                .enumerate()
                .map(|(i, (_, g, _, _, present))| GroundtruthEntry {
                    frame: i,
                    present: *present,
                    bbox: present.then_some(*g),
                    mask: None,
                })
                .collect(),
        )
        .unwrap();
        (track, gt)
    })
}

fn with_confidences(track: &Track, f: impl Fn(f64) -> f64) -> Track {
    Track::new(
        track
            .entries()
            .iter()
            .map(|e| TrackEntry {
                detection: Detection::new(e.detection.bbox, f(e.detection.confidence), None).unwrap(),
                ..e.clone()
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn extract_template_is_bitwise_deterministic(seed in any::<u64>(), b in arb_box()) {
        let p = pyramid(seed);
        let a = extract_template(&p, &b).unwrap();
        let c = extract_template(&pyramid(seed), &b).unwrap();
        prop_assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ridge_without_negatives_is_colinear(values in prop::collection::vec(-3.0..3.0f64, 1..32), lambda in 0.001..10.0f64) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-3));
        let t = solve_ridge(&RegressionProblem::new(&values, &[], lambda).unwrap()).unwrap();
        let scale = dot(&values, &values) + lambda;
        for (got, v) in t.values().iter().zip(&values) {
            prop_assert!(close(*got, v / scale, 1e-10));
        }
        prop_assert!(close(dtrack::template::cosine(t.values(), &values), 1.0, 1e-12));
    }

    #[test]
    fn ridge_backward_is_linear_in_upstream(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (rng.random_range(1..12usize), rng.random_range(1..10usize));
        let data = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let problem = RegressionProblem::from_matrix(data, 0.1).unwrap();
        let g1: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        let g2: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        let mixed: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let lhs = ridge_backward(&problem, &mixed).unwrap();
        let rhs = ridge_backward(&problem, &g1).unwrap() * a + ridge_backward(&problem, &g2).unwrap() * b;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!(close(*l, *r, 1e-9));
        }
    }

    #[test]
    fn reweight_is_homogeneous(seed in any::<u64>(), s in 0.01..100.0f64) {
        let p = pyramid(seed);
        let t = template_for(&p, seed ^ 1);
        let ts = t.scaled(s);
        for m in p.levels() {
            let (sim, sim_s) = (similarity(m, &t).unwrap(), similarity(m, &ts).unwrap());
            for (a, b) in sim.scores().iter().zip(sim_s.scores()) {
                prop_assert!(close(a * s, *b, 1e-9));
            }
            prop_assert_eq!(sim.argmax(), sim_s.argmax());
            let (out, out_s) = (reweight(m, &sim).unwrap(), reweight(m, &sim_s).unwrap());
            for (a, b) in out.data().iter().zip(out_s.data()) {
                prop_assert!(close(*a as f64 * s, *b as f64, 1e-5));
            }
        }
    }

    #[test]
    fn similarity_is_linear_in_template(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let p = pyramid(seed);
        let (t1, t2) = (template_for(&p, seed ^ 2), template_for(&p, seed ^ 3));
        let mixed = TemplateVector::new(
            t1.values().iter().zip(t2.values()).map(|(x, y)| a * x + b * y).collect(),
            TemplateKind::Ridge,
        )
        .unwrap();
        for m in p.levels() {
            let (s1, s2, s) = (similarity(m, &t1).unwrap(), similarity(m, &t2).unwrap(), similarity(m, &mixed).unwrap());
            for ((x, y), z) in s1.scores().iter().zip(s2.scores()).zip(s.scores()) {
                let expected = a * x + b * y;
                prop_assert!((expected - z).abs() <= 1e-9 * (a.abs() * x.abs() + b.abs() * y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn box_iou_is_one_only_for_equal_boxes(a in arb_box(), dx in -1.0..1.0f64, dw in -0.5..0.5f64) {
        prop_assert!(close(box_iou(&a, &a), 1.0, 1e-12));
        let b = BoundingBox::new(a.x + dx, a.y, a.w + dw, a.h).unwrap();
        if dx != 0.0 || dw != 0.0 {
            prop_assert!(box_iou(&a, &b) < 1.0);
        }
    }

    #[test]
    fn roc_auc_ignores_monotone_rescaling((track, gt) in arb_sequence()) {
        prop_assume!(gt.entries().iter().any(|e| e.present) && gt.entries().iter().any(|e| !e.present));
        let base = roc_auc(&track, &gt).unwrap().auc;
        let squared = roc_auc(&with_confidences(&track, |c| c * c), &gt).unwrap().auc;
        let shrunk = roc_auc(&with_confidences(&track, |c| 0.1 + 0.5 * c), &gt).unwrap().auc;
        prop_assert!(close(base, squared, 1e-12));
        prop_assert!(close(base, shrunk, 1e-12));
    }

    #[test]
    fn average_overlap_ignores_frame_order((track, gt) in arb_sequence(), seed in any::<u64>()) {
        prop_assume!(gt.entries().iter().any(|e| e.present));
        let n = track.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled_track = Track::new(
            order.iter().enumerate().map(|(f, &i)| TrackEntry { frame: f, ..track.entries()[i].clone() }).collect(),
        )
        .unwrap();
        let shuffled_gt = GroundtruthSequence::new(
            order.iter().enumerate().map(|(f, &i)| GroundtruthEntry { frame: f, ..gt.entries()[i].clone() }).collect(),
        )
        .unwrap();
        let (a, b) = (average_overlap(&track, &gt).unwrap(), average_overlap(&shuffled_track, &shuffled_gt).unwrap());
        prop_assert!(close(a.ao, b.ao, 1e-12));
        prop_assert!(close(a.sr, b.sr, 1e-12));
    }

    #[test]
    fn geometric_mean_is_bounded_by_max(tpr in 0.0..=1.0f64, tnr in 0.0..=1.0f64) {
        prop_assert!(geometric_mean(tpr, tnr) <= tpr.max(tnr) + 1e-15);
        prop_assert!(close(geometric_mean(tpr, tpr), tpr, 1e-15));
    }

    #[test]
    fn longterm_threshold_maximizes_f((track, gt) in arb_sequence()) {
        prop_assume!(gt.entries().iter().any(|e| e.present));
        let prf = longterm_prf(&track, &gt).unwrap();
        for &(_, _, _, f) in &prf.curve {
            prop_assert!(prf.f >= f);
        }
    }

    #[test]
    fn candidate_and_template_files_roundtrip(boxes in prop::collection::vec((arb_box(), prop::option::of(0.0..=1.0f64), any::<bool>()), 0..10),
                                              values in prop::collection::vec(-1e3..1e3f64, 1..20), lambda in 1e-6..10.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<CandidateRecord> = boxes
            .iter()
            .map(|(b, c, m)| CandidateRecord { bbox: *b, confidence: *c, mask: m.then(|| Mask::from_box(b, 32, 40)) })
            .collect();
        let path = dir.path().join("c.json");
        io::write_candidates(&records, &path).unwrap();
        prop_assert_eq!(io::read_candidates(&path).unwrap(), records);
        let record = TemplateRecord::new(&TemplateVector::new(values, TemplateKind::MeanDiff).unwrap(), lambda);
        let path = dir.path().join("t.json");
        io::write_json(&record, &path).unwrap();
        prop_assert_eq!(io::read_json::<TemplateRecord>(&path).unwrap(), record);
    }
}

#[test]
fn j_decay_depends_on_frame_order() {
    let forward = j_statistics(&[1.0, 1.0, 0.2, 0.2]).unwrap();
    let backward = j_statistics(&[0.2, 0.2, 1.0, 1.0]).unwrap();
    assert!(close(forward.mean, backward.mean, 1e-12));
    assert!(forward.decay.unwrap() > 0.0);
    assert!(backward.decay.unwrap() < 0.0);
}

#[test]
fn rendering_is_deterministic_under_seed() {
    let suite = Suite::default();
    for seed in 0..5 {
        let (a, b) = (suite.scene(seed), suite.scene(seed));
        for f in [0, 17, 49] {
            let (ra, rb) = (synth::render_frame(&a, f).unwrap(), synth::render_frame(&b, f).unwrap());
            assert_eq!(bits(&ra.pyramid), bits(&rb.pyramid));
            assert_eq!(ra.truths, rb.truths);
        }
    }
}

fn first_frame(scene: &Scene) -> (FeaturePyramid, BoundingBox) {
    let frame = synth::render_frame(scene, 0).unwrap();
    (frame.pyramid, scene.target_box(0).unwrap())
}

#[test]
fn ridge_margin_beats_scaled_center_on_distractor_suite() {
    let suite = Suite { overlap: 0.8, ..Suite::default() };
    for seed in 0..20 {
        let (p, b) = first_frame(&suite.scene(seed));
        let center = extract_template(&p, &b).unwrap();
        let negatives = sample_negatives(&p, &b, 256, seed).unwrap().features;
        let t = solve_ridge(&RegressionProblem::new(center.values(), &negatives, 0.1).unwrap()).unwrap();
        let response = dot(center.values(), t.values());
        let margin = |v: &[f64], positive: f64| positive - negatives.iter().map(|n| dot(n, v)).fold(f64::NEG_INFINITY, f64::max);
        let scaled = center.scaled(response / dot(center.values(), center.values()));
        let (ridge, baseline) = (margin(t.values(), response), margin(scaled.values(), response));
        assert!(ridge >= baseline, "seed {seed}: ridge margin {ridge} < center margin {baseline}");
    }
}

#[test]
fn ridge_attention_peaks_inside_target() {
    let suite = Suite { overlap: 0.8, ..Suite::default() };
    let levels = LevelConfig::default();
    for seed in 0..20 {
        let scene = suite.scene(seed);
        let (p, b) = first_frame(&scene);
        let template = build_template(&p, &b, &TemplateConfig { seed, ..TemplateConfig::default() }).unwrap();
        let level = p.assign_level(&b, &levels).unwrap();
        let map = p.level(level).unwrap();
        let (r, c) = similarity(map, &template).unwrap().argmax();
        let (x, y) = map.cell_center(r, c);
        assert!(b.contains(x, y), "seed {seed}: peak at ({x}, {y}) outside {b:?}");
    }
}
