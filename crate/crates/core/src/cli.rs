//! Command-line entry point. Diagnostics go to stderr; results go to files
//! or stdout. Exit status is 0 on success, 1 on user error and 2 on internal
//! error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{attend_pyramid_with, similarity, AttentionConfig, AttentionMode, SimilarityMap};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::{self, CandidateRecord, FrameRecord, GroundtruthRecord, SequenceManifest, TemplateRecord};
use crate::metrics::{self, GroundtruthSequence, MetricReport};
use crate::pyramid::{stride, BoundingBox, FeaturePyramid, LevelConfig, Mask};
use crate::synth::{self, Keyframe, Scene, SceneObject, SceneSpec};
use crate::template::{build_template, TemplateConfig, TemplateKind, TemplateVector};
use crate::tracker::{run_track_with_template, CandidateProvider, Detection, Track, TrackerConfig};

#[derive(Debug, Parser)]
#[command(name = "dtrack", version, about = "Discriminative-template tracking over feature pyramids")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene into pyramid containers, candidates, groundtruth and a manifest
    Synth(SynthArgs),
    /// Build a template from one pyramid and a box
    SolveTemplate(SolveArgs),
    /// Write per-level similarity maps of a template as a container
    Attend(AttendArgs),
    /// Track through a sequence manifest
    Track(TrackArgs),
    /// Evaluate tracks against groundtruth
    Eval(EvalArgs),
    /// Check the ridge backward pass against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TemplateMode {
    Center,
    MeanPos,
    MeanDiff,
    Ridge,
}

impl From<TemplateMode> for TemplateKind {
    fn from(m: TemplateMode) -> Self {
        match m {
            TemplateMode::Center => TemplateKind::Center,
            TemplateMode::MeanPos => TemplateKind::MeanPos,
            TemplateMode::MeanDiff => TemplateKind::MeanDiff,
            TemplateMode::Ridge => TemplateKind::Ridge,
        }
    }
}

#[derive(Debug, Args)]
struct TemplateArgs {
    /// Template construction
    #[arg(long, value_enum, default_value = "ridge")]
    template_mode: TemplateMode,
    /// Ridge regularization
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Negatives sampled outside the box
    #[arg(long, default_value_t = 256)]
    negatives: usize,
    /// Positives sampled inside the box (mean-pos / mean-diff)
    #[arg(long, default_value_t = 16)]
    positives: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw negatives equally from every pyramid level
    #[arg(long)]
    balanced_levels: bool,
    /// L2-normalize sampled features before combining them
    #[arg(long)]
    normalize: bool,
}

impl TemplateArgs {
    fn config(&self) -> TemplateConfig {
        TemplateConfig {
            kind: self.template_mode.into(),
            lambda: self.lambda,
            negatives: self.negatives,
            positives: self.positives,
            seed: self.seed,
            balanced_levels: self.balanced_levels,
            normalize: self.normalize,
            levels: LevelConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene description (JSON)
    #[arg(long, required_unless_present = "example_scene")]
    scene: Option<PathBuf>,
    /// Output directory for manifest.json, gt.jsonl and per-frame files
    #[arg(long, required_unless_present = "example_scene")]
    out_dir: Option<PathBuf>,
    /// Fractional box jitter of the proposal copies
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Proposals per visible object (the true box plus jittered copies)
    #[arg(long, default_value_t = 1)]
    candidates_per_object: usize,
    /// Proposal seed
    #[arg(long, default_value_t = 0)]
    candidate_seed: u64,
    /// Print an example scene to stdout and exit
    #[arg(long)]
    example_scene: bool,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Pyramid container
    #[arg(long)]
    pyramid: PathBuf,
    /// Object box "x,y,w,h"
    #[arg(long = "box", value_name = "X,Y,W,H")]
    bbox: BoundingBox,
    #[command(flatten)]
    template: TemplateArgs,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Tracking,
    Detection,
}

#[derive(Debug, Args)]
struct AttendArgs {
    /// Pyramid container
    #[arg(long)]
    pyramid: PathBuf,
    /// Template JSON as written by solve-template
    #[arg(long)]
    template: PathBuf,
    /// Detection mode bypasses attention (uniform maps of 1)
    #[arg(long, value_enum, default_value = "tracking")]
    mode: ModeArg,
    /// Min-max normalize each level's scores
    #[arg(long)]
    normalize_levels: bool,
    /// Similarity maps container (depth-1 levels)
    #[arg(long)]
    out: PathBuf,
    /// Also write the reweighted pyramid here
    #[arg(long)]
    reweighted: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Sequence manifest
    #[arg(long)]
    sequence: PathBuf,
    /// Initial box "x,y,w,h"; defaults to the manifest's init_box
    #[arg(long, value_name = "X,Y,W,H")]
    init: Option<BoundingBox>,
    #[command(flatten)]
    template: TemplateArgs,
    /// Enable temporal smoothing (default)
    #[arg(long, overrides_with = "no_smooth")]
    smooth: bool,
    /// Disable temporal smoothing
    #[arg(long, overrides_with = "smooth")]
    no_smooth: bool,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha_low: f64,
    #[arg(long, default_value_t = 0.3)]
    alpha_recover: f64,
    #[arg(long, default_value_t = 30)]
    recover_frames: u32,
    #[arg(long, default_value_t = 0.3)]
    presence_threshold: f64,
    /// Track output (JSON lines)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Got,
    Oxuva,
    Ltb35,
    Davis,
}

impl Protocol {
    fn name(self) -> &'static str {
        match self {
            Protocol::Got => "got",
            Protocol::Oxuva => "oxuva",
            Protocol::Ltb35 => "ltb35",
            Protocol::Davis => "davis",
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Track files; repeat together with --gt for several sequences
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Groundtruth files, paired with --pred in order
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Presence threshold for TPR/TNR
    #[arg(long, default_value_t = 0.3)]
    theta: f64,
    /// IoU above which a frame counts as a success
    #[arg(long, default_value_t = metrics::DEFAULT_SUCCESS_THRESHOLD)]
    sr_threshold: f64,
    /// IoU above which a present prediction counts as localized
    #[arg(long, default_value_t = metrics::DEFAULT_LOCALIZATION_THRESHOLD)]
    localization_threshold: f64,
    /// Report output; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    negatives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Pass threshold on the maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

enum Failure {
    User(Error),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::User(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::SolveTemplate(a) => cmd_solve(a),
        Command::Attend(a) => cmd_attend(a),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::User(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    }
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn example_scene() -> SceneSpec {
    let kf = |frame, x, y, w, h| Keyframe {
        frame,
        bbox: BoundingBox { x, y, w, h },
    };
    SceneSpec {
        image_width: 128,
        image_height: 128,
        frames: 20,
        depth: 16,
        num_levels: 4,
        objects: vec![
            SceneObject {
                identity: None,
                trajectory: vec![kf(0, 10.0, 20.0, 32.0, 32.0), kf(19, 50.0, 40.0, 32.0, 32.0)],
                is_target: true,
                absent: vec![],
            },
            SceneObject {
                identity: None,
                trajectory: vec![kf(0, 88.0, 88.0, 32.0, 32.0), kf(19, 70.0, 90.0, 32.0, 32.0)],
                is_target: false,
                absent: vec![],
            },
        ],
        noise_sigma: 0.0,
        distractor_overlap: 0.8,
        seed: 1,
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    if a.example_scene {
        let text = serde_json::to_string_pretty(&example_scene()).expect("scene serializes");
        println!("{text}");
        return Ok(());
    }
    let (scene_path, out_dir) = (a.scene.expect("required by clap"), a.out_dir.expect("required by clap"));
    let spec: SceneSpec = io::read_json(&scene_path)?;
    let scene = Scene::new(spec)?;
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::Io {
        path: frames_dir.display().to_string(),
        source: e,
    })?;
    let mut records = Vec::with_capacity(scene.frames());
    let mut gt = Vec::with_capacity(scene.frames());
    for frame in 0..scene.frames() {
        let rendered = synth::render_frame(&scene, frame)?;
        let pyr_rel = PathBuf::from(format!("frames/{frame:06}.pyr"));
        let cand_rel = PathBuf::from(format!("frames/{frame:06}.cand.json"));
        io::write_container(&rendered.pyramid, out_dir.join(&pyr_rel))?;
        let seed = a.candidate_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64);
        let boxes = synth::propose_boxes(&rendered.truths, a.jitter, a.candidates_per_object, seed)?;
        let cands: Vec<CandidateRecord> = boxes
            .into_iter()
            .map(|b| CandidateRecord {
                bbox: b,
                confidence: None,
                mask: None,
            })
            .collect();
        io::write_candidates(&cands, out_dir.join(&cand_rel))?;
        let target = rendered.target();
        let g = GroundtruthRecord {
            present: target.is_some(),
            bbox: target.map(|t| t.bbox),
            mask: target.map(|t| t.mask.clone()),
        };
        gt.push(metrics::GroundtruthEntry {
            frame,
            present: g.present,
            bbox: g.bbox,
            mask: g.mask.clone(),
        });
        records.push(FrameRecord {
            frame,
            pyramid: pyr_rel,
            candidates: Some(cand_rel),
            groundtruth: Some(g),
        });
    }
    let init_box = scene
        .target_box(0)
        .ok_or_else(|| Error::invalid("target must be visible in frame 0 to seed the manifest"))?;
    io::write_json(&SequenceManifest { init_box, frames: records }, out_dir.join("manifest.json"))?;
    io::write_groundtruth(&GroundtruthSequence::new(gt)?, out_dir.join("gt.jsonl"))?;
    eprintln!("wrote {} frames to {}", scene.frames(), out_dir.display());
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> CliResult {
    let pyramid = io::read_container(&a.pyramid)?;
    let config = a.template.config();
    let t = build_template(&pyramid, &a.bbox, &config)?;
    let mut text = serde_json::to_string_pretty(&TemplateRecord::new(&t, config.lambda)).expect("serializes");
    text.push('\n');
    write_or_print(&text, a.out.as_deref())?;
    Ok(())
}

fn cmd_attend(a: AttendArgs) -> CliResult {
    let pyramid = io::read_container(&a.pyramid)?;
    let record: TemplateRecord = io::read_json(&a.template)?;
    let template = record.template()?;
    let config = AttentionConfig {
        normalize_levels: a.normalize_levels,
    };
    let mode = match a.mode {
        ModeArg::Tracking => AttentionMode::Tracking,
        ModeArg::Detection => AttentionMode::Detection,
    };
    let maps = pyramid
        .levels()
        .iter()
        .map(|m| match mode {
            AttentionMode::Detection => Ok(SimilarityMap::uniform(m.level(), m.height(), m.width(), 1.0)),
            AttentionMode::Tracking => {
                let s = similarity(m, &template)?;
                Ok(if config.normalize_levels { s.min_max_normalized() } else { s })
            }
        })
        .map(|s: Result<SimilarityMap>| s?.to_feature_map())
        .collect::<Result<Vec<_>>>()?;
    let out = FeaturePyramid::new(pyramid.image_width(), pyramid.image_height(), maps)?;
    io::write_container(&out, &a.out)?;
    if let Some(path) = &a.reweighted {
        io::write_container(&attend_pyramid_with(&pyramid, &template, mode, config)?, path)?;
    }
    Ok(())
}

/// Boxes at the strongest response of each level, sized to the level's
/// canonical object scale.
fn peak_proposals(pyramid: &FeaturePyramid, template: &TemplateVector, levels: &LevelConfig) -> Result<Vec<BoundingBox>> {
    pyramid
        .levels()
        .iter()
        .map(|m| {
            let s = similarity(m, template)?;
            let (r, c) = s.argmax();
            let (cx, cy) = m.cell_center(r, c);
            let side = levels.canonical_size * stride(m.level()) / stride(levels.k0 as u32);
            Ok(BoundingBox::new(0.0, 0.0, side, side)?.recentered(cx, cy))
        })
        .collect()
}

/// Candidates from manifest files; boxes without a confidence are scored
/// against the template on that frame's pyramid.
struct ManifestProvider<'a> {
    manifest: &'a SequenceManifest,
    base: &'a Path,
    levels: LevelConfig,
}

impl CandidateProvider for ManifestProvider<'_> {
    fn candidates(&mut self, index: usize, template: &TemplateVector) -> Result<Vec<Detection>> {
        let frame = &self.manifest.frames[index];
        let pyramid = io::read_container(self.base.join(&frame.pyramid))?;
        let records = match &frame.candidates {
            Some(p) => io::read_candidates(self.base.join(p))?,
            None => peak_proposals(&pyramid, template, &self.levels)?
                .into_iter()
                .map(|b| CandidateRecord {
                    bbox: b,
                    confidence: None,
                    mask: None,
                })
                .collect(),
        };
        records
            .into_iter()
            .map(|r| {
                let c = match r.confidence {
                    Some(c) => c,
                    None => synth::score_box(&pyramid, &r.bbox, template, &self.levels)?,
                };
                Detection::new(r.bbox, c, r.mask)
            })
            .collect()
    }
}

fn cmd_track(a: TrackArgs) -> CliResult {
    let (manifest, base) = io::read_manifest(&a.sequence)?;
    let init_box = a.init.unwrap_or(manifest.init_box);
    let config = TrackerConfig {
        alpha: a.alpha,
        alpha_low: a.alpha_low,
        alpha_recover: a.alpha_recover,
        recover_frames: a.recover_frames,
        presence_threshold: a.presence_threshold,
        smoothing_enabled: !a.no_smooth,
    };
    config.validate()?;
    let tconfig = a.template.config();
    let first = io::read_container(base.join(&manifest.frames[0].pyramid))?;
    let template = build_template(&first, &init_box, &tconfig)?;
    let frames: Vec<usize> = manifest.frames.iter().map(|f| f.frame).collect();
    let mut provider = ManifestProvider {
        manifest: &manifest,
        base: &base,
        levels: tconfig.levels,
    };
    let track = run_track_with_template(&mut provider, &frames, init_box, &template, &config)?;
    io::write_track(&track, &a.out)?;
    eprintln!("tracked {} frames with a {:?} template", track.len(), template.kind());
    Ok(())
}

fn evaluate(protocol: Protocol, track: &Track, gt: &GroundtruthSequence, a: &EvalArgs) -> Result<MetricReport> {
    let mut report = MetricReport::new(protocol.name());
    match protocol {
        Protocol::Got => {
            let r = metrics::average_overlap_with(track, gt, a.sr_threshold)?;
            report.scalar("ao", Some(r.ao)).scalar("sr", Some(r.sr));
            let overlaps: Vec<f64> = metrics::frame_overlaps(track, gt)?.into_iter().flatten().collect();
            let curve = (0..=20)
                .map(|i| {
                    let t = i as f64 / 20.0;
                    let frac = overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64;
                    vec![t, frac]
                })
                .collect();
            report.curves.insert("success".into(), curve);
        }
        Protocol::Oxuva => {
            let rates = metrics::oxuva_rates_with(track, gt, a.theta, a.localization_threshold)?;
            report
                .scalar("theta", Some(a.theta))
                .scalar("tpr", rates.tpr)
                .scalar("tnr", rates.tnr)
                .scalar("gm", rates.gm().ok());
            match metrics::roc_auc_with(track, gt, a.localization_threshold) {
                Ok(roc) => {
                    report.scalar("auc", Some(roc.auc));
                    report.curves.insert("roc".into(), roc.points.iter().map(|&(f, t)| vec![f, t]).collect());
                }
                Err(Error::UndefinedMetric(msg)) => {
                    report.scalar("auc", None);
                    report.notes.push(format!("auc undefined: {msg}"));
                }
                Err(e) => return Err(e),
            }
            if rates.tnr.is_none() {
                report.notes.push("tnr undefined: the target is never absent".into());
            }
            if rates.tpr.is_none() {
                report.notes.push("tpr undefined: the target is never present".into());
            }
        }
        Protocol::Ltb35 => {
            let r = metrics::longterm_prf(track, gt)?;
            report
                .scalar("precision", Some(r.precision))
                .scalar("recall", Some(r.recall))
                .scalar("f", Some(r.f))
                .scalar("threshold", Some(r.threshold));
            report.curves.insert(
                "prf".into(),
                r.curve.iter().map(|&(t, p, rr, f)| vec![t, p, rr, f]).collect(),
            );
        }
        Protocol::Davis => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for (t, g) in track.entries().iter().zip(gt.entries()) {
                if t.frame != g.frame {
                    return Err(Error::invalid(format!("frame mismatch: {} vs {}", t.frame, g.frame)));
                }
                let Some(gm) = &g.mask else { continue };
                let pm = match (&t.detection.mask, t.present) {
                    (_, false) => Mask::new(gm.height(), gm.width(), vec![(gm.height() * gm.width()) as u32])?,
                    (Some(m), true) => m.clone(),
                    (None, true) => Mask::from_box(&t.detection.bbox, gm.height(), gm.width()),
                };
                pred.push(pm);
                truth.push(gm.clone());
            }
            if track.len() != gt.len() {
                return Err(Error::invalid("track and groundtruth lengths differ"));
            }
            if truth.is_empty() {
                return Err(Error::UndefinedMetric("davis protocol needs groundtruth masks".into()));
            }
            let j = metrics::davis_j(&pred, &truth)?;
            report
                .scalar("j_mean", Some(j.mean))
                .scalar("j_recall", Some(j.recall))
                .scalar("j_decay", j.decay);
            if j.decay.is_none() {
                report.notes.push("j_decay undefined: fewer than four frames".into());
            }
            report.notes.push("contour F-measure unavailable (f_mean, f_recall, f_decay not computed)".into());
        }
    }
    Ok(report)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    if a.pred.len() != a.gt.len() {
        return Err(Error::invalid(format!("{} --pred files but {} --gt files", a.pred.len(), a.gt.len())).into());
    }
    let mut reports = BTreeMap::new();
    for (p, g) in a.pred.iter().zip(&a.gt) {
        let track = io::read_track(p)?;
        let gt = io::read_groundtruth(g)?;
        let id = p.display().to_string();
        if reports.contains_key(&id) {
            return Err(Error::invalid(format!("prediction file {id} given twice")).into());
        }
        reports.insert(id, evaluate(a.protocol, &track, &gt, &a)?);
    }
    let report = if reports.len() == 1 {
        reports.into_values().next().expect("one report")
    } else {
        metrics::aggregate(a.protocol.name(), &reports)
    };
    write_or_print(&report.to_json(), a.out.as_deref())?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    if a.dim == 0 {
        return Err(Error::invalid("--dim must be at least 1").into());
    }
    let (problem, g) = gradcheck::random_problem(a.dim, a.negatives, a.lambda, a.seed)?;
    let r = gradcheck::check(&problem, &g, a.step)?;
    let pass = r.max_relative_error < a.tolerance;
    println!(
        "max relative error {:.3e} (max abs {:.3e}) over {} entries: {} at {:.0e}",
        r.max_relative_error,
        r.max_abs_error,
        r.entries,
        if pass { "PASS" } else { "FAIL" },
        a.tolerance
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Internal("backward pass disagrees with finite differences".into()))
    }
}
