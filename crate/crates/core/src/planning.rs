//! Symbolic plan synthesis: held segments from the label timeline are
//! grounded in 3D through the fused detections, checked for consistency,
//! and turned into pick-and-place primitives or a request for a new
//! demonstration.

use serde::{Deserialize, Serialize};

use crate::fusion::{associate_tracks, resolve_at_keyframe, Resolution, Track, VoteConfig};
use crate::geometry::{backproject, in_bounds, CameraModel, TablePlane};
use crate::types::{ActionLabel, Episode, Point3};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelTimeline {
    pub labels: Vec<ActionLabel>,
}

impl LabelTimeline {
    pub fn new(labels: Vec<ActionLabel>) -> Self {
        LabelTimeline { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldSegment {
    pub start_frame: usize,
    /// Inclusive.
    pub end_frame: usize,
    pub object: Option<Resolution>,
    /// Manifest object matched to the resolved class.
    pub object_id: Option<String>,
    /// Height of the grasp point above the table (half the object height).
    pub grasp_offset_m: f64,
    pub grasp_point: Option<Point3>,
    pub release_point: Option<Point3>,
}

impl HeldSegment {
    fn bare(start_frame: usize, end_frame: usize) -> Self {
        HeldSegment {
            start_frame,
            end_frame,
            object: None,
            object_id: None,
            grasp_offset_m: 0.0,
            grasp_point: None,
            release_point: None,
        }
    }

    pub fn duration_frames(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }
}

/// Maximal runs of `OBJECT_HELD`, in temporal order.
pub fn extract_segments(tl: &LabelTimeline) -> Vec<HeldSegment> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, l) in tl.labels.iter().enumerate() {
        match (l.is_held(), start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(HeldSegment::bare(s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(HeldSegment::bare(s, tl.len() - 1));
    }
    out
}

/// Resolves the object at the grasp keyframe (last free frame before the
/// segment) and reads its position back at the release keyframe (first
/// free frame after it), both backprojected onto the table.
pub fn ground_segments(
    segments: &[HeldSegment],
    episode: &Episode,
    tracks: &[Track],
    cam: &CameraModel,
    table: &TablePlane,
    cfg: &VoteConfig,
) -> Vec<HeldSegment> {
    let last_frame = episode.frames.len().saturating_sub(1);
    let hand_at = |frame: usize| episode.frames.get(frame).and_then(|f| f.gt_hand);
    // Last known table position per object, updated as segments release them.
    let mut known: Vec<(&crate::types::ObjectEntry, Option<Point3>)> =
        episode.objects.iter().map(|o| (o, o.position)).collect();
    segments
        .iter()
        .map(|seg| {
            let mut g = HeldSegment::bare(seg.start_frame, seg.end_frame);
            let grasp_kf = seg.start_frame.saturating_sub(1);
            let release_kf = (seg.end_frame + 1).min(last_frame);
            let res = resolve_at_keyframe(tracks, grasp_kf, hand_at(grasp_kf), cfg);
            if res.decided {
                g.grasp_point = res.position.and_then(|px| backproject(&px, cam, table).ok());
                if let Some(i) = res
                    .class
                    .as_deref()
                    .and_then(|c| match_manifest(&known, c, g.grasp_point))
                {
                    g.object_id = Some(known[i].0.id.clone());
                    g.grasp_offset_m = known[i].0.height.unwrap_or(0.0) / 2.0;
                }
                g.release_point = res
                    .track_id
                    .and_then(|id| tracks.iter().find(|t| t.track_id == id))
                    .and_then(|t| t.nearest(release_kf, cfg.max_window))
                    .and_then(|(_, px)| backproject(&px, cam, table).ok());
                if g.release_point.is_none() {
                    // The track broke during transport: vote again around the
                    // release keyframe, anchored at the hand's last held position.
                    let rel = resolve_at_keyframe(tracks, release_kf, hand_at(seg.end_frame), cfg);
                    if rel.decided {
                        g.release_point = rel.position.and_then(|px| backproject(&px, cam, table).ok());
                    }
                }
            }
            if let (Some(id), Some(p)) = (&g.object_id, g.release_point) {
                if let Some(k) = known.iter_mut().find(|(o, _)| &o.id == id) {
                    k.1 = Some(p);
                }
            }
            g.object = Some(res);
            g
        })
        .collect()
}

/// Manifest entry of `class` for a grasp at `at`: graspable entries first,
/// then the one last seen nearest the grasp point on the table, then
/// manifest order.
fn match_manifest(
    known: &[(&crate::types::ObjectEntry, Option<Point3>)],
    class: &str,
    at: Option<Point3>,
) -> Option<usize> {
    let dist = |p: Option<Point3>| match (p, at) {
        (Some(p), Some(a)) => (p.xy() - a.xy()).norm(),
        _ => f64::INFINITY,
    };
    known
        .iter()
        .enumerate()
        .filter(|(_, (o, _))| o.class == class)
        .min_by(|(i, (a, pa)), (j, (b, pb))| {
            b.graspable
                .cmp(&a.graspable)
                .then(dist(*pa).total_cmp(&dist(*pb)))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    /// No object could be resolved at the grasp keyframe.
    AmbiguousObject,
    /// Object resolved but a grasp or release position is missing.
    MissingEvidence,
    /// The object did not move between grasp and release.
    InconsistentEvidence,
    OutOfWorkspace,
    MalformedTimeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentValidation {
    pub segment: usize,
    pub failures: Vec<Failure>,
    /// Grasp-to-release distance when both points exist.
    pub moved_m: Option<f64>,
}

impl SegmentValidation {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn validate(grounded: &[HeldSegment], table: &TablePlane, d_min: f64, bounds_tol: f64) -> Vec<SegmentValidation> {
    grounded
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let mut failures = Vec::new();
            let resolved = seg.object.as_ref().is_some_and(|r| r.decided) && seg.object_id.is_some();
            if !resolved {
                failures.push(Failure::AmbiguousObject);
            }
            let mut moved_m = None;
            match (seg.grasp_point, seg.release_point) {
                (Some(g), Some(r)) => {
                    let d = (g - r).norm();
                    moved_m = Some(d);
                    if d < d_min {
                        failures.push(Failure::InconsistentEvidence);
                    }
                    if !in_bounds(&g, table, bounds_tol) || !in_bounds(&r, table, bounds_tol) {
                        failures.push(Failure::OutOfWorkspace);
                    }
                }
                _ if resolved => failures.push(Failure::MissingEvidence),
                _ => {}
            }
            let ordered = seg.start_frame <= seg.end_frame && (i == 0 || grounded[i - 1].end_frame < seg.start_frame);
            if !ordered {
                failures.push(Failure::MalformedTimeline);
            }
            SegmentValidation {
                segment: i,
                failures,
                moved_m,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepKind {
    Approach,
    Descend,
    Grasp,
    Lift,
    Transport,
    Lower,
    Release,
    Retreat,
}

impl StepKind {
    pub fn is_gripper_event(self) -> bool {
        matches!(self, StepKind::Grasp | StepKind::Release)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub kind: StepKind,
    pub target: Point3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionPlan {
    pub steps: Vec<PlanStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reason {
    pub segment: usize,
    pub failure: Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Plan { steps: ActionPlan },
    RequestNewDemonstration { reasons: Vec<Reason> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    #[serde(flatten)]
    pub outcome: Outcome,
    pub diagnostics: Vec<SegmentValidation>,
}

impl PlanReport {
    pub fn plan(&self) -> Option<&ActionPlan> {
        match &self.outcome {
            Outcome::Plan { steps } => Some(steps),
            Outcome::RequestNewDemonstration { .. } => None,
        }
    }
}

pub fn synthesize(grounded: &[HeldSegment], validations: &[SegmentValidation], hover: f64) -> PlanReport {
    let reasons: Vec<Reason> = validations
        .iter()
        .flat_map(|v| {
            v.failures.iter().map(move |&f| Reason {
                segment: v.segment,
                failure: f,
            })
        })
        .collect();
    if !reasons.is_empty() || validations.len() != grounded.len() {
        return PlanReport {
            outcome: Outcome::RequestNewDemonstration { reasons },
            diagnostics: validations.to_vec(),
        };
    }
    let mut steps = Vec::with_capacity(8 * grounded.len());
    for seg in grounded {
        let (Some(g), Some(r)) = (seg.grasp_point, seg.release_point) else {
            unreachable!("validated segments carry both points")
        };
        let up = nalgebra::Vector3::z();
        let grasp = g + up * seg.grasp_offset_m;
        let release = r + up * seg.grasp_offset_m;
        let id = seg.object_id.clone();
        let mut push = |kind, target, object_id| {
            steps.push(PlanStep {
                kind,
                target,
                object_id,
            })
        };
        push(StepKind::Approach, grasp + up * hover, None);
        push(StepKind::Descend, grasp, None);
        push(StepKind::Grasp, grasp, id.clone());
        push(StepKind::Lift, grasp + up * hover, None);
        push(StepKind::Transport, release + up * hover, None);
        push(StepKind::Lower, release, None);
        push(StepKind::Release, release, id);
        push(StepKind::Retreat, release + up * hover, None);
    }
    PlanReport {
        outcome: Outcome::Plan {
            steps: ActionPlan { steps },
        },
        diagnostics: validations.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    pub d_min: f64,
    pub hover: f64,
    pub bounds_tol: f64,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        PlanningConfig {
            d_min: 0.05,
            hover: 0.10,
            bounds_tol: 1e-6,
        }
    }
}

/// Output of [`plan_episode`], kept whole for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningRun {
    pub segments: Vec<HeldSegment>,
    pub report: PlanReport,
}

/// Fusion and grounding of every held segment of the timeline.
pub fn ground_episode(
    episode: &Episode,
    timeline: &LabelTimeline,
    table: &TablePlane,
    vote: &VoteConfig,
) -> Vec<HeldSegment> {
    let tracks = associate_tracks(episode, vote);
    let segments = extract_segments(timeline);
    ground_segments(&segments, episode, &tracks, &episode.camera, table, vote)
}

/// Validation and synthesis over already grounded segments.
pub fn plan_grounded(grounded: Vec<HeldSegment>, table: &TablePlane, planning: &PlanningConfig) -> PlanningRun {
    let validations = validate(&grounded, table, planning.d_min, planning.bounds_tol);
    let report = synthesize(&grounded, &validations, planning.hover);
    PlanningRun {
        segments: grounded,
        report,
    }
}

/// Fusion, grounding, validation and synthesis for one episode.
pub fn plan_episode(
    episode: &Episode,
    timeline: &LabelTimeline,
    table: &TablePlane,
    vote: &VoteConfig,
    planning: &PlanningConfig,
) -> PlanningRun {
    plan_grounded(ground_episode(episode, timeline, table, vote), table, planning)
}
