//! End-to-end runs and the evaluation report: segmentation and position
//! accuracy per loss combination, plus simulated grasp and imitation rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::diffusion::{checkpoint, frame_accuracy, infer, train, DenoiserParams, LossConfig, StepPlan};
use crate::error::{Error, Result};
use crate::fusion::{associate_tracks, resolve_at_keyframe, VoteConfig};
use crate::geometry::{backproject, TablePlane};
use crate::kinematics::{plan_to_trajectory, KinematicChain};
use crate::planning::{ground_episode, plan_grounded, HeldSegment, LabelTimeline, PlanReport, PlanningRun};
use crate::rng::RngSeed;
use crate::sim::{execute, score_run, DemoScript, ExecutionResult, Goal, RunSummary, SceneObject};
use crate::types::{split_dataset, Episode, Point3};

/// Loss combinations in reporting order with the reference accuracies
/// (segmentation, position) they are printed next to.
pub const LOSS_COMBOS: [(&str, bool, bool, f64, f64); 4] = [
    ("CE", false, false, 0.8919, 0.8171),
    ("CE + BA", true, false, 0.8732, 0.7777),
    ("CE + BA + TS", true, true, 0.8748, 0.7453),
    ("CE + TS", false, true, 0.8778, 0.7314),
];

pub fn checkpoint_name(use_ba: bool, use_ts: bool) -> String {
    let mut name = String::from("seg_ce");
    if use_ba {
        name.push_str("_ba");
    }
    if use_ts {
        name.push_str("_ts");
    }
    name.push_str(".bin");
    name
}

/// Objects of the episode manifest as simulator objects.
pub fn scene_from_episode(ep: &Episode) -> Result<Vec<SceneObject>> {
    ep.objects.iter().map(SceneObject::from_entry).collect()
}

pub fn goal_from_script(script: &DemoScript) -> Goal {
    Goal {
        object_id: script.moved_object_id.clone(),
        position: script.place2,
    }
}

/// Plan file written by the `plan` command: the report plus the scene it
/// should be executed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub episode_id: String,
    #[serde(flatten)]
    pub report: PlanReport,
    pub table_height_m: f64,
    pub scene: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Goal>,
}

impl PlanFile {
    pub fn new(ep: &Episode, report: PlanReport) -> Result<Self> {
        Ok(PlanFile {
            episode_id: ep.id.clone(),
            report,
            table_height_m: ep.table_height_m,
            scene: scene_from_episode(ep)?,
            goal: ep.script.as_ref().map(goal_from_script),
        })
    }
}

/// IK trajectory from the chain's home pose and simulated execution.
pub fn execute_plan_file(
    plan: &PlanFile,
    cfg: &PipelineConfig,
    chain: &KinematicChain,
    seed: RngSeed,
) -> Result<ExecutionResult> {
    let Some(steps) = plan.report.plan() else {
        return Err(Error::Domain(format!(
            "plan for {} requests a new demonstration and cannot be executed",
            plan.episode_id
        )));
    };
    let trajectory = plan_to_trajectory(chain, steps, &chain.home(), &cfg.ik, cfg.execution.cart_step)?;
    execute(
        &plan.scene,
        &trajectory,
        chain,
        &cfg.execution.tolerances(),
        plan.goal.as_ref(),
        plan.table_height_m,
        seed,
    )
}

/// Grounding defects injected after fusion to exercise validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Release point collapsed onto the grasp point.
    Stationary,
    /// Release point pushed off the table.
    OutOfWorkspace,
    /// Object resolution removed.
    LostObject,
    /// Release point removed.
    LostRelease,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::Stationary,
        Corruption::OutOfWorkspace,
        Corruption::LostObject,
        Corruption::LostRelease,
    ];

    pub fn apply(self, seg: &mut HeldSegment, table: &TablePlane) {
        match self {
            Corruption::Stationary => seg.release_point = seg.grasp_point,
            Corruption::OutOfWorkspace => {
                let base = seg
                    .release_point
                    .or(seg.grasp_point)
                    .unwrap_or(Point3::new(0.0, 0.0, table.height_m));
                seg.release_point = Some(Point3::new(table.x_max + 0.25, base.y, table.height_m));
            }
            Corruption::LostObject => {
                seg.object = None;
                seg.object_id = None;
            }
            Corruption::LostRelease => seg.release_point = None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRun {
    pub episode_id: String,
    pub planning: PlanningRun,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionResult>,
    /// Set when IK could not realise the plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<String>,
}

/// Ground, optionally corrupt one segment, validate, plan, and execute when
/// a plan comes out.
pub fn run_episode(
    ep: &Episode,
    timeline: &LabelTimeline,
    cfg: &PipelineConfig,
    chain: &KinematicChain,
    corruption: Option<(usize, Corruption)>,
) -> Result<EpisodeRun> {
    let mut grounded = ground_episode(ep, timeline, &cfg.table, &cfg.vote);
    if let Some((i, c)) = corruption {
        if let Some(seg) = grounded.get_mut(i) {
            c.apply(seg, &cfg.table);
        }
    }
    let planning = plan_grounded(grounded, &cfg.table, &cfg.planning);
    let mut run = EpisodeRun {
        episode_id: ep.id.clone(),
        planning,
        execution: None,
        infeasible: None,
    };
    if run.planning.report.plan().is_some() {
        let file = PlanFile::new(ep, run.planning.report.clone())?;
        let seed = RngSeed(cfg.seeds.execute).derive(&ep.id);
        match execute_plan_file(&file, cfg, chain, seed) {
            Ok(r) => run.execution = Some(r),
            Err(e) if e.is_domain_failure() => run.infeasible = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

/// Grounded keyframe points in script order: grasp and release of each of
/// the first two segments.
pub fn keyframe_points(segments: &[HeldSegment]) -> [Option<Point3>; 4] {
    let get = |i: usize, release: bool| {
        segments
            .get(i)
            .and_then(|s| if release { s.release_point } else { s.grasp_point })
    };
    [get(0, false), get(0, true), get(1, false), get(1, true)]
}

pub fn script_points(script: &DemoScript) -> [Point3; 4] {
    [script.pick1, script.place1, script.pick2, script.place2]
}

/// Number of keyframes (out of four) grounded within `tol` of the truth.
pub fn position_hits(segments: &[HeldSegment], script: &DemoScript, tol: f64) -> usize {
    keyframe_points(segments)
        .iter()
        .zip(script_points(script))
        .filter(|(p, truth)| p.is_some_and(|p| (p - truth).norm() <= tol))
        .count()
}

/// Fraction of grasp keyframes (ground-truth timeline) whose resolved object
/// position lies within `tol` of the true pick point. `max_window = 0` is the
/// single-keyframe baseline.
pub fn identity_accuracy(episodes: &[Episode], vote: &VoteConfig, table: &TablePlane, tol: f64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ep in episodes {
        let script = ep
            .script
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("episode {} has no script", ep.id)))?;
        let tracks = associate_tracks(ep, vote);
        for ((start, _), truth) in script.held.iter().zip(script.picks()) {
            let key = start.saturating_sub(1);
            let hand = ep.frames[key].gt_hand;
            let res = resolve_at_keyframe(&tracks, key, hand, vote);
            total += 1;
            let correct = res
                .position
                .and_then(|px| backproject(&px, &ep.camera, table).ok())
                .is_some_and(|p| (p - truth).norm() <= tol);
            hits += usize::from(res.decided && correct);
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub losses: String,
    pub segmentation_accuracy: f64,
    pub position_accuracy: f64,
    pub reference_segmentation: f64,
    pub reference_position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_episodes: Vec<String>,
    pub infer_steps: String,
    pub position_tol_m: f64,
    pub rows: Vec<TableRow>,
    pub plans_emitted: usize,
    pub demonstration_requests: usize,
    pub infeasible_plans: usize,
    pub execution: Option<RunSummary>,
}

/// Loads `dir/<combo>.bin` when present, otherwise trains it on `train_set`
/// and saves it.
pub fn load_or_train(
    dir: &Path,
    train_set: &[Episode],
    cfg: &PipelineConfig,
    use_ba: bool,
    use_ts: bool,
) -> Result<DenoiserParams> {
    let path = dir.join(checkpoint_name(use_ba, use_ts));
    if path.exists() {
        let (params, _) = checkpoint::load(&path)?;
        return Ok(params);
    }
    let loss = LossConfig {
        use_ba,
        use_ts,
        ..cfg.loss
    };
    let hyper = cfg.train.hyper(RngSeed(cfg.seeds.train));
    let out = train(train_set, &loss, &cfg.schedule()?, cfg.denoiser()?, &hyper)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&out.params, cfg.schedule.total_steps, &path)?;
    Ok(out.params)
}

/// Segments every test episode with each loss combination, grounds the
/// keyframes, and executes the plans produced from the first combination.
pub fn evaluate(dataset: &[Episode], cfg: &PipelineConfig, models_dir: &Path) -> Result<EvalReport> {
    let (train_set, test_set) = split_dataset(dataset, cfg.train.train_fraction, RngSeed(cfg.seeds.split))?;
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sched = cfg.schedule()?;
    let plan: StepPlan = cfg.infer_steps()?;
    let steps = plan.steps(&sched);
    let chain = cfg.chain()?;
    let tol = cfg.eval.position_tol_m;

    let mut rows = Vec::with_capacity(LOSS_COMBOS.len());
    let mut runs = Vec::new();
    for (i, (label, use_ba, use_ts, ref_seg, ref_pos)) in LOSS_COMBOS.into_iter().enumerate() {
        let params = load_or_train(models_dir, &train_set, cfg, use_ba, use_ts)?;
        let mut acc = 0.0;
        let mut hits = 0usize;
        for ep in &test_set {
            let script = ep
                .script
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("episode {} has no script", ep.id)))?;
            let gt = LabelTimeline::new(
                ep.gt_labels()
                    .ok_or_else(|| Error::InvalidArgument(format!("episode {} lacks labels", ep.id)))?,
            );
            let seed = RngSeed(cfg.seeds.infer).derive(&ep.id);
            let timeline = infer(&ep.feature_matrix().view(), &params, &sched, &steps, seed)?;
            acc += frame_accuracy(&timeline, &gt)?;
            if i == 0 {
                let run = run_episode(ep, &timeline, cfg, &chain, None)?;
                hits += position_hits(&run.planning.segments, script, tol);
                runs.push(run);
            } else {
                let grounded = ground_episode(ep, &timeline, &cfg.table, &cfg.vote);
                hits += position_hits(&grounded, script, tol);
            }
        }
        let n = test_set.len() as f64;
        rows.push(TableRow {
            losses: label.to_string(),
            segmentation_accuracy: acc / n,
            position_accuracy: hits as f64 / (4.0 * n),
            reference_segmentation: ref_seg,
            reference_position: ref_pos,
        });
    }

    let results: Vec<ExecutionResult> = runs.iter().filter_map(|r| r.execution.clone()).collect();
    Ok(EvalReport {
        test_episodes: test_set.iter().map(|e| e.id.clone()).collect(),
        infer_steps: plan.name(),
        position_tol_m: tol,
        rows,
        plans_emitted: runs.iter().filter(|r| r.planning.report.plan().is_some()).count(),
        demonstration_requests: runs.iter().filter(|r| r.planning.report.plan().is_none()).count(),
        infeasible_plans: runs.iter().filter(|r| r.infeasible.is_some()).count(),
        execution: score_run(&results).ok(),
    })
}

impl EvalReport {
    /// Plain-text tables: accuracy per loss combination and execution rates.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Action segmentation ({} steps) and position detection (keyframe within {:.2} m), {} test episodes",
            self.infer_steps,
            self.position_tol_m,
            self.test_episodes.len()
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "| Losses | Action Segmentation | Position Detection | Reference Seg. | Reference Pos. |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.losses, r.segmentation_accuracy, r.position_accuracy, r.reference_segmentation, r.reference_position
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Plans: {} emitted, {} new demonstrations requested, {} infeasible",
            self.plans_emitted, self.demonstration_requests, self.infeasible_plans
        );
        match &self.execution {
            Some(x) => {
                let _ = writeln!(s, "| First grasp | Second grasp | Overall grasp | Imitation |");
                let _ = writeln!(s, "|---|---|---|---|");
                let _ = writeln!(
                    s,
                    "| {:.4} | {:.4} | {:.4} | {:.4} |",
                    x.first_grasp_rate, x.second_grasp_rate, x.grasp_rate, x.imitation_rate
                );
            }
            None => {
                let _ = writeln!(s, "No plans were executed.");
            }
        }
        s
    }
}

/// Counts of validation failures per kind over a batch of runs.
pub fn failure_histogram(runs: &[EpisodeRun]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for run in runs {
        for v in &run.planning.report.diagnostics {
            for f in &v.failures {
                let key = serde_json::to_value(f)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                *out.entry(key).or_insert(0) += 1;
            }
        }
    }
    out
}
