//! Deterministic tabletop world. Generates scripted two-cycle pick-and-place
//! demonstrations with calibrated detector noise and synthetic per-frame
//! features, and executes joint trajectories with a simple grasp model.
//!
//! Image anchors (detection centers and the hand pixel) are ground-contact
//! points: the projection of the footprint center onto the table plane.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, TablePlane};
use crate::kinematics::{fk, KinematicChain, TrajectorySegment};
use crate::planning::StepKind;
use crate::rng::RngSeed;
use crate::types::{
    ActionLabel, Detection, Episode, FrameRecord, ObjectEntry, Pixel, Point3, DEFAULT_FEATURE_DIM, DEFAULT_FPS,
    DEFAULT_FRAME_COUNT, DEFAULT_NUM_CLASSES, DEFAULT_VOCABULARY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub object_id: String,
    pub class: String,
    pub footprint_radius: f64,
    pub height: f64,
    /// Object center; `z = table + height / 2` when resting.
    pub position: Point3,
    pub graspable: bool,
}

impl SceneObject {
    fn new(id: &str, class: &str, radius: f64, height: f64, graspable: bool) -> Self {
        SceneObject {
            object_id: id.into(),
            class: class.into(),
            footprint_radius: radius,
            height,
            position: Point3::origin(),
            graspable,
        }
    }

    pub fn footprint(&self) -> Point3 {
        Point3::new(self.position.x, self.position.y, self.position.z - self.height / 2.0)
    }

    pub fn rest_at(&mut self, footprint: Point3) {
        self.position = Point3::new(footprint.x, footprint.y, footprint.z + self.height / 2.0);
    }

    pub fn manifest_entry(&self) -> ObjectEntry {
        ObjectEntry {
            id: self.object_id.clone(),
            class: self.class.clone(),
            graspable: self.graspable,
            radius: Some(self.footprint_radius),
            height: Some(self.height),
            position: Some(self.position),
        }
    }

    pub fn from_entry(entry: &ObjectEntry) -> Result<Self> {
        match (entry.radius, entry.height, entry.position) {
            (Some(r), Some(h), Some(p)) => Ok(SceneObject {
                object_id: entry.id.clone(),
                class: entry.class.clone(),
                footprint_radius: r,
                height: h,
                position: p,
                graspable: entry.graspable,
            }),
            _ => Err(Error::Scene(format!(
                "object {} lacks geometry needed to rebuild the scene",
                entry.id
            ))),
        }
    }
}

/// The five-object tabletop catalog. Objects sharing a detector class share
/// a height, so grasp heights can be derived from the resolved class.
pub fn default_catalog() -> Vec<SceneObject> {
    vec![
        SceneObject::new("red_bowl", "red plate", 0.08, 0.05, false),
        SceneObject::new("spam_can", "metal can", 0.05, 0.08, true),
        SceneObject::new("jello_strawberry", "cardboard box", 0.045, 0.06, true),
        SceneObject::new("jello_chocolate", "cardboard box", 0.045, 0.06, true),
        SceneObject::new("tomato_can", "metal can", 0.035, 0.08, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub detect_prob: f64,
    pub class_accuracy: f64,
    pub confusion_bias_class: String,
    /// Poisson mean of spurious detections per frame.
    pub fp_rate_per_frame: f64,
    pub arm_fp_prob: f64,
    pub held_occlusion_prob: f64,
    pub center_jitter_px: f64,
    /// Per-frame flip probability of the held indicator inside the features.
    pub feature_flip_prob: f64,
    pub feature_noise_std: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            detect_prob: 0.8724,
            class_accuracy: 0.5011,
            confusion_bias_class: "cardboard box".into(),
            fp_rate_per_frame: 0.406,
            arm_fp_prob: 0.3,
            held_occlusion_prob: 0.5,
            center_jitter_px: 3.0,
            feature_flip_prob: 0.1,
            feature_noise_std: 0.1,
        }
    }
}

impl NoiseModel {
    /// Perfect detector and noise-free features.
    pub fn noiseless() -> Self {
        NoiseModel {
            detect_prob: 1.0,
            class_accuracy: 1.0,
            fp_rate_per_frame: 0.0,
            arm_fp_prob: 0.0,
            held_occlusion_prob: 0.0,
            center_jitter_px: 0.0,
            feature_flip_prob: 0.0,
            feature_noise_std: 0.0,
            ..NoiseModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.detect_prob,
            self.class_accuracy,
            self.arm_fp_prob,
            self.held_occlusion_prob,
            self.feature_flip_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("noise probabilities must lie in [0, 1]".into()));
        }
        if self.fp_rate_per_frame < 0.0 || self.center_jitter_px < 0.0 || self.feature_noise_std < 0.0 {
            return Err(Error::Config("noise rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub noise: NoiseModel,
    pub frame_count: usize,
    pub fps: f64,
    pub feature_dim: usize,
    /// Seed of the fixed feature projection shared by every episode.
    pub feature_seed: u64,
    pub timing_outlier_prob: f64,
    /// Minimum spacing between script points and other objects (meters).
    pub min_separation_m: f64,
    pub image_size: [f64; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise: NoiseModel::default(),
            frame_count: DEFAULT_FRAME_COUNT,
            fps: DEFAULT_FPS,
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_seed: 0x00fe_a7u64,
            timing_outlier_prob: 0.1,
            min_separation_m: 0.15,
            image_size: [640.0, 640.0],
        }
    }
}

/// Hidden generator state of one demonstration. Points are footprint
/// centers on the table plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScript {
    pub moved_object_id: String,
    pub pick1: Point3,
    pub place1: Point3,
    pub pick2: Point3,
    pub place2: Point3,
    /// Inclusive held intervals, in temporal order.
    pub held: [(usize, usize); 2],
    pub timing_outlier: bool,
}

impl DemoScript {
    pub fn picks(&self) -> [Point3; 2] {
        [self.pick1, self.pick2]
    }

    pub fn places(&self) -> [Point3; 2] {
        [self.place1, self.place2]
    }

    pub fn labels(&self, frames: usize) -> Vec<ActionLabel> {
        (0..frames)
            .map(|t| {
                if self.held.iter().any(|&(s, e)| t >= s && t <= e) {
                    ActionLabel::OBJECT_HELD
                } else {
                    ActionLabel::HAND_FREE
                }
            })
            .collect()
    }
}

/// Where a generated detection came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Object { object_id: String, correct_class: bool },
    FalsePositive,
    Arm,
}

/// Per-frame bookkeeping for statistical checks of the noise model.
#[derive(Debug, Clone, Default)]
pub struct GenerationTrace {
    pub provenance: Vec<Vec<Provenance>>,
    /// (frame, object) pairs eligible for a detection draw (not occluded by a held grasp).
    pub eligible_object_frames: usize,
    pub false_positive_counts: Vec<usize>,
}

/// One scripted hand phase.
struct Phase {
    frames: usize,
    from: Point3,
    to: Point3,
    held: bool,
    arc: f64,
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let n = Normal::new(mean, std).expect("valid normal");
    for _ in 0..64 {
        let v = n.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
    mean.clamp(lo, hi)
}

fn visible(p: &Point3, cam: &CameraModel, image: [f64; 2]) -> bool {
    project(p, cam).is_ok_and(|px| px.u >= 0.0 && px.u <= image[0] && px.v >= 0.0 && px.v <= image[1])
}

fn distance_to_segment(p: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = (b - a).xy();
    let ap = (p - a).xy();
    let t = if ab.norm_squared() > 0.0 {
        (ap.dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap - ab * t).norm()
}

fn sample_table_point(
    rng: &mut ChaCha8Rng,
    table: &TablePlane,
    cam: &CameraModel,
    gen: &GeneratorConfig,
    margin: f64,
    avoid: &[Point3],
    paths: &[(Point3, Point3)],
) -> Result<Point3> {
    for _ in 0..10_000 {
        let p = Point3::new(
            rng.random_range((table.x_min + margin)..=(table.x_max - margin)),
            rng.random_range((table.y_min + margin)..=(table.y_max - margin)),
            table.height_m,
        );
        let clear = avoid.iter().all(|a| (a - p).xy().norm() >= gen.min_separation_m)
            && paths
                .iter()
                .all(|(a, b)| distance_to_segment(&p, a, b) >= gen.min_separation_m);
        if clear && visible(&p, cam, gen.image_size) {
            return Ok(p);
        }
    }
    Err(Error::Scene("could not place points on the visible table area".into()))
}

/// Generates one demonstration in which `objects[0]` is moved twice and the
/// remaining objects are distractors.
pub fn generate_demo(
    objects: &[SceneObject],
    script_seed: RngSeed,
    gen: &GeneratorConfig,
    cam: &CameraModel,
    table: &TablePlane,
) -> Result<Episode> {
    generate_demo_traced(objects, script_seed, gen, cam, table).map(|(ep, _)| ep)
}

pub fn generate_demo_traced(
    objects: &[SceneObject],
    script_seed: RngSeed,
    gen: &GeneratorConfig,
    cam: &CameraModel,
    table: &TablePlane,
) -> Result<(Episode, GenerationTrace)> {
    gen.noise.validate()?;
    if objects.is_empty() || !objects.iter().any(|o| o.graspable) {
        return Err(Error::Scene("scene needs at least one graspable object".into()));
    }
    let mut rng = script_seed.derive("script").rng();
    let frames = gen.frame_count;
    let h = table.height_m;

    // Script points, then distractors placed away from all of them.
    let margin = 0.06;
    let pick1 = sample_table_point(&mut rng, table, cam, gen, margin, &[], &[])?;
    let place1 = sample_table_point(&mut rng, table, cam, gen, margin, &[pick1], &[])?;
    let place2 = sample_table_point(&mut rng, table, cam, gen, margin, &[pick1, place1], &[])?;
    let mut scene: Vec<SceneObject> = objects.to_vec();
    scene[0].rest_at(pick1);
    // Distractors stay clear of the carried object's paths so tracks do not cross.
    let paths = [(pick1, place1), (place1, place2)];
    let mut occupied = vec![pick1, place1, place2];
    for obj in scene.iter_mut().skip(1) {
        let p = sample_table_point(&mut rng, table, cam, gen, margin, &occupied, &paths)?;
        obj.rest_at(p);
        occupied.push(p);
    }
    let moved = scene[0].clone();
    let lift = Vector3::z() * (moved.height / 2.0);
    let rest = Point3::new(table.x_max + 0.15, 0.0, h + 0.25);

    // Phase durations in frames (truncated normal), scaled to fit the clip.
    let timing_outlier = rng.random_bool(gen.timing_outlier_prob);
    let outlier_cycle = rng.random_range(0..2usize);
    let mut durations = Vec::with_capacity(13);
    let (g1, p1, g2, p2) = (pick1 + lift, place1 + lift, place1 + lift, place2 + lift);
    let mut phases: Vec<Phase> = Vec::new();
    let idle0 = truncated_normal(&mut rng, 25.0, 8.0, 8.0, 40.0);
    phases.push(Phase {
        frames: 0,
        from: rest,
        to: rest,
        held: false,
        arc: 0.0,
    });
    durations.push(idle0);
    for (cycle, (grasp, place)) in [(g1, p1), (g2, p2)].into_iter().enumerate() {
        let mut dwell = truncated_normal(&mut rng, 10.0, 3.0, 5.0, 15.0);
        if timing_outlier && cycle == outlier_cycle {
            dwell *= 3.0;
        }
        let spec = [
            (
                truncated_normal(&mut rng, 35.0, 8.0, 20.0, 50.0),
                rest,
                grasp,
                false,
                0.05,
            ),
            (dwell, grasp, grasp, false, 0.0),
            (
                truncated_normal(&mut rng, 70.0, 12.0, 45.0, 95.0),
                grasp,
                place,
                true,
                0.08,
            ),
            (
                truncated_normal(&mut rng, 8.0, 2.0, 5.0, 12.0),
                place,
                place,
                false,
                0.0,
            ),
            (
                truncated_normal(&mut rng, 30.0, 8.0, 20.0, 45.0),
                place,
                rest,
                false,
                0.05,
            ),
            (truncated_normal(&mut rng, 25.0, 8.0, 8.0, 40.0), rest, rest, false, 0.0),
        ];
        for (d, from, to, held, arc) in spec {
            durations.push(d);
            phases.push(Phase {
                frames: 0,
                from,
                to,
                held,
                arc,
            });
        }
    }
    let budget = frames.saturating_sub(2) as f64;
    let total: f64 = durations.iter().sum();
    let scale = if total > budget { budget / total } else { 1.0 };
    for (ph, d) in phases.iter_mut().zip(&durations) {
        ph.frames = ((d * scale).round() as usize).max(1);
    }

    // Hand trajectory and held intervals.
    let mut hand = Vec::with_capacity(frames);
    let mut held_flags = Vec::with_capacity(frames);
    for ph in &phases {
        for k in 0..ph.frames {
            let tau = (k + 1) as f64 / ph.frames as f64;
            let p = ph.from + (ph.to - ph.from) * tau + Vector3::z() * (ph.arc * (std::f64::consts::PI * tau).sin());
            hand.push(p);
            held_flags.push(ph.held);
        }
    }
    hand.truncate(frames);
    held_flags.truncate(frames);
    while hand.len() < frames {
        hand.push(rest);
        held_flags.push(false);
    }
    let mut held = Vec::new();
    let mut start = None;
    for (t, &f) in held_flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                held.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if held.len() != 2 {
        return Err(Error::Scene("demonstration does not contain two grasp cycles".into()));
    }
    let script = DemoScript {
        moved_object_id: moved.object_id.clone(),
        pick1,
        place1,
        pick2: place1,
        place2,
        held: [held[0], held[1]],
        timing_outlier,
    };

    // Moved-object center per frame.
    let mut moved_center = Vec::with_capacity(frames);
    let mut current = moved.position;
    for t in 0..frames {
        if held_flags[t] {
            current = hand[t];
        } else if t > 0 && held_flags[t - 1] {
            current = Point3::new(hand[t - 1].x, hand[t - 1].y, h + moved.height / 2.0);
        }
        moved_center.push(current);
    }

    // Fixed feature projection shared across episodes.
    const RAW: usize = 5;
    let mut proj_rng = RngSeed(gen.feature_seed).derive("feature-projection").rng();
    let projection: Vec<f64> = (0..gen.feature_dim * RAW)
        .map(|_| proj_rng.sample::<f64, _>(StandardNormal) / (RAW as f64).sqrt())
        .collect();

    let noise = &gen.noise;
    let mut det_rng = script_seed.derive("detections").rng();
    let mut feat_rng = script_seed.derive("features").rng();
    let jitter = Normal::new(0.0, noise.center_jitter_px.max(0.0)).expect("valid jitter");
    let poisson = (noise.fp_rate_per_frame > 0.0).then(|| Poisson::new(noise.fp_rate_per_frame).expect("valid rate"));
    let other_classes: Vec<&str> = DEFAULT_VOCABULARY
        .iter()
        .copied()
        .filter(|c| *c != "arm" && *c != "hand")
        .collect();

    let mut trace = GenerationTrace::default();
    let mut frame_records = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut detections = Vec::new();
        let mut prov = Vec::new();
        for (i, obj) in scene.iter().enumerate() {
            let center = if i == 0 { moved_center[t] } else { obj.position };
            let is_held = i == 0 && held_flags[t];
            if is_held && det_rng.random_bool(noise.held_occlusion_prob) {
                continue;
            }
            trace.eligible_object_frames += 1;
            if !det_rng.random_bool(noise.detect_prob) {
                continue;
            }
            let anchor = Point3::new(center.x, center.y, h);
            let Ok(px) = project(&anchor, cam) else { continue };
            let px = Pixel::new(px.u + jitter.sample(&mut det_rng), px.v + jitter.sample(&mut det_rng));
            let correct = det_rng.random_bool(noise.class_accuracy);
            let class = if correct {
                obj.class.clone()
            } else if obj.class != noise.confusion_bias_class {
                noise.confusion_bias_class.clone()
            } else {
                let choices: Vec<&&str> = other_classes.iter().filter(|c| **c != obj.class).collect();
                choices.choose(&mut det_rng).map(|c| c.to_string()).unwrap_or_default()
            };
            let conf = det_rng.random_range(0.55..0.98);
            let depth = (cam.rotation.transpose() * (center.coords - cam.translation))
                .z
                .max(1e-3);
            let half = cam.fx * obj.footprint_radius / depth;
            detections.push(Detection {
                center: px,
                half_extent: [half, half * (0.6 + 0.4 * (obj.height / obj.footprint_radius).min(1.0))],
                scores: [(class, conf)].into_iter().collect(),
                confidence: conf,
            });
            prov.push(Provenance::Object {
                object_id: obj.object_id.clone(),
                correct_class: correct,
            });
        }
        let hand_anchor = project(&Point3::new(hand[t].x, hand[t].y, h), cam).ok();
        if let Some(hp) = hand_anchor {
            if noise.arm_fp_prob > 0.0 && det_rng.random_bool(noise.arm_fp_prob) {
                let conf = det_rng.random_range(0.4..0.9);
                detections.push(Detection {
                    center: Pixel::new(
                        hp.u + 15.0 * det_rng.sample::<f64, _>(StandardNormal),
                        hp.v - 30.0 + 10.0 * det_rng.sample::<f64, _>(StandardNormal),
                    ),
                    half_extent: [40.0, 60.0],
                    scores: [("arm".to_string(), conf)].into_iter().collect(),
                    confidence: conf,
                });
                prov.push(Provenance::Arm);
            }
        }
        let n_fp = poisson.map_or(0, |p| p.sample(&mut det_rng) as usize);
        trace.false_positive_counts.push(n_fp);
        for _ in 0..n_fp {
            let conf = det_rng.random_range(0.1..0.7);
            let class = other_classes.choose(&mut det_rng).copied().unwrap_or("book");
            detections.push(Detection {
                center: Pixel::new(
                    det_rng.random_range(0.0..gen.image_size[0]),
                    det_rng.random_range(0.0..gen.image_size[1]),
                ),
                half_extent: [det_rng.random_range(8.0..40.0), det_rng.random_range(8.0..40.0)],
                scores: [(class.to_string(), conf)].into_iter().collect(),
                confidence: conf,
            });
            prov.push(Provenance::FalsePositive);
        }
        trace.provenance.push(prov);

        // Features: fixed projection of hand-object geometry and a noisy held flag.
        let nearest_other = scene
            .iter()
            .skip(1)
            .map(|o| (hand[t] - o.position).norm())
            .fold(1.0, f64::min);
        let speed = if t == 0 {
            0.0
        } else {
            (hand[t] - hand[t - 1]).norm() * gen.fps
        };
        let mut held_flag = if held_flags[t] { 1.0 } else { -1.0 };
        if noise.feature_flip_prob > 0.0 && feat_rng.random_bool(noise.feature_flip_prob) {
            held_flag = -held_flag;
        }
        let raw = [
            (hand[t] - moved_center[t]).norm() / 0.3,
            nearest_other / 0.3,
            speed / 0.3,
            held_flag,
            1.0,
        ];
        let features: Vec<f64> = (0..gen.feature_dim)
            .map(|j| {
                let clean: f64 = (0..RAW).map(|k| projection[j * RAW + k] * raw[k]).sum();
                let n = if noise.feature_noise_std > 0.0 {
                    noise.feature_noise_std * feat_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                clean + n
            })
            .collect();

        frame_records.push(FrameRecord {
            index: t,
            time_s: t as f64 / gen.fps,
            features,
            detections,
            gt_label: Some(if held_flags[t] {
                ActionLabel::OBJECT_HELD
            } else {
                ActionLabel::HAND_FREE
            }),
            gt_hand: hand_anchor,
        });
    }

    let mut manifest: Vec<ObjectEntry> = scene.iter().map(SceneObject::manifest_entry).collect();
    manifest.sort_by(|a, b| a.id.cmp(&b.id));
    let ep = Episode {
        id: format!("demo-{}-{:016x}", moved.object_id, script_seed.0),
        fps: gen.fps,
        frame_count: frames,
        feature_dim: gen.feature_dim,
        num_classes: DEFAULT_NUM_CLASSES,
        camera: *cam,
        table_height_m: h,
        objects: manifest,
        frames: frame_records,
        script: Some(script),
    };
    ep.validate()?;
    Ok((ep, trace))
}

/// `per_object` demonstrations for every catalog object, each with 2-4
/// distractors drawn from the rest of the catalog.
pub fn gen_dataset(
    catalog: &[SceneObject],
    per_object: usize,
    seed: RngSeed,
    gen: &GeneratorConfig,
    cam: &CameraModel,
    table: &TablePlane,
) -> Result<Vec<Episode>> {
    if per_object == 0 {
        return Err(Error::InvalidArgument("per_object must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(catalog.len() * per_object);
    for (o, moved) in catalog.iter().enumerate() {
        for r in 0..per_object {
            let ep_seed = seed.derive_index("episode", (o * per_object + r) as u64);
            let mut rng = ep_seed.derive("distractors").rng();
            let mut others: Vec<SceneObject> = catalog
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != o)
                .map(|(_, s)| s.clone())
                .collect();
            others.shuffle(&mut rng);
            let count = rng.random_range(2..=4usize).min(others.len());
            let mut objects = vec![moved.clone()];
            objects.extend(others.into_iter().take(count));
            if !objects.iter().any(|s| s.graspable) {
                if let Some(g) = catalog.iter().find(|s| s.graspable && !objects.contains(s)) {
                    objects.push(g.clone());
                }
            }
            let mut ep = generate_demo(&objects, ep_seed, gen, cam, table)?;
            ep.id = format!("{}-{:02}", moved.object_id, r);
            out.push(ep);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionTolerances {
    pub grasp_radius: f64,
    pub place_radius: f64,
    /// Pinch point offset above the object center.
    pub pinch_offset: f64,
    /// Failed grasps push objects whose footprint is within this distance of
    /// the tool (added to the footprint radius).
    pub contact_margin: f64,
}

impl Default for ExecutionTolerances {
    fn default() -> Self {
        ExecutionTolerances {
            grasp_radius: 0.03,
            place_radius: 0.05,
            pinch_offset: 0.0,
            contact_margin: 0.04,
        }
    }
}

/// Demonstrated outcome the execution is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub object_id: String,
    /// Footprint center of the final placement.
    pub position: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Attach {
        step: usize,
        object_id: String,
        at: Point3,
    },
    Detach {
        step: usize,
        object_id: String,
        at: Point3,
    },
    GraspFailed {
        step: usize,
        error_m: f64,
    },
    Push {
        step: usize,
        object_id: String,
        from: Point3,
        to: Point3,
    },
    ReleaseEmpty {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub success: bool,
    /// Distance from the tool to the nearest graspable object's grasp point.
    pub position_error: f64,
    pub object_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub grasp_outcomes: Vec<GraspOutcome>,
    pub final_object_positions: BTreeMap<String, Point3>,
    pub imitation_success: bool,
    pub events: Vec<Event>,
}

/// Replays a trajectory in the scene. Attached objects follow the tool and
/// are set down on the table at release; a failed grasp pushes the touched
/// object 2-5 cm away from the tool.
pub fn execute(
    scene: &[SceneObject],
    trajectory: &[TrajectorySegment],
    chain: &KinematicChain,
    tol: &ExecutionTolerances,
    goal: Option<&Goal>,
    table_height: f64,
    seed: RngSeed,
) -> Result<ExecutionResult> {
    for seg in trajectory.iter().filter(|s| s.kind.is_gripper_event()) {
        if let Some(id) = &seg.object_id {
            if !scene.iter().any(|o| &o.object_id == id) {
                return Err(Error::PlanObjectMismatch(id.clone()));
            }
        }
    }
    let mut rng = seed.derive("execute").rng();
    let mut objects: Vec<SceneObject> = scene.to_vec();
    let mut tool = fk(chain, &chain.home())?.tool;
    let mut last_motion = Vector3::new(1.0, 0.0, 0.0);
    let mut attached: Option<usize> = None;
    let mut events = Vec::new();
    let mut grasps = Vec::new();

    for (step, seg) in trajectory.iter().enumerate() {
        match seg.kind {
            StepKind::Grasp => {
                let grasp_point = |o: &SceneObject| o.position + Vector3::z() * tol.pinch_offset;
                let error = objects
                    .iter()
                    .filter(|o| o.graspable)
                    .map(|o| (grasp_point(o) - tool).norm())
                    .fold(f64::INFINITY, f64::min);
                let candidate = objects
                    .iter()
                    .enumerate()
                    .filter(|(i, o)| {
                        o.graspable && Some(*i) != attached && (grasp_point(o) - tool).norm() <= tol.grasp_radius
                    })
                    .min_by(|a, b| {
                        (grasp_point(a.1) - tool)
                            .norm()
                            .total_cmp(&(grasp_point(b.1) - tool).norm())
                    })
                    .map(|(i, _)| i);
                match candidate {
                    Some(i) if attached.is_none() => {
                        attached = Some(i);
                        events.push(Event::Attach {
                            step,
                            object_id: objects[i].object_id.clone(),
                            at: objects[i].position,
                        });
                        grasps.push(GraspOutcome {
                            success: true,
                            position_error: error,
                            object_id: Some(objects[i].object_id.clone()),
                        });
                    }
                    _ => {
                        events.push(Event::GraspFailed { step, error_m: error });
                        let touched = objects
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| Some(*i) != attached)
                            .map(|(i, o)| (i, (o.position - tool).xy().norm(), o))
                            .filter(|(_, d, o)| {
                                *d <= o.footprint_radius + tol.contact_margin
                                    && (o.position.z - tool.z).abs() <= o.height / 2.0 + tol.contact_margin
                            })
                            .min_by(|a, b| a.1.total_cmp(&b.1))
                            .map(|(i, _, _)| i);
                        if let Some(i) = touched {
                            let mut dir = (objects[i].position - tool).xy();
                            if dir.norm() < 1e-6 {
                                dir = last_motion.xy();
                            }
                            if dir.norm() < 1e-6 {
                                dir = nalgebra::Vector2::new(1.0, 0.0);
                            }
                            let dist = rng.random_range(0.02..=0.05);
                            let push = dir.normalize() * dist;
                            let from = objects[i].position;
                            objects[i].position = from + Vector3::new(push.x, push.y, 0.0);
                            events.push(Event::Push {
                                step,
                                object_id: objects[i].object_id.clone(),
                                from,
                                to: objects[i].position,
                            });
                        }
                        grasps.push(GraspOutcome {
                            success: false,
                            position_error: error,
                            object_id: None,
                        });
                    }
                }
            }
            StepKind::Release => match attached.take() {
                Some(i) => {
                    let o = &mut objects[i];
                    o.position = Point3::new(tool.x, tool.y, table_height + o.height / 2.0);
                    events.push(Event::Detach {
                        step,
                        object_id: o.object_id.clone(),
                        at: o.position,
                    });
                }
                None => events.push(Event::ReleaseEmpty { step }),
            },
            _ => {
                for q in &seg.waypoints {
                    let p = fk(chain, q)?.tool;
                    let d = p - tool;
                    if d.norm() > 1e-9 {
                        last_motion = d;
                    }
                    tool = p;
                    if let Some(i) = attached {
                        objects[i].position = tool - Vector3::z() * tol.pinch_offset;
                    }
                }
            }
        }
    }

    let final_object_positions: BTreeMap<String, Point3> =
        objects.iter().map(|o| (o.object_id.clone(), o.position)).collect();
    let placed = goal.is_some_and(|g| {
        objects
            .iter()
            .find(|o| o.object_id == g.object_id)
            .is_some_and(|o| (o.footprint() - g.position).xy().norm() <= tol.place_radius)
    });
    let imitation_success = !grasps.is_empty() && grasps.iter().all(|g| g.success) && placed && attached.is_none();
    Ok(ExecutionResult {
        grasp_outcomes: grasps,
        final_object_positions,
        imitation_success,
        events,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub grasp_attempts: usize,
    pub grasp_rate: f64,
    pub first_grasp_rate: f64,
    pub second_grasp_rate: f64,
    pub imitation_rate: f64,
}

pub fn score_run(results: &[ExecutionResult]) -> Result<RunSummary> {
    if results.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ratio = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let attempts: usize = results.iter().map(|r| r.grasp_outcomes.len()).sum();
    let successes: usize = results
        .iter()
        .flat_map(|r| &r.grasp_outcomes)
        .filter(|g| g.success)
        .count();
    let nth = |k: usize| {
        let tried: Vec<&GraspOutcome> = results.iter().filter_map(|r| r.grasp_outcomes.get(k)).collect();
        ratio(tried.iter().filter(|g| g.success).count(), tried.len())
    };
    Ok(RunSummary {
        runs: results.len(),
        grasp_attempts: attempts,
        grasp_rate: ratio(successes, attempts),
        first_grasp_rate: nth(0),
        second_grasp_rate: nth(1),
        imitation_rate: ratio(results.iter().filter(|r| r.imitation_success).count(), results.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (CameraModel, TablePlane) {
        let t = TablePlane::desk_default();
        (CameraModel::desk_default(t.height_m), t)
    }

    fn scene_objects() -> Vec<SceneObject> {
        let c = default_catalog();
        vec![c[1].clone(), c[0].clone(), c[2].clone()]
    }

    #[test]
    fn noiseless_detections_are_projected_anchors() {
        let (cam, table) = setup();
        let gen = GeneratorConfig {
            noise: NoiseModel::noiseless(),
            ..GeneratorConfig::default()
        };
        let ep = generate_demo(&scene_objects(), RngSeed(5), &gen, &cam, &table).unwrap();
        let script = ep.script.clone().unwrap();
        for f in &ep.frames {
            assert_eq!(f.detections.len(), 3);
        }
        let first = &ep.frames[0];
        let expected = project(&script.pick1, &cam).unwrap();
        assert!(first.detections.iter().any(|d| d.center.distance(&expected) < 1e-9));
        let labels: Vec<ActionLabel> = ep.gt_labels().unwrap();
        assert_eq!(labels, script.labels(ep.frame_count));
    }

    #[test]
    fn generated_episode_shape() {
        let (cam, table) = setup();
        let ep = generate_demo(&scene_objects(), RngSeed(1), &GeneratorConfig::default(), &cam, &table).unwrap();
        assert_eq!(ep.frame_count, 440);
        assert_eq!(ep.fps, 22.0);
        assert!((ep.duration_s() - 20.0).abs() < 1e-12);
        let s = ep.script.unwrap();
        assert!(s.held[0].1 < s.held[1].0);
        assert_eq!(s.pick2, s.place1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (cam, table) = setup();
        let gen = GeneratorConfig::default();
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate_demo(&scene_objects(), RngSeed(77), &gen, &cam, &table)
            .unwrap()
            .write_to(&mut a)
            .unwrap();
        generate_demo(&scene_objects(), RngSeed(77), &gen, &cam, &table)
            .unwrap()
            .write_to(&mut b)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_without_graspable_object_is_rejected() {
        let (cam, table) = setup();
        let c = default_catalog();
        let err = generate_demo(
            &[c[0].clone(), c[4].clone()],
            RngSeed(1),
            &GeneratorConfig::default(),
            &cam,
            &table,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Scene(_)));
    }

    #[test]
    fn dataset_sizes() {
        let (cam, table) = setup();
        let gen = GeneratorConfig::default();
        let eps = gen_dataset(&default_catalog(), 1, RngSeed(3), &gen, &cam, &table).unwrap();
        assert_eq!(eps.len(), 5);
        for ep in &eps {
            assert!((3..=5).contains(&ep.objects.len()));
            ep.validate().unwrap();
        }
    }

    #[test]
    fn empty_trajectory_changes_nothing() {
        let chain = KinematicChain::nicol_like_8dof();
        let mut objs = scene_objects();
        objs[0].rest_at(Point3::new(0.5, 0.0, 0.8));
        let r = execute(
            &objs,
            &[],
            &chain,
            &ExecutionTolerances::default(),
            None,
            0.8,
            RngSeed(0),
        )
        .unwrap();
        assert!(!r.imitation_success);
        assert!(r.events.is_empty());
        assert_eq!(r.final_object_positions["spam_can"], objs[0].position);
    }

    #[test]
    fn unknown_object_is_mismatch() {
        let chain = KinematicChain::nicol_like_8dof();
        let traj = [TrajectorySegment {
            kind: StepKind::Grasp,
            object_id: Some("ghost".into()),
            waypoints: vec![],
        }];
        let err = execute(
            &scene_objects(),
            &traj,
            &chain,
            &ExecutionTolerances::default(),
            None,
            0.8,
            RngSeed(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PlanObjectMismatch(_)));
    }

    fn outcome(success: bool) -> GraspOutcome {
        GraspOutcome {
            success,
            position_error: 0.0,
            object_id: None,
        }
    }

    fn result(grasps: &[bool], imitation: bool) -> ExecutionResult {
        ExecutionResult {
            grasp_outcomes: grasps.iter().map(|&s| outcome(s)).collect(),
            final_object_positions: BTreeMap::new(),
            imitation_success: imitation,
            events: vec![],
        }
    }

    #[test]
    fn score_examples() {
        assert!(matches!(score_run(&[]), Err(Error::EmptyBatch)));
        let all = score_run(&[result(&[true, true], true), result(&[true, true], true)]).unwrap();
        assert_eq!(
            (
                all.grasp_rate,
                all.first_grasp_rate,
                all.second_grasp_rate,
                all.imitation_rate
            ),
            (1.0, 1.0, 1.0, 1.0)
        );
        let mixed = score_run(&[
            result(&[true, false], true),
            result(&[false, true], false),
            result(&[true, true], true),
            result(&[false, false], false),
        ])
        .unwrap();
        assert_eq!(
            (
                mixed.grasp_rate,
                mixed.first_grasp_rate,
                mixed.second_grasp_rate,
                mixed.imitation_rate
            ),
            (0.5, 0.5, 0.5, 0.5)
        );
    }
}
