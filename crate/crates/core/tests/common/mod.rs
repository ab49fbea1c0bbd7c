#![allow(dead_code)]

use std::collections::BTreeMap;

use d2p_core::fusion::{Observation, Resolution, Track, VoteConfig};
use d2p_core::geometry::{CameraModel, TablePlane};
use d2p_core::sim::{default_catalog, generate_demo, GeneratorConfig, NoiseModel, SceneObject};
use d2p_core::types::{Episode, Pixel};
use d2p_core::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn desk() -> (CameraModel, TablePlane) {
    let table = TablePlane::desk_default();
    (CameraModel::desk_default(table.height_m), table)
}

pub fn noiseless_generator() -> GeneratorConfig {
    GeneratorConfig {
        noise: NoiseModel::noiseless(),
        ..GeneratorConfig::default()
    }
}

/// Graspable object moved, 2-4 distractors, all chosen from the seed.
pub fn scene_for(seed: RngSeed) -> Vec<SceneObject> {
    let catalog = default_catalog();
    let mut rng = seed.derive("scene").rng();
    let graspable: Vec<&SceneObject> = catalog.iter().filter(|o| o.graspable).collect();
    let moved = graspable[rng.random_range(0..graspable.len())].clone();
    let mut others: Vec<SceneObject> = catalog
        .iter()
        .filter(|o| o.object_id != moved.object_id)
        .cloned()
        .collect();
    others.shuffle(&mut rng);
    let n = rng.random_range(2..=4usize);
    let mut out = vec![moved];
    out.extend(others.into_iter().take(n));
    out
}

pub fn demo(seed: RngSeed, gen: &GeneratorConfig) -> Episode {
    let (cam, table) = desk();
    generate_demo(&scene_for(seed), seed, gen, &cam, &table).expect("demo generates")
}

/// Raw track description used by the voting oracle: per track, a list of
/// `(frame, u, v, confidence, class)`.
pub type RawTracks = Vec<Vec<(usize, f64, f64, f64, String)>>;

pub fn build_tracks(raw: &RawTracks) -> Vec<Track> {
    raw.iter()
        .enumerate()
        .map(|(id, obs)| {
            let mut observations = BTreeMap::new();
            let mut class_histogram = BTreeMap::new();
            for (f, u, v, c, class) in obs {
                observations.insert(
                    *f,
                    Observation {
                        center: Pixel::new(*u, *v),
                        confidence: *c,
                        class: class.clone(),
                    },
                );
                *class_histogram.entry(class.clone()).or_insert(0) += 1;
            }
            Track {
                track_id: id,
                last_confidence: obs.last().map_or(0.0, |o| o.3),
                observations,
                class_histogram,
            }
        })
        .collect()
}

/// Direct transcription of the voting rule over the raw lists.
pub fn brute_force_vote(raw: &RawTracks, keyframe: usize, hand: Option<Pixel>, cfg: &VoteConfig) -> Resolution {
    let modal = |obs: &Vec<(usize, f64, f64, f64, String)>| -> Option<String> {
        let mut names: Vec<&String> = obs.iter().map(|o| &o.4).collect();
        names.sort();
        names.dedup();
        let count = |n: &String| obs.iter().filter(|o| &o.4 == n).count();
        let top = names.iter().map(|n| count(n)).max()?;
        names.into_iter().find(|n| count(n) == top).cloned()
    };
    for k in 0..=cfg.max_window {
        let lo = keyframe as i64 - k as i64;
        let hi = (keyframe + k) as i64;
        let counts: Vec<usize> = raw
            .iter()
            .map(|obs| {
                let cls = modal(obs);
                if cls.as_ref().is_none_or(|c| cfg.class_blacklist.contains(c)) {
                    return 0;
                }
                obs.iter()
                    .filter(|(f, u, v, c, _)| {
                        let fi = *f as i64;
                        let near =
                            hand.is_none_or(|h| ((u - h.u).powi(2) + (v - h.v).powi(2)).sqrt() <= cfg.hand_radius_px);
                        fi >= lo && fi <= hi && near && *c >= cfg.min_confidence
                    })
                    .count()
            })
            .collect();
        let total: usize = counts.iter().sum();
        for (id, &n) in counts.iter().enumerate() {
            if n > 0 && 2 * n > total {
                let obs = &raw[id];
                let nearest = obs
                    .iter()
                    .min_by_key(|o| (o.0.abs_diff(keyframe), o.0))
                    .map(|o| Pixel::new(o.1, o.2));
                return Resolution {
                    track_id: Some(id),
                    class: modal(obs),
                    position: nearest,
                    frames_used: 2 * k + 1,
                    decided: true,
                };
            }
        }
    }
    Resolution {
        track_id: None,
        class: None,
        position: None,
        frames_used: 2 * cfg.max_window + 1,
        decided: false,
    }
}

/// Random small voting instance: up to five tracks over frames 0..=14,
/// detections clustered around the hand.
pub fn random_instance(rng: &mut impl Rng) -> (RawTracks, usize, Pixel) {
    let classes = ["metal can", "cardboard box", "arm", "red plate"];
    let hand = Pixel::new(300.0, 300.0);
    let n_tracks = rng.random_range(0..=5usize);
    let raw = (0..n_tracks)
        .map(|_| {
            let mut frames: Vec<usize> = (0..15).filter(|_| rng.random_bool(0.4)).collect();
            frames.sort();
            frames
                .into_iter()
                .map(|f| {
                    (
                        f,
                        hand.u + rng.random_range(-90.0..90.0),
                        hand.v + rng.random_range(-90.0..90.0),
                        rng.random_range(0.0..1.0),
                        classes[rng.random_range(0..classes.len())].to_string(),
                    )
                })
                .collect()
        })
        .collect();
    (raw, rng.random_range(3..=11usize), hand)
}
