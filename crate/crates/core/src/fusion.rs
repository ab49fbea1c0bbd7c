//! Frame-to-frame track association and majority-voted object resolution
//! around keyframes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Episode, Pixel};

/// Frames searched on each side of a requested index by [`displacement`].
pub const DISPLACEMENT_SEARCH_FRAMES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    /// Window radius in frames on each side of the keyframe.
    pub max_window: usize,
    pub min_confidence: f64,
    pub gate_px: f64,
    pub class_blacklist: BTreeSet<String>,
    pub hand_radius_px: f64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            max_window: 10,
            min_confidence: 0.3,
            gate_px: 40.0,
            class_blacklist: ["arm", "hand"].iter().map(|s| s.to_string()).collect(),
            hand_radius_px: 60.0,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_px > 0.0) {
            return Err(Error::InvalidArgument("gate_px must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub center: Pixel,
    pub confidence: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: usize,
    pub observations: BTreeMap<usize, Observation>,
    pub class_histogram: BTreeMap<String, usize>,
    pub last_confidence: f64,
}

impl Track {
    fn new(track_id: usize, frame: usize, obs: Observation) -> Self {
        let mut t = Track {
            track_id,
            observations: BTreeMap::new(),
            class_histogram: BTreeMap::new(),
            last_confidence: 0.0,
        };
        t.push(frame, obs);
        t
    }

    fn push(&mut self, frame: usize, obs: Observation) {
        *self.class_histogram.entry(obs.class.clone()).or_default() += 1;
        self.last_confidence = obs.confidence;
        self.observations.insert(frame, obs);
    }

    pub fn last_center(&self) -> Option<Pixel> {
        self.observations.values().next_back().map(|o| o.center)
    }

    pub fn center_at(&self, frame: usize) -> Option<Pixel> {
        self.observations.get(&frame).map(|o| o.center)
    }

    /// Most frequent class; ties resolve to the lexicographically first name.
    pub fn modal_class(&self) -> Option<&str> {
        let mut best: Option<(&str, usize)> = None;
        for (name, &n) in &self.class_histogram {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((name.as_str(), n));
            }
        }
        best.map(|(n, _)| n)
    }

    /// Observation closest in time to `frame`, within `radius` frames.
    /// Equidistant candidates resolve to the earlier frame.
    pub fn nearest(&self, frame: usize, radius: usize) -> Option<(usize, Pixel)> {
        let lo = frame.saturating_sub(radius);
        self.observations
            .range(lo..=frame.saturating_add(radius))
            .min_by_key(|(f, _)| (f.abs_diff(frame), **f))
            .map(|(f, o)| (*f, o.center))
    }
}

/// Greedy nearest-neighbour association. Each detection joins the nearest
/// track (by last center) within `gate_px` that has not already been
/// extended in the current frame; otherwise it opens a new track.
pub fn associate_tracks(ep: &Episode, cfg: &VoteConfig) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    for frame in &ep.frames {
        let mut claimed: BTreeSet<usize> = BTreeSet::new();
        for det in &frame.detections {
            let obs = Observation {
                center: det.center,
                confidence: det.confidence,
                class: det.top_class().to_string(),
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, tr) in tracks.iter().enumerate() {
                if claimed.contains(&i) {
                    continue;
                }
                let Some(last) = tr.last_center() else { continue };
                let d = last.distance(&obs.center);
                // Strict comparison keeps the lower id on ties.
                if d <= cfg.gate_px && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, _)) => {
                    tracks[i].push(frame.index, obs);
                    claimed.insert(i);
                }
                None => {
                    let id = tracks.len();
                    tracks.push(Track::new(id, frame.index, obs));
                    claimed.insert(id);
                }
            }
        }
    }
    tracks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub track_id: Option<usize>,
    pub class: Option<String>,
    pub position: Option<Pixel>,
    pub frames_used: usize,
    pub decided: bool,
}

impl Resolution {
    fn undecided(max_window: usize) -> Self {
        Resolution {
            track_id: None,
            class: None,
            position: None,
            frames_used: 2 * max_window + 1,
            decided: false,
        }
    }
}

fn plausible(track: &Track, obs: &Observation, hand: Option<Pixel>, cfg: &VoteConfig) -> bool {
    let near_hand = hand.is_none_or(|h| obs.center.distance(&h) <= cfg.hand_radius_px);
    let allowed = track.modal_class().is_some_and(|c| !cfg.class_blacklist.contains(c));
    near_hand && allowed && obs.confidence >= cfg.min_confidence
}

/// Grows a symmetric window `[keyframe - k, keyframe + k]` for
/// `k = 0..=max_window` until one track holds a strict majority of the
/// plausible appearances in it. `hand = None` disables the hand-distance
/// predicate.
pub fn resolve_at_keyframe(tracks: &[Track], keyframe: usize, hand: Option<Pixel>, cfg: &VoteConfig) -> Resolution {
    for k in 0..=cfg.max_window {
        let lo = keyframe.saturating_sub(k);
        let hi = keyframe + k;
        let mut total = 0usize;
        let mut leader: Option<(&Track, usize)> = None;
        for tr in tracks {
            let n = tr
                .observations
                .range(lo..=hi)
                .filter(|(_, o)| plausible(tr, o, hand, cfg))
                .count();
            total += n;
            if n > 0 && leader.is_none_or(|(_, best)| n > best) {
                leader = Some((tr, n));
            }
        }
        if let Some((tr, n)) = leader {
            if 2 * n > total {
                return Resolution {
                    track_id: Some(tr.track_id),
                    class: tr.modal_class().map(str::to_string),
                    position: tr.nearest(keyframe, usize::MAX / 2).map(|(_, c)| c),
                    frames_used: 2 * k + 1,
                    decided: true,
                };
            }
        }
    }
    Resolution::undecided(cfg.max_window)
}

/// Pixel distance between the track's centers nearest to `before` and `after`.
pub fn displacement(track: &Track, before: usize, after: usize) -> Result<f64> {
    let lookup = |frame: usize| {
        track
            .nearest(frame, DISPLACEMENT_SEARCH_FRAMES)
            .map(|(_, c)| c)
            .ok_or(Error::MissingObservation {
                track_id: track.track_id,
                frame,
                radius: DISPLACEMENT_SEARCH_FRAMES,
            })
    };
    let a = lookup(before)?;
    let b = lookup(after)?;
    Ok(a.distance(&b))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use crate::types::{Detection, FrameRecord};

    pub(crate) fn det(u: f64, v: f64, class: &str, conf: f64) -> Detection {
        Detection {
            center: Pixel::new(u, v),
            half_extent: [10.0, 10.0],
            scores: [(class.to_string(), conf)].into_iter().collect(),
            confidence: conf,
        }
    }

    pub(crate) fn episode_from(frames: Vec<Vec<Detection>>) -> Episode {
        let n = frames.len();
        Episode {
            id: "fusion".into(),
            fps: 22.0,
            frame_count: n,
            feature_dim: 0,
            num_classes: 2,
            camera: CameraModel::desk_default(0.8),
            table_height_m: 0.8,
            objects: vec![],
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(i, detections)| FrameRecord {
                    index: i,
                    time_s: i as f64 / 22.0,
                    features: vec![],
                    detections,
                    gt_label: None,
                    gt_hand: None,
                })
                .collect(),
            script: None,
        }
    }

    #[test]
    fn stationary_detection_is_one_track() {
        let ep = episode_from((0..20).map(|_| vec![det(100.0, 100.0, "metal can", 0.9)]).collect());
        let tracks = associate_tracks(&ep, &VoteConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations.len(), 20);
        assert_eq!(tracks[0].class_histogram["metal can"], 20);
    }

    #[test]
    fn distant_detections_form_two_tracks() {
        let ep = episode_from(
            (0..10)
                .map(|_| {
                    vec![
                        det(100.0, 100.0, "metal can", 0.9),
                        det(300.0, 100.0, "cardboard box", 0.9),
                    ]
                })
                .collect(),
        );
        assert_eq!(associate_tracks(&ep, &VoteConfig::default()).len(), 2);
    }

    #[test]
    fn jump_beyond_gate_breaks_track() {
        let frames = (0..10)
            .map(|i| {
                let u = if i < 6 { 100.0 } else { 200.0 };
                vec![det(u, 100.0, "metal can", 0.9)]
            })
            .collect();
        let tracks = associate_tracks(&episode_from(frames), &VoteConfig::default());
        assert_eq!(tracks.len(), 2);
        assert_eq!(*tracks[0].observations.keys().next_back().unwrap(), 5);
        assert_eq!(*tracks[1].observations.keys().next().unwrap(), 6);
    }

    #[test]
    fn tie_goes_to_lower_track_id() {
        let frames = vec![
            vec![det(100.0, 100.0, "a", 0.9), det(120.0, 100.0, "b", 0.9)],
            vec![det(110.0, 100.0, "a", 0.9)],
        ];
        let tracks = associate_tracks(&episode_from(frames), &VoteConfig::default());
        assert_eq!(tracks[0].observations.len(), 2);
        assert_eq!(tracks[1].observations.len(), 1);
    }

    #[test]
    fn single_plausible_track_decides_immediately() {
        let ep = episode_from((0..5).map(|_| vec![det(100.0, 100.0, "metal can", 0.9)]).collect());
        let tracks = associate_tracks(&ep, &VoteConfig::default());
        let r = resolve_at_keyframe(&tracks, 2, Some(Pixel::new(100.0, 110.0)), &VoteConfig::default());
        assert!(r.decided);
        assert_eq!(r.frames_used, 1);
        assert_eq!(r.track_id, Some(0));
        assert_eq!(r.class.as_deref(), Some("metal can"));
    }

    #[test]
    fn empty_keyframe_resolved_from_neighbours() {
        // Track A (id 0) at frames 1 and 3, track B (id 1) only at frame 1.
        let frames = vec![
            vec![],
            vec![
                det(100.0, 100.0, "metal can", 0.9),
                det(150.0, 100.0, "cardboard box", 0.9),
            ],
            vec![],
            vec![det(100.0, 100.0, "metal can", 0.9)],
            vec![],
        ];
        let tracks = associate_tracks(&episode_from(frames), &VoteConfig::default());
        let r = resolve_at_keyframe(&tracks, 2, Some(Pixel::new(120.0, 100.0)), &VoteConfig::default());
        assert!(r.decided);
        assert_eq!(r.frames_used, 3);
        assert_eq!(r.track_id, Some(0));
    }

    #[test]
    fn balanced_tracks_stay_undecided() {
        let frames = (0..30)
            .map(|_| {
                vec![
                    det(100.0, 100.0, "metal can", 0.9),
                    det(150.0, 100.0, "cardboard box", 0.9),
                ]
            })
            .collect();
        let tracks = associate_tracks(&episode_from(frames), &VoteConfig::default());
        let r = resolve_at_keyframe(&tracks, 15, Some(Pixel::new(125.0, 100.0)), &VoteConfig::default());
        assert!(!r.decided);
        assert_eq!(r.frames_used, 21);
        assert_eq!(r.track_id, None);
    }

    #[test]
    fn blacklisted_and_weak_detections_are_ignored() {
        let frames = (0..5)
            .map(|_| {
                vec![
                    det(100.0, 100.0, "arm", 0.95),
                    det(160.0, 100.0, "metal can", 0.2),
                    det(130.0, 140.0, "cardboard box", 0.8),
                ]
            })
            .collect();
        let tracks = associate_tracks(&episode_from(frames), &VoteConfig::default());
        let r = resolve_at_keyframe(&tracks, 2, Some(Pixel::new(120.0, 110.0)), &VoteConfig::default());
        assert_eq!(r.class.as_deref(), Some("cardboard box"));
    }

    #[test]
    fn displacement_examples() {
        let frames = (0..10)
            .map(|i| {
                if i < 5 {
                    vec![det(100.0, 100.0, "x", 0.9)]
                } else {
                    vec![]
                }
            })
            .collect();
        let tracks = associate_tracks(&episode_from(frames), &VoteConfig::default());
        assert_eq!(displacement(&tracks[0], 0, 4).unwrap(), 0.0);
        assert!(matches!(
            displacement(&tracks[0], 0, 9),
            Err(Error::MissingObservation { .. })
        ));

        let mut tr = tracks[0].clone();
        tr.observations.get_mut(&4).unwrap().center = Pixel::new(160.0, 180.0);
        assert!((displacement(&tr, 0, 4).unwrap() - 100.0).abs() < 1e-12);
    }
}
