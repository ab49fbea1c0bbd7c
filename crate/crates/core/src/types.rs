//! Shared domain types, the episode data model and its JSONL encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::rng::RngSeed;
use crate::sim::DemoScript;

pub type Point3 = nalgebra::Point3<f64>;

pub const DEFAULT_FPS: f64 = 22.0;
pub const DEFAULT_FRAME_COUNT: usize = 440;
pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_NUM_CLASSES: usize = 2;

/// Detector vocabulary. "arm" and "hand" exist so that limb false positives
/// can be named and filtered.
pub const DEFAULT_VOCABULARY: [&str; 15] = [
    "metal can",
    "cardboard box",
    "red plate",
    "plastic bottle",
    "coffee mug",
    "banana",
    "apple",
    "sponge",
    "marker",
    "scissors",
    "book",
    "paper cup",
    "spoon",
    "arm",
    "hand",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionLabel(pub u8);

impl ActionLabel {
    pub const HAND_FREE: ActionLabel = ActionLabel(0);
    pub const OBJECT_HELD: ActionLabel = ActionLabel(1);

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn is_held(self) -> bool {
        self == ActionLabel::OBJECT_HELD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl From<[f64; 2]> for Pixel {
    fn from(a: [f64; 2]) -> Self {
        Pixel { u: a[0], v: a[1] }
    }
}

impl From<Pixel> for [f64; 2] {
    fn from(p: Pixel) -> Self {
        [p.u, p.v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: Pixel,
    pub half_extent: [f64; 2],
    pub scores: BTreeMap<String, f64>,
    pub confidence: f64,
}

impl Detection {
    /// Highest-scoring class; ties go to the lexicographically first name.
    pub fn top_class(&self) -> &str {
        let mut best: Option<(&str, f64)> = None;
        for (name, &score) in &self.scores {
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((name.as_str(), score));
            }
        }
        best.map(|(n, _)| n).unwrap_or("")
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.scores.is_empty() {
            return Err("detection has no class scores".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("detection confidence {} outside [0,1]", self.confidence));
        }
        if let Some((name, s)) = self.scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(format!("score for {name:?} is {s}, outside [0,1]"));
        }
        if !self.center.is_finite() {
            return Err("detection center is not finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub time_s: f64,
    pub features: Vec<f64>,
    pub detections: Vec<Detection>,
    pub gt_label: Option<ActionLabel>,
    pub gt_hand: Option<Pixel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub class: String,
    pub graspable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    /// Initial object center, when the episode was produced by the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub fps: f64,
    pub frame_count: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub camera: CameraModel,
    pub table_height_m: f64,
    pub objects: Vec<ObjectEntry>,
    pub frames: Vec<FrameRecord>,
    /// Hidden generator state; present only for simulated demonstrations.
    pub script: Option<DemoScript>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    id: String,
    fps: f64,
    frame_count: usize,
    feature_dim: usize,
    #[serde(default = "default_num_classes")]
    num_classes: usize,
    camera: CameraModel,
    table_height_m: f64,
    objects: Vec<ObjectEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    script: Option<DemoScript>,
}

fn default_num_classes() -> usize {
    DEFAULT_NUM_CLASSES
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.frame_count {
            return Err(Error::Schema(format!(
                "header declares {} frames but {} were found",
                self.frame_count,
                self.frames.len()
            )));
        }
        if self.num_classes < 2 || self.num_classes > usize::from(u8::MAX) {
            return Err(Error::Schema(format!("num_classes {} out of range", self.num_classes)));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Schema("fps must be positive".into()));
        }
        self.camera.validate()?;
        let mut prev: Option<usize> = None;
        for f in &self.frames {
            if prev.is_some_and(|p| f.index <= p) {
                return Err(Error::Schema(format!("frame index {} is not increasing", f.index)));
            }
            prev = Some(f.index);
            if f.features.len() != self.feature_dim {
                return Err(Error::Schema(format!(
                    "frame {} has {} features, expected {}",
                    f.index,
                    f.features.len(),
                    self.feature_dim
                )));
            }
            if let Some(l) = f.gt_label {
                if l.index() >= self.num_classes {
                    return Err(Error::Schema(format!(
                        "frame {} label {} >= class count {}",
                        f.index, l.0, self.num_classes
                    )));
                }
            }
            for d in &f.detections {
                d.validate()
                    .map_err(|m| Error::Schema(format!("frame {}: {m}", f.index)))?;
            }
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.frame_count as f64 / self.fps
    }

    pub fn gt_labels(&self) -> Option<Vec<ActionLabel>> {
        self.frames.iter().map(|f| f.gt_label).collect()
    }

    /// T x D conditioning matrix in row-major order.
    pub fn feature_matrix(&self) -> ndarray::Array2<f64> {
        let mut m = ndarray::Array2::zeros((self.frames.len(), self.feature_dim));
        for (t, f) in self.frames.iter().enumerate() {
            for (j, v) in f.features.iter().enumerate() {
                m[[t, j]] = *v;
            }
        }
        m
    }

    pub fn object(&self, id: &str) -> Option<&ObjectEntry> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn header(&self) -> EpisodeHeader {
        EpisodeHeader {
            id: self.id.clone(),
            fps: self.fps,
            frame_count: self.frame_count,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            camera: self.camera,
            table_height_m: self.table_height_m,
            objects: self.objects.clone(),
            script: self.script.clone(),
        }
    }

    /// Writes the JSONL encoding (header line, then one line per frame).
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n")?;
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Episode> {
        let mut lines = r.lines().enumerate();
        let header: EpisodeHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?;
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
        };
        let mut frames = Vec::with_capacity(header.frame_count);
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let frame: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            frames.push(frame);
        }
        let ep = Episode {
            id: header.id,
            fps: header.fps,
            frame_count: header.frame_count,
            feature_dim: header.feature_dim,
            num_classes: header.num_classes,
            camera: header.camera,
            table_height_m: header.table_height_m,
            objects: header.objects,
            frames,
            script: header.script,
        };
        ep.validate()?;
        Ok(ep)
    }
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    ep.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Episode::read_from(BufReader::new(file))
}

/// Seeded shuffle followed by a cut at `round(n * train_fraction)`.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: RngSeed) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = items.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.derive("split").rng());
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}
