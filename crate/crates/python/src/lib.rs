//! Python bindings: configuration, episodes, segmentation models, geometry,
//! kinematics, planning and simulated execution.

use d2p_core::cli::TimelineFile;
use d2p_core::config::PipelineConfig;
use d2p_core::diffusion::{checkpoint, infer, train, DenoiserParams, LossConfig, NoiseSchedule, StepPlan};
use d2p_core::eval::{execute_plan_file, PlanFile};
use d2p_core::geometry;
use d2p_core::kinematics::{self, IkSettings, JointConfig, KinematicChain};
use d2p_core::planning::{plan_episode, LabelTimeline};
use d2p_core::sim::gen_dataset;
use d2p_core::types::{ActionLabel, Pixel, Point3};
use d2p_core::RngSeed;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: d2p_core::Error) -> PyErr {
    if e.is_domain_failure() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig {
            inner: PipelineConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        PipelineConfig::from_toml_str(text)
            .map(|inner| PyConfig { inner })
            .map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }
}

fn config_or_default(cfg: Option<&PyConfig>) -> PipelineConfig {
    cfg.map(|c| c.inner.clone()).unwrap_or_default()
}

#[pyclass(name = "Episode", from_py_object)]
#[derive(Clone)]
struct PyEpisode {
    inner: d2p_core::types::Episode,
}

#[pymethods]
impl PyEpisode {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        d2p_core::types::Episode::read_from(text.as_bytes())
            .map(|inner| PyEpisode { inner })
            .map_err(py_err)
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner
            .write_to(&mut buf)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(String::from_utf8(buf).expect("episodes serialize to UTF-8"))
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.frame_count
    }

    /// Ground-truth label per frame (0 hand free, 1 object held), if known.
    fn gt_labels(&self) -> Option<Vec<u8>> {
        self.inner.gt_labels().map(|l| l.into_iter().map(|a| a.0).collect())
    }

    fn __repr__(&self) -> String {
        format!("Episode(id={:?}, frames={})", self.inner.id, self.inner.frame_count)
    }
}

#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: DenoiserParams,
    total_steps: usize,
}

#[pymethods]
impl PyModel {
    /// Trains on every episode given; `losses` is e.g. `"ce,ba,ts"`.
    #[staticmethod]
    #[pyo3(signature = (episodes, losses = "ce", config = None))]
    fn train(episodes: Vec<PyEpisode>, losses: &str, config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config_or_default(config);
        let terms = LossConfig::parse_terms(losses).map_err(py_err)?;
        let loss = LossConfig {
            use_ba: terms.use_ba,
            use_ts: terms.use_ts,
            ..cfg.loss
        };
        let data: Vec<_> = episodes.into_iter().map(|e| e.inner).collect();
        let out = train(
            &data,
            &loss,
            &cfg.schedule().map_err(py_err)?,
            cfg.denoiser().map_err(py_err)?,
            &cfg.train.hyper(RngSeed(cfg.seeds.train)),
        )
        .map_err(py_err)?;
        Ok(PyModel {
            params: out.params,
            total_steps: cfg.schedule.total_steps,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let (params, total_steps) = checkpoint::decode(data).map_err(py_err)?;
        Ok(PyModel { params, total_steps })
    }

    fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.params, self.total_steps)
    }

    /// Per-frame labels; `steps` is `"direct"` or a step count.
    #[pyo3(signature = (episode, steps = "100", config = None))]
    fn segment(&self, episode: &PyEpisode, steps: &str, config: Option<&PyConfig>) -> PyResult<Vec<u8>> {
        let cfg = config_or_default(config);
        let sched = NoiseSchedule::cosine(self.total_steps, cfg.schedule.scale).map_err(py_err)?;
        let plan = StepPlan::parse(steps).map_err(py_err)?;
        let ep = &episode.inner;
        let labels = infer(
            &ep.feature_matrix().view(),
            &self.params,
            &sched,
            &plan.steps(&sched),
            RngSeed(cfg.seeds.infer).derive(&ep.id),
        )
        .map_err(py_err)?;
        Ok(labels.labels.into_iter().map(|a| a.0).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (per_object, seed, config = None))]
fn generate_dataset(per_object: usize, seed: u64, config: Option<&PyConfig>) -> PyResult<Vec<PyEpisode>> {
    let cfg = config_or_default(config);
    let eps = gen_dataset(
        &cfg.objects,
        per_object,
        RngSeed(seed),
        &cfg.generator(),
        &cfg.camera().map_err(py_err)?,
        &cfg.table,
    )
    .map_err(py_err)?;
    Ok(eps.into_iter().map(|inner| PyEpisode { inner }).collect())
}

#[pyfunction]
#[pyo3(signature = (point, config = None))]
fn project(point: (f64, f64, f64), config: Option<&PyConfig>) -> PyResult<(f64, f64)> {
    let cam = config_or_default(config).camera().map_err(py_err)?;
    let px = geometry::project(&Point3::new(point.0, point.1, point.2), &cam).map_err(py_err)?;
    Ok((px.u, px.v))
}

/// Table-plane point seen at a pixel.
#[pyfunction]
#[pyo3(signature = (pixel, config = None))]
fn backproject(pixel: (f64, f64), config: Option<&PyConfig>) -> PyResult<(f64, f64, f64)> {
    let cfg = config_or_default(config);
    let cam = cfg.camera().map_err(py_err)?;
    let p = geometry::backproject(&Pixel::new(pixel.0, pixel.1), &cam, &cfg.table).map_err(py_err)?;
    Ok((p.x, p.y, p.z))
}

fn chain(preset: &str) -> PyResult<KinematicChain> {
    KinematicChain::preset(preset).ok_or_else(|| PyValueError::new_err(format!("unknown chain preset {preset:?}")))
}

#[pyfunction]
fn fk(preset: &str, q: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = kinematics::fk(&chain(preset)?, &JointConfig::new(q))
        .map_err(py_err)?
        .tool;
    Ok((t.x, t.y, t.z))
}

/// Joint angles reaching `target`, starting from `seed` or the home pose.
#[pyfunction]
#[pyo3(signature = (preset, target, seed = None))]
fn solve_ik(preset: &str, target: (f64, f64, f64), seed: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let c = chain(preset)?;
    let start = seed.map(JointConfig::new).unwrap_or_else(|| c.home());
    let sol = kinematics::solve_ik(
        &c,
        &Point3::new(target.0, target.1, target.2),
        &start,
        &IkSettings::default(),
    )
    .map_err(py_err)?;
    Ok(sol.q.q)
}

/// Plan file (JSON) for an episode segmented into `labels`.
#[pyfunction]
#[pyo3(signature = (episode, labels, config = None))]
fn plan(episode: &PyEpisode, labels: Vec<u8>, config: Option<&PyConfig>) -> PyResult<String> {
    let cfg = config_or_default(config);
    let ep = &episode.inner;
    if labels.len() != ep.frame_count {
        return Err(PyValueError::new_err(format!(
            "{} labels for {} frames",
            labels.len(),
            ep.frame_count
        )));
    }
    let tl = LabelTimeline::new(labels.into_iter().map(ActionLabel).collect());
    let run = plan_episode(ep, &tl, &cfg.table, &cfg.vote, &cfg.planning);
    let file = PlanFile::new(ep, run.report).map_err(py_err)?;
    serde_json::to_string_pretty(&file).map_err(json_err)
}

/// Executes a plan file in the simulator and returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (plan_json, config = None))]
fn execute(plan_json: &str, config: Option<&PyConfig>) -> PyResult<String> {
    let cfg = config_or_default(config);
    let file: PlanFile = serde_json::from_str(plan_json).map_err(json_err)?;
    let seed = RngSeed(cfg.seeds.execute).derive(&file.episode_id);
    let result = execute_plan_file(&file, &cfg, &cfg.chain().map_err(py_err)?, seed).map_err(py_err)?;
    serde_json::to_string_pretty(&result).map_err(json_err)
}

/// Timeline JSON in the format written by the `segment` command.
#[pyfunction]
fn timeline_json(episode_id: &str, steps: &str, labels: Vec<u8>) -> PyResult<String> {
    let file = TimelineFile {
        episode_id: episode_id.to_string(),
        steps: steps.to_string(),
        labels: LabelTimeline::new(labels.into_iter().map(ActionLabel).collect()),
        frame_accuracy: None,
    };
    serde_json::to_string_pretty(&file).map_err(json_err)
}

#[pymodule]
fn d2p(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(fk, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ik, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(execute, m)?)?;
    m.add_function(wrap_pyfunction!(timeline_json, m)?)?;
    Ok(())
}
