//! Python bindings: configs, datasets, the two training loops, evaluation
//! and the loss functions.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use gait_core::backbone::Backbone;
use gait_core::checkpoint::Checkpoint;
use gait_core::config::RunConfig;
use gait_core::data::dataset::{index_dataset, DatasetIndex, GaitSequence, Identity};
use gait_core::data::silhouette::{align_silhouette, Silhouette};
use gait_core::data::synth::generate_synthetic_dataset;
use gait_core::eval::{build_protocol_sets, evaluate, EvalProtocol};
use gait_core::finetune::{stripe_distance as core_stripe_distance, triplet_loss_ba, Finetuner as CoreFinetuner};
use gait_core::matrix::Matrix;
use gait_core::ssl::{cosine_loss as core_cosine_loss, Pretrainer as CorePretrainer};
use gait_core::GaitError;

fn to_py(err: GaitError) -> PyErr {
    match err.exit_code() {
        2 => PyValueError::new_err(err.to_string()),
        4 => PyArithmeticError::new_err(err.to_string()),
        _ => match err {
            GaitError::Io { .. } => PyIOError::new_err(err.to_string()),
            other => PyValueError::new_err(other.to_string()),
        },
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Matrix::from_vec(rows.len(), cols, rows.concat()).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

fn silhouette(image: Vec<Vec<f32>>) -> PyResult<Silhouette> {
    let width = image.first().map_or(0, Vec::len);
    Silhouette::new(image.len(), width, image.concat()).map_err(to_py)
}

/// A resolved `key = value` run configuration.
#[pyclass(module = "gait", name = "RunConfig", skip_from_py_object)]
#[derive(Clone)]
struct RunConfigPy {
    inner: RunConfig,
}

#[pymethods]
impl RunConfigPy {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(RunConfigPy {
            inner: RunConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(RunConfigPy {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)?;
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, preset={:?})", self.inner.seed, self.inner.preset)
    }
}

/// An indexed dataset with its sequences loaded into memory.
#[pyclass(module = "gait")]
struct Dataset {
    index: DatasetIndex,
    sequences: Vec<GaitSequence>,
}

impl Dataset {
    fn from_index(index: DatasetIndex) -> PyResult<Self> {
        let sequences = index.sequences.iter().map(|d| d.load()).collect::<Result<_, _>>().map_err(to_py)?;
        Ok(Dataset { index, sequences })
    }

    fn subset(&self, ids: &[Identity]) -> Vec<GaitSequence> {
        self.sequences.iter().filter(|s| ids.contains(&s.identity)).cloned().collect()
    }
}

#[pymethods]
impl Dataset {
    /// Renders the synthetic walkers described by the config's `synth.*` keys.
    #[staticmethod]
    fn synthetic(config: &RunConfigPy) -> PyResult<Self> {
        Self::from_index(generate_synthetic_dataset(&config.inner.synth).map_err(to_py)?)
    }

    /// Indexes a dataset root using the config's `data.layout`.
    #[staticmethod]
    fn open(root: PathBuf, config: &RunConfigPy) -> PyResult<Self> {
        let (index, _) = index_dataset(&root, config.inner.data.layout).map_err(to_py)?;
        Self::from_index(index)
    }

    fn identities(&self) -> Vec<Identity> {
        self.index.identities()
    }

    fn views(&self) -> Vec<u32> {
        self.index.views()
    }

    fn __len__(&self) -> usize {
        self.sequences.len()
    }
}

fn training_ids(config: &RunConfig, data: &Dataset) -> PyResult<(Vec<Identity>, Vec<Identity>)> {
    config.data.split(&data.index).map_err(to_py)
}

/// Self-supervised pre-training loop.
#[pyclass(module = "gait")]
struct Pretrainer {
    inner: CorePretrainer,
    config: RunConfig,
}

#[pymethods]
impl Pretrainer {
    #[new]
    fn new(config: &RunConfigPy) -> PyResult<Self> {
        let c = config.inner.clone();
        Ok(Pretrainer {
            inner: CorePretrainer::new(c.model.clone(), c.pretrain.clone()).map_err(to_py)?,
            config: c,
        })
    }

    /// One step on the training identities; returns the step statistics.
    fn step(&mut self, data: &Dataset) -> PyResult<BTreeMap<&'static str, f64>> {
        let (train, _) = training_ids(&self.config, data)?;
        let s = self.inner.step(&data.subset(&train)).map_err(to_py)?;
        Ok(BTreeMap::from([
            ("loss", s.loss),
            ("mean_cosine", s.mean_cosine),
            ("target_std_min", s.target_std_min),
        ]))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.net.steps
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_pretrain(&self.inner.net, &self.config, self.inner.net.steps as u64)
            .save(&path)
            .map_err(to_py)
    }
}

/// Triplet-loss fine-tuning loop, from scratch or from a checkpoint.
#[pyclass(module = "gait")]
struct Finetuner {
    inner: CoreFinetuner,
    config: RunConfig,
}

#[pymethods]
impl Finetuner {
    #[new]
    #[pyo3(signature = (config, checkpoint = None))]
    fn new(config: &RunConfigPy, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let c = config.inner.clone();
        let inner = match checkpoint {
            Some(path) => {
                let ck = Checkpoint::load(&path).map_err(to_py)?;
                let (backbone, params) = ck.backbone(&c.model.backbone).map_err(to_py)?;
                CoreFinetuner::new(backbone, &params, c.finetune.clone())
            }
            None => CoreFinetuner::from_scratch(c.model.backbone.clone(), c.finetune.clone()),
        }
        .map_err(to_py)?;
        Ok(Finetuner { inner, config: c })
    }

    fn step(&mut self, data: &Dataset) -> PyResult<BTreeMap<&'static str, f64>> {
        let (train, _) = training_ids(&self.config, data)?;
        let o = self.inner.train_step(&data.subset(&train)).map_err(to_py)?;
        Ok(BTreeMap::from([
            ("loss", o.loss),
            ("triplets", o.triplets as f64),
            ("active", o.active as f64),
        ]))
    }

    /// Embedding (`strips x embed_dim`) of a list of aligned frames.
    fn embed(&self, frames: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f64>>> {
        let frames = frames.into_iter().map(silhouette).collect::<PyResult<Vec<_>>>()?;
        Ok(rows(&self.inner.embed_sequence(&frames).map_err(to_py)?))
    }

    /// Mean rank-1 accuracy per probe condition on the test identities.
    #[pyo3(signature = (data, exclude_identical_view = true))]
    fn evaluate(&self, data: &Dataset, exclude_identical_view: bool) -> PyResult<BTreeMap<String, Option<f64>>> {
        let (_, test) = training_ids(&self.config, data)?;
        let backbone: &Backbone = &self.inner.backbone;
        let sets = build_protocol_sets(&data.index.restrict(&test), backbone, &self.inner.params, EvalProtocol::CasiaB)
            .map_err(to_py)?;
        let matrices = evaluate(&sets, exclude_identical_view).map_err(to_py)?;
        Ok(matrices.iter().map(|m| (m.condition.clone(), m.mean())).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_finetune(&self.inner, &self.config, self.inner.steps as u64)
            .save(&path)
            .map_err(to_py)
    }
}

/// Negated mean per-strip cosine similarity.
#[pyfunction]
fn cosine_loss(online: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    core_cosine_loss(&matrix(online)?, &matrix(target)?).map_err(to_py)
}

/// Mean per-strip Euclidean distance.
#[pyfunction]
fn stripe_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    core_stripe_distance(&matrix(a)?, &matrix(b)?).map_err(to_py)
}

/// Batch-all triplet loss; returns `(loss, triplets, active)`.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, margin = 0.2))]
fn triplet_loss(embeddings: Vec<Vec<Vec<f64>>>, labels: Vec<Identity>, margin: f64) -> PyResult<(f64, usize, usize)> {
    let emb = embeddings.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let o = triplet_loss_ba(&emb, &labels, margin).map_err(to_py)?;
    Ok((o.loss, o.triplets, o.active))
}

/// Crops, rescales and centers a raw silhouette to 64 x 44.
#[pyfunction]
fn align(image: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let s = align_silhouette(&silhouette(image)?).map_err(to_py)?;
    Ok(s.pixels().chunks(s.width()).map(<[f32]>::to_vec).collect())
}

/// Runs the `gait` command line with the given arguments; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    gait_core::cli::run(std::iter::once("gait".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "gait")]
fn gait_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunConfigPy>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Pretrainer>()?;
    m.add_class::<Finetuner>()?;
    m.add_function(wrap_pyfunction!(cosine_loss, m)?)?;
    m.add_function(wrap_pyfunction!(stripe_distance, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
