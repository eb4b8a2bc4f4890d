//! `warm_lab`: Python access to the desk-scale WARM laboratory.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use warm_bench::{BenchError, ExperimentConfig, Preset};
use warm_core::align::{self, GaussianPolicy, PolicyState, RlConfig};
use warm_core::combine;
use warm_core::net;
use warm_core::recipe::{self, Diversity};
use warm_core::synth::{self, SubsetTag};
use warm_core::theory::{self, TheoryWorld};
use warm_core::{RngState, WarmError};

fn err(e: WarmError) -> PyErr {
    match e {
        WarmError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn bench_err(e: BenchError) -> PyErr {
    match e {
        BenchError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn diversity(name: &str) -> PyResult<Diversity> {
    match name {
        "data_order" => Ok(Diversity::DataOrder),
        "full" => Ok(Diversity::Full),
        _ => Err(PyValueError::new_err(format!("diversity must be 'data_order' or 'full', got {name:?}"))),
    }
}

fn subset(name: &str) -> PyResult<SubsetTag> {
    SubsetTag::ALL
        .into_iter()
        .find(|t| t.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown subset {name:?}")))
}

/// Reward model weights.
#[pyclass(module = "warm_lab", frozen)]
struct RewardModel {
    inner: net::Weights,
}

#[pymethods]
impl RewardModel {
    #[staticmethod]
    fn random(input_dim: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let shape = net::NetShape::new(input_dim, hidden).map_err(err)?;
        Ok(RewardModel {
            inner: net::Weights::random(shape, &mut RngState::new(seed)),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(RewardModel {
            inner: net::read_weights(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        net::write_weights(&mut buf, &self.inner).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.shape.input_dim
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.shape.hidden
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.values.len()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    /// Reward of a flat input vector.
    fn reward(&self, x: Vec<f64>) -> PyResult<f64> {
        let item = synth::Item { x, intensities: vec![], y: 1.0 };
        net::forward(&self.inner, &item).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("RewardModel(input_dim={}, hidden={})", self.inner.shape.input_dim, self.inner.shape.hidden)
    }
}

/// A built world plus its pretrained inits.
#[pyclass(module = "warm_lab", frozen)]
struct Lab {
    inner: recipe::Lab,
}

#[pymethods]
impl Lab {
    /// Builds the desk-scale lab; `recipe_json` overrides any recipe field.
    #[new]
    #[pyo3(signature = (seed, recipe_json=None))]
    fn new(py: Python<'_>, seed: u64, recipe_json: Option<&str>) -> PyResult<Self> {
        let recipe: recipe::DeskRecipe = match recipe_json {
            Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => recipe::DeskRecipe::default(),
        };
        let inner = py.detach(|| recipe.build(seed)).map_err(err)?;
        Ok(Lab { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.recipe.world.input_dim()
    }

    fn recipe_json(&self) -> String {
        serde_json::to_string(&self.inner.recipe).expect("recipe serializes")
    }

    /// Number of pairs per subset tag.
    fn subset_sizes(&self) -> Vec<(String, usize)> {
        SubsetTag::ALL
            .into_iter()
            .map(|t| (t.as_str().to_string(), self.inner.subset(t).len()))
            .collect()
    }

    /// Fine-tunes member `index` of a pool; returns (model, id_val accuracy).
    #[pyo3(signature = (index, diversity="full"))]
    fn train_member(&self, py: Python<'_>, index: usize, diversity: &str) -> PyResult<(RewardModel, f64)> {
        let div = self::diversity(diversity)?;
        let rm = py.detach(|| self.inner.train_member(index, div)).map_err(err)?;
        Ok((RewardModel { inner: rm.weights }, rm.id_val_acc))
    }

    fn accuracy(&self, model: &RewardModel, subset: &str) -> PyResult<f64> {
        combine::pairwise_accuracy(&model.inner, &self.inner.subset(self::subset(subset)?)).map_err(err)
    }

    /// Accuracy of the prediction ensemble of `models`.
    #[pyo3(signature = (models, subset, coeffs=None))]
    fn ensemble_accuracy(&self, models: Vec<PyRef<'_, RewardModel>>, subset: &str, coeffs: Option<Vec<f64>>) -> PyResult<f64> {
        let refs: Vec<&net::Weights> = models.iter().map(|m| &m.inner).collect();
        let ens = combine::Ensemble::new(&refs, coeffs.as_deref()).map_err(err)?;
        combine::pairwise_accuracy(&ens, &self.inner.subset(self::subset(subset)?)).map_err(err)
    }

    /// Rows of (lambda, acc_wa, acc_ens, acc_diag) on the OOD split.
    #[pyo3(signature = (a, b, points=11))]
    fn lmc_curve(&self, a: &RewardModel, b: &RewardModel, points: usize) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let rows = combine::lmc_curve(&a.inner, &b.inner, &self.inner.ood(), &combine::lambda_grid(points)).map_err(err)?;
        Ok(rows.iter().map(|r| (r.lambda, r.acc_wa, r.acc_ens, r.acc_diag)).collect())
    }

    /// Oracle reward of a noiseless item with the given intensities.
    fn oracle(&self, intensities: Vec<f64>) -> PyResult<f64> {
        let spec = &self.inner.recipe.world;
        if intensities.len() != spec.features {
            return Err(PyValueError::new_err(format!("expected {} intensities", spec.features)));
        }
        let item = synth::Item::sample(&self.inner.bank, intensities, 1.0, 0.0, &mut RngState::new(0));
        synth::oracle_reward(spec, &self.inner.bank, &item).map_err(err)
    }

    /// REINFORCE against `proxy`; rows of (step, proxy, oracle, kl).
    #[pyo3(signature = (proxy, alpha=0.003, steps=1500, learning_rate=0.05, policy_sigma=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn reinforce(
        &self,
        py: Python<'_>,
        proxy: &RewardModel,
        alpha: f64,
        steps: usize,
        learning_rate: f64,
        policy_sigma: f64,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let spec = &self.inner.recipe.world;
        let cfg = RlConfig {
            alpha,
            steps,
            learning_rate,
            ..RlConfig::default()
        };
        let init = PolicyState::new(GaussianPolicy::uniform(spec.features, policy_sigma));
        let (_, traj) = py
            .detach(|| align::reinforce_run(&init, &proxy.inner, &cfg, spec, &self.inner.bank, RngState::new(seed)))
            .map_err(err)?;
        Ok(traj.points.iter().map(|p| (p.step, p.proxy, p.oracle, p.kl)).collect())
    }
}

/// Uniform (or weighted) average of the models' weights.
#[pyfunction]
#[pyo3(signature = (models, coeffs=None))]
fn weight_average(models: Vec<PyRef<'_, RewardModel>>, coeffs: Option<Vec<f64>>) -> PyResult<RewardModel> {
    let refs: Vec<&net::Weights> = models.iter().map(|m| &m.inner).collect();
    Ok(RewardModel {
        inner: combine::weight_average(&refs, coeffs.as_deref()).map_err(err)?,
    })
}

#[pyfunction]
fn bon_kl_approx(n: usize) -> PyResult<f64> {
    align::bon_kl_approx(n).map_err(err)
}

#[pyfunction]
fn bon_kl_exact(samples: usize, n: usize) -> PyResult<f64> {
    align::bon_kl_exact(samples, n).map_err(err)
}

fn theory_world(p: Vec<f64>, norms: Option<Vec<f64>>) -> TheoryWorld {
    let z_norms = norms.unwrap_or_else(|| vec![1.0; p.len()]);
    let dim = p.len().max(1);
    TheoryWorld { p, z_norms, sigma: 0.0, dim }
}

/// Limit of prediction ensembling for selection probabilities `p`.
#[pyfunction]
#[pyo3(signature = (p, norms=None, y=1.0))]
fn ens_limit(p: Vec<f64>, norms: Option<Vec<f64>>, y: f64) -> PyResult<f64> {
    theory::ens_limit(&theory_world(p, norms), y).map_err(err)
}

/// Limit of weight averaging for selection probabilities `p`.
#[pyfunction]
#[pyo3(signature = (p, norms=None, y=1.0))]
fn wa_limit(p: Vec<f64>, norms: Option<Vec<f64>>, y: f64) -> PyResult<f64> {
    theory::wa_limit(&theory_world(p, norms), y).map_err(err)
}

/// Runs a preset and returns the written file names. `config_json` may be
/// any partial config.
#[pyfunction]
#[pyo3(signature = (name, out_dir, config_json="{}"))]
fn run_preset(py: Python<'_>, name: &str, out_dir: PathBuf, config_json: &str) -> PyResult<Vec<String>> {
    let preset: Preset = name.parse().map_err(bench_err)?;
    let cfg = ExperimentConfig::from_json(config_json).map_err(|e| bench_err(BenchError::Config(e)))?;
    let m = py.detach(|| warm_bench::run_preset(preset, &cfg, &out_dir)).map_err(bench_err)?;
    Ok(m.files.into_iter().map(|f| f.path).collect())
}

#[pymodule]
fn warm_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RewardModel>()?;
    m.add_class::<Lab>()?;
    m.add_function(wrap_pyfunction!(weight_average, m)?)?;
    m.add_function(wrap_pyfunction!(bon_kl_approx, m)?)?;
    m.add_function(wrap_pyfunction!(bon_kl_exact, m)?)?;
    m.add_function(wrap_pyfunction!(ens_limit, m)?)?;
    m.add_function(wrap_pyfunction!(wa_limit, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add("PRESETS", Preset::ALL.map(|p| p.name()).to_vec())?;
    Ok(())
}
