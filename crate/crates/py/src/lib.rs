//! Python bindings: images cross the boundary as `(height, width, rgb_bytes)`.

use std::path::PathBuf;

use pcdc::allocator::Agent;
use pcdc::error::Error;
use pcdc::harness::{train_codec, Budget, Mode, ModelBundle, RunConfig, Session};
use pcdc::imaging::{decode_ppm as decode_ppm_bytes, encode_ppm as encode_ppm_bytes, synthetic, ImagePlane};
use pcdc::metrics::MetricSuite;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(pcdc_py, InfeasibleBudgetError, PyValueError, "R_max is below the all-coarsest stream size.");

type Image<'py> = (usize, usize, Bound<'py, PyBytes>);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InfeasibleBudget { .. } => InfeasibleBudgetError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Image(_) | Error::Bitstream(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn plane(height: usize, width: usize, data: &[u8]) -> PyResult<ImagePlane> {
    ImagePlane::from_bytes(height, width, data).map_err(to_py)
}

fn image<'py>(py: Python<'py>, img: &ImagePlane) -> Image<'py> {
    (img.height(), img.width(), PyBytes::new(py, &img.to_bytes()))
}

fn config(config_toml: Option<&str>) -> PyResult<RunConfig> {
    config_toml.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_toml).map_err(to_py)
}

/// Seeded procedural texture.
#[pyfunction]
fn synthetic_texture(py: Python<'_>, height: usize, width: usize, seed: u64) -> Image<'_> {
    image(py, &synthetic::texture(height, width, seed))
}

#[pyfunction]
fn decode_ppm<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Image<'py>> {
    Ok(image(py, &decode_ppm_bytes(data).map_err(to_py)?))
}

#[pyfunction]
fn encode_ppm<'py>(py: Python<'py>, height: usize, width: usize, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    Ok(PyBytes::new(py, &encode_ppm_bytes(&plane(height, width, data)?)))
}

/// MSE, PSNR, SSIM, both perceptual proxies and the weighted utility.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    reference: &[u8],
    reconstruction: &[u8],
) -> PyResult<Bound<'py, PyDict>> {
    let (x, y) = (plane(height, width, reference)?, plane(height, width, reconstruction)?);
    let r = py.detach(|| MetricSuite::default().evaluate(&x, &y)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("mse", r.mse)?;
    out.set_item("psnr_db", r.psnr_db)?;
    out.set_item("ssim", r.ssim)?;
    out.set_item("lpips_proxy", r.lpips_proxy)?;
    out.set_item("dists_proxy", r.dists_proxy)?;
    out.set_item("utility", r.utility)?;
    Ok(out)
}

/// Trained codec plus the PPO agent that persists across `compress` calls.
#[pyclass(module = "pcdc_py")]
struct Codec {
    session: Session,
    agent: Agent,
}

impl Codec {
    fn from_session(session: Session) -> Self {
        let agent = session.agent();
        Self { session, agent }
    }
}

#[pymethods]
impl Codec {
    /// Train on `[(height, width, rgb_bytes), ...]`.
    #[staticmethod]
    #[pyo3(signature = (images, config_toml=None))]
    fn train(py: Python<'_>, images: Vec<(usize, usize, Vec<u8>)>, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config(config_toml)?;
        let planes = images
            .iter()
            .map(|(h, w, d)| plane(*h, *w, d))
            .collect::<PyResult<Vec<_>>>()?;
        let outcome = py.detach(|| train_codec(&planes, &cfg)).map_err(to_py)?;
        Ok(Self::from_session(Session::new(cfg, outcome.bundle).map_err(to_py)?))
    }

    #[staticmethod]
    #[pyo3(signature = (checkpoint_dir, config_toml=None))]
    fn load(checkpoint_dir: PathBuf, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config(config_toml)?;
        let bundle = ModelBundle::load(&checkpoint_dir).map_err(to_py)?;
        Ok(Self::from_session(Session::new(cfg, bundle).map_err(to_py)?))
    }

    /// Writes `model.ckpt` into `checkpoint_dir` and returns its path.
    fn save(&self, checkpoint_dir: PathBuf) -> PyResult<PathBuf> {
        self.session.bundle.save(&checkpoint_dir).map_err(to_py)
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.session.model_hash.clone()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.session.ladder().len()
    }

    fn reset_policy(&mut self) {
        self.agent.reset();
    }

    /// `mode` is `"ppo"` or `"uniform-k"`; PPO needs `rmax_bits` or `target_ratio`.
    #[pyo3(signature = (height, width, data, mode="ppo", rmax_bits=None, target_ratio=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn compress<'py>(
        &mut self,
        py: Python<'py>,
        height: usize,
        width: usize,
        data: &[u8],
        mode: &str,
        rmax_bits: Option<f64>,
        target_ratio: Option<f64>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let mode: Mode = mode.parse().map_err(to_py)?;
        let budget = match (rmax_bits, target_ratio) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("give rmax_bits or target_ratio, not both")),
            (b, r) => b.map(Budget::Bits).or(r.map(Budget::TargetRatio)),
        };
        let img = plane(height, width, data)?;
        let Self { session, agent } = self;
        let out = py
            .detach(|| {
                let r_max = session.budget_bits(&img, budget)?;
                session.compress(&img, mode, r_max, agent, seed)
            })
            .map_err(to_py)?;
        Ok(PyBytes::new(py, out.bitstream.as_bytes()))
    }

    #[pyo3(signature = (stream, seed=None))]
    fn decompress<'py>(&self, py: Python<'py>, stream: &[u8], seed: Option<u64>) -> PyResult<Image<'py>> {
        let img = py.detach(|| self.session.decompress(stream, seed)).map_err(to_py)?;
        Ok(image(py, &img))
    }
}

#[pymodule]
fn pcdc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthetic_texture, m)?)?;
    m.add_function(wrap_pyfunction!(decode_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(encode_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Codec>()?;
    m.add("InfeasibleBudgetError", m.py().get_type::<InfeasibleBudgetError>())?;
    Ok(())
}
