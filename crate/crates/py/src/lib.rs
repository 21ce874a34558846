//! Python bindings: rasters, synthetic scenes, registration, depth maps,
//! VddNet models, grapevine-scale metrics and the end-to-end pipeline.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use vdd_cli::config::RunConfig;
use vdd_core::dataset::{extract_patches, split, SourceScene};
use vdd_core::depthmap::{build_depth_map as core_depth_map, DEFAULT_KERNEL};
use vdd_core::evaluation::{metrics_from_confusion, report_csv as core_report_csv, windowed_confusion, ConfusionMatrix};
use vdd_core::evaluation::DEFAULT_WINDOW;
use vdd_core::neuralnet::Optimizer;
use vdd_core::raster::{self, ChannelRole, MultiRaster};
use vdd_core::registration::{register_images as core_register, warp as core_warp, Homography, RegistrationParams};
use vdd_core::synthvine::{generate_scene as core_scene, SceneConfig};
use vdd_core::vddnet::{
    render_disease_map, segment_orthophoto, train as core_train, Arch, Network, TrainConfig, VddNetSpec, DEFAULT_TILE,
};

create_exception!(vdd, VddError, PyException, "Any failure inside the vdd library.");

fn err(e: impl Display) -> PyErr {
    VddError::new_err(e.to_string())
}

fn parse_role(s: &str) -> PyResult<ChannelRole> {
    Ok(match s {
        "R" => ChannelRole::Red,
        "G" => ChannelRole::Green,
        "B" => ChannelRole::Blue,
        "NIR" => ChannelRole::Nir,
        "DSM" => ChannelRole::Dsm,
        "Depth" => ChannelRole::Depth,
        "Label" => ChannelRole::Label,
        "?" => ChannelRole::Unspecified,
        p if p.starts_with('P') => ChannelRole::Prob(p[1..].parse().map_err(|_| err(format!("unknown role {s:?}")))?),
        _ => return Err(err(format!("unknown role {s:?}"))),
    })
}

/// Interleaved multi-channel float raster (the VDDR container).
#[pyclass(name = "Raster", module = "vdd", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyRaster {
    inner: MultiRaster,
}

impl From<MultiRaster> for PyRaster {
    fn from(inner: MultiRaster) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyRaster {
    /// `data` is pixel-interleaved: `(y·width + x)·channels + c`.
    #[new]
    fn new(width: u32, height: u32, roles: Vec<String>, data: Vec<f32>) -> PyResult<Self> {
        let roles = roles.iter().map(|r| parse_role(r)).collect::<PyResult<Vec<_>>>()?;
        Ok(MultiRaster::new(width, height, roles, data).map_err(err)?.into())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(raster::decode_raster(data).map_err(err)?.into())
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(raster::read_raster(path).map_err(err)?.into())
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        raster::write_raster(&self.inner, path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &raster::encode_raster(&self.inner))
    }

    /// Writes one or three channels, by index, as an 8-bit PNG.
    fn export_png(&self, path: PathBuf, channels: Vec<usize>) -> PyResult<()> {
        raster::export_png_channels(&self.inner, &channels, path).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn roles(&self) -> Vec<String> {
        self.inner.roles().iter().map(|r| r.to_string()).collect()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn plane(&self, c: usize) -> PyResult<Vec<f32>> {
        if c >= self.inner.channels() {
            return Err(err(format!("channel {c} out of range")));
        }
        Ok(self.inner.plane(c))
    }

    fn get(&self, x: u32, y: u32, c: usize) -> PyResult<f32> {
        if x >= self.inner.width() || y >= self.inner.height() || c >= self.inner.channels() {
            return Err(err(format!("({x}, {y}, {c}) out of range")));
        }
        Ok(self.inner.get(x, y, c))
    }

    fn __eq__(&self, other: &PyRaster) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Raster({}x{}, roles={:?})", self.inner.width(), self.inner.height(), self.roles())
    }
}

/// Renders a seeded synthetic vineyard; returns the planes, the canopy mask
/// and the per-class pixel census.
#[pyfunction]
#[pyo3(signature = (seed=0, width=512, height=512, ground_palette="mixed", shadow_fraction=0.25, disease_fraction=0.15))]
fn generate_scene<'py>(
    py: Python<'py>,
    seed: u64,
    width: u32,
    height: u32,
    ground_palette: &str,
    shadow_fraction: f64,
    disease_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SceneConfig {
        width,
        height,
        ground_palette: ground_palette.parse().map_err(err)?,
        shadow_fraction,
        disease_fraction,
        seed,
        ..SceneConfig::default()
    };
    let s = py.detach(|| core_scene(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rgb", PyRaster::from(s.rgb))?;
    d.set_item("nir", PyRaster::from(s.nir))?;
    d.set_item("dsm", PyRaster::from(s.dsm))?;
    d.set_item("labels", PyRaster::from(s.labels))?;
    d.set_item("canopy_mask", PyRaster::from(s.canopy_mask))?;
    d.set_item("census", s.census.to_vec())?;
    Ok(d)
}

/// Binary vine mask from a DSM: returns `(mask, otsu_threshold, degenerate)`.
#[pyfunction]
#[pyo3(signature = (dsm, kernel=DEFAULT_KERNEL))]
fn build_depth_map(py: Python<'_>, dsm: &PyRaster, kernel: usize) -> PyResult<(PyRaster, u8, bool)> {
    let d = py.detach(|| core_depth_map(&dsm.inner, kernel)).map_err(err)?;
    Ok((d.mask.into(), d.threshold, d.degenerate))
}

/// Registers `moving` onto `reference` (both single-channel). Returns the
/// 3×3 homography rows, mapping moving to reference coordinates, and the
/// refinement RMSE history.
#[pyfunction]
#[pyo3(signature = (reference, moving, seed=0))]
fn register_images(
    py: Python<'_>,
    reference: &PyRaster,
    moving: &PyRaster,
    seed: u64,
) -> PyResult<([[f64; 3]; 3], Vec<f64>)> {
    let mut params = RegistrationParams::default();
    params.ransac.seed = seed;
    let out = py.detach(|| core_register(&reference.inner, &moving.inner, &params)).map_err(err)?;
    Ok((out.homography.to_rows(), out.rmse_history))
}

/// Resamples `img` so that `out(p) = img(H⁻¹·p)`.
#[pyfunction]
fn warp(py: Python<'_>, img: &PyRaster, h: [[f64; 3]; 3], width: u32, height: u32) -> PyResult<PyRaster> {
    let h = Homography::from_rows(h).map_err(err)?;
    Ok(py.detach(|| core_warp(&img.inner, &h, width, height)).map_err(err)?.into())
}

/// Grapevine-scale confusion counts, rows truth and columns prediction.
#[pyfunction]
#[pyo3(signature = (pred, truth, window=DEFAULT_WINDOW))]
fn confusion(pred: &PyRaster, truth: &PyRaster, window: u32) -> PyResult<[[u64; 4]; 4]> {
    Ok(windowed_confusion(&pred.inner, &truth.inner, window).map_err(err)?.counts)
}

/// Per-class recall, precision, F1 (`None` when undefined) and global accuracy.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, counts: [[u64; 4]; 4]) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics_from_confusion(&ConfusionMatrix { counts }).map_err(err)?;
    let d = PyDict::new(py);
    for m in &r.per_class {
        let c = PyDict::new(py);
        c.set_item("recall", m.recall)?;
        c.set_item("precision", m.precision)?;
        c.set_item("f1", m.f1)?;
        c.set_item("support", m.support)?;
        d.set_item(m.class.name(), c)?;
    }
    d.set_item("accuracy", r.accuracy)?;
    Ok(d)
}

#[pyfunction]
fn report_csv(counts: [[u64; 4]; 4]) -> PyResult<String> {
    Ok(core_report_csv(&metrics_from_confusion(&ConfusionMatrix { counts }).map_err(err)?))
}

/// Colour rendering of a label raster.
#[pyfunction]
fn disease_map(labels: &PyRaster) -> PyResult<PyRaster> {
    Ok(render_disease_map(&labels.inner).map_err(err)?.into())
}

/// A VddNet or baseline segmentation network.
#[pyclass(name = "Model", module = "vdd")]
pub struct PyModel {
    net: Network<f32>,
}

#[pymethods]
impl PyModel {
    /// `arch` is `vddnet`, `baseline4` or `baseline5`.
    #[new]
    #[pyo3(signature = (arch="vddnet", stages=4, base=16, seed=0))]
    fn new(arch: &str, stages: usize, base: usize, seed: u64) -> PyResult<Self> {
        let arch = Arch::parse(arch).ok_or_else(|| err(format!("unknown architecture {arch:?}")))?;
        Ok(Self { net: Network::new(arch, VddNetSpec::new(stages, base), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { net: Network::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.net.save(&path).map_err(err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.net.arch.name()
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.net.trainable_count()
    }

    /// Trains on patches cut from one scene; returns the history as
    /// `(iteration, train_loss, val_loss, val_acc)` tuples.
    #[pyo3(signature = (rgb, nir, depth, labels, patch=64, overlap=0.5, val_fraction=0.2, iterations=300, batch_size=5, optimizer="sgd", lr=0.1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        rgb: &PyRaster,
        nir: &PyRaster,
        depth: &PyRaster,
        labels: &PyRaster,
        patch: u32,
        overlap: f64,
        val_fraction: f64,
        iterations: usize,
        batch_size: usize,
        optimizer: &str,
        lr: f64,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let optimizer = Optimizer::parse(optimizer, lr).ok_or_else(|| err(format!("unknown optimizer {optimizer:?}")))?;
        let cfg = TrainConfig { iterations, batch_size, optimizer, seed, ..TrainConfig::default() };
        let net = &mut self.net;
        let history = py
            .detach(|| -> Result<_, String> {
                let src = SourceScene::new(&rgb.inner, &nir.inner, &depth.inner, &labels.inner).map_err(|e| e.to_string())?;
                let patches = extract_patches(&src, patch, overlap).map_err(|e| e.to_string())?;
                let data = split(patches, val_fraction, seed).map_err(|e| e.to_string())?;
                core_train(net, &data.train, &data.val, &cfg).map(|o| o.history).map_err(|e| e.to_string())
            })
            .map_err(err)?;
        Ok(history.iter().map(|r| (r.iteration, r.train_loss, r.val_loss, r.val_acc)).collect())
    }

    /// Tiled inference; returns `(labels, probabilities)`.
    #[pyo3(signature = (rgb, nir, depth, tile=DEFAULT_TILE))]
    fn segment(&self, py: Python<'_>, rgb: &PyRaster, nir: &PyRaster, depth: &PyRaster, tile: u32) -> PyResult<(PyRaster, PyRaster)> {
        let r = py.detach(|| segment_orthophoto(&self.net, &rgb.inner, &nir.inner, &depth.inner, tile)).map_err(err)?;
        Ok((r.labels.into(), r.probs.into()))
    }

    fn __repr__(&self) -> String {
        format!("Model({}, stages={}, base={})", self.net.arch.name(), self.net.spec.stages, self.net.spec.base_channels)
    }
}

/// Runs the whole pipeline from `key = value` config text plus `KEY=VALUE`
/// overrides; `demo=True` starts from the desk-scale demo settings.
#[pyfunction]
#[pyo3(signature = (config="", overrides=Vec::new(), demo=false))]
fn run_pipeline<'py>(py: Python<'py>, config: &str, overrides: Vec<String>, demo: bool) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = if demo { RunConfig::demo() } else { RunConfig::default() };
    cfg.apply_text(config).map_err(err)?;
    cfg.apply_overrides(&overrides).map_err(err)?;
    let out = py.detach(|| vdd_cli::pipeline::run_pipeline(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("metrics_csv", core_report_csv(&out.report))?;
    d.set_item("accuracy", out.report.accuracy)?;
    d.set_item("registration_rmse", out.registration_rmse)?;
    d.set_item("best_iteration", out.outcome.best_iteration)?;
    d.set_item("artifacts", out.artifacts)?;
    d.set_item("output_dir", cfg.output_dir)?;
    Ok(d)
}

#[pymodule]
fn vdd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", vdd_core::VERSION)?;
    m.add("VddError", m.py().get_type::<VddError>())?;
    m.add_class::<PyRaster>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(build_depth_map, m)?)?;
    m.add_function(wrap_pyfunction!(register_images, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(report_csv, m)?)?;
    m.add_function(wrap_pyfunction!(disease_map, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
