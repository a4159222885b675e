use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use ds::{CollageK, Mode, PerScale, ScaleClass};
use dynscale as ds;
use dynscale::service::{compose_group, Session};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn per_scale<'py, T: IntoPyObject<'py> + Copy>(
    py: Python<'py>,
    v: PerScale<T>,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("s", v.s)?;
    d.set_item("m", v.m)?;
    d.set_item("l", v.l)?;
    Ok(d)
}

fn to_per_scale<T: Copy>(v: (T, T, T)) -> PerScale<T> {
    PerScale::new(v.0, v.1, v.2)
}

fn collage_k(k: u32) -> PyResult<CollageK> {
    CollageK::new(k).map_err(value_err)
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Regular => "regular",
        Mode::Collage => "collage",
    }
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    match s {
        "regular" | "R" => Ok(Mode::Regular),
        "collage" | "C" => Ok(Mode::Collage),
        other => Err(value_err(format!("unknown mode {other:?}"))),
    }
}

fn annotation_dict<'py>(
    py: Python<'py>,
    a: &ds::InstanceAnnotation,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", a.id.0)?;
    d.set_item("image_id", a.image_id.0)?;
    d.set_item("bbox", a.bbox.xywh().to_vec())?;
    d.set_item("area", a.bbox.area())?;
    d.set_item("category_id", a.category_id.0)?;
    d.set_item("iscrowd", a.iscrowd)?;
    d.set_item("scale", a.scale().short_name())?;
    Ok(d)
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[pyclass(frozen, name = "BoundingBox")]
struct PyBoundingBox(ds::BoundingBox);

#[pymethods]
impl PyBoundingBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        ds::BoundingBox::new(x, y, w, h)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x()
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y()
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn xywh(&self) -> (f64, f64, f64, f64) {
        let [x, y, w, h] = self.0.xywh();
        (x, y, w, h)
    }

    fn scale(&self) -> &'static str {
        ds::classify_scale(&self.0).short_name()
    }

    /// Box after shrinking by `divisor` and shifting by `(offset_x, offset_y)`.
    #[pyo3(signature = (divisor, offset_x=0, offset_y=0))]
    fn downscale_translate(&self, divisor: u32, offset_x: u32, offset_y: u32) -> PyResult<Self> {
        if divisor == 0 {
            return Err(value_err("divisor must be positive"));
        }
        Ok(Self(
            self.0.downscale_translate(divisor, offset_x, offset_y),
        ))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let [x, y, w, h] = self.0.xywh();
        format!("BoundingBox({x}, {y}, {w}, {h})")
    }
}

/// Scale class ("s", "m" or "l") of a box with the given width and height.
#[pyfunction]
fn classify_scale(w: f64, h: f64) -> PyResult<&'static str> {
    let b = ds::BoundingBox::new(0.0, 0.0, w, h).map_err(value_err)?;
    Ok(ds::classify_scale(&b).short_name())
}

/// A loaded COCO annotation set.
#[pyclass(frozen, name = "Dataset")]
struct PyDataset(Arc<ds::Dataset>);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ds::load_annotations(&path)
            .map(|d| Self(Arc::new(d)))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ds::parse_annotations(text)
            .map(|d| Self(Arc::new(d)))
            .map_err(value_err)
    }

    /// Generated dataset: "coco-like", "small-starved" or "small-clustered".
    #[staticmethod]
    #[pyo3(signature = (preset, seed=0, images=None))]
    fn synthetic(preset: &str, seed: u64, images: Option<usize>) -> PyResult<Self> {
        let mut spec = match preset {
            "coco-like" => ds::SyntheticSpec::coco_like(),
            "small-starved" => ds::SyntheticSpec::small_starved(),
            "small-clustered" => ds::SyntheticSpec::small_clustered(),
            other => return Err(value_err(format!("unknown preset {other:?}"))),
        };
        if let Some(n) = images {
            spec.images = n;
        }
        Ok(Self(Arc::new(spec.with_seed(seed).generate())))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn instance_count(&self) -> usize {
        self.0.instance_count()
    }

    #[getter]
    fn dropped_degenerate(&self) -> usize {
        self.0.dropped_degenerate()
    }

    fn image_ids(&self) -> Vec<u64> {
        self.0.image_ids().into_iter().map(|i| i.0).collect()
    }

    /// `(width, height, file_name)` of an image.
    fn image_info(&self, image_id: u64) -> PyResult<(u32, u32, String)> {
        let img = self
            .0
            .image(ds::ImageId(image_id))
            .ok_or_else(|| value_err(format!("unknown image {image_id}")))?;
        Ok((img.width, img.height, img.file_name.clone()))
    }

    fn annotations<'py>(
        &self,
        py: Python<'py>,
        image_id: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let img = self
            .0
            .image(ds::ImageId(image_id))
            .ok_or_else(|| value_err(format!("unknown image {image_id}")))?;
        img.annotations
            .iter()
            .map(|a| annotation_dict(py, a))
            .collect()
    }

    /// Per-scale counts, instance shares and image coverage.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = ds::dataset_scale_stats(&self.0).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("images", s.images)?;
        d.set_item("instances", s.instances)?;
        d.set_item("counts", per_scale(py, s.counts)?)?;
        d.set_item("instance_share", per_scale(py, s.instance_share)?)?;
        d.set_item("image_coverage", per_scale(py, s.image_coverage)?)?;
        Ok(d)
    }

    fn to_coco_json(&self) -> String {
        self.0.to_coco_json().to_string()
    }
}

/// Result of composing one collage.
#[pyclass(frozen, name = "Collage")]
struct PyCollage {
    #[pyo3(get)]
    width: u32,
    #[pyo3(get)]
    height: u32,
    #[pyo3(get)]
    dropped_tiny: usize,
    pixels: Vec<u8>,
    annotations: Vec<ds::InstanceAnnotation>,
}

#[pymethods]
impl PyCollage {
    /// Row-major RGB bytes of length `width * height * 3`.
    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.pixels)
    }

    /// Transformed annotations; `image_id` names the source image.
    fn annotations<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.annotations
            .iter()
            .map(|a| annotation_dict(py, a))
            .collect()
    }
}

fn into_collage(r: ds::CollageResult) -> PyCollage {
    PyCollage {
        width: r.pixels.width(),
        height: r.pixels.height(),
        dropped_tiny: r.dropped_tiny,
        pixels: r.pixels.into_raw(),
        annotations: r.annotations,
    }
}

/// Composes `image_ids` (in cell order) from raw RGB buffers keyed by image id.
#[pyfunction]
#[pyo3(signature = (dataset, image_ids, pixels, k=4, tiny_filter=false))]
fn compose(
    py: Python<'_>,
    dataset: &PyDataset,
    image_ids: Vec<u64>,
    pixels: HashMap<u64, Vec<u8>>,
    k: u32,
    tiny_filter: bool,
) -> PyResult<PyCollage> {
    let k = collage_k(k)?;
    let records: Vec<&ds::ImageRecord> = image_ids
        .iter()
        .map(|&id| {
            dataset
                .0
                .image(ds::ImageId(id))
                .ok_or_else(|| value_err(format!("unknown image {id}")))
        })
        .collect::<PyResult<_>>()?;
    let mut buffers = HashMap::new();
    let mut annotations = HashMap::new();
    for rec in &records {
        let data = pixels
            .get(&rec.id.0)
            .ok_or_else(|| value_err(format!("no pixels for image {}", rec.id)))?;
        buffers.insert(
            rec.id,
            ds::PixelBuffer::from_raw(rec.width, rec.height, 3, data.clone()).map_err(value_err)?,
        );
        annotations.insert(
            rec.id,
            rec.annotations
                .iter()
                .filter(|a| !a.iscrowd)
                .cloned()
                .collect::<Vec<_>>(),
        );
    }
    py.detach(|| {
        let plan = ds::plan_collage(&records, k, ds::canvas_for(&records, k)).map_err(value_err)?;
        ds::compose_collage(&plan, &buffers, &annotations, tiny_filter)
            .map(into_collage)
            .map_err(value_err)
    })
}

/// Loads the images of `image_ids` from `images_dir` and composes them.
#[pyfunction]
#[pyo3(signature = (dataset, images_dir, image_ids, k=4, tiny_filter=false))]
fn compose_files(
    py: Python<'_>,
    dataset: &PyDataset,
    images_dir: PathBuf,
    image_ids: Vec<u64>,
    k: u32,
    tiny_filter: bool,
) -> PyResult<PyCollage> {
    let k = collage_k(k)?;
    let ids: Vec<ds::ImageId> = image_ids.into_iter().map(ds::ImageId).collect();
    let ds = Arc::clone(&dataset.0);
    py.detach(|| {
        compose_group(&ds, &images_dir, &ids, k, tiny_filter)
            .map(|g| into_collage(g.result))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    })
}

/// Threshold controller turning per-scale losses into regular/collage decisions.
#[pyclass(name = "Controller")]
struct PyController(ds::Controller);

#[pymethods]
impl PyController {
    #[new]
    #[pyo3(signature = (tau=0.1, strategy="reg-loss", k=4, seed=0))]
    fn new(tau: f64, strategy: &str, k: u32, seed: u64) -> PyResult<Self> {
        let cfg = ds::ControllerConfig {
            tau,
            strategy: strategy.parse().map_err(value_err)?,
            k: collage_k(k)?,
            seed,
        };
        ds::Controller::new(cfg).map(Self).map_err(value_err)
    }

    /// Feeds iteration `iter`'s losses; returns `(mode, r_s)` for `iter + 1`.
    fn observe(
        &mut self,
        iter: u64,
        cls: (f64, f64, f64),
        reg: (f64, f64, f64),
        counts: (u64, u64, u64),
    ) -> PyResult<(&'static str, Option<f64>)> {
        let report = ds::LossReport {
            iter,
            cls: to_per_scale(cls),
            reg: to_per_scale(reg),
        };
        let comp = ds::BatchComposition {
            iter,
            counts: to_per_scale(counts),
        };
        let d = self.0.observe(&report, &comp).map_err(value_err)?;
        Ok((mode_name(d.mode), d.r_s))
    }

    /// `(iter, r_s, mode)` for every observation so far.
    fn trace(&self) -> Vec<(u64, Option<f64>, &'static str)> {
        self.0
            .trace()
            .iter()
            .map(|e| (e.iter, e.r_s, mode_name(e.mode)))
            .collect()
    }

    fn write_trace_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.0
            .write_trace_csv(file)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Seeded image stream producing batch groups.
#[pyclass(name = "Sampler")]
struct PySampler(ds::Sampler);

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (image_ids, seed=0))]
    fn new(image_ids: Vec<u64>, seed: u64) -> Self {
        Self(ds::Sampler::new(
            image_ids.into_iter().map(ds::ImageId).collect(),
            seed,
        ))
    }

    /// Groups for one iteration: `batch_size` groups of 1 (regular) or `k` ids (collage).
    #[pyo3(signature = (iter, mode, batch_size=2, k=4))]
    fn next_batch(
        &mut self,
        iter: u64,
        mode: &str,
        batch_size: usize,
        k: u32,
    ) -> PyResult<Vec<Vec<u64>>> {
        let d = ds::Decision {
            iter,
            mode: parse_mode(mode)?,
            r_s: None,
        };
        let plan = self
            .0
            .next_batch(&d, batch_size, collage_k(k)?)
            .map_err(value_err)?;
        Ok(plan
            .groups
            .into_iter()
            .map(|g| g.into_iter().map(|i| i.0).collect())
            .collect())
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.epoch()
    }

    #[getter]
    fn consumed(&self) -> u64 {
        self.0.consumed()
    }
}

/// Summary and per-iteration series of one simulated run.
#[pyclass(frozen, name = "SimResult")]
struct PySimResult(ds::SimReport);

#[pymethods]
impl PySimResult {
    #[getter]
    fn policy(&self) -> String {
        self.0.policy.clone()
    }

    #[getter]
    fn balance(&self) -> f64 {
        self.0.balance()
    }

    #[getter]
    fn mean_r_s(&self) -> f64 {
        self.0.mean_r_s()
    }

    #[getter]
    fn low_ratio_fraction(&self) -> f64 {
        self.0.low_ratio_fraction()
    }

    #[getter]
    fn collage_fraction(&self) -> f64 {
        self.0.collage_fraction()
    }

    #[getter]
    fn images_consumed(&self) -> u64 {
        self.0.images_consumed
    }

    fn r_s(&self) -> Vec<Option<f64>> {
        self.0.steps.iter().map(|s| s.r_s).collect()
    }

    fn modes(&self) -> Vec<&'static str> {
        self.0.steps.iter().map(|s| mode_name(s.mode)).collect()
    }

    fn __len__(&self) -> usize {
        self.0.steps.len()
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, policy="reg-loss", seed=0, iters=10_000, tau=0.1, k=4, batch_size=2, tiny_filter=false))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    dataset: &PyDataset,
    policy: &str,
    seed: u64,
    iters: u64,
    tau: f64,
    k: u32,
    batch_size: usize,
    tiny_filter: bool,
) -> PyResult<PySimResult> {
    let cfg = ds::SimConfig {
        policy: policy.parse().map_err(value_err)?,
        tau,
        k: collage_k(k)?,
        batch_size,
        iters,
        seed,
        tiny_filter,
        ..ds::SimConfig::default()
    };
    let data = Arc::clone(&dataset.0);
    py.detach(|| ds::run_simulation(&data, &cfg))
        .map(PySimResult)
        .map_err(value_err)
}

/// In-process feedback service: feed NDJSON lines, get reply lines back.
#[pyclass(name = "Service")]
struct PyService {
    service: ds::Service,
    session: Option<Session>,
}

#[pymethods]
impl PyService {
    /// `dataset` is registered under `name`; a `hello` naming it uses it
    /// without touching the file system.
    #[new]
    #[pyo3(signature = (dataset, name="dataset", trace_dir=None))]
    fn new(dataset: &PyDataset, name: &str, trace_dir: Option<PathBuf>) -> Self {
        let options = ds::ServiceOptions {
            trace_dir,
            scratch: None,
        };
        Self {
            service: ds::Service::new(options).with_dataset(name, Arc::clone(&dataset.0)),
            session: None,
        }
    }

    /// Handles one message line and returns the reply line.
    fn handle(&mut self, line: &str) -> String {
        let msg = match ds::WireMessage::from_line(line) {
            Ok(m) => m,
            Err(e) => return ds::WireMessage::error(format!("malformed message: {e}")).to_line(),
        };
        let (reply, done) = self.service.dispatch(&mut self.session, msg);
        if done {
            self.session = None;
        }
        reply.to_line()
    }
}

#[pymodule]
fn dynscale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TINY_BOX_AREA", ds::TINY_BOX_AREA)?;
    m.add("SCALES", ScaleClass::ALL.map(|c| c.short_name()).to_vec())?;
    m.add_class::<PyBoundingBox>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCollage>()?;
    m.add_class::<PyController>()?;
    m.add_class::<PySampler>()?;
    m.add_class::<PySimResult>()?;
    m.add_class::<PyService>()?;
    m.add_function(wrap_pyfunction!(classify_scale, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(compose_files, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
