//! Python module `voxfab`: grids, analysis, repair, mesh I/O, training and
//! generation. Reports come back as plain dicts.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use voxfab::bench::{self, Pipeline};
use voxfab::constraints::RepairOptions;
use voxfab::decoder::vfm::{load_model, save_model};
use voxfab::decoder::{decode, DecoderParams, EncoderParams, LatentCode, Mode};
use voxfab::meshio;
use voxfab::training::{self, TrainConfig};
use voxfab::{Error, PrintabilitySpec};

pyo3::create_exception!(voxfab, RepairError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::RepairDidNotConverge(_) => RepairError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::InvalidGrid(_)
        | Error::InvalidConfig(_)
        | Error::ShapeMismatch(_)
        | Error::Format(_)
        | Error::OpenMesh { .. }
        | Error::Json(_)
        | Error::Csv(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn spec(max_overhang_deg: f64, t_min: f64, max_fill_void: f64, threshold: f64) -> PyResult<PrintabilitySpec> {
    let s = PrintabilitySpec { max_overhang_deg, t_min, max_fill_void, threshold };
    s.validate().map_err(to_py)?;
    Ok(s)
}

/// Binary occupancy grid; `pitch` in mm.
#[pyclass(name = "VoxelGrid", module = "voxfab", eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyVoxelGrid(voxfab::VoxelGrid);

#[pymethods]
impl PyVoxelGrid {
    /// `occupancy` is x-fastest, then y, then z.
    #[new]
    #[pyo3(signature = (dims, pitch = 1.0, occupancy = None))]
    fn new(dims: (usize, usize, usize), pitch: f64, occupancy: Option<Vec<bool>>) -> PyResult<Self> {
        let dims = [dims.0, dims.1, dims.2];
        let g = match occupancy {
            Some(occ) => voxfab::VoxelGrid::from_occupancy(dims, pitch, occ),
            None => voxfab::VoxelGrid::empty(dims, pitch),
        };
        g.map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn from_vxg(data: &[u8]) -> PyResult<Self> {
        meshio::decode_vxg(data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        meshio::load_vxg(path).map(Self).map_err(to_py)
    }

    fn to_vxg<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &meshio::encode_vxg(&self.0))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        meshio::save_vxg(path, &self.0).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let [x, y, z] = self.0.dims();
        (x, y, z)
    }

    #[getter]
    fn pitch(&self) -> f64 {
        self.0.pitch()
    }

    fn count(&self) -> usize {
        self.0.count()
    }

    fn occupancy(&self) -> Vec<bool> {
        self.0.occupancy().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<bool> {
        self.check(x, y, z)?;
        Ok(self.0.get(x, y, z))
    }

    fn set(&mut self, x: usize, y: usize, z: usize, value: bool) -> PyResult<()> {
        self.check(x, y, z)?;
        self.0.set(x, y, z, value);
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("VoxelGrid(dims={:?}, pitch={}, solid={})", self.0.dims(), self.0.pitch(), self.0.count())
    }
}

impl PyVoxelGrid {
    fn check(&self, x: usize, y: usize, z: usize) -> PyResult<()> {
        let [nx, ny, nz] = self.0.dims();
        if x < nx && y < ny && z < nz {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("({x}, {y}, {z}) is outside {:?}", self.0.dims())))
        }
    }
}

/// Full constraint report of a grid as a dict.
#[pyfunction]
#[pyo3(signature = (grid, max_overhang_deg = 45.0, t_min = 2.0, max_fill_void = 10.0, threshold = 0.5))]
fn evaluate<'py>(
    py: Python<'py>,
    grid: &PyVoxelGrid,
    max_overhang_deg: f64,
    t_min: f64,
    max_fill_void: f64,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let s = spec(max_overhang_deg, t_min, max_fill_void, threshold)?;
    to_dict(py, &voxfab::evaluate(&grid.0, &s))
}

/// Repairs with the named strategies (`islands`, `voids`, `support`,
/// `thicken`; all by default). Raises `RepairError` when it does not converge.
#[pyfunction]
#[pyo3(signature = (grid, strategies = None, max_outer_iterations = 5))]
fn repair(grid: &PyVoxelGrid, strategies: Option<Vec<String>>, max_outer_iterations: usize) -> PyResult<PyVoxelGrid> {
    let mut opts = RepairOptions { max_outer_iterations, ..RepairOptions::default() };
    if let Some(list) = strategies {
        for s in &list {
            if !["islands", "voids", "support", "thicken"].contains(&s.as_str()) {
                return Err(PyValueError::new_err(format!("unknown repair strategy {s:?}")));
            }
        }
        let has = |name: &str| list.iter().any(|s| s == name);
        opts.drop_islands = has("islands");
        opts.fill_voids = has("voids");
        opts.add_support_columns = has("support");
        opts.thicken = has("thicken");
    }
    voxfab::repair(&grid.0, &PrintabilitySpec::default(), &opts).map(PyVoxelGrid).map_err(to_py)
}

/// Writes the voxel surface as STL.
#[pyfunction]
#[pyo3(signature = (grid, path, ascii = false))]
fn export_stl(grid: &PyVoxelGrid, path: &str, ascii: bool) -> PyResult<usize> {
    let mesh = meshio::grid_to_mesh(&grid.0).map_err(to_py)?;
    meshio::save_stl(path, &mesh, ascii).map_err(to_py)?;
    Ok(mesh.triangles.len())
}

/// Voxelizes a closed STL mesh onto a grid fitted to its bounding box.
#[pyfunction]
fn voxelize_stl(path: &str, pitch: f64) -> PyResult<PyVoxelGrid> {
    let mesh = meshio::load_stl(path).map_err(to_py)?;
    meshio::voxelize_fit(&mesh, pitch).map(PyVoxelGrid).map_err(to_py)
}

/// Trained decoder and encoder.
#[pyclass(name = "Model", module = "voxfab")]
struct PyModel {
    decoder: DecoderParams,
    encoder: EncoderParams,
}

#[pymethods]
impl PyModel {
    /// Trains on procedural shapes; returns the model and per-epoch losses.
    #[staticmethod]
    #[pyo3(signature = (epochs = 30, dataset_size = 200, resolution = 16, latent_dim = 32, lambda1 = 0.5, lambda2 = 0.01, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        epochs: usize,
        dataset_size: usize,
        resolution: usize,
        latent_dim: usize,
        lambda1: f64,
        lambda2: f64,
        seed: u64,
    ) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
        let cfg = TrainConfig {
            epochs,
            dataset_size,
            resolution,
            latent_dim,
            lambda1,
            lambda2,
            seed,
            ..TrainConfig::default()
        };
        let out = training::train(&cfg).map_err(to_py)?;
        let history = to_dict(py, &out.history)?;
        Ok((PyModel { decoder: out.decoder, encoder: out.encoder }, history))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (decoder, encoder) = load_model(path).map_err(to_py)?;
        Ok(Self { decoder, encoder })
    }

    /// Writes the model file and its JSON configuration beside it.
    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.decoder, &self.encoder).map_err(to_py)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.decoder.cfg.latent_dim
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.decoder.cfg.output_resolution()
    }

    /// Occupancy probabilities, x-fastest.
    fn decode(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        let z = LatentCode::new(z).map_err(to_py)?;
        Ok(decode(&self.decoder, &z, Mode::Infer).map_err(to_py)?.values().to_vec())
    }

    /// Thresholded decode projected onto one solid component without
    /// sub-threshold voids, with its report.
    fn constrained_decode<'py>(&self, py: Python<'py>, z: Vec<f64>) -> PyResult<(PyVoxelGrid, Bound<'py, PyAny>)> {
        let z = LatentCode::new(z).map_err(to_py)?;
        let (g, r) =
            voxfab::decoder::constrained_decode(&self.decoder, &z, &PrintabilitySpec::default()).map_err(to_py)?;
        Ok((PyVoxelGrid(g), to_dict(py, &r)?))
    }

    /// `count` prior samples, matching the command-line `generate`.
    #[pyo3(signature = (count, seed = 0, unconstrained = false))]
    fn generate(&self, count: usize, seed: u64, unconstrained: bool) -> PyResult<Vec<PyVoxelGrid>> {
        let pipeline = if unconstrained { Pipeline::Unconstrained } else { Pipeline::Decoder };
        let spec = PrintabilitySpec::default();
        LatentCode::sample_many(count, self.decoder.cfg.latent_dim, seed)
            .iter()
            .map(|z| bench::run_pipeline(pipeline, &self.decoder, z, &spec).map(|(g, _)| PyVoxelGrid(g)))
            .collect::<voxfab::Result<_>>()
            .map_err(to_py)
    }
}

/// Finite-difference check of the tiny network's gradients.
#[pyfunction]
#[pyo3(signature = (seed = training::gradcheck::DEFAULT_SEED))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    to_dict(py, &training::gradcheck::gradcheck(seed).map_err(to_py)?)
}

#[pymodule]
#[pyo3(name = "voxfab")]
fn voxfab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVoxelGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(repair, m)?)?;
    m.add_function(wrap_pyfunction!(export_stl, m)?)?;
    m.add_function(wrap_pyfunction!(voxelize_stl, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("RepairError", m.py().get_type::<RepairError>())?;
    Ok(())
}
