//! Python bindings: datasets, checkpoints, gallery indices, queries and a
//! few of the pure building blocks.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use attrsearch_core::engine::{self, GalleryIndex};
use attrsearch_core::heads;
use attrsearch_core::localization;
use attrsearch_core::model::Model;
use attrsearch_core::numerics::Tensor;
use attrsearch_core::synthgen::{self, AttributeSchema, Dataset as CoreDataset};
use attrsearch_core::trainer::{self, TrainConfig, Variant};

fn err(e: attrsearch_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Generates `size` images with the default schema.
    #[staticmethod]
    #[pyo3(signature = (size, seed=0, queries=500, gallery=2000))]
    fn generate(size: usize, seed: u64, queries: usize, gallery: usize) -> PyResult<Self> {
        let schema = AttributeSchema::default();
        let images = synthgen::generate_dataset(&schema, size, seed).map_err(err)?;
        let split = synthgen::split(&images, queries, gallery, seed).map_err(err)?;
        Ok(Self { inner: CoreDataset { schema, images, split } })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::read_dir(&dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.images.len()
    }

    fn schema_json(&self) -> String {
        self.inner.schema.to_canonical_json()
    }

    fn attributes(&self) -> Vec<(String, Vec<String>)> {
        self.inner.schema.attributes.iter().map(|a| (a.name.clone(), a.values.clone())).collect()
    }

    fn ids(&self, split: &str) -> PyResult<Vec<String>> {
        match split {
            "train" => Ok(self.inner.split.train.clone()),
            "query" => Ok(self.inner.split.query.clone()),
            "gallery" => Ok(self.inner.split.gallery.clone()),
            other => Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        }
    }

    fn labels(&self, id: &str) -> PyResult<Vec<usize>> {
        Ok(image(&self.inner, id)?.labels.clone())
    }

    /// `(height, width, 3)` floats in [0, 1], row-major.
    fn pixels(&self, id: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let img = image(&self.inner, id)?;
        Ok((img.pixels.shape().to_vec(), img.pixels.data().to_vec()))
    }
}

fn image<'a>(data: &'a CoreDataset, id: &str) -> PyResult<&'a synthgen::LabeledImage> {
    data.get(id).ok_or_else(|| PyKeyError::new_err(format!("no image with id '{id}'")))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Trains one variant. `config_json` overrides any training default.
    #[staticmethod]
    #[pyo3(signature = (data, variant="Full", seed=0, config_json=None))]
    fn train(data: &Dataset, variant: &str, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(err)?;
        let config: TrainConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        let (model, _) = trainer::train(&data.inner, variant, &config, seed).map_err(err)?;
        Ok(Self { inner: model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Model::load(&path).map_err(err)?.0 })
    }

    #[pyo3(signature = (path, variant=None))]
    fn save(&self, path: PathBuf, variant: Option<String>) -> PyResult<()> {
        self.inner.save(&path, variant).map_err(err)
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version()
    }

    /// Box `(y1, x1, y2, x2)` and predicted value of attribute `attribute`.
    fn explain(&self, data: &Dataset, id: &str, attribute: &str) -> PyResult<((f32, f32, f32, f32), String)> {
        let img = image(&data.inner, id)?;
        let a = self
            .inner
            .schema
            .attribute_index(attribute)
            .ok_or_else(|| PyKeyError::new_err(format!("no attribute named '{attribute}'")))?;
        let (record, _) = self.inner.explain(&img.id, &img.pixels, a).map_err(err)?;
        let [y1, x1, y2, x2] = record.roi;
        Ok(((y1, x1, y2, x2), record.class))
    }
}

#[pyclass(name = "GalleryIndex")]
struct PyIndex {
    inner: GalleryIndex,
}

#[pymethods]
impl PyIndex {
    /// Represents the dataset's gallery split.
    #[staticmethod]
    fn build(model: &PyModel, data: &Dataset) -> PyResult<Self> {
        let gallery = data.inner.subset(&data.inner.split.gallery).map_err(err)?;
        Ok(Self { inner: engine::index_gallery(&model.inner, &gallery).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: GalleryIndex::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf, model: &PyModel) -> PyResult<()> {
        self.inner.save(&path, &model.inner.schema).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Top-K `(id, distance, hit)` for the query with `attribute` set to `value`.
    fn query(
        &self,
        model: &PyModel,
        data: &Dataset,
        id: &str,
        attribute: &str,
        value: &str,
        k: usize,
    ) -> PyResult<Vec<(String, f32, bool)>> {
        self.inner.check_version(&model.inner).map_err(err)?;
        let schema = &model.inner.schema;
        let a = schema
            .attribute_index(attribute)
            .ok_or_else(|| PyKeyError::new_err(format!("no attribute named '{attribute}'")))?;
        let v = schema
            .value_index(a, value)
            .ok_or_else(|| PyKeyError::new_err(format!("attribute '{attribute}' has no value '{value}'")))?;
        let res = engine::query(&model.inner, &self.inner, image(&data.inner, id)?, a, v, k).map_err(err)?;
        Ok(res.results.into_iter().map(|r| (r.id, r.distance, r.hit)).collect())
    }

    /// Average Top-K accuracy over the query split, one entry per K.
    fn evaluate(&self, model: &PyModel, data: &Dataset, ks: Vec<usize>) -> PyResult<Vec<f64>> {
        let queries = data.inner.subset(&data.inner.split.query).map_err(err)?;
        Ok(engine::evaluate(&model.inner, &self.inner, &queries, &ks).map_err(err)?.average)
    }
}

/// `(d_plus, d_minus)` for an anchor, positive and negative vector.
#[pyfunction]
fn soft_triplet(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>) -> PyResult<(f64, f64)> {
    heads::soft_triplet(&anchor, &positive, &negative).map_err(err)
}

/// Normalized `(y1, x1, y2, x2)` box around the largest component above
/// 20% of the heatmap maximum.
#[pyfunction]
fn threshold_bbox(heatmap: Vec<Vec<f32>>) -> PyResult<(f32, f32, f32, f32)> {
    let h = heatmap.len();
    let w = heatmap.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || heatmap.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("heatmap must be a non-empty rectangular list of rows"));
    }
    let map = Tensor::new([h, w], heatmap.concat()).map_err(err)?;
    let b = localization::heatmap_bbox(&map);
    Ok((b.y1, b.x1, b.y2, b.x2))
}

#[pymodule]
fn attrsearch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyIndex>()?;
    m.add_function(wrap_pyfunction!(soft_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_bbox, m)?)?;
    Ok(())
}
