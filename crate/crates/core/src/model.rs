//! A trained model: schema, architecture config and every named tensor,
//! with evaluation-mode forward passes and checkpoint bundling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, FeatureMaps};
use crate::error::{Error, Result};
use crate::global_rep::{self, GlobalConfig};
use crate::heads::{self, HeadConfig};
use crate::localization::{self, AamRecord, AttributeActivationMap};
use crate::memory::{self, MemoryBlock, RowEntry, MEMORY};
use crate::numerics::{checkpoint, ParamSet, RoiBox, Tensor};
use crate::synthgen::AttributeSchema;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub global: GlobalConfig,
    /// Pool heads from AAM boxes; otherwise from the whole map.
    pub localization: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub schema: AttributeSchema,
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

/// JSON sidecar written next to a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: String,
    pub variant: Option<String>,
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    pub memory_rows: Vec<RowEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    /// Fresh parameters for everything except the memory block.
    pub fn init(schema: AttributeSchema, config: ModelConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        let (_, _, mid_c) = config.backbone.mid_shape()?;
        let (_, _, last_c) = config.backbone.last_shape()?;
        let mut params = backbone::init_backbone(&config.backbone, seed)?;
        for (prefix, part) in [
            ("cls/", localization::init_classifier(&schema, last_c, seed.wrapping_add(1))),
            ("head/", heads::init_heads(&schema, &config.heads, mid_c, seed.wrapping_add(2))),
            ("global/", global_rep::init_global(&schema, &config.global, config.heads.dim, seed.wrapping_add(3))),
        ] {
            params.merge_prefix(&part, prefix);
        }
        Ok(Self { schema, config, params })
    }

    /// Every tensor a complete model must carry.
    pub fn required_names(&self) -> Vec<String> {
        let mut names = self.config.backbone.param_names();
        names.extend(localization::classifier_names(&self.schema));
        names.extend(heads::all_head_names(&self.schema));
        names.extend(global_rep::global_names(&self.schema, &self.config.global));
        names.push(MEMORY.into());
        names
    }

    pub fn version(&self) -> String {
        checkpoint::version_tag(&self.params)
    }

    pub fn features(&self, pixels: &Tensor<f32>) -> Result<FeatureMaps> {
        backbone::features(&self.config.backbone, &self.params, pixels)
    }

    pub fn aam(&self, maps: &FeatureMaps, a: usize) -> Result<AttributeActivationMap> {
        localization::compute_aam(&maps.last, &self.schema, &self.params, a)
    }

    /// Pooling boxes per attribute: AAM boxes, or the whole map.
    pub fn boxes(&self, maps: &FeatureMaps) -> Result<Vec<RoiBox>> {
        if self.config.localization {
            localization::attribute_boxes(&maps.last, &self.schema, &self.params)
        } else {
            Ok(vec![RoiBox::FULL; self.schema.len()])
        }
    }

    /// Evaluation-mode attribute representations of one image.
    pub fn representations(&self, pixels: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let maps = self.features(pixels)?;
        self.representations_from(&maps)
    }

    pub fn representations_from(&self, maps: &FeatureMaps) -> Result<Vec<Tensor<f32>>> {
        let boxes = self.boxes(maps)?;
        (0..self.schema.len())
            .map(|a| heads::representation(&maps.mid, &boxes[a], a, &self.schema, &self.config.heads, &self.params))
            .collect()
    }

    /// The activation map of attribute `a`, its box record and the heatmap
    /// upsampled to the image size.
    pub fn explain(&self, id: &str, pixels: &Tensor<f32>, a: usize) -> Result<(AamRecord, image::GrayImage)> {
        if a >= self.schema.len() {
            return Err(Error::Index { index: a, len: self.schema.len() });
        }
        let maps = self.features(pixels)?;
        let aam = self.aam(&maps, a)?;
        let b = localization::threshold_bbox(&aam);
        let attr = &self.schema.attributes[a];
        let record = AamRecord {
            image: id.to_string(),
            attribute: attr.name.clone(),
            class: attr.values[aam.class].clone(),
            roi: [b.y1, b.x1, b.y2, b.x2],
        };
        let png = localization::heatmap_image(&aam.heatmap, pixels.shape()[0], pixels.shape()[1])?;
        Ok((record, png))
    }

    pub fn memory(&self) -> Result<MemoryBlock> {
        Ok(MemoryBlock { matrix: self.params.get(MEMORY)?.clone(), trainable: false })
    }

    pub fn set_memory(&mut self, memory: &MemoryBlock) {
        self.params.insert(MEMORY, memory.matrix.clone());
    }

    pub fn compose(&self, reps: &[Tensor<f32>], manipulation: Option<(usize, &Tensor<f32>)>, a_star: usize) -> Result<Tensor<f32>> {
        global_rep::compose(reps, manipulation, a_star, &self.schema, &self.config.global, &self.params)
    }

    /// `F_{I,t}` for setting attribute `a` to value `v`.
    pub fn query_vector(&self, reps: &[Tensor<f32>], a: usize, v: usize) -> Result<Tensor<f32>> {
        let g = memory::retrieve(&self.memory()?, &memory::indicator(&self.schema, a, v)?)?;
        self.compose(reps, Some((a, &g)), a)
    }

    /// Unmanipulated composition under every attribute's projection.
    pub fn gallery_vectors(&self, reps: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        (0..self.schema.len()).map(|a| self.compose(reps, None, a)).collect()
    }

    pub fn meta(&self, variant: Option<String>) -> ModelMeta {
        ModelMeta {
            version: self.version(),
            variant,
            config: self.config.clone(),
            schema: self.schema.clone(),
            memory_rows: memory::row_index(&self.schema),
        }
    }

    /// Writes `path` (tensors) and `path.json` (metadata).
    pub fn save(&self, path: &Path, variant: Option<String>) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::save(path, &self.params)?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.meta(variant))?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        meta.schema.validate()?;
        let params = checkpoint::load(path)?;
        let model = Self { schema: meta.schema.clone(), config: meta.config.clone(), params };
        model.params.require(&model.required_names())?;
        if model.version() != meta.version {
            return Err(Error::VersionMismatch { checkpoint: model.version(), index: meta.version });
        }
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_and_missing_tensors() {
        let schema = AttributeSchema::default();
        let mut model = Model::init(schema.clone(), ModelConfig::default(), 4).unwrap();
        let dim = model.config.heads.dim;
        model.set_memory(&MemoryBlock { matrix: Tensor::full([schema.total_values(), dim], 0.5), trainable: false });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, Some("Full".into())).unwrap();
        let (back, meta) = Model::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta.variant.as_deref(), Some("Full"));
        assert_eq!(meta.memory_rows.len(), 16);

        let mut partial = model.clone();
        partial.params.remove(MEMORY);
        partial.params.remove("cls/pattern");
        partial.save(&path, None).unwrap();
        match Model::load(&path) {
            Err(Error::MissingTensors(names)) => {
                assert!(names.contains(&"cls/pattern".to_string()));
                assert!(names.contains(&MEMORY.to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_box_without_localization() {
        let model = Model::init(AttributeSchema::default(), ModelConfig::default(), 0).unwrap();
        let maps = model.features(&Tensor::full([64, 64, 3], 0.3)).unwrap();
        assert_eq!(model.boxes(&maps).unwrap(), vec![RoiBox::FULL; 4]);
        let reps = model.representations_from(&maps).unwrap();
        assert_eq!(reps.len(), 4);
        assert!(reps.iter().all(|r| r.shape() == [32]));
    }
}
