use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::MlpModel;
use crate::data::{Standardizer, TableSchema};
use crate::error::{Error, Result};
use crate::math::ProbVector;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything the adaptation phase needs from training: the source model,
/// its label prior, and the feature preprocessing.
///
/// Stored as JSON; floats use shortest round-trip formatting, so a
/// save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    /// Per layer: row-major weights (out × in), then bias.
    pub params: Vec<f64>,
    pub p0: ProbVector,
    pub standardizer: Standardizer,
    pub class_names: Vec<String>,
    pub schema: TableSchema,
}

impl Checkpoint {
    pub fn new(model: &MlpModel, p0: ProbVector, standardizer: Standardizer, schema: TableSchema) -> Result<Self> {
        let ckpt = Self {
            version: CHECKPOINT_VERSION,
            layer_dims: model.layer_dims(),
            params: model.flatten(),
            p0,
            standardizer,
            class_names: schema.classes.clone(),
            schema,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if self.version != CHECKPOINT_VERSION {
            return bad(format!("unsupported checkpoint version {}", self.version));
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad(format!("invalid layer dims {:?}", self.layer_dims));
        }
        let expected: usize = self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if self.params.len() != expected {
            return bad(format!(
                "parameter count {} does not match layer dims {:?} (expected {expected})",
                self.params.len(),
                self.layer_dims
            ));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return bad("non-finite parameter".into());
        }
        let k = *self.layer_dims.last().expect("len >= 2");
        let d = self.layer_dims[0];
        if self.p0.len() != k || self.class_names.len() != k {
            return bad(format!(
                "model has {k} outputs but P0 has {} entries and {} class names",
                self.p0.len(),
                self.class_names.len()
            ));
        }
        self.schema.validate()?;
        if self.schema.classes != self.class_names {
            return bad("class names disagree with the schema".into());
        }
        if self.schema.expanded_width() != d || self.standardizer.width() != d {
            return bad(format!(
                "input width {d} disagrees with schema width {} or statistics width {}",
                self.schema.expanded_width(),
                self.standardizer.width()
            ));
        }
        self.standardizer
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn model(&self) -> Result<MlpModel> {
        MlpModel::from_flat(&self.layer_dims, &self.params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::parse(path, e))
    }
}
