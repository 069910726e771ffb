use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
    /// Category levels in one-hot order; empty for numeric features.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl Feature {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
            levels: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            levels: levels.into_iter().map(Into::into).collect(),
        }
    }

    /// Number of model input columns this feature expands to.
    pub fn width(&self) -> usize {
        match self.kind {
            FeatureKind::Numeric => 1,
            FeatureKind::Categorical => self.levels.len(),
        }
    }
}

/// Column layout of a tabular classification dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    /// Name of the label column.
    pub label: String,
    /// Class names; a label cell must equal one of these.
    pub classes: Vec<String>,
    pub features: Vec<Feature>,
}

impl TableSchema {
    pub fn new(label: impl Into<String>, classes: Vec<String>, features: Vec<Feature>) -> Result<Self> {
        let schema = Self {
            label: label.into(),
            classes,
            features,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Schema("at least two classes are required".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Schema("no feature columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::Schema(format!("duplicate class name `{c}`")));
            }
        }
        let mut names = HashSet::new();
        for f in &self.features {
            if f.name == self.label {
                return Err(Error::Schema(format!(
                    "label column `{}` is also listed as a feature",
                    f.name
                )));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature `{}`", f.name)));
            }
            match f.kind {
                FeatureKind::Numeric if !f.levels.is_empty() => {
                    return Err(Error::Schema(format!(
                        "numeric feature `{}` must not list levels",
                        f.name
                    )));
                }
                FeatureKind::Categorical => {
                    if f.levels.is_empty() {
                        return Err(Error::Schema(format!(
                            "categorical feature `{}` has no levels",
                            f.name
                        )));
                    }
                    let unique: HashSet<_> = f.levels.iter().collect();
                    if unique.len() != f.levels.len() {
                        return Err(Error::Schema(format!(
                            "categorical feature `{}` has duplicate levels",
                            f.name
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Model input width after one-hot expansion.
    pub fn expanded_width(&self) -> usize {
        self.features.iter().map(Feature::width).sum()
    }

    /// Expanded column names: numeric features keep their name, categorical
    /// levels become `name=level`.
    pub fn expanded_columns(&self) -> Vec<String> {
        self.features
            .iter()
            .flat_map(|f| match f.kind {
                FeatureKind::Numeric => vec![f.name.clone()],
                FeatureKind::Categorical => f.levels.iter().map(|l| format!("{}={l}", f.name)).collect(),
            })
            .collect()
    }

    /// `true` for expanded columns that come from numeric features.
    pub fn numeric_mask(&self) -> Vec<bool> {
        self.features
            .iter()
            .flat_map(|f| std::iter::repeat_n(f.kind == FeatureKind::Numeric, f.width()))
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let schema: Self = toml::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}
