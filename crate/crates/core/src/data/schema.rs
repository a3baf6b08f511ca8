use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    /// Header name of the label column; the last column when absent.
    #[serde(default)]
    pub name: Option<String>,
    /// Class names in index order; sorted observed labels when empty.
    #[serde(default)]
    pub classes: Vec<String>,
}

/// Column layout of a CSV file, as read from a schema JSON document:
///
/// ```json
/// {
///   "features": [{"name": "age", "kind": "numerical"},
///                {"name": "color", "kind": "categorical"}],
///   "label": {"name": "y", "classes": ["no", "yes"]}
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub features: Vec<ColumnSpec>,
    #[serde(default)]
    pub label: LabelSpec,
}

impl SchemaSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("schema lists no features".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name {:?}", f.name)));
            }
        }
        if let Some(label) = &self.label.name {
            if seen.contains(label.as_str()) {
                return Err(Error::Schema(format!("label {label:?} is also a feature")));
            }
        }
        let mut classes = self.label.classes.clone();
        classes.sort();
        classes.dedup();
        if classes.len() != self.label.classes.len() {
            return Err(Error::Schema("duplicate class names".into()));
        }
        Ok(())
    }
}

/// Kind of a preprocessed feature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Numerical,
    /// Codes are `0..categories.len()`; the padding index is
    /// `categories.len()`.
    Categorical { categories: Vec<String> },
}

impl FeatureKind {
    /// Category count `k`, or `None` for numerical features.
    pub fn cardinality(&self) -> Option<usize> {
        match self {
            FeatureKind::Numerical => None,
            FeatureKind::Categorical { categories } => Some(categories.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Feature metadata of a preprocessed dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
    pub label: String,
    pub classes: Vec<String>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Schema of a dataset whose features are all numerical.
    pub fn numerical(names: &[&str], classes: &[&str]) -> Self {
        Self {
            features: names
                .iter()
                .map(|n| Feature { name: n.to_string(), kind: FeatureKind::Numerical })
                .collect(),
            label: "label".into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }
}
