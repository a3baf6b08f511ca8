use super::schema::FeatureSchema;
use crate::error::{Error, Result};

/// Preprocessed samples: a row-major value grid with a parallel presence
/// grid. Categorical cells hold their code as a float. Values under
/// `present == false` are meaningless and are never read by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    schema: FeatureSchema,
    values: Vec<f64>,
    present: Vec<bool>,
    labels: Vec<usize>,
}

impl TabularDataset {
    pub fn new(schema: FeatureSchema, values: Vec<f64>, present: Vec<bool>, labels: Vec<usize>) -> Result<Self> {
        let m = schema.len();
        let n = labels.len();
        if values.len() != n * m || present.len() != n * m {
            return Err(Error::shape(
                "dataset",
                format!("{n} samples x {m} features, {} values, {} presence flags", values.len(), present.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= schema.classes.len()) {
            return Err(Error::Index(format!("label {l} for {} classes", schema.classes.len())));
        }
        for (j, f) in schema.features.iter().enumerate() {
            if let Some(k) = f.kind.cardinality() {
                for i in 0..n {
                    let v = values[i * m + j];
                    if present[i * m + j] && (v < 0.0 || v >= k as f64 || v.fract() != 0.0) {
                        return Err(Error::Index(format!("code {v} for feature {:?} with {k} categories", f.name)));
                    }
                }
            }
        }
        Ok(Self { schema, values, present, labels })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        let m = self.n_features();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn row_present(&self, i: usize) -> &[bool] {
        let m = self.n_features();
        &self.present[i * m..(i + 1) * m]
    }

    pub fn missing_count(&self) -> usize {
        self.present.iter().filter(|&&p| !p).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let m = self.n_features();
        let mut values = Vec::with_capacity(indices.len() * m);
        let mut present = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            values.extend_from_slice(self.row_values(i));
            present.extend_from_slice(self.row_present(i));
        }
        Self {
            schema: self.schema.clone(),
            values,
            present,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Same values and labels with a replacement presence grid.
    pub fn with_present(&self, present: Vec<bool>) -> Result<Self> {
        if present.len() != self.present.len() {
            return Err(Error::shape("with_present", format!("{} vs {}", present.len(), self.present.len())));
        }
        Ok(Self { present, ..self.clone() })
    }

    /// Same presence grid and labels with replacement values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.schema.clone(), values, self.present.clone(), self.labels.clone())
    }
}
