use crate::error::{Error, Result};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                context: "dataset feature dim",
                expected: 1,
                got: 0,
            });
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "dataset features",
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the selected rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }

    /// Concatenates datasets that share dim and class count.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or(Error::EmptyDataset("concat of nothing"))?;
        let mut out = Dataset::empty(first.dim, first.num_classes);
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    context: "concat dim",
                    expected: first.dim,
                    got: p.dim,
                });
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> Dataset {
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features: self.features.clone(),
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }
}
