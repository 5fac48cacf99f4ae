//! Datasets, readers, synthetic generators and the model file format.

mod generators;
mod model_file;
mod sparse_text;

pub use generators::{
    checkerboard_label, fig1_boundary, fig1_label, generate_blobs, generate_checkerboard,
    generate_fig1_synthetic, FIG1_BAND_HALF_WIDTH, FIG1_N_TEST, FIG1_N_TRAIN,
};
pub use model_file::{load_model, read_model, save_model, write_model, ModelFile, SavedModel, MAGIC};
pub use sparse_text::{parse_sparse_text, read_sparse_file};

use crate::error::{KlrError, Result};

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(KlrError::Dimension(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(KlrError::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    /// Original numeric label for each canonical class index.
    pub label_values: Vec<f64>,
}

/// Samples with canonical labels `0..C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: FeatureMatrix,
    y: Vec<usize>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: FeatureMatrix, y: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        if x.rows() == 0 {
            return Err(KlrError::Validation("dataset has no samples".into()));
        }
        if y.len() != x.rows() {
            return Err(KlrError::Dimension(format!(
                "{} labels for {} samples",
                y.len(),
                x.rows()
            )));
        }
        if let Some(pos) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(KlrError::Validation(format!(
                "non-finite feature in sample {}",
                pos / x.cols().max(1)
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= meta.label_values.len()) {
            return Err(KlrError::Validation(format!(
                "label index {bad} outside the {} known classes",
                meta.label_values.len()
            )));
        }
        Ok(Self { x, y, meta })
    }

    /// Dataset whose labels are already `0..C`; the label values are the indices.
    pub fn with_class_indices(x: FeatureMatrix, y: Vec<usize>, source: &str) -> Result<Self> {
        let classes = y.iter().max().map_or(0, |m| m + 1);
        let meta = DatasetMeta {
            source: source.to_string(),
            label_values: (0..classes).map(|c| c as f64).collect(),
        };
        Self::new(x, y, meta)
    }

    pub fn x(&self) -> &FeatureMatrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.meta.label_values.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.x.select_rows(idx),
            idx.iter().map(|&i| self.y[i]).collect(),
            self.meta.clone(),
        )
    }

    /// Pads or truncates the feature dimension to `d` (sparse files only know the
    /// largest index they contain).
    pub fn with_dimension(&self, d: usize) -> Result<Self> {
        if d == self.d() {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.n() * d);
        for i in 0..self.n() {
            let row = self.x.row(i);
            if row[d.min(row.len())..].iter().any(|&v| v != 0.0) {
                return Err(KlrError::Dimension(format!(
                    "sample {i} has nonzero features beyond dimension {d}"
                )));
            }
            data.extend((0..d).map(|j| row.get(j).copied().unwrap_or(0.0)));
        }
        Self::new(FeatureMatrix::new(self.n(), d, data)?, self.y.clone(), self.meta.clone())
    }

    pub fn map_features(&self, f: impl Fn(&[f64], &mut [f64])) -> Result<Self> {
        let mut data = self.x.data.clone();
        for (src, dst) in self.x.data.chunks_exact(self.d().max(1)).zip(data.chunks_exact_mut(self.d().max(1))) {
            f(src, dst);
        }
        Self::new(FeatureMatrix::new(self.n(), self.d(), data)?, self.y.clone(), self.meta.clone())
    }
}

/// Per-feature affine map onto `[0, 1]`; constant features map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(x: &FeatureMatrix) -> Self {
        let mut min = vec![f64::INFINITY; x.cols()];
        let mut max = vec![f64::NEG_INFINITY; x.cols()];
        for i in 0..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    pub fn apply_row(&self, src: &[f64], dst: &mut [f64]) {
        for (j, (s, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
            let span = self.max[j] - self.min[j];
            *d = if span > 0.0 { (s - self.min[j]) / span } else { 0.0 };
        }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.d() != self.min.len() {
            return Err(KlrError::Dimension(format!(
                "scaler fitted on {} features, data has {}",
                self.min.len(),
                data.d()
            )));
        }
        data.map_features(|s, d| self.apply_row(s, d))
    }
}
