//! One-vs-all reduction over binary models.
//!
//! Every per-class problem uses the same kernel and the same sample count, so the
//! circulant column and its spectrum are built once and shared read-only.

use std::sync::Arc;

use rayon::prelude::*;

use crate::data_io::{Dataset, DatasetMeta, FeatureMatrix};
use crate::dense_oracle::train_exact;
use crate::error::{KlrError, Result};
use crate::klr_fast::{
    check_dim, kernel_expansion, train_prepared, BinaryModel, PreparedKernel, SolverKind,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassModel {
    /// Original label value of each class, in canonical order.
    pub classes: Vec<f64>,
    /// `models[c]` separates class `c` from the rest.
    pub models: Vec<BinaryModel>,
    pub config: TrainConfig,
}

/// One-vs-all with the fast solver, using rayon's global pool.
pub fn train_ova(data: &Dataset, config: &TrainConfig) -> Result<MulticlassModel> {
    train_ova_with(data, config, SolverKind::Mcm, None)
}

/// One-vs-all with a chosen solver. `jobs` caps the number of classes trained
/// concurrently; `None` uses the global pool.
pub fn train_ova_with(
    data: &Dataset,
    config: &TrainConfig,
    solver: SolverKind,
    jobs: Option<usize>,
) -> Result<MulticlassModel> {
    config.validate()?;
    let c = data.n_classes();
    let present = {
        let mut seen = vec![false; c];
        data.y().iter().for_each(|&k| seen[k] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if c < 2 || present < 2 {
        return Err(KlrError::Validation(format!(
            "one-vs-all needs at least two distinct labels, found {present}"
        )));
    }
    if data.n() < 2 {
        return Err(KlrError::Validation("training needs at least two samples".into()));
    }

    let train_x = Arc::new(data.x().clone());
    let prepared = match solver {
        SolverKind::Mcm => Some(PreparedKernel::new(data.n(), config)?),
        SolverKind::Exact => None,
    };
    let fit_class = |k: usize| -> Result<BinaryModel> {
        let y: Vec<f64> = data.y().iter().map(|&v| f64::from(v == k)).collect();
        match &prepared {
            Some(p) => train_prepared(p, Arc::clone(&train_x), &y, vec![0.0, 1.0], config),
            None => {
                let ds = Dataset::new(
                    data.x().clone(),
                    data.y().iter().map(|&v| usize::from(v == k)).collect(),
                    DatasetMeta {
                        source: data.meta().source.clone(),
                        label_values: vec![0.0, 1.0],
                    },
                )?;
                let mut m = train_exact(&ds, config)?;
                m.train = Arc::clone(&train_x);
                Ok(m)
            }
        }
    };

    let models: Vec<BinaryModel> = match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| KlrError::InvalidParameter(format!("thread pool: {e}")))?;
            pool.install(|| (0..c).into_par_iter().map(fit_class).collect::<Result<_>>())?
        }
        None => (0..c).into_par_iter().map(fit_class).collect::<Result<_>>()?,
    };

    Ok(MulticlassModel {
        classes: data.meta().label_values.clone(),
        models,
        config: config.clone(),
    })
}

impl MulticlassModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn d(&self) -> usize {
        self.models[0].d()
    }

    /// Per-sample margins of every class; kernel rows are shared across classes.
    pub fn margins(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        check_dim(self.d(), x)?;
        let first = &self.models[0];
        let m = first.n_train();
        if self.models.iter().all(|b| Arc::ptr_eq(&b.train, &first.train)) {
            let alphas: Vec<&[f64]> = self.models.iter().map(|b| &b.alpha[..m]).collect();
            return Ok(kernel_expansion(&first.config.kernel, &first.train, &alphas, x));
        }
        let per_class = self
            .models
            .iter()
            .map(|b| b.margins(x))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..x.rows())
            .map(|i| per_class.iter().map(|v| v[i]).collect())
            .collect())
    }

    /// Canonical class index per sample.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(self.margins(x)?.iter().map(|s| argmax(s)).collect())
    }

    /// Original label value per sample.
    pub fn predict_labels(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.into_iter().map(|c| self.classes[c]).collect())
    }
}

pub fn predict_ova(model: &MulticlassModel, x: &FeatureMatrix) -> Result<Vec<usize>> {
    model.predict(x)
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
