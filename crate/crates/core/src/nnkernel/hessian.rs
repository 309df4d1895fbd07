use rayon::prelude::*;

use super::backprop::loss_and_gradient;
use super::linalg::Matrix;
use super::model::{flatten_params, unflatten_params, Model};
use crate::datagen::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_HESSIAN_CAP: usize = 2000;

/// A differentiable scalar objective over a flat parameter vector.
///
/// Models evaluated on a dataset implement this through
/// [`DatasetObjective`]; tests wire in closed-form losses.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// Mean cross-entropy of a fixed architecture over a fixed sample set.
pub struct DatasetObjective<'a> {
    template: &'a Model,
    inputs: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> DatasetObjective<'a> {
    pub fn new(template: &'a Model, dataset: &'a Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Ok(DatasetObjective {
            template,
            inputs: dataset.inputs(),
            labels: dataset.labels(),
        })
    }

    pub fn loss(&self, w: &[f64]) -> Result<f64> {
        let model = unflatten_params(self.template, w)?;
        Ok(loss_and_gradient(&model, &self.inputs, &self.labels)?.0)
    }
}

impl Objective for DatasetObjective<'_> {
    fn dim(&self) -> usize {
        self.template.param_count()
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let model = unflatten_params(self.template, w)?;
        Ok(loss_and_gradient(&model, &self.inputs, &self.labels)?.1 .0)
    }
}

/// Hessian of the mean loss of `model` over the whole `dataset`.
pub fn hessian(model: &Model, dataset: &Dataset, cap: usize) -> Result<Matrix> {
    let obj = DatasetObjective::new(model, dataset)?;
    hessian_of(&obj, &flatten_params(model).0, cap)
}

/// Central finite differences of the analytic gradient, column by column
/// with step `1e-4 * max(1, |w_i|)`, then symmetrized as `(H + H^T) / 2`.
///
/// Columns are independent and evaluated on the current rayon pool; each
/// column's arithmetic is fixed so the result does not depend on the
/// number of workers.
pub fn hessian_of(obj: &dyn Objective, w: &[f64], cap: usize) -> Result<Matrix> {
    let m = obj.dim();
    if w.len() != m {
        return Err(Error::Length {
            expected: m,
            actual: w.len(),
        });
    }
    if m > cap {
        return Err(Error::HessianCap { params: m, cap });
    }
    let columns: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let h = 1e-4 * w[i].abs().max(1.0);
            let mut probe = w.to_vec();
            probe[i] = w[i] + h;
            let plus = obj.gradient(&probe)?;
            probe[i] = w[i] - h;
            let minus = obj.gradient(&probe)?;
            // Actual step after rounding of w_i +/- h.
            let span = (w[i] + h) - (w[i] - h);
            Ok(plus.iter().zip(&minus).map(|(p, q)| (p - q) / span).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            // columns[j][i] = dg_i / dw_j
            let v = 0.5 * (columns[j][i] + columns[i][j]);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("Hessian entry".into()));
    }
    Ok(out)
}
