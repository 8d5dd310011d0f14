//! PCA dimension reduction of concrete states.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_blocks;

/// A fitted principal component projection.
///
/// `components` holds one principal axis per row, ordered by descending
/// variance. Each axis is sign-normalized so that its entry of largest
/// magnitude is positive (lowest index on ties), which makes the fit a pure
/// function of the input bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    #[serde(with = "serde_blocks::array1")]
    pub mean: Array1<f64>,
    #[serde(with = "serde_blocks::array2")]
    pub components: Array2<f64>,
    #[serde(with = "serde_blocks::array1")]
    pub variances: Array1<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn transform(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        pca_transform(self, rows)
    }
}

pub fn pca_fit(rows: ArrayView2<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = rows.dim();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidConfig(format!(
            "PCA k={k} must lie in [1, min(N={n}, D={d})]"
        )));
    }
    let mean = rows.mean_axis(Axis(0)).expect("n >= 2");
    let centered = DMatrix::from_fn(n, d, |i, j| rows[[i, j]] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut components = Array2::zeros((k, d));
    let mut variances = Array1::zeros(k);
    for (out, &src) in order.iter().take(k).enumerate() {
        let sigma = svd.singular_values[src];
        variances[out] = sigma * sigma / (n as f64 - 1.0);
        let mut pivot = 0;
        for j in 0..d {
            if v_t[(src, j)].abs() > v_t[(src, pivot)].abs() {
                pivot = j;
            }
        }
        let sign = if v_t[(src, pivot)] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[out, j]] = sign * v_t[(src, j)];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        variances,
    })
}

/// Projects rows onto the retained axes: `(rows - mean) * components^T`.
pub fn pca_transform(model: &PcaModel, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    if rows.ncols() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            got: rows.ncols(),
        });
    }
    let centered = &rows - &model.mean.view().insert_axis(Axis(0));
    Ok(centered.dot(&model.components.t()))
}
