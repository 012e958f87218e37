//! The feature-space embedding fitted on in-distribution data only:
//! per-feature quantile transform to normal scores, standardization, and a
//! PCA projection. Rank statistics make the first stage invariant to any
//! strictly monotone per-feature rescaling, so detectors downstream see the
//! same geometry no matter how individual features are calibrated.

use serde::{Deserialize, Serialize};

use driftwood_core::{CoreError, Mat, Result};

use crate::linalg::{symmetric_eigen_desc, to_dmatrix};

/// Inverse of the standard normal CDF (Wichura's PPND16 rational
/// approximation, accurate to ~1e-16 for p in (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(CoreError::validation(format!(
            "normal quantile needs p in (0,1), got {p}"
        )));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = q
            * (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                + 6.7265770927008700853e4)
                * r
                + 4.5921953931549871457e4)
                * r
                + 1.3731693765509461125e4)
                * r
                + 1.9715909503065514427e3)
                * r
                + 1.3314166789178437745e2)
                * r
                + 3.3871328727963666080e0);
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return Ok(num / den);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-5)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -x } else { x })
}

/// Per-feature map through the empirical CDF of the training data, then the
/// standard normal inverse CDF. Unseen extremes clip to the training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTransform {
    sorted: Vec<Vec<f64>>,
    constant: Vec<bool>,
}

impl QuantileTransform {
    pub fn fit(x: &Mat) -> Result<QuantileTransform> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(CoreError::validation("quantile transform needs at least 2 rows"));
        }
        if !x.is_finite() {
            return Err(CoreError::validation("feature matrix is not finite"));
        }
        let mut sorted = Vec::with_capacity(d);
        let mut constant = Vec::with_capacity(d);
        for j in 0..d {
            let mut col: Vec<f64> = (0..n).map(|i| x.at(i, j)).collect();
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
            constant.push(col[n - 1] == col[0]);
            sorted.push(col);
        }
        Ok(QuantileTransform { sorted, constant })
    }

    pub fn constant_features(&self) -> Vec<usize> {
        self.constant
            .iter()
            .enumerate()
            .filter_map(|(j, &c)| c.then_some(j))
            .collect()
    }

    pub fn transform_value(&self, j: usize, v: f64) -> Result<f64> {
        if self.constant[j] {
            return Ok(0.0);
        }
        let col = &self.sorted[j];
        let n = col.len();
        let below = col.partition_point(|&c| c < v);
        let at_or_below = col.partition_point(|&c| c <= v);
        // midrank CDF, clipped so extremes stay finite under the normal
        // inverse
        let p = (below + at_or_below) as f64 / (2 * n) as f64;
        let p = p.clamp(1.0 / (2 * n) as f64, 1.0 - 1.0 / (2 * n) as f64);
        inverse_normal_cdf(p)
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        let (n, d) = x.shape();
        if d != self.sorted.len() {
            return Err(CoreError::validation(format!(
                "expected {} features, got {d}",
                self.sorted.len()
            )));
        }
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                out.set(i, j, self.transform_value(j, x.at(i, j))?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Mat) -> Standardizer {
        let (n, d) = x.shape();
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for j in 0..d {
            let mean = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            means[j] = mean;
            stds[j] = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        }
        Standardizer { means, stds }
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        let (n, d) = x.shape();
        if d != self.means.len() {
            return Err(CoreError::validation(format!(
                "expected {} features, got {d}",
                self.means.len()
            )));
        }
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                out.set(i, j, (x.at(i, j) - self.means[j]) / self.stds[j]);
            }
        }
        Ok(out)
    }
}

/// Projection onto the top principal directions of the (already
/// standardized) in-distribution embedding. `basis` is d x m with
/// orthonormal columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub basis: Mat,
}

impl Pca {
    pub fn fit(x: &Mat, m_components: usize) -> Result<Pca> {
        let (n, d) = x.shape();
        if m_components == 0 || m_components > d {
            return Err(CoreError::validation(format!(
                "cannot keep {m_components} of {d} components"
            )));
        }
        if n <= m_components {
            return Err(CoreError::validation(format!(
                "PCA needs more rows than components, got {n} rows for {m_components}"
            )));
        }
        let xd = to_dmatrix(x);
        let means = xd.row_mean();
        let centered = {
            let mut c = xd;
            for i in 0..n {
                for j in 0..d {
                    c[(i, j)] -= means[j];
                }
            }
            c
        };
        let cov = centered.transpose() * &centered / n as f64;
        let (_, vectors) = symmetric_eigen_desc(&cov);
        let mut basis = Mat::zeros(d, m_components);
        for j in 0..m_components {
            for i in 0..d {
                basis.set(i, j, vectors[(i, j)]);
            }
        }
        Ok(Pca { basis })
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        let (_, d) = x.shape();
        if d != self.basis.shape().0 {
            return Err(CoreError::validation(format!(
                "expected {} features, got {d}",
                self.basis.shape().0
            )));
        }
        Ok(x.matmul(&self.basis))
    }
}

/// The full map: quantile transform, standardization, PCA. Fitting is on
/// in-distribution rows only; constant features survive as zeros and are
/// reported in `warnings`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub quantile: QuantileTransform,
    pub standardizer: Standardizer,
    pub pca: Pca,
    pub warnings: Vec<String>,
}

impl Preprocessor {
    pub fn fit(x_id: &Mat, m_components: usize) -> Result<Preprocessor> {
        let quantile = QuantileTransform::fit(x_id)?;
        let warnings: Vec<String> = quantile
            .constant_features()
            .into_iter()
            .map(|j| format!("feature column {j} is constant, mapped to 0"))
            .collect();
        let q = quantile.transform(x_id)?;
        let standardizer = Standardizer::fit(&q);
        let z = standardizer.transform(&q)?;
        let pca = Pca::fit(&z, m_components)?;
        Ok(Preprocessor { quantile, standardizer, pca, warnings })
    }

    pub fn out_dim(&self) -> usize {
        self.pca.basis.shape().1
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        let q = self.quantile.transform(x)?;
        let z = self.standardizer.transform(&q)?;
        self.pca.transform(&z)
    }
}
