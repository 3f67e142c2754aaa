//! Shared data model: the (y, x, z) sample triple, hyperparameters, the
//! `Model` trait implemented by every estimator, and the residual/moment
//! primitives they all share.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// An immutable IV dataset: outcome `y` (length n), treatments `x` (n×p) and
/// instruments `z` (n×q). All entries are finite; rows are aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Array1<f64>,
    x: Array2<f64>,
    z: Array2<f64>,
}

impl Dataset {
    pub fn new(y: Array1<f64>, x: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("dataset must have at least one row"));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::invalid(format!(
                "row counts differ: y has {}, x has {}, z has {}",
                n,
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::invalid("x and z must have at least one column"));
        }
        if y.iter().any(|v| !v.is_finite())
            || x.iter().any(|v| !v.is_finite())
            || z.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("dataset contains NaN or infinite entries"));
        }
        Ok(Dataset { y, x, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Treatment dimension p.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Instrument dimension q.
    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    /// Row subset (clones the selected rows, preserving order).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.n()) {
            return Err(Error::invalid("row index out of range"));
        }
        let y = Array1::from_iter(idx.iter().map(|&i| self.y[i]));
        let x = select_rows(&self.x, idx);
        let z = select_rows(&self.z, idx);
        Dataset::new(y, x, z)
    }
}

pub(crate) fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&m.row(i));
    }
    out
}

/// Hyperparameters of the minimax criterion: adversary penalty `lambda`,
/// learner penalty `mu`, critical-radius scale `delta`, test-norm budget
/// `u_bound` and hypothesis-norm budget `b_bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
    pub u_bound: f64,
    pub b_bound: f64,
}

/// Default critical-radius scale: delta = 5 / n^0.4.
pub fn default_delta(n: usize) -> f64 {
    5.0 / (n as f64).powf(0.4)
}

impl HyperParams {
    pub fn new(lambda: f64, mu: f64, delta: f64, u_bound: f64, b_bound: f64) -> Result<Self> {
        let hp = HyperParams { lambda, mu, delta, u_bound, b_bound };
        hp.validate()?;
        Ok(hp)
    }

    /// Defaults for a sample of size n: delta = 5/n^0.4, U = B = 1,
    /// lambda = delta^2/U, and mu chosen so that 4*lambda*mu equals `ridge`.
    pub fn default_for(n: usize, ridge: f64) -> Self {
        let delta = default_delta(n);
        let u_bound = 1.0;
        let lambda = delta * delta / u_bound;
        let mu = ridge / (4.0 * lambda);
        HyperParams { lambda, mu, delta, u_bound, b_bound: 1.0 }
    }

    /// The ridge coefficient 4*lambda*mu that multiplies the RKHS norm in the
    /// normal equations.
    pub fn ridge(&self) -> f64 {
        4.0 * self.lambda * self.mu
    }

    /// Returns a copy with mu rescaled so that the product lambda*mu matches
    /// `product` (lambda kept fixed).
    pub fn with_lambda_mu_product(&self, product: f64) -> Self {
        let mut hp = *self;
        hp.mu = product / hp.lambda;
        hp
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::invalid("lambda and mu must be nonnegative"));
        }
        if !(self.delta > 0.0) || !(self.u_bound > 0.0) || !(self.b_bound > 0.0) {
            return Err(Error::invalid("delta, u_bound and b_bound must be positive"));
        }
        Ok(())
    }
}

/// A fitted hypothesis h: prediction is a deterministic map from a treatment
/// row to a real.
pub trait Model {
    /// Treatment dimension the model accepts.
    fn input_dim(&self) -> usize;

    fn predict(&self, x: ArrayView1<'_, f64>) -> f64;

    fn predict_batch(&self, xs: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(xs.rows().into_iter().map(|r| self.predict(r)))
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        (**self).predict(x)
    }
}

impl Model for Box<dyn Model + Send + Sync> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        (**self).predict(x)
    }
}

/// Residuals psi_i = y_i - h(x_i).
pub fn residuals<M: Model + ?Sized>(model: &M, data: &Dataset) -> Result<Array1<f64>> {
    if model.input_dim() != data.p() {
        return Err(Error::invalid(format!(
            "model expects {}-dimensional rows, data has p = {}",
            model.input_dim(),
            data.p()
        )));
    }
    Ok(data.y() - &model.predict_batch(data.x()))
}

/// The empirical moment (1/n) sum_i psi_i * f_i for a residual and a
/// test-value vector of equal length.
pub fn empirical_moment_from_residuals(psi: &Array1<f64>, f: &Array1<f64>) -> Result<f64> {
    if psi.len() != f.len() {
        return Err(Error::invalid(format!(
            "length mismatch: residuals {}, test values {}",
            psi.len(),
            f.len()
        )));
    }
    if psi.is_empty() {
        return Err(Error::invalid("empty vectors"));
    }
    Ok(psi.dot(f) / psi.len() as f64)
}

/// Psi_n(h, f) = (1/n) sum_i (y_i - h(x_i)) f(z_i).
pub fn empirical_moment<M: Model + ?Sized>(
    model: &M,
    test_values: &Array1<f64>,
    data: &Dataset,
) -> Result<f64> {
    if test_values.len() != data.n() {
        return Err(Error::invalid(format!(
            "test values have length {}, expected n = {}",
            test_values.len(),
            data.n()
        )));
    }
    let psi = residuals(model, data)?;
    empirical_moment_from_residuals(&psi, test_values)
}

#[cfg(test)]
pub(crate) struct FnModel<F: Fn(ArrayView1<'_, f64>) -> f64> {
    pub dim: usize,
    pub f: F,
}

#[cfg(test)]
impl<F: Fn(ArrayView1<'_, f64>) -> f64> Model for FnModel<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        (self.f)(x)
    }
}
