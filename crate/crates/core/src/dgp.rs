//! Synthetic data generation for the benchmark harness: the structural
//! equations, the registry of true functions, fresh-draw MSE evaluation and
//! the 2SLS polynomial baseline.
//!
//! Structural equations (strength parameter g, scalar treatment):
//!   z ~ N(0, 2 I),  e ~ N(0, 2),  delta ~ N(0, 0.1),
//!   x = g z[0] + (1 - g) e + noise,   y = h0(x[0]) + e + delta,
//! and for n_x = n_z > 1 the treatment equation applies coordinatewise with
//! the shared confounder e.

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::{Dataset, Model};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{derive_seed, rng_from_seed};

/// Names of the registered true functions.
pub const FUNCTION_NAMES: [&str; 16] = [
    "abs",
    "2dpoly",
    "sigmoid",
    "sin",
    "frequentsin",
    "abssqrt",
    "step",
    "3dpoly",
    "linear",
    "randpw",
    "abspos",
    "sqrpos",
    "band",
    "invband",
    "steplinear",
    "pwlinear",
];

/// A structural function h0. `randpw` is a continuous random piecewise-linear
/// function drawn from the given seed; all others are fixed closed forms.
#[derive(Debug, Clone)]
pub struct TrueFunction {
    name: String,
    randpw: Option<(Vec<f64>, Vec<f64>)>, // breakpoints (sorted), slopes (len+1)
}

impl TrueFunction {
    pub fn new(name: &str, seed: u64) -> Result<Self> {
        if !FUNCTION_NAMES.contains(&name) {
            return Err(Error::invalid(format!(
                "unknown function {name:?}; expected one of {}",
                FUNCTION_NAMES.join(", ")
            )));
        }
        let randpw = if name == "randpw" {
            let mut rng = rng_from_seed(seed);
            let unif_b = Uniform::new_inclusive(-3.0, 3.0);
            let unif_s = Uniform::new_inclusive(-2.0, 2.0);
            let mut breaks: Vec<f64> = (0..5).map(|_| unif_b.sample(&mut rng)).collect();
            breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let slopes: Vec<f64> = (0..6).map(|_| unif_s.sample(&mut rng)).collect();
            Some((breaks, slopes))
        } else {
            None
        };
        Ok(TrueFunction { name: name.to_string(), randpw })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.name.as_str() {
            "abs" => x.abs(),
            "2dpoly" => -1.5 * x + 0.9 * x * x,
            "sigmoid" => 2.0 / (1.0 + (-2.0 * x).exp()),
            "sin" => x.sin(),
            "frequentsin" => (3.0 * x).sin(),
            "abssqrt" => x.abs().sqrt(),
            "step" => {
                if x < 0.0 {
                    1.0
                } else {
                    2.5
                }
            }
            "3dpoly" => -1.5 * x + 0.9 * x * x + x * x * x,
            "linear" => x,
            "randpw" => self.eval_randpw(x),
            "abspos" => {
                if x >= 0.0 {
                    x
                } else {
                    0.0
                }
            }
            "sqrpos" => {
                if x >= 0.0 {
                    x * x
                } else {
                    0.0
                }
            }
            "band" => f64::from((-0.75..=0.75).contains(&x)),
            "invband" => 1.0 - f64::from((-0.75..=0.75).contains(&x)),
            "steplinear" => 2.0 * f64::from(x >= 0.0) - x,
            "pwlinear" => {
                if x <= -1.0 {
                    x + 1.0
                } else if x >= 1.0 {
                    x - 1.0
                } else {
                    0.0
                }
            }
            _ => unreachable!("name validated at construction"),
        }
    }

    /// Continuous piecewise-linear evaluation anchored at f(0) = 0:
    /// f(x) is the integral of the slope step function from 0 to x.
    fn eval_randpw(&self, x: f64) -> f64 {
        let (breaks, slopes) = self.randpw.as_ref().expect("randpw parameters present");
        let slope_at = |t: f64| -> f64 {
            let region = breaks.iter().take_while(|&&b| b <= t).count();
            slopes[region]
        };
        let (lo, hi, sign) = if x >= 0.0 { (0.0, x, 1.0) } else { (x, 0.0, -1.0) };
        // segment boundaries inside (lo, hi)
        let mut cuts: Vec<f64> = vec![lo];
        cuts.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
        cuts.push(hi);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            total += slope_at(mid) * (w[1] - w[0]);
        }
        sign * total
    }
}

/// Convenience scalar evaluation for the fixed-form functions.
pub fn true_function(name: &str, x: f64) -> Result<f64> {
    Ok(TrueFunction::new(name, 0)?.eval(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub n: usize,
    pub n_x: usize,
    pub n_z: usize,
    /// instrument strength in [0, 1]
    pub strength: f64,
    pub fname: String,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n_x < 1 || self.n_z < 1 {
            return Err(Error::invalid("n, n_x, n_z must be at least 1"));
        }
        if self.n_x > 1 && self.n_x != self.n_z {
            return Err(Error::invalid("multi-dimensional treatments require n_x = n_z"));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid("strength must lie in [0, 1]"));
        }
        if !FUNCTION_NAMES.contains(&self.fname.as_str()) {
            return Err(Error::invalid(format!(
                "unknown function {:?}; expected one of {}",
                self.fname,
                FUNCTION_NAMES.join(", ")
            )));
        }
        Ok(())
    }
}

/// Handle to the structural equations: the true function and fresh draws of
/// the treatment from the same DGP.
#[derive(Debug, Clone)]
pub struct DgpOracle {
    cfg: DgpConfig,
    h0: TrueFunction,
}

const Z_SD: f64 = std::f64::consts::SQRT_2; // N(0, 2), variance convention
const E_SD: f64 = std::f64::consts::SQRT_2;
const DELTA_SD: f64 = 0.31622776601683794; // sqrt(0.1)
const TREATMENT_NOISE_SD: f64 = 0.1;

impl DgpOracle {
    pub fn h0(&self) -> &TrueFunction {
        &self.h0
    }

    pub fn cfg(&self) -> &DgpConfig {
        &self.cfg
    }

    /// Fresh structural draws of the treatment matrix (n_test x n_x).
    pub fn draw_treatments(&self, n_test: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        let (x, _, _) = draw_structural(&self.cfg, n_test, &mut rng);
        x
    }

    /// h0 as a model over treatment rows (depends on x[0] only).
    pub fn as_model(&self) -> TrueFnModel {
        TrueFnModel { f: self.h0.clone(), dim: self.cfg.n_x }
    }
}

/// Adapter exposing a scalar structural function as a `Model` over rows.
#[derive(Debug, Clone)]
pub struct TrueFnModel {
    f: TrueFunction,
    dim: usize,
}

impl Model for TrueFnModel {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.f.eval(x[0])
    }
}

/// Draws (x, e, z) from the treatment equation; y is assembled by `generate`.
fn draw_structural(
    cfg: &DgpConfig,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let g = cfg.strength;
    let normal_z = Normal::new(0.0, Z_SD).expect("valid sd");
    let normal_e = Normal::new(0.0, E_SD).expect("valid sd");
    let normal_ng = Normal::new(0.0, TREATMENT_NOISE_SD).expect("valid sd");
    let z = Array2::from_shape_fn((n, cfg.n_z), |_| normal_z.sample(rng));
    let e = Array1::from_shape_fn(n, |_| normal_e.sample(rng));
    let noise = Array2::from_shape_fn((n, cfg.n_x), |_| normal_ng.sample(rng));
    let x = Array2::from_shape_fn((n, cfg.n_x), |(i, j)| {
        let zj = if cfg.n_x == 1 { z[[i, 0]] } else { z[[i, j]] };
        g * zj + (1.0 - g) * e[i] + noise[[i, j]]
    });
    (x, e, z)
}

/// Generates a dataset from the structural equations, together with the
/// oracle handle used for fresh-draw evaluation.
pub fn generate(cfg: &DgpConfig) -> Result<(Dataset, DgpOracle)> {
    cfg.validate()?;
    let h0 = TrueFunction::new(&cfg.fname, derive_seed(cfg.seed, 0xF0))?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xDA));
    let (x, e, z) = draw_structural(cfg, cfg.n, &mut rng);
    let normal_d = Normal::new(0.0, DELTA_SD).expect("valid sd");
    let y = Array1::from_shape_fn(cfg.n, |i| {
        h0.eval(x[[i, 0]]) + e[i] + normal_d.sample(&mut rng)
    });
    let data = Dataset::new(y, x, z)?;
    Ok((data, DgpOracle { cfg: cfg.clone(), h0 }))
}

/// Mean squared error of `model` against h0 on fresh structural treatment
/// draws: (1/n_test) sum (h(x*) - h0(x*[0]))^2.
pub fn evaluate_mse<M: Model + ?Sized>(
    model: &M,
    oracle: &DgpOracle,
    n_test: usize,
    seed: u64,
) -> Result<f64> {
    if n_test < 1 {
        return Err(Error::invalid("n_test must be at least 1"));
    }
    if model.input_dim() != oracle.cfg.n_x {
        return Err(Error::invalid("model dimension does not match the DGP"));
    }
    let x_test = oracle.draw_treatments(n_test, seed);
    let mut total = 0.0;
    for row in x_test.rows() {
        let diff = model.predict(row) - oracle.h0.eval(row[0]);
        total += diff * diff;
    }
    Ok(total / n_test as f64)
}

/// 2SLS with polynomial features: all monomials up to the total degree when
/// the dimension is at most 3, dimension-wise powers otherwise.
#[derive(Debug, Clone)]
pub struct TwoSlsModel {
    coef: Array1<f64>, // intercept first
    degree: u32,
    dim: usize,
}

/// Exponent tuples of the polynomial basis (excluding the intercept).
fn monomial_exponents(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    if dim <= 3 {
        // all monomials with 1 <= total degree <= degree
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 0u32)];
        while let Some((prefix, used)) = stack.pop() {
            if prefix.len() == dim {
                if used >= 1 {
                    out.push(prefix);
                }
                continue;
            }
            for e in 0..=(degree - used) {
                let mut next = prefix.clone();
                next.push(e);
                stack.push((next, used + e));
            }
        }
        out.sort();
        out
    } else {
        // dimension-wise powers x_j^k without interactions
        let mut out = Vec::new();
        for j in 0..dim {
            for k in 1..=degree {
                let mut e = vec![0u32; dim];
                e[j] = k;
                out.push(e);
            }
        }
        out
    }
}

fn poly_features(row: ArrayView1<'_, f64>, exps: &[Vec<u32>]) -> Vec<f64> {
    exps.iter()
        .map(|e| {
            e.iter()
                .enumerate()
                .map(|(j, &k)| row[j].powi(k as i32))
                .product()
        })
        .collect()
}

fn design_matrix(m: &Array2<f64>, exps: &[Vec<u32>]) -> Array2<f64> {
    let n = m.nrows();
    let k = exps.len();
    let mut out = Array2::zeros((n, k + 1));
    for i in 0..n {
        out[[i, 0]] = 1.0;
        let f = poly_features(m.row(i), exps);
        for j in 0..k {
            out[[i, j + 1]] = f[j];
        }
    }
    out
}

/// Minimum-norm least squares via the pseudoinverse of the normal equations.
fn least_squares(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let ata = linalg::symmetrize(&a.t().dot(a));
    let atb = a.t().dot(b);
    Ok(linalg::pinv(&ata, linalg::DEFAULT_RTOL)?.dot(&atb))
}

impl TwoSlsModel {
    pub fn coef(&self) -> &Array1<f64> {
        &self.coef
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn from_parts(coef: Array1<f64>, degree: u32, dim: usize) -> Result<Self> {
        let expected = monomial_exponents(dim, degree).len() + 1;
        if coef.len() != expected {
            return Err(Error::invalid(format!(
                "coefficient length {} does not match basis size {expected}",
                coef.len()
            )));
        }
        Ok(TwoSlsModel { coef, degree, dim })
    }
}

impl Model for TwoSlsModel {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        let exps = monomial_exponents(self.dim, self.degree);
        let mut v = self.coef[0];
        for (j, f) in poly_features(x, &exps).iter().enumerate() {
            v += self.coef[j + 1] * f;
        }
        v
    }
}

/// Two-stage least squares with polynomial features of the given degree:
/// stage 1 regresses each treatment feature on the instrument features,
/// stage 2 regresses y on the fitted treatment features.
pub fn fit_2sls(data: &Dataset, degree: u32) -> Result<TwoSlsModel> {
    if degree < 1 {
        return Err(Error::invalid("2SLS degree must be at least 1"));
    }
    let x_exps = monomial_exponents(data.p(), degree);
    let z_exps = monomial_exponents(data.q(), degree);
    let n_features = x_exps.len() + 1;
    if data.n() <= n_features.max(z_exps.len() + 1) {
        return Err(Error::invalid(format!(
            "2SLS needs n > feature count ({})",
            n_features.max(z_exps.len() + 1)
        )));
    }
    let x_feat = design_matrix(data.x(), &x_exps);
    let z_feat = design_matrix(data.z(), &z_exps);

    // stage 1: fitted treatment features
    let stage1 = least_squares(&z_feat, &x_feat)?;
    let x_hat = z_feat.dot(&stage1);

    // stage 2: y on fitted features
    let y_col = Array2::from_shape_fn((data.n(), 1), |(i, _)| data.y()[i]);
    let beta = least_squares(&x_hat, &y_col)?;
    let coef = Array1::from_iter(beta.column(0).iter().copied());
    TwoSlsModel::from_parts(coef, degree, data.p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn true_function_examples() {
        assert_eq!(true_function("abs", -2.0).unwrap(), 2.0);
        let v = true_function("2dpoly", 1.0).unwrap();
        assert!((v - (-0.6)).abs() < 1e-15);
        assert_eq!(true_function("step", -0.1).unwrap(), 1.0);
        assert_eq!(true_function("step", 0.1).unwrap(), 2.5);
        assert_eq!(true_function("band", 0.5).unwrap(), 1.0);
        assert_eq!(true_function("invband", 0.5).unwrap(), 0.0);
        assert_eq!(true_function("pwlinear", 0.5).unwrap(), 0.0);
        assert_eq!(true_function("pwlinear", 2.0).unwrap(), 1.0);
        assert!(true_function("nope", 0.0).is_err());
    }

    #[test]
    fn randpw_is_seeded_and_continuous() {
        let f1 = TrueFunction::new("randpw", 7).unwrap();
        let f2 = TrueFunction::new("randpw", 7).unwrap();
        let f3 = TrueFunction::new("randpw", 8).unwrap();
        let mut some_diff = false;
        for k in -30..=30 {
            let x = k as f64 / 10.0;
            assert_eq!(f1.eval(x), f2.eval(x));
            if (f1.eval(x) - f3.eval(x)).abs() > 1e-12 {
                some_diff = true;
            }
        }
        assert!(some_diff, "different seeds should give different functions");
        assert_eq!(f1.eval(0.0), 0.0);
        // continuity across a fine grid
        let mut prev = f1.eval(-3.5);
        for k in -34..=35 {
            let x = k as f64 / 10.0;
            let v = f1.eval(x);
            assert!((v - prev).abs() <= 2.0 * 0.1 + 1e-12, "jump at {x}");
            prev = v;
        }
    }

    fn cfg(n: usize, n_x: usize, n_z: usize, strength: f64, fname: &str, seed: u64) -> DgpConfig {
        DgpConfig { n, n_x, n_z, strength, fname: fname.into(), seed }
    }

    #[test]
    fn generate_shapes_and_determinism() {
        let c = cfg(50, 1, 3, 0.6, "abs", 42);
        let (d1, _) = generate(&c).unwrap();
        assert_eq!((d1.n(), d1.p(), d1.q()), (50, 1, 3));
        let (d2, _) = generate(&c).unwrap();
        assert_eq!(d1, d2);

        let c10 = cfg(20, 10, 10, 0.6, "linear", 1);
        let (d10, _) = generate(&c10).unwrap();
        assert_eq!((d10.p(), d10.q()), (10, 10));

        assert!(generate(&cfg(10, 4, 2, 0.5, "abs", 0)).is_err());
    }

    #[test]
    fn zero_strength_decorrelates_x_and_z() {
        let c = cfg(10_000, 1, 1, 0.0, "linear", 9);
        let (d, _) = generate(&c).unwrap();
        let mx = d.x().column(0).mean().unwrap();
        let mz = d.z().column(0).mean().unwrap();
        let cov: f64 = (0..d.n())
            .map(|i| (d.x()[[i, 0]] - mx) * (d.z()[[i, 0]] - mz))
            .sum::<f64>()
            / d.n() as f64;
        // 4 MC standard errors of the covariance estimate
        let tol = 4.0 * (2.01f64 * 2.0).sqrt() / (d.n() as f64).sqrt();
        assert!(cov.abs() <= tol, "cov {cov} exceeds {tol}");
    }

    #[test]
    fn full_strength_correlates_x_and_z() {
        let c = cfg(10_000, 1, 1, 1.0, "linear", 10);
        let (d, _) = generate(&c).unwrap();
        let x = d.x().column(0);
        let z = d.z().column(0);
        let mx = x.mean().unwrap();
        let mz = z.mean().unwrap();
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut szz = 0.0;
        for i in 0..d.n() {
            sxy += (x[i] - mx) * (z[i] - mz);
            sxx += (x[i] - mx).powi(2);
            szz += (z[i] - mz).powi(2);
        }
        let corr = sxy / (sxx * szz).sqrt();
        assert!(corr > 0.9, "corr {corr}");
    }

    #[test]
    fn endogeneity_present_at_default_strength() {
        // corr(x - E[x|z], y - h0(x)) > 0 through the shared confounder
        let c = cfg(20_000, 1, 1, 0.6, "abs", 11);
        let (d, o) = generate(&c).unwrap();
        let mut num = 0.0;
        for i in 0..d.n() {
            let x_resid = d.x()[[i, 0]] - 0.6 * d.z()[[i, 0]];
            let y_resid = d.y()[i] - o.h0().eval(d.x()[[i, 0]]);
            num += x_resid * y_resid;
        }
        assert!(num / d.n() as f64 > 0.5, "confounding too weak");
    }

    #[test]
    fn evaluate_mse_exact_model_is_zero() {
        let c = cfg(100, 1, 1, 0.6, "sin", 12);
        let (_, o) = generate(&c).unwrap();
        let exact = o.as_model();
        assert_eq!(evaluate_mse(&exact, &o, 5000, 3).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_mse_constant_offset() {
        let c = cfg(100, 1, 1, 0.6, "sin", 13);
        let (_, o) = generate(&c).unwrap();
        struct Offset(TrueFnModel);
        impl Model for Offset {
            fn input_dim(&self) -> usize {
                self.0.input_dim()
            }
            fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
                self.0.predict(x) + 0.1
            }
        }
        let off = Offset(o.as_model());
        let mse = evaluate_mse(&off, &o, 5000, 4).unwrap();
        assert!((mse - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_model_mse_matches_independent_monte_carlo() {
        let c = cfg(100, 1, 1, 0.6, "abs", 14);
        let (_, o) = generate(&c).unwrap();
        struct Zero;
        impl Model for Zero {
            fn input_dim(&self) -> usize {
                1
            }
            fn predict(&self, _x: ArrayView1<'_, f64>) -> f64 {
                0.0
            }
        }
        let got = evaluate_mse(&Zero, &o, 1_000_000, 5).unwrap();
        // independent Monte-Carlo of E[h0(x)^2] with a different seed
        let draws = o.draw_treatments(1_000_000, 99);
        let want: f64 =
            draws.column(0).iter().map(|&x| x.abs().powi(2)).sum::<f64>() / 1e6;
        assert!(
            (got - want).abs() <= 4.0 * 3.0 / 1e3,
            "evaluate_mse {got} vs oracle {want}"
        );
    }

    #[test]
    fn two_sls_exact_identification_degree_one() {
        let mut rng = crate::rng::rng_from_seed(15);
        let n = 200;
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]]);
        let d = Dataset::new(y, x.clone(), x.clone()).unwrap();
        let m = fit_2sls(&d, 1).unwrap();
        assert!((m.coef()[1] - 1.0).abs() < 1e-6, "slope {}", m.coef()[1]);
        assert!(m.coef()[0].abs() < 1e-6);
    }

    #[test]
    fn two_sls_zero_outcome_gives_zero_coefficients() {
        let mut rng = crate::rng::rng_from_seed(16);
        let n = 100;
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>());
        let z = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>());
        let d = Dataset::new(Array1::zeros(n), x, z).unwrap();
        let m = fit_2sls(&d, 3).unwrap();
        assert!(m.coef().iter().all(|c| c.abs() < 1e-10));
    }

    #[test]
    fn two_sls_linear_dgp_mse_is_small() {
        let c = cfg(2000, 1, 1, 0.6, "linear", 17);
        let (d, o) = generate(&c).unwrap();
        let m = fit_2sls(&d, 3).unwrap();
        let mse = evaluate_mse(&m, &o, 10_000, 6).unwrap();
        assert!(mse <= 0.1, "2SLS mse {mse} on the linear DGP");
    }

    #[test]
    fn monomials_cover_interactions_only_in_low_dim() {
        let e3 = monomial_exponents(2, 3);
        // (1,1) interaction present for p <= 3
        assert!(e3.contains(&vec![1, 1]));
        assert_eq!(e3.len(), 9); // C(5,2) - 1
        let e_high = monomial_exponents(5, 3);
        assert_eq!(e_high.len(), 15); // 3 powers per dimension
        assert!(!e_high.contains(&vec![1, 1, 0, 0, 0]));
    }

    #[test]
    fn two_sls_predicts_with_polynomial_basis() {
        let m = TwoSlsModel::from_parts(array![1.0, 2.0, 0.5, 0.0], 3, 1).unwrap();
        // 1 + 2x + 0.5 x^2 at x = 2
        assert!((m.predict(array![2.0].view()) - 7.0).abs() < 1e-12);
    }
}
