//! RKHS minimax estimator. The inner maximization over the test-function
//! RKHS and the outer minimization over the hypothesis RKHS both have closed
//! forms; the fit reduces to
//!
//!   alpha = (K_H M K_H + 4 lambda mu K_H)^+ K_H M y,
//!   M     = K_F (U/(n delta^2) K_F + I)^{-1},
//!
//! with prediction h(x) = sum_i alpha_i K_H(x_i, x). A Nystrom-factored
//! variant replaces the n x n inverses with r x r ones.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{Dataset, HyperParams, Model};
use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix, nystrom_factorize, CenterRule, KernelConfig, NystromFactor};
use crate::linalg;
use crate::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;

/// Exact kernel estimator: dual weights over the training treatments.
#[derive(Debug, Clone)]
pub struct KernelModel {
    support_x: Array2<f64>,
    alpha: Array1<f64>,
    cfg_h: KernelConfig,
    hyper: HyperParams,
    normal_eq_residual: f64,
}

impl KernelModel {
    pub fn from_parts(
        support_x: Array2<f64>,
        alpha: Array1<f64>,
        cfg_h: KernelConfig,
        hyper: HyperParams,
    ) -> Result<Self> {
        if support_x.nrows() != alpha.len() {
            return Err(Error::invalid("alpha length must match support rows"));
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("alpha must be finite"));
        }
        cfg_h.validate()?;
        hyper.validate()?;
        Ok(KernelModel { support_x, alpha, cfg_h, hyper, normal_eq_residual: f64::NAN })
    }

    pub fn support_x(&self) -> &Array2<f64> {
        &self.support_x
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn cfg_h(&self) -> KernelConfig {
        self.cfg_h
    }

    pub fn hyper(&self) -> HyperParams {
        self.hyper
    }

    /// Relative residual of the normal equations at the fitted alpha.
    pub fn normal_eq_residual(&self) -> f64 {
        self.normal_eq_residual
    }
}

impl Model for KernelModel {
    fn input_dim(&self) -> usize {
        self.support_x.ncols()
    }

    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.support_x
            .rows()
            .into_iter()
            .zip(self.alpha.iter())
            .map(|(xi, &a)| {
                a * crate::kernels::kernel_eval(self.cfg_h, xi, x).expect("dims validated")
            })
            .sum()
    }
}

/// Nystrom-factored estimator: h(x) = phi(x)^T gamma.
#[derive(Debug, Clone)]
pub struct NystromModel {
    factor_h: NystromFactor,
    gamma_weights: Array1<f64>,
    hyper: HyperParams,
}

impl NystromModel {
    pub fn from_parts(
        factor_h: NystromFactor,
        gamma_weights: Array1<f64>,
        hyper: HyperParams,
    ) -> Result<Self> {
        if factor_h.rank() != gamma_weights.len() {
            return Err(Error::invalid("gamma length must match factor rank"));
        }
        hyper.validate()?;
        Ok(NystromModel { factor_h, gamma_weights, hyper })
    }

    pub fn factor_h(&self) -> &NystromFactor {
        &self.factor_h
    }

    pub fn gamma_weights(&self) -> &Array1<f64> {
        &self.gamma_weights
    }

    pub fn hyper(&self) -> HyperParams {
        self.hyper
    }
}

impl Model for NystromModel {
    fn input_dim(&self) -> usize {
        self.factor_h.dim()
    }

    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.factor_h.feature_map(x).dot(&self.gamma_weights)
    }
}

/// M = K_F (c K_F + I)^{-1} with c = U / (n delta^2), symmetrized.
fn adversary_matrix(k_f: &Array2<f64>, hyper: &HyperParams) -> Result<Array2<f64>> {
    let n = k_f.nrows() as f64;
    let c = hyper.u_bound / (n * hyper.delta * hyper.delta);
    let ck_i = &(k_f * c) + &Array2::<f64>::eye(k_f.nrows());
    let m = linalg::solve_spd(&ck_i, k_f)?;
    Ok(linalg::symmetrize(&m))
}

/// Fits the exact closed-form estimator.
pub fn fit_kernel_iv(
    data: &Dataset,
    cfg_h: KernelConfig,
    cfg_f: KernelConfig,
    hyper: &HyperParams,
) -> Result<KernelModel> {
    hyper.validate()?;
    if data.n() < 2 {
        return Err(Error::invalid("fit_kernel_iv needs n >= 2"));
    }
    if !(hyper.lambda > 0.0) || !(hyper.mu > 0.0) {
        return Err(Error::invalid("fit_kernel_iv needs lambda > 0 and mu > 0"));
    }
    let k_h = kernel_matrix(cfg_h, data.x())?;
    let k_f = kernel_matrix(cfg_f, data.z())?;
    let m = adversary_matrix(&k_f, hyper)?;

    // alpha is the Moore-Penrose solution of the normal equations
    //   (K_H M K_H + tau K_H) alpha = K_H M y,  tau = 4 lambda mu.
    // Any solution of (M K_H + tau I) alpha = M y solves them, and since
    // null(G) = null(K_H) the Moore-Penrose one is its projection onto
    // range(K_H). This avoids a pseudoinverse of G itself, whose spectrum
    // spans too many orders of magnitude to truncate reliably.
    let tau = hyper.ridge();
    let mk = m.dot(&k_h);
    let lhs = &mk + &(Array2::<f64>::eye(data.n()) * tau);
    let rhs = m.dot(data.y());
    let alpha0 = lu_solve(&lhs, &rhs)?;
    let proj = linalg::pinv(&k_h, linalg::DEFAULT_RTOL)?.dot(&k_h);
    let alpha = proj.dot(&alpha0);

    let khm = k_h.dot(&m);
    let g = linalg::symmetrize(&(&khm.dot(&k_h) + &(&k_h * tau)));
    let b = khm.dot(data.y());
    let resid = &g.dot(&alpha) - &b;
    let rel = norm2(&resid) / norm2(&b).max(f64::MIN_POSITIVE);

    let mut model = KernelModel::from_parts(data.x().clone(), alpha, cfg_h, *hyper)?;
    model.normal_eq_residual = rel;
    Ok(model)
}

/// Value of the inner maximization at a residual vector:
/// (1/(4 lambda)) psi_n^T M psi_n with psi_n = psi / n.
pub fn adversary_loss(psi: &Array1<f64>, k_f: &Array2<f64>, hyper: &HyperParams) -> Result<f64> {
    if !(hyper.lambda > 0.0) {
        return Err(Error::invalid("adversary_loss needs lambda > 0"));
    }
    if psi.len() != k_f.nrows() {
        return Err(Error::invalid("residual length must match kernel matrix"));
    }
    let m = adversary_matrix(k_f, hyper)?;
    let psi_n = psi / psi.len() as f64;
    Ok(psi_n.dot(&m.dot(&psi_n)) / (4.0 * hyper.lambda))
}

/// Fits the Nystrom-factored estimator with rank r and the given center rule
/// applied independently to the treatments and the instruments.
pub fn fit_nystrom_iv(
    data: &Dataset,
    cfg_h: KernelConfig,
    cfg_f: KernelConfig,
    r: usize,
    rule: NystromRule,
    hyper: &HyperParams,
    seed: u64,
) -> Result<NystromModel> {
    hyper.validate()?;
    let n = data.n();
    if r == 0 || r > n {
        return Err(Error::invalid(format!("rank r = {r} must satisfy 1 <= r <= n = {n}")));
    }
    let rule_h = rule.to_center_rule(r, derive_seed(seed, 0));
    let rule_f = rule.to_center_rule(r, derive_seed(seed, 1));
    let factor_h = nystrom_factorize(cfg_h, data.x(), &rule_h)?;
    let factor_f = nystrom_factorize(cfg_f, data.z(), &rule_f)?;

    let v = factor_h.factor_matrix(data.x())?; // n x r
    let d = factor_f.factor_matrix(data.z())?; // n x r
    let c = hyper.u_bound / (n as f64 * hyper.delta * hyper.delta);

    let dtd = d.t().dot(&d);
    let q_inv = &(&dtd * c) + &Array2::<f64>::eye(r);
    let q = linalg::solve_spd(&q_inv, &Array2::<f64>::eye(r))?;
    let a = v.t().dot(&d);
    let aq = a.dot(&q);
    let g = linalg::symmetrize(&(&aq.dot(&a.t()) + &(Array2::<f64>::eye(r) * hyper.ridge())));
    let rhs = aq.dot(&d.t().dot(data.y()));
    let gamma = match linalg::solve_spd(&g, &to_col(&rhs)) {
        Ok(sol) => sol.column(0).to_owned(),
        // ridge = 0 can leave G singular; fall back to the pseudoinverse
        Err(_) => linalg::pinv(&g, linalg::DEFAULT_RTOL)?.dot(&rhs),
    };

    NystromModel::from_parts(factor_h, gamma, *hyper)
}

/// Center selection rule for the Nystrom fit (rank supplied separately).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NystromRule {
    /// The first r rows (with r = n this reproduces the exact estimator).
    Leading,
    Uniform,
    KMeans,
}

impl NystromRule {
    fn to_center_rule(self, r: usize, seed: u64) -> CenterRule {
        match self {
            NystromRule::Leading => CenterRule::Indices((0..r).collect()),
            NystromRule::Uniform => CenterRule::Uniform { r, seed },
            NystromRule::KMeans => CenterRule::KMeans { r, seed },
        }
    }
}

fn to_col(v: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), 1), |(i, _)| v[i])
}

/// LU solve of a general (square, nonsingular) system.
fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let am = linalg::to_dmatrix(a);
    let bv = nalgebra::DVector::from_fn(n, |i, _| b[i]);
    match am.lu().solve(&bv) {
        Some(sol) => Ok(Array1::from_shape_fn(n, |i| sol[i])),
        None => Err(Error::SingularMatrix("lu_solve: singular system".into())),
    }
}

fn norm2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Smallest delta > 0 with B sqrt(2/n) sqrt(sum_j min(lambda_j, delta^2))
/// <= delta^2, for eigenvalues of K/n in descending order. Returns 0 when all
/// eigenvalues vanish.
pub fn empirical_critical_radius(eigenvalues: &[f64], b_bound: f64, n: usize) -> Result<f64> {
    if eigenvalues.iter().any(|&l| l < -1e-12) {
        return Err(Error::invalid("eigenvalues must be nonnegative"));
    }
    if n == 0 || !(b_bound > 0.0) {
        return Err(Error::invalid("need n >= 1 and B > 0"));
    }
    let eigs: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    if eigs.iter().all(|&l| l == 0.0) {
        return Ok(0.0);
    }
    let scale = b_bound * (2.0 / n as f64).sqrt();
    // g(delta) = delta^2 - scale * sqrt(sum min(lambda_j, delta^2));
    // g/delta is strictly increasing, so the positive root is unique.
    let g = |delta: f64| {
        let s: f64 = eigs.iter().map(|&l| l.min(delta * delta)).sum();
        delta * delta - scale * s.sqrt()
    };
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e100 {
            return Err(Error::invalid("critical radius bisection failed to bracket"));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// k-fold index blocks after a seeded shuffle.
fn cv_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, &row) in order.iter().enumerate() {
        folds[i % k].push(row);
    }
    folds
}

/// Held-out adversary loss of `model` on `holdout`, with n and delta set for
/// the holdout size.
fn holdout_loss<M: Model>(model: &M, holdout: &Dataset, cfg_f: KernelConfig, base: &HyperParams) -> Result<f64> {
    let mut hp = *base;
    hp.delta = crate::data::default_delta(holdout.n());
    let psi = crate::data::residuals(model, holdout)?;
    let k_f = kernel_matrix(cfg_f, holdout.z())?;
    adversary_loss(&psi, &k_f, &hp)
}

/// Selects the lambda*mu product from `grid` minimizing the mean held-out
/// adversary loss over k folds (exact estimator fits). Deterministic given
/// the seed; ties go to the earlier grid point.
pub fn tune_lambda_mu(
    data: &Dataset,
    cfg_h: KernelConfig,
    cfg_f: KernelConfig,
    grid: &[f64],
    k_folds: usize,
    seed: u64,
) -> Result<f64> {
    tune_lambda_mu_with(data, cfg_f, grid, k_folds, seed, |train, hp| {
        fit_kernel_iv(train, cfg_h, cfg_f, hp).map(|m| Box::new(m) as Box<dyn Model + Send + Sync>)
    })
}

/// Generic CV driver over the lambda*mu grid; `fit` builds a model for a
/// training fold at given hyperparameters.
pub fn tune_lambda_mu_with<F>(
    data: &Dataset,
    cfg_f: KernelConfig,
    grid: &[f64],
    k_folds: usize,
    seed: u64,
    fit: F,
) -> Result<f64>
where
    F: Fn(&Dataset, &HyperParams) -> Result<Box<dyn Model + Send + Sync>>,
{
    if grid.is_empty() {
        return Err(Error::invalid("tune_lambda_mu: empty grid"));
    }
    if k_folds < 2 || k_folds > data.n() {
        return Err(Error::invalid("tune_lambda_mu: need 2 <= k_folds <= n"));
    }
    let folds = cv_folds(data.n(), k_folds, seed);
    let mut best = (f64::INFINITY, grid[0]);
    for &product in grid {
        let mut total = 0.0;
        for fold in &folds {
            let train_idx: Vec<usize> =
                (0..data.n()).filter(|i| !fold.contains(i)).collect();
            let train = data.select_rows(&train_idx)?;
            let holdout = data.select_rows(fold)?;
            let hp = HyperParams::default_for(train.n(), 0.0).with_lambda_mu_product(product);
            let model = fit(&train, &hp)?;
            total += holdout_loss(&model, &holdout, cfg_f, &hp)?;
        }
        let mean = total / k_folds as f64;
        if mean < best.0 {
            best = (mean, product);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use nalgebra::DMatrix;
    use ndarray::array;
    use rand::Rng;

    fn random_data(n: usize, p: usize, q: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let z = Array2::from_shape_fn((n, q), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]].sin() + 0.1 * rng.gen::<f64>());
        Dataset::new(y, x, z).unwrap()
    }

    fn default_hyper(n: usize) -> HyperParams {
        HyperParams::default_for(n, 1e-3)
    }

    #[test]
    fn zero_outcome_gives_zero_fit() {
        let mut rng = rng_from_seed(1);
        let n = 10;
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>());
        let z = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>());
        let data = Dataset::new(Array1::zeros(n), x, z).unwrap();
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let m = fit_kernel_iv(&data, cfg, cfg, &default_hyper(n)).unwrap();
        assert!(m.alpha().iter().all(|&a| a.abs() < 1e-12));
        assert!(m.predict(array![0.3].view()).abs() < 1e-12);
    }

    // Independent dense assembly of the same closed form: M via the
    // K^{1/2}(cK+I)^{-1}K^{1/2} route and alpha via nalgebra's SVD
    // pseudoinverse.
    #[test]
    fn alpha_matches_independent_computation() {
        let data = random_data(5, 1, 1, 2);
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let hp = default_hyper(5);
        let model = fit_kernel_iv(&data, cfg, cfg, &hp).unwrap();

        let k_h = kernel_matrix(cfg, data.x()).unwrap();
        let k_f = kernel_matrix(cfg, data.z()).unwrap();
        let c = hp.u_bound / (5.0 * hp.delta * hp.delta);
        let k_half = linalg::sqrt_psd(&k_f, 1e-12).unwrap();
        let inner = &(&k_f * c) + &Array2::<f64>::eye(5);
        let inner_inv = linalg::solve_spd(&inner, &Array2::<f64>::eye(5)).unwrap();
        let m_mat = k_half.dot(&inner_inv).dot(&k_half);

        let g = &k_h.dot(&m_mat).dot(&k_h) + &(&k_h * hp.ridge());
        let b = k_h.dot(&m_mat).dot(data.y());
        let g_na = DMatrix::from_fn(5, 5, |i, j| g[[i, j]]);
        let g_pinv = g_na.pseudo_inverse(1e-10).unwrap();
        let b_na = nalgebra::DVector::from_fn(5, |i, _| b[i]);
        let alpha_ref = g_pinv * b_na;

        for i in 0..5 {
            assert!(
                (model.alpha()[i] - alpha_ref[i]).abs() < 1e-6,
                "alpha[{i}]: {} vs {}",
                model.alpha()[i],
                alpha_ref[i]
            );
        }
    }

    #[test]
    fn exogenous_noiseless_linear_data_is_interpolated() {
        // x = z, y = x, linear kernels, tiny ridge
        let mut rng = rng_from_seed(3);
        let n = 40;
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]]);
        let data = Dataset::new(y.clone(), x.clone(), x.clone()).unwrap();
        let mut hp = default_hyper(n);
        hp.mu = 1e-8 / (4.0 * hp.lambda);
        let m = fit_kernel_iv(&data, KernelConfig::Linear, KernelConfig::Linear, &hp).unwrap();
        let preds = m.predict_batch(data.x());
        let max_err = preds
            .iter()
            .zip(y.iter())
            .map(|(p, t)| (p - t).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.05, "max error {max_err}");
    }

    #[test]
    fn normal_equations_hold_on_random_instances() {
        for seed in 0..20u64 {
            let n = 10 + (seed as usize % 41);
            let data = random_data(n, 2, 2, 1000 + seed);
            let cfg = KernelConfig::Rbf { gamma: 0.3 };
            let m = fit_kernel_iv(&data, cfg, cfg, &default_hyper(n)).unwrap();
            assert!(
                m.normal_eq_residual() <= 1e-6,
                "seed {seed}: residual {}",
                m.normal_eq_residual()
            );
        }
    }

    #[test]
    fn objective_is_locally_optimal_at_alpha() {
        let data = random_data(12, 1, 1, 4);
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let hp = default_hyper(12);
        let model = fit_kernel_iv(&data, cfg, cfg, &hp).unwrap();

        let k_h = kernel_matrix(cfg, data.x()).unwrap();
        let k_f = kernel_matrix(cfg, data.z()).unwrap();
        let m_mat = adversary_matrix(&k_f, &hp).unwrap();
        let objective = |alpha: &Array1<f64>| {
            let psi = data.y() - &k_h.dot(alpha);
            psi.dot(&m_mat.dot(&psi)) + hp.ridge() * alpha.dot(&k_h.dot(alpha))
        };
        let base = objective(model.alpha());
        for i in 0..12 {
            for delta in [1e-4, -1e-4] {
                let mut pert = model.alpha().clone();
                pert[i] += delta;
                assert!(
                    objective(&pert) >= base - 1e-12,
                    "coordinate {i} perturbation improves the objective"
                );
            }
        }
    }

    #[test]
    fn fit_is_linear_in_y() {
        let d1 = random_data(15, 1, 1, 5);
        let mut rng = rng_from_seed(6);
        let y2 = Array1::from_shape_fn(15, |_| rng.gen::<f64>());
        let d2 = Dataset::new(y2.clone(), d1.x().clone(), d1.z().clone()).unwrap();
        let dsum =
            Dataset::new(d1.y() + &y2, d1.x().clone(), d1.z().clone()).unwrap();
        let cfg = KernelConfig::Rbf { gamma: 0.4 };
        let hp = default_hyper(15);
        let m1 = fit_kernel_iv(&d1, cfg, cfg, &hp).unwrap();
        let m2 = fit_kernel_iv(&d2, cfg, cfg, &hp).unwrap();
        let ms = fit_kernel_iv(&dsum, cfg, cfg, &hp).unwrap();
        for i in 0..15 {
            let sum = m1.alpha()[i] + m2.alpha()[i];
            assert!((ms.alpha()[i] - sum).abs() < 1e-7, "alpha not additive at {i}");
        }
    }

    #[test]
    fn adversary_loss_examples() {
        let hp = HyperParams { lambda: 0.25, mu: 1.0, delta: 1.0, u_bound: 1.0, b_bound: 1.0 };
        // n = 1, K_F = [[1]], U/(n delta^2) = 1: M = 1/2, loss = (1/(4*0.25)) * 2 * (1/2) * 2
        let k_f = array![[1.0]];
        let loss = adversary_loss(&array![2.0], &k_f, &hp).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);

        let zero = adversary_loss(&array![0.0], &k_f, &hp).unwrap();
        assert_eq!(zero, 0.0);

        // quadratic homogeneity
        let l1 = adversary_loss(&array![0.7], &k_f, &hp).unwrap();
        let l3 = adversary_loss(&array![2.1], &k_f, &hp).unwrap();
        assert!((l3 - 9.0 * l1).abs() < 1e-12);

        let mut bad = hp;
        bad.lambda = 0.0;
        assert!(adversary_loss(&array![1.0], &k_f, &bad).is_err());
    }

    #[test]
    fn adversary_loss_nonnegative_and_decreasing_in_lambda() {
        let data = random_data(8, 1, 1, 7);
        let k_f = kernel_matrix(KernelConfig::Rbf { gamma: 0.5 }, data.z()).unwrap();
        let psi = data.y().clone();
        let mut hp = default_hyper(8);
        let mut last = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0] {
            hp.lambda = lambda;
            let loss = adversary_loss(&psi, &k_f, &hp).unwrap();
            assert!(loss >= 0.0);
            assert!(loss <= last);
            last = loss;
        }
    }

    #[test]
    fn nystrom_full_rank_matches_exact() {
        for seed in 0..10u64 {
            let n = 20;
            let data = random_data(n, 1, 1, 2000 + seed);
            let cfg = KernelConfig::Rbf { gamma: 0.5 };
            let hp = default_hyper(n);
            let exact = fit_kernel_iv(&data, cfg, cfg, &hp).unwrap();
            let nys =
                fit_nystrom_iv(&data, cfg, cfg, n, NystromRule::Leading, &hp, seed).unwrap();
            let pe = exact.predict_batch(data.x());
            let pn = nys.predict_batch(data.x());
            for i in 0..n {
                assert!(
                    (pe[i] - pn[i]).abs() < 1e-6,
                    "seed {seed} row {i}: exact {} vs nystrom {}",
                    pe[i],
                    pn[i]
                );
            }
        }
    }

    #[test]
    fn nystrom_rank_one_is_finite() {
        let data = random_data(12, 1, 1, 30);
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let hp = default_hyper(12);
        let m = fit_nystrom_iv(&data, cfg, cfg, 1, NystromRule::KMeans, &hp, 0).unwrap();
        for xq in [-5.0, -1.0, 0.0, 2.0, 8.0] {
            assert!(m.predict(array![xq].view()).is_finite());
        }
        assert!(fit_nystrom_iv(&data, cfg, cfg, 13, NystromRule::KMeans, &hp, 0).is_err());
    }

    #[test]
    fn critical_radius_examples() {
        assert_eq!(empirical_critical_radius(&[0.0, 0.0], 1.0, 50).unwrap(), 0.0);

        // single eigenvalue 1, B = 1, n = 100: delta = sqrt(2/100)
        let d = empirical_critical_radius(&[1.0], 1.0, 100).unwrap();
        assert!((d - (2.0f64 / 100.0).sqrt()).abs() < 1e-9, "delta {d}");

        // scalar-equation cross-check at another size
        let d = empirical_critical_radius(&[1.0], 2.0, 64).unwrap();
        assert!((d - 2.0 * (2.0f64 / 64.0).sqrt()).abs() < 1e-9);

        // doubling B weakly increases delta
        let eigs = [0.9, 0.3, 0.05, 0.001];
        let d1 = empirical_critical_radius(&eigs, 1.0, 200).unwrap();
        let d2 = empirical_critical_radius(&eigs, 2.0, 200).unwrap();
        assert!(d2 >= d1);
    }

    #[test]
    fn critical_radius_satisfies_inequality() {
        let mut rng = rng_from_seed(8);
        for _ in 0..5 {
            let eigs: Vec<f64> = (0..20).map(|i| rng.gen::<f64>() / (1.0 + i as f64)).collect();
            let mut sorted = eigs.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let b = 1.5;
            let n = 150;
            let d = empirical_critical_radius(&sorted, b, n).unwrap();
            let lhs: f64 = b * (2.0 / n as f64).sqrt()
                * sorted.iter().map(|&l| l.min(d * d)).sum::<f64>().sqrt();
            assert!(lhs <= d * d + 1e-8, "inequality violated: {lhs} > {}", d * d);
            // smallest root: slightly smaller delta must violate
            let dm = d * 0.99;
            let lhs_m: f64 = b * (2.0 / n as f64).sqrt()
                * sorted.iter().map(|&l| l.min(dm * dm)).sum::<f64>().sqrt();
            assert!(lhs_m > dm * dm - 1e-8);
        }
    }

    #[test]
    fn tune_single_point_grid() {
        let data = random_data(20, 1, 1, 9);
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let got = tune_lambda_mu(&data, cfg, cfg, &[0.123], 2, 0).unwrap();
        assert_eq!(got, 0.123);
        assert!(tune_lambda_mu(&data, cfg, cfg, &[], 2, 0).is_err());
    }

    #[test]
    fn tune_prefers_small_ridge_on_smooth_dgp() {
        // smooth exogenous sin data: heavy smoothing loses, light ridge wins
        let mut rng = rng_from_seed(10);
        let n = 60;
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let y = Array1::from_shape_fn(n, |i| (2.0 * x[[i, 0]]).sin());
        let data = Dataset::new(y, x.clone(), x).unwrap();
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let got = tune_lambda_mu(&data, cfg, cfg, &[1e-6, 1e6], 3, 1).unwrap();
        assert_eq!(got, 1e-6);
    }

    #[test]
    fn tune_is_deterministic_given_seed() {
        let data = random_data(24, 1, 1, 11);
        let cfg = KernelConfig::Rbf { gamma: 0.5 };
        let grid = [1e-5, 1e-3, 1e-1];
        let a = tune_lambda_mu(&data, cfg, cfg, &grid, 3, 42).unwrap();
        let b = tune_lambda_mu(&data, cfg, cfg, &grid, 3, 42).unwrap();
        assert_eq!(a, b);
    }
}
