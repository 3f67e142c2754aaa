//! High-dimensional sparse linear IV via optimistic FTRL saddle-point
//! dynamics. The learner plays the lifted vector rho = (rho+; rho-) >= 0 with
//! ||rho||_1 <= B (theta = rho+ - rho-) under an entropic regularizer; the
//! adversary plays either a simplex weight over (z; -z) (ell1 ball) or an
//! ell2-ball vector beta. Iterates follow the displayed update equations of
//! the corresponding propositions; rho-tilde is maintained in the log domain
//! so the multiplicative updates stay finite.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{Dataset, Model};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;

/// Which norm ball the adversary plays in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryNorm {
    Ell1,
    Ell2,
}

/// Configuration of the OFTRL saddle-point solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleConfig {
    /// ell1 budget B for theta.
    pub b_bound: f64,
    /// adversary norm budget U.
    pub u_bound: f64,
    /// learner regularization mu.
    pub mu: f64,
    /// step size; None uses 1/(4 ||E_n[v u^T]||_inf) (ell1) or
    /// 1/(4 ||E_n[z v^T]||_{2,inf}) (ell2), computed from the full data.
    pub eta: Option<f64>,
    /// iteration count T.
    pub iters: usize,
    pub adversary_norm: AdversaryNorm,
    /// mini-batch size for the stochastic variant; None = deterministic.
    pub batch_size: Option<usize>,
    /// post-training truncation threshold for |theta_i| (sparsity
    /// enhancement); None = off.
    pub shrink_threshold: Option<f64>,
}

impl SaddleConfig {
    pub fn new(b_bound: f64, u_bound: f64, mu: f64, iters: usize, norm: AdversaryNorm) -> Self {
        SaddleConfig {
            b_bound,
            u_bound,
            mu,
            eta: None,
            iters,
            adversary_norm: norm,
            batch_size: None,
            shrink_threshold: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.b_bound > 0.0) || !(self.u_bound > 0.0) {
            return Err(Error::invalid("B and U must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::invalid("mu must be nonnegative"));
        }
        if self.iters < 1 {
            return Err(Error::invalid("iters must be at least 1"));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::invalid("eta must be positive"));
            }
        }
        if let Some(b) = self.batch_size {
            if b < 1 || b > n {
                return Err(Error::invalid(format!("batch_size {b} out of range 1..={n}")));
            }
        }
        Ok(())
    }
}

/// Fitted sparse linear model theta-bar = unlift(rho-bar), with the dual
/// average and the final duality-gap certificate.
#[derive(Debug, Clone)]
pub struct SparseLinearModel {
    theta: Array1<f64>,
    rho_bar: Array1<f64>,
    dual: Array1<f64>,
    gap: f64,
    iterations: usize,
    clipped_exponents: usize,
    adversary_norm: AdversaryNorm,
}

impl SparseLinearModel {
    pub fn theta(&self) -> &Array1<f64> {
        &self.theta
    }

    pub fn rho_bar(&self) -> &Array1<f64> {
        &self.rho_bar
    }

    /// Averaged adversary: simplex weights over (z; -z) for ell1, an ell2
    /// vector for ell2.
    pub fn dual(&self) -> &Array1<f64> {
        &self.dual
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn clipped_exponents(&self) -> usize {
        self.clipped_exponents
    }

    pub fn adversary_norm(&self) -> AdversaryNorm {
        self.adversary_norm
    }

    pub fn from_parts(theta: Array1<f64>, norm: AdversaryNorm) -> Self {
        let rho_bar = lift(&theta);
        SparseLinearModel {
            theta,
            rho_bar,
            dual: Array1::zeros(0),
            gap: f64::NAN,
            iterations: 0,
            clipped_exponents: 0,
            adversary_norm: norm,
        }
    }
}

impl Model for SparseLinearModel {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.theta.dot(&x)
    }
}

/// theta -> (rho+; rho-) with rho+_i = theta_i 1{theta_i > 0}.
pub fn lift(theta: &Array1<f64>) -> Array1<f64> {
    let p = theta.len();
    let mut rho = Array1::zeros(2 * p);
    for i in 0..p {
        if theta[i] > 0.0 {
            rho[i] = theta[i];
        } else {
            rho[p + i] = -theta[i];
        }
    }
    rho
}

/// (rho+; rho-) -> rho+ - rho-.
pub fn unlift(rho: &Array1<f64>) -> Array1<f64> {
    let p = rho.len() / 2;
    Array1::from_shape_fn(p, |i| rho[i] - rho[p + i])
}

/// max_{ij} |E_n[x_i z_j]|; the ell1 step size is 1/(4 times this).
pub fn cross_moment_max(data: &Dataset) -> f64 {
    let n = data.n() as f64;
    let c = data.x().t().dot(data.z()) / n;
    c.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// ||E_n[z v^T]||_{2,inf} = sqrt(sum_i max_j E_n[z_i x_j]^2); the ell2 step
/// size is 1/(4 times this).
pub fn cross_moment_2inf(data: &Dataset) -> f64 {
    let n = data.n() as f64;
    let c = data.z().t().dot(data.x()) / n;
    c.rows()
        .into_iter()
        .map(|row| row.iter().fold(0.0f64, |m, v| m.max(v * v)))
        .sum::<f64>()
        .sqrt()
}

/// Duality-gap certificate of Prop. "sparse-optimization-ell1":
/// 16 sigma (4 B^2 ln(B v 1) + (B+1) ln(2p)) / T.
pub fn epsilon_bound_ell1(sigma_inf: f64, b: f64, p: usize, t: usize) -> f64 {
    16.0 * sigma_inf * (4.0 * b * b * b.max(1.0).ln() + (b + 1.0) * (2.0 * p as f64).ln())
        / t as f64
}

/// Duality-gap certificate of Prop. "sparse-optimization-ell2":
/// 16 sigma (4 B^2 ln(B v 1) + B ln(2p) + U^2/2) / T.
pub fn epsilon_bound_ell2(sigma_2inf: f64, b: f64, u: f64, p: usize, t: usize) -> f64 {
    16.0 * sigma_2inf
        * (4.0 * b * b * b.max(1.0).ln() + b * (2.0 * p as f64).ln() + 0.5 * u * u)
        / t as f64
}

const EXP_CLIP: f64 = 50.0;

struct IterationRows<'a> {
    all: Vec<usize>,
    batch: Option<(usize, rand_chacha::ChaCha8Rng)>,
    scratch: Vec<usize>,
    _marker: std::marker::PhantomData<&'a ()>,
}

impl<'a> IterationRows<'a> {
    fn new(n: usize, batch_size: Option<usize>, seed: u64) -> Self {
        let batch = match batch_size {
            Some(b) if b < n => Some((b, rng_from_seed(seed))),
            _ => None, // batch_size = n means "all rows": identical to the deterministic path
        };
        IterationRows { all: (0..n).collect(), batch, scratch: Vec::new(), _marker: std::marker::PhantomData }
    }

    fn next_rows(&mut self) -> &[usize] {
        match &mut self.batch {
            None => &self.all,
            Some((b, rng)) => {
                let n = self.all.len();
                self.scratch.clear();
                self.scratch.extend((0..*b).map(|_| rng.gen_range(0..n)));
                &self.scratch
            }
        }
    }
}

/// (1/m) sum_{j in rows} x_j s_j for per-sample scalars s_j.
fn weighted_row_mean(mat: &Array2<f64>, rows: &[usize], s: &[f64]) -> Array1<f64> {
    let mut out = Array1::zeros(mat.ncols());
    for (k, &j) in rows.iter().enumerate() {
        let sj = s[k];
        if sj != 0.0 {
            out.scaled_add(sj, &mat.row(j));
        }
    }
    out / rows.len() as f64
}

fn clip_exp(e: f64, clips: &mut usize) -> f64 {
    if e > EXP_CLIP {
        *clips += 1;
        EXP_CLIP
    } else if e < -EXP_CLIP {
        *clips += 1;
        -EXP_CLIP
    } else {
        e
    }
}

/// Projects the log-domain rho-tilde onto {rho >= 0, ||rho||_1 <= B}:
/// rho = rho-tilde * min(1, B/||rho-tilde||_1), evaluated stably.
fn project_rho(log_rho: &[f64], b: f64) -> Array1<f64> {
    let max_l = log_rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // log ||rho-tilde||_1 via log-sum-exp
    let sum: f64 = log_rho.iter().map(|&l| (l - max_l).exp()).sum();
    let log_norm = max_l + sum.ln();
    let log_scale = (b.ln() - log_norm).min(0.0);
    Array1::from_iter(log_rho.iter().map(|&l| (l + log_scale).exp()))
}

fn fit_sparse_impl(data: &Dataset, cfg: &SaddleConfig, seed: u64) -> Result<SparseLinearModel> {
    cfg.validate(data.n())?;
    let (p, q) = (data.p(), data.q());
    let t_total = cfg.iters;
    let eta = cfg.eta.unwrap_or_else(|| match cfg.adversary_norm {
        AdversaryNorm::Ell1 => 1.0 / (4.0 * cross_moment_max(data)),
        AdversaryNorm::Ell2 => 1.0 / (4.0 * cross_moment_2inf(data)),
    });
    if !eta.is_finite() || !(eta > 0.0) {
        return Err(Error::Estimator("step size is degenerate (constant data?)".into()));
    }
    let mu_over_u = cfg.mu / cfg.u_bound;

    let mut clips = 0usize;
    let mut log_rho = vec![-1.0f64; 2 * p]; // ln(1/e)
    let mut rho = project_rho(&log_rho, cfg.b_bound);

    // ell1 adversary state: simplex weights over (z; -z); ell2: beta-tilde.
    let mut w = Array1::from_elem(2 * q, 1.0 / (2.0 * q as f64));
    let mut beta_tilde = Array1::<f64>::zeros(q);
    let mut beta = Array1::<f64>::zeros(q);

    // gradients at the previous iterate; both players start with repeated
    // initial points, so prev = current at t = 0
    let mut g_rho_prev: Option<Array1<f64>> = None;
    let mut g_dual_prev: Option<Array1<f64>> = None;

    let mut rho_sum = Array1::<f64>::zeros(2 * p);
    let mut w_sum = Array1::<f64>::zeros(2 * q);
    let mut beta_sum = Array1::<f64>::zeros(q);

    let mut rows_iter = IterationRows::new(data.n(), cfg.batch_size, seed);

    for _t in 1..=t_total {
        let rows = rows_iter.next_rows().to_vec();

        // s_j = f(z_j): z_j^T (w+ - w-) for ell1, z_j^T beta for ell2
        let s: Vec<f64> = rows
            .iter()
            .map(|&j| {
                let zr = data.z().row(j);
                match cfg.adversary_norm {
                    AdversaryNorm::Ell1 => {
                        (0..q).map(|i| zr[i] * (w[i] - w[q + i])).sum::<f64>()
                    }
                    AdversaryNorm::Ell2 => zr.dot(&beta),
                }
            })
            .collect();
        // base of the rho gradient: E_batch[x s]
        let base_rho = weighted_row_mean(data.x(), &rows, &s);
        let g_rho = Array1::from_shape_fn(2 * p, |i| {
            let grad = if i < p { -base_rho[i] } else { base_rho[i - p] };
            grad + mu_over_u
        });

        // residuals r_j = y_j - x_j^T theta at the current (projected) rho
        let theta_t = unlift(&rho);
        let r: Vec<f64> = rows.iter().map(|&j| data.y()[j] - data.x().row(j).dot(&theta_t)).collect();
        let base_dual = weighted_row_mean(data.z(), &rows, &r); // E_batch[r z]

        // rho-tilde update (log domain): exponent -eta/B (2 g_t - g_{t-1})
        {
            let prev = g_rho_prev.as_ref().unwrap_or(&g_rho);
            for i in 0..2 * p {
                let e = -(eta / cfg.b_bound) * (2.0 * g_rho[i] - prev[i]);
                log_rho[i] += clip_exp(e, &mut clips);
            }
        }
        rho = project_rho(&log_rho, cfg.b_bound);
        debug_assert!(rho.iter().all(|&v| v >= 0.0));
        debug_assert!(rho.iter().sum::<f64>() <= cfg.b_bound * (1.0 + 1e-9));

        match cfg.adversary_norm {
            AdversaryNorm::Ell1 => {
                // w-tilde_{t+1,i} = w_{t,i} exp(eta (2 g_t,i - g_{t-1},i)) on
                // the doubled coordinates u = (z; -z), then simplex-normalize
                let g_w = Array1::from_shape_fn(2 * q, |i| {
                    if i < q {
                        base_dual[i]
                    } else {
                        -base_dual[i - q]
                    }
                });
                let prev = g_dual_prev.as_ref().unwrap_or(&g_w);
                let mut w_tilde = Array1::zeros(2 * q);
                for i in 0..2 * q {
                    let e = eta * (2.0 * g_w[i] - prev[i]);
                    w_tilde[i] = w[i] * clip_exp(e, &mut clips).exp();
                }
                let norm: f64 = w_tilde.sum();
                if !(norm > 0.0) {
                    return Err(Error::Estimator("simplex weights collapsed to zero".into()));
                }
                w = w_tilde / norm;
                debug_assert!((w.sum() - 1.0).abs() < 1e-9);
                g_dual_prev = Some(g_w);
            }
            AdversaryNorm::Ell2 => {
                let g_b = base_dual.clone();
                let prev = g_dual_prev.as_ref().unwrap_or(&g_b);
                for i in 0..q {
                    beta_tilde[i] += eta * (2.0 * g_b[i] - prev[i]);
                }
                let norm = beta_tilde.dot(&beta_tilde).sqrt();
                let scale = if norm > cfg.u_bound { cfg.u_bound / norm } else { 1.0 };
                beta = &beta_tilde * scale;
                debug_assert!(beta.dot(&beta).sqrt() <= cfg.u_bound * (1.0 + 1e-9));
                g_dual_prev = Some(g_b);
            }
        }
        g_rho_prev = Some(g_rho);

        rho_sum += &rho;
        match cfg.adversary_norm {
            AdversaryNorm::Ell1 => w_sum += &w,
            AdversaryNorm::Ell2 => beta_sum += &beta,
        }
    }

    let tf = t_total as f64;
    let rho_bar = rho_sum / tf;
    let dual = match cfg.adversary_norm {
        AdversaryNorm::Ell1 => w_sum / tf,
        AdversaryNorm::Ell2 => beta_sum / tf,
    };
    let mut theta = unlift(&rho_bar);
    if let Some(thr) = cfg.shrink_threshold {
        theta.mapv_inplace(|v| if v.abs() < thr { 0.0 } else { v });
    }
    let gap = duality_gap(data, &rho_bar, &dual, cfg)?;
    Ok(SparseLinearModel {
        theta,
        rho_bar,
        dual,
        gap,
        iterations: t_total,
        clipped_exponents: clips,
        adversary_norm: cfg.adversary_norm,
    })
}

/// OFTRL fit with an ell1-ball adversary (exponentiated updates for both
/// players).
pub fn fit_sparse_ell1(data: &Dataset, cfg: &SaddleConfig) -> Result<SparseLinearModel> {
    if cfg.adversary_norm != AdversaryNorm::Ell1 {
        return Err(Error::invalid("fit_sparse_ell1 requires adversary_norm = ell1"));
    }
    if cfg.batch_size.is_some_and(|b| b < data.n()) {
        return Err(Error::invalid("use fit_sparse_stochastic for mini-batches"));
    }
    fit_sparse_impl(data, cfg, 0)
}

/// OFTRL fit with an ell2-ball adversary (additive optimistic updates with
/// norm rescaling for the adversary).
pub fn fit_sparse_ell2(data: &Dataset, cfg: &SaddleConfig) -> Result<SparseLinearModel> {
    if cfg.adversary_norm != AdversaryNorm::Ell2 {
        return Err(Error::invalid("fit_sparse_ell2 requires adversary_norm = ell2"));
    }
    if cfg.batch_size.is_some_and(|b| b < data.n()) {
        return Err(Error::invalid("use fit_sparse_stochastic for mini-batches"));
    }
    fit_sparse_impl(data, cfg, 0)
}

/// Stochastic variant: every iteration draws batch_size rows with replacement
/// from the seeded RNG and substitutes batch means for the E_n[.] terms. With
/// batch_size = n all rows are used each iteration and the run coincides with
/// the deterministic algorithm bitwise.
pub fn fit_sparse_stochastic(
    data: &Dataset,
    cfg: &SaddleConfig,
    seed: u64,
) -> Result<SparseLinearModel> {
    if cfg.batch_size.is_none() {
        return Err(Error::invalid("fit_sparse_stochastic requires batch_size"));
    }
    fit_sparse_impl(data, cfg, seed)
}

/// Exact duality gap max_dual l(rho_bar, .) - min_rho l(., dual_bar) of the
/// lifted bilinear game; nonnegative (weak duality) up to 1e-10 for feasible
/// arguments.
pub fn duality_gap(
    data: &Dataset,
    rho_bar: &Array1<f64>,
    dual_bar: &Array1<f64>,
    cfg: &SaddleConfig,
) -> Result<f64> {
    let (p, q) = (data.p(), data.q());
    let n = data.n() as f64;
    if rho_bar.len() != 2 * p {
        return Err(Error::invalid("rho_bar must have length 2p"));
    }
    if rho_bar.iter().any(|&v| v < -1e-12) {
        return Err(Error::invalid("rho_bar must be nonnegative"));
    }
    let rho_l1: f64 = rho_bar.iter().map(|v| v.abs()).sum();
    if rho_l1 > cfg.b_bound * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::invalid("rho_bar violates the ell1 budget"));
    }
    let mu_over_u = cfg.mu / cfg.u_bound;
    let theta = unlift(rho_bar);
    // c = E_n[z (y - theta^T x)]
    let mut c = Array1::<f64>::zeros(q);
    for j in 0..data.n() {
        let r = data.y()[j] - data.x().row(j).dot(&theta);
        c.scaled_add(r, &data.z().row(j));
    }
    c /= n;
    let mu_term = mu_over_u * rho_bar.sum();

    let (best_adv, d_vec) = match cfg.adversary_norm {
        AdversaryNorm::Ell1 => {
            if dual_bar.len() != 2 * q {
                return Err(Error::invalid("ell1 dual must have length 2q"));
            }
            if dual_bar.iter().any(|&v| v < -1e-12)
                || (dual_bar.sum() - 1.0).abs() > 1e-6
            {
                return Err(Error::invalid("ell1 dual must lie on the simplex"));
            }
            // max over the simplex of w^T (c; -c): the largest coordinate
            let best = c.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.max(-v)));
            // d_i = -(E_n[v u^T] w-bar)_i + mu/U over the lifted coordinates
            let fz: Vec<f64> = (0..data.n())
                .map(|j| {
                    let zr = data.z().row(j);
                    (0..q).map(|i| zr[i] * (dual_bar[i] - dual_bar[q + i])).sum::<f64>()
                })
                .collect();
            let base = weighted_row_mean(data.x(), &(0..data.n()).collect::<Vec<_>>(), &fz);
            let d = Array1::from_shape_fn(2 * p, |i| {
                (if i < p { -base[i] } else { base[i - p] }) + mu_over_u
            });
            (best, d)
        }
        AdversaryNorm::Ell2 => {
            if dual_bar.len() != q {
                return Err(Error::invalid("ell2 dual must have length q"));
            }
            let norm = dual_bar.dot(dual_bar).sqrt();
            if norm > cfg.u_bound * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::invalid("ell2 dual violates the norm budget"));
            }
            // max over ||beta||_2 <= U of beta^T c = U ||c||_2
            let best = cfg.u_bound * c.dot(&c).sqrt();
            let fz: Vec<f64> = (0..data.n()).map(|j| data.z().row(j).dot(dual_bar)).collect();
            let base = weighted_row_mean(data.x(), &(0..data.n()).collect::<Vec<_>>(), &fz);
            let d = Array1::from_shape_fn(2 * p, |i| {
                (if i < p { -base[i] } else { base[i - p] }) + mu_over_u
            });
            (best, d)
        }
    };

    let max_value = best_adv + mu_term;

    // min over {rho >= 0, ||rho||_1 <= B} of rho^T d + <dual-part constant>
    let d_min = d_vec.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_rho_term = (cfg.b_bound * d_min).min(0.0);
    // constant part of l(., dual_bar): dual^T E_n[u y] (resp. E_n[z y])
    let mut zy = Array1::<f64>::zeros(q);
    for j in 0..data.n() {
        zy.scaled_add(data.y()[j], &data.z().row(j));
    }
    zy /= n;
    let dual_const = match cfg.adversary_norm {
        AdversaryNorm::Ell1 => (0..q).map(|i| zy[i] * (dual_bar[i] - dual_bar[q + i])).sum::<f64>(),
        AdversaryNorm::Ell2 => zy.dot(dual_bar),
    };
    let min_value = dual_const + min_rho_term;

    Ok(max_value - min_value)
}
