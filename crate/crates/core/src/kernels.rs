//! Kernel functions, kernel-matrix construction, Nystrom low-rank
//! factorization and k-means center selection.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::select_rows;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::rng_from_seed;
use rand::Rng;

/// Kernel family. The rbf kernel is exp(-gamma * ||a - b||^2); the polynomial
/// kernel is (a.b + 1)^degree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelConfig {
    Rbf { gamma: f64 },
    Linear,
    Polynomial { degree: u32 },
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelConfig::Rbf { gamma } if !(*gamma > 0.0) => {
                Err(Error::invalid("rbf gamma must be positive"))
            }
            KernelConfig::Polynomial { degree } if *degree < 1 => {
                Err(Error::invalid("polynomial degree must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

pub fn kernel_eval(cfg: KernelConfig, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "kernel_eval: dimension mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    cfg.validate()?;
    Ok(kernel_eval_unchecked(cfg, a, b))
}

#[inline]
fn kernel_eval_unchecked(cfg: KernelConfig, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    match cfg {
        KernelConfig::Rbf { gamma } => {
            let mut d2 = 0.0;
            for (ai, bi) in a.iter().zip(b.iter()) {
                let d = ai - bi;
                d2 += d * d;
            }
            (-gamma * d2).exp()
        }
        KernelConfig::Linear => a.dot(&b),
        KernelConfig::Polynomial { degree } => (a.dot(&b) + 1.0).powi(degree as i32),
    }
}

/// Symmetric kernel matrix (K(points_i, points_j))_{ij}. The upper triangle
/// is computed and mirrored, so the result is symmetric to bit equality.
pub fn kernel_matrix(cfg: KernelConfig, points: &Array2<f64>) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = points.nrows();
    if n == 0 {
        return Err(Error::invalid("kernel_matrix: empty point set"));
    }
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = kernel_eval_unchecked(cfg, points.row(i), points.row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

/// Rectangular kernel block (K(rows_i, cols_j))_{ij}.
pub fn kernel_cross(cfg: KernelConfig, rows: &Array2<f64>, cols: &Array2<f64>) -> Result<Array2<f64>> {
    cfg.validate()?;
    if rows.ncols() != cols.ncols() {
        return Err(Error::invalid("kernel_cross: dimension mismatch"));
    }
    Ok(Array2::from_shape_fn((rows.nrows(), cols.nrows()), |(i, j)| {
        kernel_eval_unchecked(cfg, rows.row(i), cols.row(j))
    }))
}

/// Kernel matrix of the product RKHS: K((x;z),(x';z')) = K_H(x,x') K_F(z,z'),
/// i.e. the Hadamard product of the two empirical kernel matrices.
pub fn product_kernel_matrix(
    cfg_h: KernelConfig,
    x: &Array2<f64>,
    cfg_f: KernelConfig,
    z: &Array2<f64>,
) -> Result<Array2<f64>> {
    if x.nrows() != z.nrows() {
        return Err(Error::invalid("product_kernel_matrix: row-count mismatch"));
    }
    let kh = kernel_matrix(cfg_h, x)?;
    let kf = kernel_matrix(cfg_f, z)?;
    Ok(&kh * &kf)
}

/// How Nystrom centers are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum CenterRule {
    /// Explicit row indices into the point set (must be distinct).
    Indices(Vec<usize>),
    /// r rows sampled uniformly without replacement.
    Uniform { r: usize, seed: u64 },
    /// r k-means centroids (greedy farthest-point init, Lloyd iterations).
    KMeans { r: usize, seed: u64 },
}

/// Low-rank factor of a kernel matrix: K ~= V V^T with V = K(points, centers)
/// * m_half and m_half = ((K(centers, centers))^+)^(1/2). The feature map of
/// a new point is phi(x) = m_half * (K(center_i, x))_i.
#[derive(Debug, Clone)]
pub struct NystromFactor {
    cfg: KernelConfig,
    centers: Array2<f64>,
    m_half: Array2<f64>,
}

impl NystromFactor {
    pub fn new(cfg: KernelConfig, centers: Array2<f64>, m_half: Array2<f64>) -> Result<Self> {
        cfg.validate()?;
        if m_half.nrows() != centers.nrows() || m_half.ncols() != centers.nrows() {
            return Err(Error::invalid("m_half must be r x r for r centers"));
        }
        Ok(NystromFactor { cfg, centers, m_half })
    }

    pub fn rank(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn cfg(&self) -> KernelConfig {
        self.cfg
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn m_half(&self) -> &Array2<f64> {
        &self.m_half
    }

    /// phi(x) = m_half * (K(center_i, x))_i, an r-vector.
    pub fn feature_map(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let k = Array1::from_iter(
            self.centers.rows().into_iter().map(|c| kernel_eval_unchecked(self.cfg, c, x)),
        );
        self.m_half.dot(&k)
    }

    /// V = K(points, centers) m_half, the n x r factor with K ~= V V^T.
    pub fn factor_matrix(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        let kc = kernel_cross(self.cfg, points, &self.centers)?;
        Ok(kc.dot(&self.m_half))
    }
}

/// Builds the Nystrom factor for `points` with centers picked by `rule`.
pub fn nystrom_factorize(
    cfg: KernelConfig,
    points: &Array2<f64>,
    rule: &CenterRule,
) -> Result<NystromFactor> {
    let n = points.nrows();
    let centers = match rule {
        CenterRule::Indices(idx) => {
            if idx.is_empty() || idx.len() > n {
                return Err(Error::invalid("center indices must satisfy 1 <= r <= n"));
            }
            let mut seen = std::collections::HashSet::new();
            for &i in idx {
                if i >= n {
                    return Err(Error::invalid(format!("center index {i} out of range")));
                }
                if !seen.insert(i) {
                    return Err(Error::invalid(format!("duplicate center index {i}")));
                }
            }
            select_rows(points, idx)
        }
        CenterRule::Uniform { r, seed } => {
            if *r == 0 || *r > n {
                return Err(Error::invalid("rank r must satisfy 1 <= r <= n"));
            }
            let mut rng = rng_from_seed(*seed);
            let mut pool: Vec<usize> = (0..n).collect();
            // partial Fisher-Yates: the first r entries are a uniform sample
            for i in 0..*r {
                let j = i + rng.gen_range(0..(n - i));
                pool.swap(i, j);
            }
            let mut idx = pool[..*r].to_vec();
            idx.sort_unstable();
            select_rows(points, &idx)
        }
        CenterRule::KMeans { r, seed } => kmeans_centers(points, *r, *seed)?,
    };
    let kss = kernel_matrix(cfg, &centers)?;
    let m_half = linalg::pinv_sqrt(&kss, linalg::DEFAULT_RTOL)?;
    NystromFactor::new(cfg, centers, m_half)
}

/// Lloyd's k-means with greedy farthest-point initialization. Deterministic
/// given the seed; runs until the assignment reaches a fixpoint or 100
/// iterations.
pub fn kmeans_centers(points: &Array2<f64>, r: usize, seed: u64) -> Result<Array2<f64>> {
    let n = points.nrows();
    let d = points.ncols();
    if r == 0 {
        return Err(Error::invalid("k-means needs r >= 1"));
    }
    if r > n {
        return Err(Error::invalid(format!("k-means r = {r} exceeds n = {n}")));
    }

    // farthest-point init, first center drawn from the seeded RNG
    let mut rng = rng_from_seed(seed);
    let mut center_idx = vec![rng.gen_range(0..n)];
    let mut min_d2: Vec<f64> =
        (0..n).map(|i| sq_dist(points.row(i), points.row(center_idx[0]))).collect();
    while center_idx.len() < r {
        let far = min_d2
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        center_idx.push(far);
        for i in 0..n {
            min_d2[i] = min_d2[i].min(sq_dist(points.row(i), points.row(far)));
        }
    }
    let mut centers = select_rows(points, &center_idx);

    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..r {
                let dist = sq_dist(points.row(i), centers.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((r, d));
        let mut counts = vec![0usize; r];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..d {
                sums[[c, j]] += points[[i, j]];
            }
        }
        for c in 0..r {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[[c, j]] = sums[[c, j]] / counts[c] as f64;
                }
            } else {
                // re-seed an emptied cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centers.row(assign[a]));
                        let db = sq_dist(points.row(b), centers.row(assign[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers.row_mut(c).assign(&points.row(far));
            }
        }
    }
    Ok(centers)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fro_norm;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn rbf_of_equal_points_is_one() {
        let a = array![1.0, 2.0];
        let v = kernel_eval(KernelConfig::Rbf { gamma: 0.5 }, a.view(), a.view()).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn rbf_direct_value() {
        let a = array![0.0];
        let b = array![1.0];
        let v = kernel_eval(KernelConfig::Rbf { gamma: 0.1 }, a.view(), b.view()).unwrap();
        assert!((v - (-0.1f64).exp()).abs() < 1e-12);
        assert!((v - 0.9048374).abs() < 1e-7);
    }

    #[test]
    fn linear_kernel_is_dot_product() {
        let a = array![1.0, 2.0];
        let b = array![3.0, 4.0];
        assert_eq!(kernel_eval(KernelConfig::Linear, a.view(), b.view()).unwrap(), 11.0);
    }

    #[test]
    fn kernel_eval_is_symmetric_and_checks_dims() {
        let a = array![0.3, -1.0];
        let b = array![2.0, 0.5];
        for cfg in [
            KernelConfig::Rbf { gamma: 0.7 },
            KernelConfig::Linear,
            KernelConfig::Polynomial { degree: 3 },
        ] {
            let ab = kernel_eval(cfg, a.view(), b.view()).unwrap();
            let ba = kernel_eval(cfg, b.view(), a.view()).unwrap();
            assert_eq!(ab, ba);
        }
        let c = array![1.0];
        assert!(kernel_eval(KernelConfig::Linear, a.view(), c.view()).is_err());
    }

    #[test]
    fn kernel_matrix_single_point_and_diagonal() {
        let pts = array![[1.5, 0.0]];
        let k = kernel_matrix(KernelConfig::Rbf { gamma: 1.0 }, &pts).unwrap();
        assert_eq!(k, array![[1.0]]);

        let mut rng = crate::rng::rng_from_seed(2);
        let pts = Array2::from_shape_fn((5, 2), |_| rng.gen::<f64>());
        let k = kernel_matrix(KernelConfig::Rbf { gamma: 0.3 }, &pts).unwrap();
        for i in 0..5 {
            assert_eq!(k[[i, i]], 1.0);
        }
    }

    #[test]
    fn kernel_matrix_matches_elementwise_eval() {
        let mut rng = crate::rng::rng_from_seed(3);
        let pts = Array2::from_shape_fn((3, 2), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let cfg = KernelConfig::Rbf { gamma: 0.2 };
        let k = kernel_matrix(cfg, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = kernel_eval(cfg, pts.row(i), pts.row(j)).unwrap();
                assert_eq!(k[[i, j]], want);
                assert_eq!(k[[i, j]].to_bits(), k[[j, i]].to_bits());
            }
        }
    }

    #[test]
    fn kernel_matrix_is_psd_up_to_tolerance() {
        let mut rng = crate::rng::rng_from_seed(4);
        let pts = Array2::from_shape_fn((8, 1), |_| rng.gen::<f64>() * 6.0 - 3.0);
        let k = kernel_matrix(KernelConfig::Rbf { gamma: 0.5 }, &pts).unwrap();
        let eig = crate::linalg::sym_eig(&k).unwrap();
        let lmax = eig.eigenvalues[0];
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10 * lmax));
    }

    #[test]
    fn product_kernel_is_hadamard() {
        let mut rng = crate::rng::rng_from_seed(5);
        let x = Array2::from_shape_fn((4, 2), |_| rng.gen::<f64>());
        let z = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>());
        let ch = KernelConfig::Rbf { gamma: 0.4 };
        let cf = KernelConfig::Linear;
        let kp = product_kernel_matrix(ch, &x, cf, &z).unwrap();
        let kh = kernel_matrix(ch, &x).unwrap();
        let kf = kernel_matrix(cf, &z).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(kp[[i, j]], kh[[i, j]] * kf[[i, j]]);
            }
        }
        // identical inputs: product equals elementwise square
        let kp2 = product_kernel_matrix(ch, &x, ch, &x).unwrap();
        for (a, b) in kp2.iter().zip(kh.iter()) {
            assert_eq!(*a, b * b);
        }
    }

    #[test]
    fn product_kernel_one_factor_all_ones() {
        // rbf on identical rows gives an all-ones factor
        let x = Array2::zeros((3, 1));
        let mut rng = crate::rng::rng_from_seed(6);
        let z = Array2::from_shape_fn((3, 1), |_| rng.gen::<f64>());
        let ch = KernelConfig::Rbf { gamma: 1.0 };
        let cf = KernelConfig::Rbf { gamma: 0.3 };
        let kp = product_kernel_matrix(ch, &x, cf, &z).unwrap();
        let kf = kernel_matrix(cf, &z).unwrap();
        assert!(fro_norm(&(&kp - &kf)) < 1e-15);
    }

    #[test]
    fn nystrom_full_rank_is_exact() {
        let mut rng = crate::rng::rng_from_seed(7);
        let pts = Array2::from_shape_fn((12, 2), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let cfg = KernelConfig::Rbf { gamma: 0.6 };
        let rule = CenterRule::Indices((0..12).collect());
        let f = nystrom_factorize(cfg, &pts, &rule).unwrap();
        let v = f.factor_matrix(&pts).unwrap();
        let k = kernel_matrix(cfg, &pts).unwrap();
        let err = fro_norm(&(&v.dot(&v.t()) - &k)) / fro_norm(&k);
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn nystrom_rank_one() {
        let mut rng = crate::rng::rng_from_seed(8);
        let pts = Array2::from_shape_fn((6, 1), |_| rng.gen::<f64>());
        let cfg = KernelConfig::Rbf { gamma: 1.0 };
        let f = nystrom_factorize(cfg, &pts, &CenterRule::Indices(vec![2])).unwrap();
        let v = f.factor_matrix(&pts).unwrap();
        let approx = v.dot(&v.t());
        // rank <= 1: all 2x2 minors vanish
        for i in 0..6 {
            for j in 0..6 {
                let det = approx[[0, 0]] * approx[[i, j]] - approx[[0, j]] * approx[[i, 0]];
                assert!(det.abs() < 1e-10);
            }
        }
        assert!(approx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn nystrom_half_rank_beats_rank_one_on_clusters() {
        // two tight clusters; r = n/2 must approximate far better than r = 1
        let mut rng = crate::rng::rng_from_seed(9);
        let n = 16;
        let pts = Array2::from_shape_fn((n, 1), |(i, _)| {
            let base = if i < n / 2 { -3.0 } else { 3.0 };
            base + 0.1 * rng.gen::<f64>()
        });
        let cfg = KernelConfig::Rbf { gamma: 0.8 };
        let k = kernel_matrix(cfg, &pts).unwrap();
        let err_of = |rule: &CenterRule| {
            let f = nystrom_factorize(cfg, &pts, rule).unwrap();
            let v = f.factor_matrix(&pts).unwrap();
            fro_norm(&(&v.dot(&v.t()) - &k)) / fro_norm(&k)
        };
        let err_half = err_of(&CenterRule::KMeans { r: n / 2, seed: 1 });
        let err_one = err_of(&CenterRule::KMeans { r: 1, seed: 1 });
        assert!(err_half < err_one, "half-rank {err_half} vs rank-1 {err_one}");
    }

    #[test]
    fn nystrom_rejects_bad_indices() {
        let pts = Array2::zeros((4, 1));
        let cfg = KernelConfig::Linear;
        assert!(nystrom_factorize(cfg, &pts, &CenterRule::Indices(vec![0, 0])).is_err());
        assert!(nystrom_factorize(cfg, &pts, &CenterRule::Indices(vec![9])).is_err());
        assert!(nystrom_factorize(cfg, &pts, &CenterRule::Uniform { r: 5, seed: 0 }).is_err());
    }

    #[test]
    fn kmeans_r_equals_n_returns_points() {
        let mut rng = crate::rng::rng_from_seed(10);
        let pts = Array2::from_shape_fn((5, 2), |_| rng.gen::<f64>());
        let centers = kmeans_centers(&pts, 5, 3).unwrap();
        // every point must appear as a centroid (distinct points, r = n)
        for row in pts.rows() {
            let hit = centers
                .rows()
                .into_iter()
                .any(|c| sq_dist(c.view(), row.view()) < 1e-20);
            assert!(hit);
        }
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut rng = crate::rng::rng_from_seed(11);
        let n = 20;
        let pts = Array2::from_shape_fn((n, 2), |(i, _)| {
            let base = if i < n / 2 { -5.0 } else { 5.0 };
            base + 0.3 * (rng.gen::<f64>() - 0.5)
        });
        let centers = kmeans_centers(&pts, 2, 7).unwrap();
        let mut near_neg = 0;
        let mut near_pos = 0;
        for c in centers.rows() {
            if (c[0] + 5.0).abs() < 1.0 {
                near_neg += 1;
            }
            if (c[0] - 5.0).abs() < 1.0 {
                near_pos += 1;
            }
        }
        assert_eq!((near_neg, near_pos), (1, 1));
    }

    #[test]
    fn kmeans_r_one_is_global_mean() {
        let mut rng = crate::rng::rng_from_seed(12);
        let pts = Array2::from_shape_fn((9, 2), |_| rng.gen::<f64>() * 2.0);
        let centers = kmeans_centers(&pts, 1, 0).unwrap();
        let mean = pts.mean_axis(ndarray::Axis(0)).unwrap();
        assert!((centers[[0, 0]] - mean[0]).abs() < 1e-12);
        assert!((centers[[0, 1]] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn kmeans_deterministic_given_seed() {
        let mut rng = crate::rng::rng_from_seed(13);
        let pts = Array2::from_shape_fn((30, 2), |_| rng.gen::<f64>());
        let a = kmeans_centers(&pts, 4, 99).unwrap();
        let b = kmeans_centers(&pts, 4, 99).unwrap();
        assert_eq!(a, b);
        assert!(kmeans_centers(&pts, 0, 1).is_err());
    }
}
