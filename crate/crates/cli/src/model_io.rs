//! Versioned plain-text model files. Every estimator serializes to a
//! self-describing format: a version header, the estimator kind, its
//! parameters, and its weights at 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2};

use minimax_iv::csv_io::fmt_f64;
use minimax_iv::data::HyperParams;
use minimax_iv::forest::{ClassificationTree, EnsembleModel, TreeNode};
use minimax_iv::kernels::{KernelConfig, NystromFactor};
use minimax_iv::rkhs::{KernelModel, NystromModel};
use minimax_iv::shape::{PiecewiseModel, ShapeKind};
use minimax_iv::sparse::{AdversaryNorm, SparseLinearModel};
use minimax_iv::dgp::TwoSlsModel;
use minimax_iv::Model;

const HEADER: &str = "minimax-iv-model v1";

/// Any fitted model the CLI can save, load and predict with.
pub enum AnyModel {
    Kernel(KernelModel),
    Nystrom(NystromModel),
    Sparse(SparseLinearModel),
    Shape(PiecewiseModel),
    Rfiv(EnsembleModel),
    TwoSls(TwoSlsModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Kernel(_) => "kernel",
            AnyModel::Nystrom(_) => "nystrom",
            AnyModel::Sparse(_) => "sparse",
            AnyModel::Shape(_) => "shape",
            AnyModel::Rfiv(_) => "rfiv",
            AnyModel::TwoSls(_) => "twosls",
        }
    }

    pub fn as_model(&self) -> &dyn Model {
        match self {
            AnyModel::Kernel(m) => m,
            AnyModel::Nystrom(m) => m,
            AnyModel::Sparse(m) => m,
            AnyModel::Shape(m) => m,
            AnyModel::Rfiv(m) => m,
            AnyModel::TwoSls(m) => m,
        }
    }
}

fn fmt_vec(v: &Array1<f64>) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ")
}

fn fmt_matrix(m: &Array2<f64>, out: &mut String) {
    for row in m.rows() {
        let line = row.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{line}");
    }
}

fn fmt_kernel(cfg: KernelConfig) -> String {
    match cfg {
        KernelConfig::Rbf { gamma } => format!("rbf {}", fmt_f64(gamma)),
        KernelConfig::Linear => "linear".to_string(),
        KernelConfig::Polynomial { degree } => format!("polynomial {degree}"),
    }
}

fn fmt_hyper(hp: &HyperParams) -> String {
    format!(
        "hyper: {} {} {} {} {}",
        fmt_f64(hp.lambda),
        fmt_f64(hp.mu),
        fmt_f64(hp.delta),
        fmt_f64(hp.u_bound),
        fmt_f64(hp.b_bound)
    )
}

fn fmt_tree(node: &TreeNode, out: &mut String) {
    match node {
        TreeNode::Leaf(v) => {
            let _ = write!(out, " L {}", fmt_f64(*v));
        }
        TreeNode::Split { feature, threshold, left, right } => {
            let _ = write!(out, " S {feature} {}", fmt_f64(*threshold));
            fmt_tree(left, out);
            fmt_tree(right, out);
        }
    }
}

pub fn save_model(model: &AnyModel, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(s, "estimator: {}", model.kind());
    match model {
        AnyModel::Kernel(m) => {
            let _ = writeln!(s, "kernel_h: {}", fmt_kernel(m.cfg_h()));
            let _ = writeln!(s, "{}", fmt_hyper(&m.hyper()));
            let _ = writeln!(s, "n: {}", m.support_x().nrows());
            let _ = writeln!(s, "p: {}", m.support_x().ncols());
            let _ = writeln!(s, "alpha: {}", fmt_vec(m.alpha()));
            let _ = writeln!(s, "support_x:");
            fmt_matrix(m.support_x(), &mut s);
        }
        AnyModel::Nystrom(m) => {
            let f = m.factor_h();
            let _ = writeln!(s, "kernel_h: {}", fmt_kernel(f.cfg()));
            let _ = writeln!(s, "{}", fmt_hyper(&m.hyper()));
            let _ = writeln!(s, "r: {}", f.rank());
            let _ = writeln!(s, "p: {}", f.dim());
            let _ = writeln!(s, "gamma_weights: {}", fmt_vec(m.gamma_weights()));
            let _ = writeln!(s, "centers:");
            fmt_matrix(f.centers(), &mut s);
            let _ = writeln!(s, "m_half:");
            fmt_matrix(f.m_half(), &mut s);
        }
        AnyModel::Sparse(m) => {
            let norm = match m.adversary_norm() {
                AdversaryNorm::Ell1 => "ell1",
                AdversaryNorm::Ell2 => "ell2",
            };
            let _ = writeln!(s, "adversary_norm: {norm}");
            let _ = writeln!(s, "gap: {}", fmt_f64(m.gap()));
            let _ = writeln!(s, "iterations: {}", m.iterations());
            let _ = writeln!(s, "theta: {}", fmt_vec(m.theta()));
        }
        AnyModel::Shape(m) => {
            let _ = writeln!(s, "shape: {}", m.shape().name());
            match m.lipschitz() {
                Some(l) => {
                    let _ = writeln!(s, "lipschitz: {}", fmt_f64(l));
                }
                None => {
                    let _ = writeln!(s, "lipschitz: none");
                }
            }
            let _ = writeln!(s, "knots: {}", fmt_vec(m.knots()));
            let _ = writeln!(s, "values: {}", fmt_vec(m.values()));
        }
        AnyModel::Rfiv(m) => {
            let (c, h) = m.y_scaling();
            let _ = writeln!(s, "input_dim: {}", m.input_dim());
            let _ = writeln!(s, "y_center: {}", fmt_f64(c));
            let _ = writeln!(s, "y_half: {}", fmt_f64(h));
            let _ = writeln!(s, "trees: {}", m.trees().len());
            for tree in m.trees() {
                let mut line = String::from("tree:");
                fmt_tree(tree.root(), &mut line);
                let _ = writeln!(s, "{line}");
            }
        }
        AnyModel::TwoSls(m) => {
            let _ = writeln!(s, "degree: {}", m.degree());
            let _ = writeln!(s, "p: {}", m.input_dim());
            let _ = writeln!(s, "coef: {}", fmt_vec(m.coef()));
        }
    }
    std::fs::write(path.as_ref(), s)
        .with_context(|| format!("cannot write model to {}", path.as_ref().display()))
}

struct Lines<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.lines.next().ok_or_else(|| anyhow!("unexpected end of model file"))
    }

    /// `key: value`
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(&format!("{key}:"))
            .map(str::trim)
            .ok_or_else(|| anyhow!("expected field {key:?}, found {line:?}"))
    }
}

fn parse_vec(s: &str) -> Result<Array1<f64>> {
    let vals: Result<Vec<f64>, _> = s.split_whitespace().map(str::parse).collect();
    Ok(Array1::from(vals.context("bad numeric list")?))
}

fn parse_matrix(lines: &mut Lines<'_>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let v = parse_vec(lines.next()?)?;
        if v.len() != cols {
            bail!("matrix row {i} has {} entries, expected {cols}", v.len());
        }
        out.row_mut(i).assign(&v);
    }
    Ok(out)
}

fn parse_kernel(s: &str) -> Result<KernelConfig> {
    let mut it = s.split_whitespace();
    match it.next() {
        Some("rbf") => {
            let gamma: f64 = it.next().ok_or_else(|| anyhow!("rbf needs gamma"))?.parse()?;
            Ok(KernelConfig::Rbf { gamma })
        }
        Some("linear") => Ok(KernelConfig::Linear),
        Some("polynomial") => {
            let degree: u32 =
                it.next().ok_or_else(|| anyhow!("polynomial needs degree"))?.parse()?;
            Ok(KernelConfig::Polynomial { degree })
        }
        other => bail!("unknown kernel {other:?}"),
    }
}

fn parse_hyper(s: &str) -> Result<HyperParams> {
    let v = parse_vec(s)?;
    if v.len() != 5 {
        bail!("hyper needs 5 values");
    }
    Ok(HyperParams::new(v[0], v[1], v[2], v[3], v[4])?)
}

fn parse_tree_tokens(tokens: &mut std::slice::Iter<'_, &str>) -> Result<TreeNode> {
    match tokens.next() {
        Some(&"L") => {
            let v: f64 = tokens.next().ok_or_else(|| anyhow!("leaf needs a value"))?.parse()?;
            Ok(TreeNode::Leaf(v))
        }
        Some(&"S") => {
            let feature: usize =
                tokens.next().ok_or_else(|| anyhow!("split needs a feature"))?.parse()?;
            let threshold: f64 =
                tokens.next().ok_or_else(|| anyhow!("split needs a threshold"))?.parse()?;
            let left = parse_tree_tokens(tokens)?;
            let right = parse_tree_tokens(tokens)?;
            Ok(TreeNode::Split {
                feature,
                threshold,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        other => bail!("bad tree token {other:?}"),
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    let text = std::fs::read_to_string(path.as_ref())
        .with_context(|| format!("cannot read model from {}", path.as_ref().display()))?;
    let mut lines = Lines { lines: text.lines().peekable() };
    let header = lines.next()?;
    if header != HEADER {
        bail!("unsupported model header {header:?} (expected {HEADER:?})");
    }
    let kind = lines.field("estimator")?;
    match kind {
        "kernel" => {
            let cfg = parse_kernel(lines.field("kernel_h")?)?;
            let hyper = parse_hyper(lines.field("hyper")?)?;
            let n: usize = lines.field("n")?.parse()?;
            let p: usize = lines.field("p")?.parse()?;
            let alpha = parse_vec(lines.field("alpha")?)?;
            lines.field("support_x").map(|_| ()).or_else(|_| bail!("missing support_x"))?;
            let support = parse_matrix(&mut lines, n, p)?;
            Ok(AnyModel::Kernel(KernelModel::from_parts(support, alpha, cfg, hyper)?))
        }
        "nystrom" => {
            let cfg = parse_kernel(lines.field("kernel_h")?)?;
            let hyper = parse_hyper(lines.field("hyper")?)?;
            let r: usize = lines.field("r")?.parse()?;
            let p: usize = lines.field("p")?.parse()?;
            let gamma = parse_vec(lines.field("gamma_weights")?)?;
            lines.field("centers")?;
            let centers = parse_matrix(&mut lines, r, p)?;
            lines.field("m_half")?;
            let m_half = parse_matrix(&mut lines, r, r)?;
            let factor = NystromFactor::new(cfg, centers, m_half)?;
            Ok(AnyModel::Nystrom(NystromModel::from_parts(factor, gamma, hyper)?))
        }
        "sparse" => {
            let norm = match lines.field("adversary_norm")? {
                "ell1" => AdversaryNorm::Ell1,
                "ell2" => AdversaryNorm::Ell2,
                other => bail!("unknown adversary norm {other:?}"),
            };
            let _gap: f64 = lines.field("gap")?.parse()?;
            let _iters: usize = lines.field("iterations")?.parse()?;
            let theta = parse_vec(lines.field("theta")?)?;
            Ok(AnyModel::Sparse(SparseLinearModel::from_parts(theta, norm)))
        }
        "shape" => {
            let shape = ShapeKind::parse(lines.field("shape")?)?;
            let lip_raw = lines.field("lipschitz")?;
            let lipschitz = if lip_raw == "none" { None } else { Some(lip_raw.parse()?) };
            let knots = parse_vec(lines.field("knots")?)?;
            let values = parse_vec(lines.field("values")?)?;
            Ok(AnyModel::Shape(PiecewiseModel::from_parts(knots, values, shape, lipschitz)?))
        }
        "rfiv" => {
            let input_dim: usize = lines.field("input_dim")?.parse()?;
            let y_center: f64 = lines.field("y_center")?.parse()?;
            let y_half: f64 = lines.field("y_half")?.parse()?;
            let n_trees: usize = lines.field("trees")?.parse()?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let line = lines.field("tree")?;
                let tokens: Vec<&str> = line.split_whitespace().collect();
                let mut it = tokens.iter();
                trees.push(ClassificationTree::from_root(parse_tree_tokens(&mut it)?));
            }
            Ok(AnyModel::Rfiv(EnsembleModel::from_parts(trees, input_dim, y_center, y_half)?))
        }
        "twosls" => {
            let degree: u32 = lines.field("degree")?.parse()?;
            let p: usize = lines.field("p")?.parse()?;
            let coef = parse_vec(lines.field("coef")?)?;
            Ok(AnyModel::TwoSls(TwoSlsModel::from_parts(coef, degree, p)?))
        }
        other => bail!("unknown estimator kind {other:?}"),
    }
}
