mod model_io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use minimax_iv::bench::{self, BenchSpec, EstimatorSpec, DEFAULT_PRODUCT_GRID};
use minimax_iv::csv_io::{fmt_f64, load_csv, save_csv};
use minimax_iv::data::{Dataset, HyperParams};
use minimax_iv::dgp::{fit_2sls, generate, DgpConfig};
use minimax_iv::forest::{fit_rfiv, minimax_gap, TreeParams};
use minimax_iv::kernels::KernelConfig;
use minimax_iv::rkhs::{fit_kernel_iv, fit_nystrom_iv, tune_lambda_mu_with, NystromRule};
use minimax_iv::rng::derive_seed;
use minimax_iv::shape::{fit_shape_iv, ShapeConfig, ShapeKind};
use minimax_iv::sparse::{
    fit_sparse_ell1, fit_sparse_ell2, fit_sparse_stochastic, AdversaryNorm, SaddleConfig,
};
use minimax_iv::Error as LibError;

use model_io::AnyModel;

/// Minimax IV estimators and the synthetic benchmark harness.
#[derive(Parser)]
#[command(name = "minimax-iv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV from the structural equations.
    Generate(GenerateArgs),
    /// Fit an estimator on a dataset CSV and save the model.
    Fit(FitArgs),
    /// Predict with a saved model on the treatments of a dataset CSV.
    Predict(PredictArgs),
    /// Run a Monte-Carlo benchmark preset and write the results CSV.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// True function name (one of the 16 registered forms).
    #[arg(long)]
    fname: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    n_x: usize,
    #[arg(long, default_value_t = 1)]
    n_z: usize,
    /// Instrument strength in [0, 1].
    #[arg(long, default_value_t = 0.6)]
    gamma: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EstimatorKind {
    Kernel,
    Nystrom,
    SparseEll1,
    SparseEll2,
    Shape,
    Rfiv,
    Twosls,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum KernelKind {
    Rbf,
    Linear,
    Polynomial,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CenterKind {
    Kmeans,
    Uniform,
    Leading,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    estimator: EstimatorKind,
    /// Dataset CSV (header y,x0..,z0..).
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the fully resolved configuration before fitting.
    #[arg(long)]
    dump_config: bool,

    // kernel / nystrom
    #[arg(long, value_enum, default_value = "rbf")]
    kernel: KernelKind,
    /// Polynomial degree when --kernel polynomial.
    #[arg(long, default_value_t = 2)]
    kernel_degree: u32,
    /// rbf bandwidth for the hypothesis kernel.
    #[arg(long, default_value_t = 0.1)]
    gamma_h: f64,
    /// rbf bandwidth for the test-function kernel.
    #[arg(long, default_value_t = 0.1)]
    gamma_f: f64,
    /// Ridge coefficient 4*lambda*mu; disables cross-validation.
    #[arg(long)]
    ridge: Option<f64>,
    /// Comma-separated lambda*mu CV grid (default 0.1,0.3,1,3).
    #[arg(long)]
    cv_grid: Option<String>,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    /// Critical-radius scale; default 5/n^0.4.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    u_bound: f64,
    /// Nystrom rank (clamped to n).
    #[arg(long, default_value_t = 100)]
    rank: usize,
    #[arg(long, value_enum, default_value = "kmeans")]
    centers: CenterKind,

    // sparse
    #[arg(long, default_value_t = 1.0)]
    b_bound: f64,
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 4000)]
    iters: usize,
    /// Mini-batch size; enables the stochastic variant.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Post-training truncation threshold for |theta_i|.
    #[arg(long)]
    shrink_threshold: Option<f64>,

    // shape
    #[arg(long, default_value = "monotone_inc")]
    shape: String,
    #[arg(long, default_value_t = 2.0)]
    lipschitz: f64,
    /// Adversary ell2 penalty of the shape estimator.
    #[arg(long, default_value_t = 1.0)]
    shape_lambda: f64,
    /// Value box override lo,hi (default: data range of y).
    #[arg(long)]
    range: Option<String>,

    // rfiv
    #[arg(long, default_value_t = 200)]
    rounds: usize,
    #[arg(long, default_value_t = 2)]
    max_depth: usize,
    #[arg(long, default_value_t = 40)]
    min_leaf: usize,
    /// Adversary forest size.
    #[arg(long, default_value_t = 40)]
    adversary_trees: usize,
    /// Learner forest size.
    #[arg(long, default_value_t = 5)]
    learner_trees: usize,

    // twosls
    #[arg(long, default_value_t = 3)]
    degree: u32,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV whose treatment rows are predicted.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with a single `prediction` column.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Preset grid: fig1-desk, fig2-desk or fig3-desk.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores); output is independent of this.
    #[arg(long)]
    jobs: Option<usize>,
    /// Fresh-draw test size per rep.
    #[arg(long)]
    n_test: Option<usize>,
    /// Override the preset's function list (comma-separated).
    #[arg(long)]
    functions: Option<String>,
}

/// Exit 0 ok, 2 config/input error, 3 estimator failure, 4 partial benchmark
/// failure.
fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // estimator failures exit 3, everything else is a config error
            let is_estimator = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<LibError>(),
                    Some(LibError::Estimator(_)) | Some(LibError::SingularMatrix(_))
                )
            });
            if is_estimator {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("MINIMAX_IV_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn cmd_generate(a: GenerateArgs) -> Result<ExitCode> {
    let cfg = DgpConfig {
        n: a.n,
        n_x: a.n_x,
        n_z: a.n_z,
        strength: a.gamma,
        fname: a.fname.clone(),
        seed: resolve_seed(a.seed),
    };
    let (data, _) = generate(&cfg)?;
    save_csv(&data, &a.out)?;
    println!(
        "wrote {} rows (p={}, q={}, fname={}) to {}",
        data.n(),
        data.p(),
        data.q(),
        a.fname,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| anyhow!("bad numeric entry {t:?}: {e}")))
        .collect()
}

fn kernel_config(kind: KernelKind, gamma: f64, degree: u32) -> KernelConfig {
    match kind {
        KernelKind::Rbf => KernelConfig::Rbf { gamma },
        KernelKind::Linear => KernelConfig::Linear,
        KernelKind::Polynomial => KernelConfig::Polynomial { degree },
    }
}

fn center_rule(kind: CenterKind) -> NystromRule {
    match kind {
        CenterKind::Kmeans => NystromRule::KMeans,
        CenterKind::Uniform => NystromRule::Uniform,
        CenterKind::Leading => NystromRule::Leading,
    }
}

fn fit_any(a: &FitArgs, data: &Dataset, seed: u64) -> Result<(AnyModel, String)> {
    let out = match a.estimator {
        EstimatorKind::Kernel | EstimatorKind::Nystrom => {
            let cfg_h = kernel_config(a.kernel, a.gamma_h, a.kernel_degree);
            let cfg_f = kernel_config(a.kernel, a.gamma_f, a.kernel_degree);
            let mut hp = HyperParams::default_for(data.n(), a.ridge.unwrap_or(0.0));
            hp.u_bound = a.u_bound;
            if let Some(d) = a.delta {
                hp.delta = d;
            }
            if a.ridge.is_none() {
                let grid = match &a.cv_grid {
                    Some(s) => parse_grid(s)?,
                    None => DEFAULT_PRODUCT_GRID.to_vec(),
                };
                let rank = (a.estimator == EstimatorKind::Nystrom).then_some(a.rank);
                let rule = center_rule(a.centers);
                let product =
                    tune_lambda_mu_with(data, cfg_f, &grid, a.cv_folds, seed, |train, hp| {
                        match rank {
                            None => {
                                fit_kernel_iv(train, cfg_h, cfg_f, hp).map(|m| Box::new(m) as _)
                            }
                            Some(r) => fit_nystrom_iv(
                                train,
                                cfg_h,
                                cfg_f,
                                r.min(train.n()),
                                rule,
                                hp,
                                derive_seed(seed, 0xF17),
                            )
                            .map(|m| Box::new(m) as _),
                        }
                    })?;
                hp = hp.with_lambda_mu_product(product);
            }
            if a.dump_config {
                println!(
                    "config: kernel_h={cfg_h:?} kernel_f={cfg_f:?} lambda={} mu={} delta={} U={} ridge={}",
                    fmt_f64(hp.lambda),
                    fmt_f64(hp.mu),
                    fmt_f64(hp.delta),
                    fmt_f64(hp.u_bound),
                    fmt_f64(hp.ridge()),
                );
            }
            if a.estimator == EstimatorKind::Kernel {
                let m = fit_kernel_iv(data, cfg_h, cfg_f, &hp)?;
                let report = format!(
                    "normal-equation relative residual: {}",
                    fmt_f64(m.normal_eq_residual())
                );
                (AnyModel::Kernel(m), report)
            } else {
                let m = fit_nystrom_iv(
                    data,
                    cfg_h,
                    cfg_f,
                    a.rank.min(data.n()),
                    center_rule(a.centers),
                    &hp,
                    derive_seed(seed, 1),
                )?;
                let report = format!("nystrom rank: {}", m.factor_h().rank());
                (AnyModel::Nystrom(m), report)
            }
        }
        EstimatorKind::SparseEll1 | EstimatorKind::SparseEll2 => {
            let norm = if a.estimator == EstimatorKind::SparseEll1 {
                AdversaryNorm::Ell1
            } else {
                AdversaryNorm::Ell2
            };
            let mut cfg = SaddleConfig::new(a.b_bound, a.u_bound, a.mu, a.iters, norm);
            cfg.eta = a.eta;
            cfg.batch_size = a.batch_size;
            cfg.shrink_threshold = a.shrink_threshold;
            if a.dump_config {
                println!("config: {cfg:?}");
            }
            let m = match (a.batch_size, norm) {
                (Some(_), _) => fit_sparse_stochastic(data, &cfg, seed)?,
                (None, AdversaryNorm::Ell1) => fit_sparse_ell1(data, &cfg)?,
                (None, AdversaryNorm::Ell2) => fit_sparse_ell2(data, &cfg)?,
            };
            let report = format!(
                "duality gap: {} after {} iterations ({} clipped exponents)",
                fmt_f64(m.gap()),
                m.iterations(),
                m.clipped_exponents()
            );
            (AnyModel::Sparse(m), report)
        }
        EstimatorKind::Shape => {
            let mut cfg = ShapeConfig::new(ShapeKind::parse(&a.shape)?, a.iters);
            cfg.lipschitz = a.lipschitz;
            cfg.lambda = a.shape_lambda;
            cfg.eta = a.eta;
            if let Some(r) = &a.range {
                let parts: Vec<f64> = parse_grid(r)?;
                if parts.len() != 2 {
                    bail!("--range needs exactly lo,hi");
                }
                cfg.range_bound = Some((parts[0], parts[1]));
            }
            if a.dump_config {
                println!("config: {cfg:?}");
            }
            let m = fit_shape_iv(data, &cfg)?;
            let report = format!(
                "best-response gap: {}{}",
                fmt_f64(m.best_response_gap()),
                if m.is_degenerate() { " (degenerate: zero iterations)" } else { "" }
            );
            (AnyModel::Shape(m), report)
        }
        EstimatorKind::Rfiv => {
            let adversary = TreeParams {
                max_depth: a.max_depth,
                min_leaf: a.min_leaf,
                n_trees: a.adversary_trees,
                ..TreeParams::adversary_default()
            };
            let learner = TreeParams {
                max_depth: a.max_depth,
                min_leaf: a.min_leaf,
                n_trees: a.learner_trees,
                ..TreeParams::learner_default()
            };
            if a.dump_config {
                println!("config: rounds={} adversary={adversary:?} learner={learner:?}", a.rounds);
            }
            let m = fit_rfiv(data, a.rounds, &adversary, &learner, seed)?;
            let gap = minimax_gap(&m, data, &adversary, &learner, derive_seed(seed, 2))?;
            let report = format!("minimax gap (scaled game): {}", fmt_f64(gap));
            (AnyModel::Rfiv(m), report)
        }
        EstimatorKind::Twosls => {
            if a.dump_config {
                println!("config: degree={}", a.degree);
            }
            let m = fit_2sls(data, a.degree)?;
            let report = format!("coefficients: {}", m.coef().len());
            (AnyModel::TwoSls(m), report)
        }
    };
    Ok(out)
}

fn cmd_fit(a: FitArgs) -> Result<ExitCode> {
    let data = load_csv(&a.data)?;
    let seed = resolve_seed(a.seed);
    let (model, report) = fit_any(&a, &data, seed)?;
    model_io::save_model(&model, &a.out)?;
    println!(
        "fit {} on n={} (p={}, q={}); {report}",
        model.kind(),
        data.n(),
        data.p(),
        data.q()
    );
    println!("model written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let model = model_io::load_model(&a.model)?;
    let data = load_csv(&a.data)?;
    if model.as_model().input_dim() != data.p() {
        bail!(
            "model expects p={} treatments, dataset has p={}",
            model.as_model().input_dim(),
            data.p()
        );
    }
    let preds = model.as_model().predict_batch(data.x());
    let mut out = String::from("prediction\n");
    for v in preds.iter() {
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    std::fs::write(&a.out, out)
        .with_context(|| format!("cannot write predictions to {}", a.out.display()))?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<ExitCode> {
    let mut spec: BenchSpec = bench::preset(&a.preset, a.reps)?;
    if let Some(n_test) = a.n_test {
        spec.n_test = n_test;
    }
    if let Some(funcs) = &a.functions {
        spec.functions = funcs.split(',').map(|s| s.trim().to_string()).collect();
    }
    spec.validate()?;
    let seed = resolve_seed(a.seed);

    let run = || bench::run_benchmark(&spec, seed);
    let result = match a.jobs {
        None => run()?,
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .context("cannot build thread pool")?;
            pool.install(run)?
        }
    };

    std::fs::write(&a.out, result.to_csv())
        .with_context(|| format!("cannot write results to {}", a.out.display()))?;

    let manifest_path = a.out.with_extension("manifest.txt");
    let manifest = format!(
        "minimax-iv benchmark manifest\nversion: {}\npreset: {}\nreps: {}\nseed: {}\nn_test: {}\njobs: {}\nfunctions: {}\nestimators: {}\n",
        env!("CARGO_PKG_VERSION"),
        a.preset,
        spec.reps,
        seed,
        spec.n_test,
        a.jobs.map_or("auto".to_string(), |j| j.to_string()),
        spec.functions.join(","),
        spec.estimators.iter().map(EstimatorSpec::name).collect::<Vec<_>>().join(","),
    );
    std::fs::write(&manifest_path, manifest)?;

    for c in &result.cells {
        println!(
            "{:12} {:12} mse={} +/-{} failures={}/{} ({:.1}s)",
            c.function,
            c.estimator,
            fmt_f64(c.mean_mse),
            fmt_f64(c.half_width),
            c.failures,
            c.reps,
            c.seconds
        );
    }
    println!("results written to {} (manifest alongside)", a.out.display());
    if result.any_failures() {
        eprintln!("warning: some replications failed");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}
