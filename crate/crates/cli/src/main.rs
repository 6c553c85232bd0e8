//! `hcn`: synthesize data, train, evaluate, ablate, check gradients and score labelings.
//!
//! Exit status is 0 on success, 1 for invalid input (arguments, config,
//! data files) and 2 for runtime or numeric failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hcn_core::checkpoint::load_checkpoint_for;
use hcn_core::consensus::CodingMode;
use hcn_core::data::{dense_labels, load_dataset, make_synthetic, read_labels_csv, write_dataset, MatrixFormat, MultiviewDataset};
use hcn_core::eval::{accuracy, ari, evaluate, evaluate_raw, mean_std, nmi, nmi_with, ClusteringReport, NmiNorm};
use hcn_core::gradcheck::{check_term, LossTerm, TinySetup};
use hcn_core::nn::Activation;
use hcn_core::trainer::{preset_config, train, TrainingConfig};
use hcn_core::HcnError;

#[derive(Parser)]
#[command(name = "hcn", version, about = "Hierarchical consensus network for multiview clustering")]
struct Cli {
    /// Worker threads for k-means restarts; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multiview dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint, the loss history and the resolved config.
    Train(TrainArgs),
    /// Cluster the fused latent features of a trained model over several seeds.
    Eval(EvalArgs),
    /// Train and evaluate the full objective and each single-term ablation.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
    /// Score a predicted labeling against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    clusters: usize,
    /// Comma-separated view widths.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodingArg {
    WeakToStrong,
    CrossView,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

/// Config sources and per-field overrides; overrides win.
#[derive(Args)]
struct ConfigArgs {
    /// TOML training config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Published setting: caltech101-20, scene-15, landuse-21 or noisy-mnist.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    d_out: Option<usize>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, value_enum)]
    coding_mode: Option<CodingArg>,
    /// Use the raw trace in the global term instead of cosine alignment.
    #[arg(long)]
    raw_global: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainingConfig, HcnError> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => TrainingConfig::from_file(path)?,
            (None, Some(name)) => preset_config(name)?,
            (None, None) => TrainingConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            epochs => c.epochs,
            batch_size => c.batch_size,
            lr => c.adam.lr,
            beta1 => c.adam.beta1,
            beta2 => c.adam.beta2,
            seed => c.seed,
            rho => c.rho,
            d_out => c.architecture.d_out,
            hidden => c.architecture.hidden,
            alpha => c.weights.alpha,
            beta => c.weights.beta,
            gamma => c.weights.gamma,
            lambda1 => c.weights.lambda1,
            lambda2 => c.weights.lambda2,
        }
        if let Some(a) = self.activation {
            c.architecture.activation = match a {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Tanh => Activation::Tanh,
            };
        }
        if let Some(m) = self.coding_mode {
            c.coding_mode = match m {
                CodingArg::WeakToStrong => CodingMode::WeakToStrong,
                CodingArg::CrossView => CodingMode::CrossView,
            };
        }
        if self.raw_global {
            c.normalize_global = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NmiArg {
    Geometric,
    Arithmetic,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of k-means seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Also cluster the concatenated input features.
    #[arg(long)]
    raw_baseline: bool,
    #[arg(long, value_enum, default_value = "geometric")]
    nmi: NmiArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of training seeds, starting at the config seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Term to check; every term when omitted.
    #[arg(long)]
    term: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Negates the analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    inject_wrong_sign: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<HcnError> for Failure {
    fn from(e: HcnError) -> Self {
        match e {
            HcnError::NonFiniteLoss { .. } | HcnError::NonFinite(_) | HcnError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let ds = make_synthetic(a.n, a.clusters, &a.dims, a.sigma, a.seed)?;
    let format = match a.format {
        FormatArg::Csv => MatrixFormat::Csv,
        FormatArg::Binary => MatrixFormat::Binary,
    };
    let manifest = write_dataset(&ds, &a.out, format)?;
    println!("wrote {} samples, views {:?} -> {}", ds.n_samples(), ds.view_dims(), manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let config = a.config.resolve()?;
    let ds = load_dataset(&a.data)?;
    mkdir(&a.out)?;
    write(&a.out.join("config.toml"), &config.to_toml())?;
    let ckpt = a.out.join("model.ckpt");
    let (_, history) = train(&ds, &config, Some(&ckpt))?;
    history.write_csv(&a.out.join("history.csv"))?;
    let totals = history.epoch_mean_totals();
    let seconds: f64 = history.epoch_seconds.iter().sum();
    println!(
        "trained {} epochs ({} steps) in {seconds:.1}s; mean loss first epoch {:.4}, last epoch {:.4}",
        config.epochs,
        history.steps.len(),
        totals[0],
        totals[totals.len() - 1]
    );
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn summary_rows(dataset: &str, reports: &[ClusteringReport]) -> String {
    let col = |f: fn(&ClusteringReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let (acc, nmi, ari, inertia) = (col(|r| r.acc), col(|r| r.nmi), col(|r| r.ari), col(|r| r.inertia));
    let (m, s): (Vec<f64>, Vec<f64>) = [&acc, &nmi, &ari, &inertia].iter().map(|v| mean_std(v)).unzip();
    let best = reports.iter().reduce(|a, b| if b.acc > a.acc { b } else { a }).unwrap();
    format!(
        "{dataset},mean,{},{},{},{}\n{dataset},std,{},{},{},{}\n{}\n",
        m[0],
        m[1],
        m[2],
        m[3],
        s[0],
        s[1],
        s[2],
        s[3],
        best.csv_row().replacen(&format!(",{},", best.seed), &format!(",best:{},", best.seed), 1)
    )
}

fn run_seeds(
    ds: &MultiviewDataset,
    seeds: impl Iterator<Item = u64>,
    norm: NmiNorm,
    mut score: impl FnMut(u64) -> Result<ClusteringReport, HcnError>,
) -> Result<Vec<ClusteringReport>, HcnError> {
    let truth = ds.labels().ok_or_else(|| HcnError::MissingLabels(ds.name.clone()))?;
    seeds
        .map(|s| {
            let mut r = score(s)?;
            if norm == NmiNorm::Arithmetic {
                r.nmi = nmi_with(&r.labels, truth, norm)?;
            }
            Ok(r)
        })
        .collect()
}

fn write_reports(dir: &Path, stem: &str, dataset: &str, reports: &[ClusteringReport]) -> CmdResult {
    let mut csv = format!("{}\n", ClusteringReport::CSV_HEADER);
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        write(&dir.join(format!("{stem}_seed{}.json", r.seed)), &r.to_json())?;
    }
    csv.push_str(&summary_rows(dataset, reports));
    write(&dir.join(format!("{stem}.csv")), &csv)?;
    let (acc, acc_sd) = mean_std(&reports.iter().map(|r| r.acc).collect::<Vec<_>>());
    let (nmi, nmi_sd) = mean_std(&reports.iter().map(|r| r.nmi).collect::<Vec<_>>());
    let (ari, ari_sd) = mean_std(&reports.iter().map(|r| r.ari).collect::<Vec<_>>());
    println!("{stem}: acc {acc:.4} ± {acc_sd:.4}  nmi {nmi:.4} ± {nmi_sd:.4}  ari {ari:.4} ± {ari_sd:.4}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(Failure::Invalid("--seeds must be at least 1".into()));
    }
    let ds = load_dataset(&a.data)?;
    if ds.labels().is_none() {
        return Err(HcnError::MissingLabels(ds.name.clone()).into());
    }
    let model = load_checkpoint_for(&a.checkpoint, &ds.view_dims())?;
    let norm = match a.nmi {
        NmiArg::Geometric => NmiNorm::Geometric,
        NmiArg::Arithmetic => NmiNorm::Arithmetic,
    };
    mkdir(&a.out)?;
    let seeds = a.seed..a.seed + a.seeds;
    let reports = run_seeds(&ds, seeds.clone(), norm, |s| evaluate(&model, &ds, a.restarts, s))?;
    write_reports(&a.out, "eval", &ds.name, &reports)?;
    if a.raw_baseline {
        let raw = run_seeds(&ds, seeds, norm, |s| evaluate_raw(&ds, a.restarts, s))?;
        write_reports(&a.out, "raw_eval", &ds.name, &raw)?;
    }
    Ok(())
}

const VARIANTS: [&str; 6] = ["full", "no-rec", "no-cls", "no-glb", "no-code", "no-da"];

fn variant(base: &TrainingConfig, name: &str) -> TrainingConfig {
    let mut c = base.clone();
    match name {
        "no-rec" => c.reconstruction = false,
        "no-cls" => {
            c.weights.alpha = 0.0;
            c.weights.beta = 0.0;
            c.weights.gamma = 0.0;
        }
        "no-glb" => c.weights.lambda2 = 0.0,
        "no-code" => c.weights.lambda1 = 0.0,
        "no-da" => c.rho = 0.0,
        _ => {}
    }
    c
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(Failure::Invalid("--seeds must be at least 1".into()));
    }
    let base = a.config.resolve()?;
    let ds = load_dataset(&a.data)?;
    if ds.labels().is_none() {
        return Err(HcnError::MissingLabels(ds.name.clone()).into());
    }
    mkdir(&a.out)?;
    let mut rows = String::from("variant,seed,acc,nmi,ari\n");
    let mut summary = String::from("variant,acc_mean,acc_std,nmi_mean,nmi_std,ari_mean,ari_std\n");
    println!("{:<8} {:>8} {:>8} {:>8}", "variant", "acc", "nmi", "ari");
    for name in VARIANTS {
        let mut scores = Vec::new();
        for seed in base.seed..base.seed + a.seeds {
            let c = TrainingConfig { seed, ..variant(&base, name) };
            let (model, _) = train(&ds, &c, None)?;
            let r = evaluate(&model, &ds, a.restarts, seed)?;
            rows.push_str(&format!("{name},{seed},{},{},{}\n", r.acc, r.nmi, r.ari));
            scores.push(r);
        }
        let stat = |f: fn(&ClusteringReport) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>());
        let (acc, nmi, ari) = (stat(|r| r.acc), stat(|r| r.nmi), stat(|r| r.ari));
        summary.push_str(&format!("{name},{},{},{},{},{},{}\n", acc.0, acc.1, nmi.0, nmi.1, ari.0, ari.1));
        println!("{name:<8} {:>8.4} {:>8.4} {:>8.4}", acc.0, nmi.0, ari.0);
    }
    write(&a.out.join("ablation.csv"), &rows)?;
    write(&a.out.join("ablation_summary.csv"), &summary)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let terms = match &a.term {
        Some(t) => vec![t.parse::<LossTerm>()?],
        None => LossTerm::ALL.to_vec(),
    };
    if a.views < 2 {
        return Err(HcnError::TooFewViews(a.views).into());
    }
    let setup = TinySetup {
        view_dims: (0..a.views).map(|v| 5 + 2 * v).collect(),
        ..TinySetup::default()
    };
    let mut failed = Vec::new();
    for term in terms {
        let report = check_term(term, &setup, a.seed, a.inject_wrong_sign)?;
        let status = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {term:<16} coords {:>4}  max rel error {:.2e}",
            report.checked, report.max_rel_error
        );
        if !report.passed() {
            failed.push(term.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn read_label_file(path: &Path) -> Result<Vec<usize>, HcnError> {
    if !path.exists() {
        return Err(HcnError::MissingFile {
            what: "labels".into(),
            path: path.to_path_buf(),
        });
    }
    Ok(dense_labels(&read_labels_csv(path)?))
}

fn cmd_metrics(a: &MetricsArgs) -> CmdResult {
    let pred = read_label_file(&a.pred)?;
    let truth = read_label_file(&a.truth)?;
    if pred.len() != truth.len() {
        return Err(Failure::Invalid(format!(
            "{} predicted labels but {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    println!("acc {}", accuracy(&pred, &truth)?);
    println!("nmi {}", nmi(&pred, &truth)?);
    println!("ari {}", ari(&pred, &truth)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
