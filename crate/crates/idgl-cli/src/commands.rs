//! Subcommand implementations. Every command prints one machine-readable
//! record per line; timing fields are the only non-reproducible bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;

use idgl_core::data_io::{load_named_with_split, resolve_data_dir, GraphDataset, SplitSpec};
use idgl_core::gradcheck;
use idgl_core::graph_construction::{perturb_edges, PerturbMode};
use idgl_core::linalg::{alloc_high_water, reset_alloc_high_water};
use idgl_core::trainer::{
    evaluate, fit, forward_idgl, forward_idgl_anch, lift_params, FitReport, HyperParams,
    IdglParams, Mode, RunContext, Variant,
};

use crate::config::{self, Overrides};

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum VariantArg {
    Idgl,
    IdglAnch,
}

impl VariantArg {
    fn to_core(self) -> Variant {
        match self {
            VariantArg::Idgl => Variant::Idgl,
            VariantArg::IdglAnch => Variant::IdglAnch,
        }
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Idgl => "idgl",
        Variant::IdglAnch => "idgl-anch",
    }
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Dataset name: cora, citeseer, pubmed, wine, cancer, digits.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Comma-separated run seeds, e.g. 1,2,3.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Directory with prepared dataset files; defaults to $IDGL_DATA_DIR or ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Write record and epoch logs here in addition to stdout.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// key=value file applied between dataset presets and flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Similarity threshold for sparsification.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Number of metric heads.
    #[arg(long)]
    pub m: Option<usize>,
    /// Relative stopping threshold for the refinement loop.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Iteration cap for the refinement loop.
    #[arg(long)]
    pub t_max: Option<usize>,
    /// kNN fanout for datasets without an input graph.
    #[arg(long)]
    pub k: Option<usize>,
    /// Anchor count for the idgl-anch variant.
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub iter_dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Override the preset number of training nodes.
    #[arg(long)]
    pub split_train: Option<usize>,
    #[arg(long)]
    pub split_dev: Option<usize>,
    #[arg(long)]
    pub split_test: Option<usize>,
    /// Disable all graph regularization terms.
    #[arg(long)]
    pub no_reg: bool,
}

impl CommonArgs {
    fn to_overrides(&self) -> anyhow::Result<Overrides> {
        let seeds = match &self.seeds {
            Some(s) => Some(config::parse_seed_list(s)?),
            None => None,
        };
        Ok(Overrides {
            dataset: self.dataset.clone(),
            variant: self.variant.map(VariantArg::to_core),
            seeds,
            data_dir: self.data_dir.clone(),
            lambda: self.lambda,
            eta: self.eta,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            eps: self.eps,
            m: self.m,
            delta: self.delta,
            t_max: self.t_max,
            k: self.k,
            anchors: self.anchors,
            hidden: self.hidden,
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            iter_dropout: self.iter_dropout,
            epochs: self.epochs,
            patience: self.patience,
            split_train: self.split_train,
            split_dev: self.split_dev,
            split_test: self.split_test,
            no_reg: self.no_reg,
        })
    }
}

struct Prepared {
    overrides: Overrides,
    dataset: String,
    variant: Variant,
    seeds: Vec<u64>,
    data_dir: PathBuf,
    out_dir: Option<PathBuf>,
}

fn prepare(common: &CommonArgs) -> anyhow::Result<Prepared> {
    let flag_overrides = common.to_overrides()?;
    let overrides = match &common.config {
        Some(path) => config::merge(flag_overrides, config::parse_config(path)?),
        None => flag_overrides,
    };
    let dataset = overrides
        .dataset
        .clone()
        .context("a dataset is required (--dataset or a config entry)")?;
    let variant = overrides.variant.unwrap_or(Variant::Idgl);
    let seeds = overrides.seeds.clone().unwrap_or_else(|| vec![42]);
    let data_dir = resolve_data_dir(overrides.data_dir.as_deref());
    Ok(Prepared {
        overrides,
        dataset,
        variant,
        seeds,
        data_dir,
        out_dir: common.out_dir.clone(),
    })
}

fn load_run_dataset(
    p: &Prepared,
    seed: u64,
    perturb: Option<(PerturbMode, f64)>,
) -> anyhow::Result<(GraphDataset, SplitSpec)> {
    let split = config::assemble_split(&p.overrides, &p.dataset, seed)?;
    let mut ds = load_named_with_split(&p.dataset, &p.data_dir, &split)?;
    if let Some((mode, prob)) = perturb {
        let a0 = ds.a0.take().with_context(|| {
            format!("dataset {} has no input graph to attack", p.dataset)
        })?;
        ds.a0 = Some(perturb_edges(&a0, prob, mode, seed)?);
    }
    Ok((ds, split))
}

fn run_one_seed(
    p: &Prepared,
    seed: u64,
    perturb: Option<(PerturbMode, f64)>,
) -> anyhow::Result<FitReport> {
    let (ds, _) = load_run_dataset(p, seed, perturb)?;
    let hp = config::assemble_hyperparams(&p.overrides, p.variant, seed);
    Ok(fit(&ds, &hp, p.variant)?)
}

/// Seeds are independent runs; under the parallel feature they execute
/// concurrently but reports are always emitted in seed order.
fn run_seeds(
    p: &Prepared,
    perturb: Option<(PerturbMode, f64)>,
) -> anyhow::Result<Vec<(u64, FitReport)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        p.seeds
            .par_iter()
            .map(|&seed| Ok((seed, run_one_seed(p, seed, perturb)?)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        p.seeds
            .iter()
            .map(|&seed| Ok((seed, run_one_seed(p, seed, perturb)?)))
            .collect()
    }
}

fn run_line(p: &Prepared, seed: u64, rep: &FitReport, attack: Option<(&str, f64)>) -> String {
    let tag = match attack {
        Some((mode, prob)) => format!(" mode={mode} prob={prob}"),
        None => String::new(),
    };
    format!(
        "run dataset={} variant={}{tag} seed={seed} epochs_run={} best_epoch={} best_dev_acc={} test_acc={} iterations={} wall_secs={:.3}",
        p.dataset,
        variant_name(p.variant),
        rep.epochs.len(),
        rep.best_epoch,
        rep.best_dev_acc,
        rep.test_acc,
        rep.final_trace.iterations_run,
        rep.wall_secs,
    )
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn metrics_line(p: &Prepared, runs: &[(u64, FitReport)], attack: Option<(&str, f64)>) -> String {
    let accs: Vec<f64> = runs.iter().map(|(_, r)| r.test_acc).collect();
    let (mean, std) = mean_std(&accs);
    let tag = match attack {
        Some((mode, prob)) => format!(" mode={mode} prob={prob}"),
        None => String::new(),
    };
    let std_tag = match std {
        Some(s) => format!(" std_test_acc={s}"),
        None => String::new(),
    };
    format!(
        "metrics dataset={} variant={}{tag} n_seeds={} mean_test_acc={mean}{std_tag}",
        p.dataset,
        variant_name(p.variant),
        runs.len(),
    )
}

fn emit(lines: &[String]) {
    for line in lines {
        println!("{line}");
    }
}

fn write_lines(path: &Path, lines: &[String]) -> anyhow::Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_epoch_logs(
    p: &Prepared,
    runs: &[(u64, FitReport)],
    attack: Option<(&str, f64)>,
) -> anyhow::Result<()> {
    let Some(dir) = &p.out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (seed, rep) in runs {
        let tag = match attack {
            Some((mode, prob)) => format!("_{mode}_{prob}"),
            None => String::new(),
        };
        let name = format!(
            "epochs_{}_{}{tag}_seed{seed}.log",
            p.dataset,
            variant_name(p.variant)
        );
        let mut lines: Vec<String> = rep.epochs.iter().map(|e| e.to_line()).collect();
        lines.push(rep.summary_line());
        write_lines(&dir.join(name), &lines)?;
    }
    Ok(())
}

fn write_records(p: &Prepared, stem: &str, lines: &[String]) -> anyhow::Result<()> {
    let Some(dir) = &p.out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_lines(&dir.join(format!("{stem}_records.log")), lines)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let p = prepare(&args.common)?;
    let runs = run_seeds(&p, None)?;
    let mut lines: Vec<String> =
        runs.iter().map(|(seed, rep)| run_line(&p, *seed, rep, None)).collect();
    lines.push(metrics_line(&p, &runs, None));
    emit(&lines);
    write_records(&p, "train", &lines)?;
    write_epoch_logs(&p, &runs, None)?;
    Ok(())
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum AttackModeArg {
    Delete,
    Add,
}

impl AttackModeArg {
    fn to_core(self) -> PerturbMode {
        match self {
            AttackModeArg::Delete => PerturbMode::Delete,
            AttackModeArg::Add => PerturbMode::Add,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AttackModeArg::Delete => "delete",
            AttackModeArg::Add => "add",
        }
    }
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Whether to randomly delete existing edges or insert absent ones.
    #[arg(long, value_enum)]
    pub attack_mode: AttackModeArg,
    /// Comma-separated perturbation rates in [0,1].
    #[arg(long, default_value = "0.25,0.5,0.75")]
    pub attack_probs: String,
}

pub fn cmd_attack(args: AttackArgs) -> anyhow::Result<()> {
    let p = prepare(&args.common)?;
    let probs = config::parse_f64_list(&args.attack_probs)?;
    if probs.is_empty() {
        bail!("no attack probabilities given");
    }
    for &prob in &probs {
        if !(0.0..=1.0).contains(&prob) {
            bail!("attack probability {prob} out of [0,1]");
        }
    }
    let mode = args.attack_mode.to_core();
    let mode_name = args.attack_mode.name();
    let mut lines = Vec::new();
    let mut all_runs = Vec::new();
    for &prob in &probs {
        let runs = run_seeds(&p, Some((mode, prob)))?;
        for (seed, rep) in &runs {
            lines.push(run_line(&p, *seed, rep, Some((mode_name, prob))));
        }
        lines.push(metrics_line(&p, &runs, Some((mode_name, prob))));
        all_runs.push((prob, runs));
    }
    emit(&lines);
    write_records(&p, "attack", &lines)?;
    for (prob, runs) in &all_runs {
        write_epoch_logs(&p, runs, Some((mode_name, *prob)))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Trains per seed, then reports the per-iteration graph deltas of the final
/// inference pass and a sweep where the iteration count is pinned, for
/// comparing dynamic stopping against fixed budgets.
pub fn cmd_trace(args: TraceArgs) -> anyhow::Result<()> {
    let p = prepare(&args.common)?;
    let mut lines = Vec::new();
    for &seed in &p.seeds {
        let (ds, _) = load_run_dataset(&p, seed, None)?;
        let hp = config::assemble_hyperparams(&p.overrides, p.variant, seed);
        let rep = fit(&ds, &hp, p.variant)?;
        for (i, delta) in rep.final_trace.deltas.iter().enumerate() {
            lines.push(format!(
                "trace dataset={} variant={} seed={seed} t={} delta={delta}",
                p.dataset,
                variant_name(p.variant),
                i + 2,
            ));
        }
        lines.push(format!(
            "dynamic dataset={} variant={} seed={seed} iterations={} test_acc={}",
            p.dataset,
            variant_name(p.variant),
            rep.final_trace.iterations_run,
            rep.test_acc,
        ));
        for t_fix in 1..=hp.t_max {
            let fixed_hp = HyperParams { t_max: t_fix, delta: 0.0, ..hp.clone() };
            let (acc, _) = evaluate(&rep.params, &ds, &fixed_hp, p.variant)?;
            lines.push(format!(
                "fixed dataset={} variant={} seed={seed} iterations={t_fix} test_acc={acc}",
                p.dataset,
                variant_name(p.variant),
            ));
        }
    }
    emit(&lines);
    write_records(&p, "trace", &lines)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated seeds for the randomized test cases.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let seeds = config::parse_seed_list(&args.seeds)?;
    let mut all_passed = true;
    for report in gradcheck::op_suite_multi(seeds.iter().copied())? {
        all_passed &= report.passed();
        println!("{report}");
    }
    for &seed in &seeds {
        for variant in [Variant::Idgl, Variant::IdglAnch] {
            let report = gradcheck::end_to_end(variant, seed)?;
            all_passed &= report.passed();
            println!("{report}");
        }
    }
    if !all_passed {
        bail!("gradient checks failed");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated node counts.
    #[arg(long, default_value = "500,1000,2000,4000")]
    pub sizes: String,
    #[arg(long, default_value_t = 100)]
    pub anchors: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Timing repetitions; the minimum is kept.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Refinement iterations per timed forward pass.
    #[arg(long, default_value_t = 1)]
    pub t_max: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn bench_dataset(n: usize, d: usize, seed: u64) -> anyhow::Result<GraphDataset> {
    use idgl_core::data_io::synth_transductive;
    let split = SplitSpec { train: 10, dev: 10, test: None, seed };
    let p_in = (10.0 / n as f64).min(1.0);
    let p_out = (1.0 / n as f64).min(1.0);
    Ok(synth_transductive(n, d, 2, p_in, p_out, 1.0, seed, &split)?)
}

fn bench_hp(args: &BenchArgs) -> HyperParams {
    HyperParams {
        lambda_: 0.5,
        eta: 0.5,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        eps: 0.0,
        m: 1,
        delta: 0.0,
        t_max: args.t_max,
        k: None,
        s: args.anchors,
        hidden: 16,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed: args.seed,
        ..HyperParams::default()
    }
}

/// Seconds per forward pass, minimized over `reps`, with enough inner
/// repetitions that small problems are not dominated by fixed overheads.
fn time_forward(
    ds: &GraphDataset,
    ctx: &RunContext,
    params: &IdglParams,
    hp: &HyperParams,
    variant: Variant,
    reps: usize,
    inner: usize,
) -> anyhow::Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        for _ in 0..inner {
            let mut tape = idgl_core::autodiff::Tape::new();
            let vars = lift_params(&mut tape, params)?;
            let mut rng = rand_stub();
            match variant {
                Variant::Idgl => {
                    forward_idgl(&mut tape, &vars, ds, ctx, hp, Mode::Eval, &mut rng)?
                }
                Variant::IdglAnch => {
                    forward_idgl_anch(&mut tape, &vars, ds, ctx, hp, Mode::Eval, &mut rng)?
                }
            };
        }
        best = best.min(start.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(best)
}

// Eval-mode forwards never draw from the rng; any fixed-state generator does.
fn rand_stub() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let cov = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let var = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    cov / var
}

pub fn cmd_bench_scaling(args: BenchArgs) -> anyhow::Result<()> {
    let sizes = config::parse_usize_list(&args.sizes)?;
    if sizes.len() < 2 {
        bail!("need at least two sizes to fit a slope");
    }
    let hp = bench_hp(&args);
    let mut lines = Vec::new();
    let mut csv = vec!["n,variant,secs_per_forward".to_string()];
    let mut dense_pts = Vec::new();
    let mut anch_pts = Vec::new();
    const TARGET_CELLS: f64 = 3.2e7;

    for &n in &sizes {
        if args.anchors == 0 || args.anchors > n {
            bail!("anchor count {} out of 1..={n}", args.anchors);
        }
        let ds = bench_dataset(n, args.dim, args.seed)?;
        let params = IdglParams::init(args.dim, hp.hidden, ds.n_classes, hp.m, args.seed)?;

        let ctx_d = RunContext::build(&ds, &hp, Variant::Idgl)?;
        let inner = ((TARGET_CELLS / (n as f64 * n as f64)) as usize).max(1);
        let secs = time_forward(&ds, &ctx_d, &params, &hp, Variant::Idgl, args.reps, inner)?;
        lines.push(format!("bench n={n} variant=idgl secs_per_forward={secs:.6}"));
        csv.push(format!("{n},idgl,{secs:.6}"));
        dense_pts.push(((n as f64).ln(), secs.ln()));

        let ctx_a = RunContext::build(&ds, &hp, Variant::IdglAnch)?;
        let inner = ((TARGET_CELLS / (n as f64 * args.anchors as f64)) as usize).clamp(1, 64);
        reset_alloc_high_water();
        let secs =
            time_forward(&ds, &ctx_a, &params, &hp, Variant::IdglAnch, args.reps, inner)?;
        let peak = alloc_high_water();
        if peak >= n * n {
            bail!("anchor pipeline allocated an n x n intermediate ({peak} cells at n={n})");
        }
        lines.push(format!(
            "bench n={n} variant=idgl-anch secs_per_forward={secs:.6} peak_alloc_cells={peak}"
        ));
        csv.push(format!("{n},idgl-anch,{secs:.6}"));
        anch_pts.push(((n as f64).ln(), secs.ln()));
    }

    lines.push(format!("slope variant=idgl value={:.3} expected=2.0", fit_slope(&dense_pts)));
    lines.push(format!(
        "slope variant=idgl-anch value={:.3} expected=1.0",
        fit_slope(&anch_pts)
    ));
    emit(&lines);
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_lines(&dir.join("scaling.csv"), &csv)?;
        write_lines(&dir.join("bench_records.log"), &lines)?;
    }
    Ok(())
}
