//! Command-line front end: train models, run them against benchmark
//! functions, compare with baselines at equal evaluation budgets, drive the
//! planar-arm task, and dump kernels for inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use decn_core::baselines::{de_rand_1_bin, random_search, DeConfig};
use decn_core::evolution::decn_run;
use decn_core::functions::{
    arm_dataset, make_dataset, sample_arm_target, sample_shift, ArmCase, Fidelity, FunctionId,
    ObjectiveInstance,
};
use decn_core::population::PopulationGrid;
use decn_core::rng::substream;
use decn_core::training::{train, ModelConfig, TrainConfig};
use decn_core::{DecnModel, RunRecord};

#[derive(Parser)]
#[command(
    name = "decn",
    about = "Learned evolutionary optimization: train and run convolutional evolution stacks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a surrogate function suite and save it as JSON.
    Train(TrainArgs),
    /// Optimize freshly shifted instances of a benchmark function with a
    /// trained model, writing one convergence CSV per repeat.
    Run(RunArgs),
    /// Compare a model against DE and random search at one shared budget.
    Compare(CompareArgs),
    /// Train and evaluate on the planar mechanical arm task.
    Arm(ArmArgs),
    /// Export every convolution kernel of a model as CSV matrices.
    DumpKernels(DumpKernelsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Model/hyperparameter preset: ws3, ws30, nws15, or custom.
    #[arg(long, default_value = "ws3")]
    preset: String,
    /// Training suite: high:<F1..F9>, low, low:<F4..F9>, arm-sc, or arm-cc.
    #[arg(long)]
    suite: String,
    /// Problem dimension (ignored for arm suites, which derive it).
    #[arg(long)]
    dim: Option<usize>,
    /// Population lattice side L.
    #[arg(long, visible_alias = "L")]
    side: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch populations per function per epoch (K).
    #[arg(long)]
    minibatch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Number of surrogate instances in the training set.
    #[arg(long, default_value_t = 3)]
    functions: usize,
    /// Stack depth (custom preset only).
    #[arg(long)]
    depth: Option<usize>,
    /// Share one parameter block across all steps (custom preset only).
    #[arg(long)]
    share_weights: Option<bool>,
    /// Arm suites: number of segments.
    #[arg(long, default_value_t = 10)]
    segments: usize,
    /// Arm suites: target sampling radius.
    #[arg(long, default_value_t = 100.0)]
    radius: f64,
    /// Arm suites: number of training targets.
    #[arg(long, default_value_t = 64)]
    targets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model path.
    #[arg(short, long)]
    output: PathBuf,
    /// Training log CSV path (defaults to the model path with `_log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Trained model JSON.
    #[arg(short, long)]
    model: PathBuf,
    /// Benchmark function id (F1..F9).
    #[arg(long)]
    function: String,
    #[arg(long)]
    dim: usize,
    /// Population lattice side L.
    #[arg(long, visible_alias = "L", default_value_t = 10)]
    side: usize,
    /// Independent repeats, each on a freshly shifted instance.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Override the stack depth (weight-shared models only).
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for per-repeat CSVs and the summary JSON.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(long)]
    function: String,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    side: usize,
    /// Shared evaluation budget for every algorithm.
    #[arg(long, default_value_t = 400)]
    budget: u64,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 100)]
    de_pop: usize,
    #[arg(long, default_value_t = 0.5)]
    de_weight: f64,
    #[arg(long, default_value_t = 0.9)]
    de_crossover: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ArmArgs {
    /// sc (fixed segment lengths) or cc (lengths and angles).
    #[arg(long)]
    case: String,
    /// Number of arm segments.
    #[arg(long, default_value_t = 10)]
    segments: usize,
    /// Target sampling radius.
    #[arg(long, default_value_t = 100.0)]
    radius: f64,
    /// Training targets in the dataset.
    #[arg(long, default_value_t = 64)]
    targets: usize,
    /// Held-out targets to evaluate on.
    #[arg(long, default_value_t = 16)]
    test_targets: usize,
    /// Evaluation budget per held-out target.
    #[arg(long, default_value_t = 400)]
    fe: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    minibatch: usize,
    /// Population lattice side L.
    #[arg(long, visible_alias = "L", default_value_t = 10)]
    side: usize,
    /// Load this model instead of training one.
    #[arg(short, long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct DumpKernelsArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Arm(args) => cmd_arm(args),
        Command::DumpKernels(args) => cmd_dump_kernels(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric = err
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(decn_core::Error::NonFinite(_))));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

/// Writes through a temp file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_record_csv(path: &Path, record: &RunRecord) -> Result<()> {
    write_atomic(path, record.to_csv_string().as_bytes())
}

struct Preset {
    model: ModelConfig,
    cfg: TrainConfig,
}

fn preset(name: &str, seed: u64) -> Result<Preset> {
    // Defaults per configuration: lattice 10x10, K populations per function,
    // gradient 2-norm clipped to 10, lr shrinking by 0.9 every 100 epochs,
    // parameters resampled every 10 epochs.
    let mut cfg = TrainConfig::new(10, 2, seed);
    let model = match name {
        "ws3" => {
            cfg.lr = 5e-4;
            cfg.minibatch = 32;
            cfg.epochs = 5000;
            ModelConfig::ws3()
        }
        "ws30" => {
            cfg.lr = 0.01;
            cfg.minibatch = 32;
            cfg.epochs = 10000;
            cfg.dim = 10;
            ModelConfig::ws30()
        }
        "nws15" => {
            cfg.lr = 5e-4;
            cfg.minibatch = 16;
            cfg.epochs = 2000;
            cfg.dim = 30;
            ModelConfig::nws15()
        }
        "custom" => ModelConfig::ws3(),
        other => bail!("unknown preset '{other}' (expected ws3, ws30, nws15, or custom)"),
    };
    Ok(Preset { model, cfg })
}

enum Suite {
    Shifted { fidelity: Fidelity, target: FunctionId },
    Arm { case: ArmCase },
}

fn parse_suite(s: &str) -> Result<Suite> {
    if s == "arm-sc" {
        return Ok(Suite::Arm { case: ArmCase::Sc });
    }
    if s == "arm-cc" {
        return Ok(Suite::Arm { case: ArmCase::Cc });
    }
    if s == "low" {
        return Ok(Suite::Shifted {
            fidelity: Fidelity::Low,
            target: FunctionId::F4,
        });
    }
    if let Some(rest) = s.strip_prefix("low:") {
        return Ok(Suite::Shifted {
            fidelity: Fidelity::Low,
            target: rest.parse()?,
        });
    }
    if let Some(rest) = s.strip_prefix("high:") {
        return Ok(Suite::Shifted {
            fidelity: Fidelity::High,
            target: rest.parse()?,
        });
    }
    bail!("unknown suite '{s}' (expected high:<F1..F9>, low, low:<F4..F9>, arm-sc, or arm-cc)")
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let Preset {
        mut model,
        mut cfg,
    } = preset(&args.preset, args.seed)?;
    if args.preset == "custom" {
        model.depth = args
            .depth
            .ok_or_else(|| anyhow!("custom preset needs --depth"))?;
        model.share_weights = args
            .share_weights
            .ok_or_else(|| anyhow!("custom preset needs --share-weights"))?;
    } else if args.depth.is_some() || args.share_weights.is_some() {
        bail!("--depth and --share-weights only apply to the custom preset");
    }

    let suite = parse_suite(&args.suite)?;
    if let Some(d) = args.dim {
        cfg.dim = d;
    }
    if let Some(l) = args.side {
        cfg.side = l;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(k) = args.minibatch {
        cfg.minibatch = k;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }

    let mut dataset_rng = substream(args.seed, "dataset");
    let dataset = match suite {
        Suite::Shifted { fidelity, target } => {
            make_dataset(fidelity, target, args.functions, cfg.dim, &mut dataset_rng)?
        }
        Suite::Arm { case } => {
            let set =
                arm_dataset(case, args.segments, args.targets, args.radius, &mut dataset_rng)?;
            cfg.dim = set.instances[0].dim;
            set
        }
    };

    let (trained, log) = train(&model, &dataset, &cfg)?;
    write_atomic(&args.output, trained.to_json()?.as_bytes())?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.output.as_os_str().to_owned();
        p.push("_log.csv");
        PathBuf::from(p)
    });
    write_atomic(&log_path, log.to_csv_string().as_bytes())?;
    println!(
        "trained {} for {} epochs; final mean loss {}",
        args.preset,
        cfg.epochs,
        log.final_mean_loss().unwrap_or(f64::NAN)
    );
    println!("model: {}", args.output.display());
    println!("log:   {}", log_path.display());
    Ok(())
}

fn load_model(path: &Path, depth: Option<usize>) -> Result<DecnModel> {
    if !path.exists() {
        bail!("model file {} does not exist", path.display());
    }
    let model = DecnModel::load(path)?;
    match depth {
        Some(d) => Ok(model.with_depth(d)?),
        None => Ok(model),
    }
}

#[allow(clippy::too_many_arguments)]
fn summary_json(
    algorithm: &str,
    function: &str,
    dim: usize,
    side: usize,
    repeats: usize,
    budget: u64,
    finals: &[f64],
    seed: u64,
) -> serde_json::Value {
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    serde_json::json!({
        "algorithm": algorithm,
        "function": function,
        "D": dim,
        "L": side,
        "repeats": repeats,
        "budget": budget,
        "final_best_mean": mean,
        "final_best_std": var.sqrt(),
        "seed": seed,
    })
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let model = load_model(&args.model, args.depth)?;
    let function: FunctionId = args.function.parse()?;
    if args.side < model.min_side() {
        bail!(
            "lattice side {} is below the kernel minimum {}",
            args.side,
            model.min_side()
        );
    }
    let budget = model.evals_for_run(args.side);
    let mut shift_rng = substream(args.seed, "shifts");
    let mut run_rng = substream(args.seed, "runs");
    let mut finals = Vec::with_capacity(args.repeats);
    for rep in 0..args.repeats {
        let inst = sample_shift(function, args.dim, &mut shift_rng)?;
        let s0 = PopulationGrid::init(args.side, &inst, &mut run_rng);
        let (pop, mut record) = decn_run(s0, &model, &inst)?;
        record.meta.seed = args.seed;
        record.meta.model_path = Some(args.model.display().to_string());
        finals.push(pop.best_fitness()?);
        write_record_csv(
            &args.output.join(format!("run_{function}_r{rep:02}.csv")),
            &record,
        )?;
    }
    let mut summary = summary_json(
        "decn",
        &function.to_string(),
        args.dim,
        args.side,
        args.repeats,
        budget,
        &finals,
        args.seed,
    );
    summary["model"] = serde_json::json!(args.model.display().to_string());
    write_atomic(
        &args.output.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    println!(
        "{} repeats of {function} (D={}, L={}, budget {budget}): final best mean {} std {}",
        args.repeats,
        args.dim,
        args.side,
        summary["final_best_mean"],
        summary["final_best_std"]
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let model = load_model(&args.model, None)?;
    let function: FunctionId = args.function.parse()?;
    let side = args.side;
    let cells = (side * side) as u64;

    // The stack's budget is structural: L^2 evaluations per pass. A shared
    // budget must land on a whole number of passes with at least one step.
    let model = if args.budget == model.evals_for_run(side) {
        model
    } else if model.share_weights() && args.budget % cells == 0 && args.budget / cells >= 2 {
        model.with_depth((args.budget / cells - 1) as usize)?
    } else {
        bail!(
            "budget {} is inconsistent with this model at L={side}: expected {} \
             (or any multiple of {cells} at least {} for weight-shared models)",
            args.budget,
            model.evals_for_run(side),
            2 * cells
        );
    };

    let mut shift_rng = substream(args.seed, "shifts");
    let mut decn_rng = substream(args.seed, "runs");
    let mut de_rng = substream(args.seed, "runs-de");
    let mut rs_rng = substream(args.seed, "runs-random");
    let mut finals: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut decn_wins_de = 0;
    let mut decn_wins_rs = 0;

    for rep in 0..args.repeats {
        let inst = sample_shift(function, args.dim, &mut shift_rng)?;

        let s0 = PopulationGrid::init(side, &inst, &mut decn_rng);
        let (pop, mut record) = decn_run(s0, &model, &inst)?;
        record.meta.seed = args.seed;
        let decn_best = pop.best_fitness()?;
        write_record_csv(&args.output.join(format!("decn_r{rep:02}.csv")), &record)?;

        let de_cfg = DeConfig {
            pop_size: args.de_pop,
            weight: args.de_weight,
            crossover: args.de_crossover,
            budget: args.budget,
        };
        let mut de = de_rand_1_bin(&inst, &de_cfg, &mut de_rng)?;
        de.record.meta.seed = args.seed;
        write_record_csv(&args.output.join(format!("de_r{rep:02}.csv")), &de.record)?;

        let mut rs = random_search(&inst, args.budget, &mut rs_rng)?;
        rs.record.meta.seed = args.seed;
        write_record_csv(&args.output.join(format!("random_r{rep:02}.csv")), &rs.record)?;

        assert_eq!(record.final_evals(), Some(args.budget));
        assert_eq!(de.record.final_evals(), Some(args.budget));
        assert_eq!(rs.record.final_evals(), Some(args.budget));

        if decn_best < de.best_fitness {
            decn_wins_de += 1;
        }
        if decn_best < rs.best_fitness {
            decn_wins_rs += 1;
        }
        finals[0].push(decn_best);
        finals[1].push(de.best_fitness);
        finals[2].push(rs.best_fitness);
    }

    let summaries: Vec<serde_json::Value> =
        [("decn", 0usize), ("de-rand-1-bin", 1), ("random-search", 2)]
            .iter()
            .map(|&(name, idx)| {
                summary_json(
                    name,
                    &function.to_string(),
                    args.dim,
                    side,
                    args.repeats,
                    args.budget,
                    &finals[idx],
                    args.seed,
                )
            })
            .collect();
    let doc = serde_json::json!({
        "model": args.model.display().to_string(),
        "budget": args.budget,
        "paired_repeats": args.repeats,
        "de": { "pop_size": args.de_pop, "weight": args.de_weight, "crossover": args.de_crossover },
        "decn_wins_vs_de": decn_wins_de,
        "decn_wins_vs_random": decn_wins_rs,
        "algorithms": summaries,
    });
    write_atomic(
        &args.output.join("compare.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )?;
    println!(
        "compare {function} (D={}, budget {}): decn beat DE {decn_wins_de}/{} and random search {decn_wins_rs}/{}",
        args.dim, args.budget, args.repeats, args.repeats
    );
    for s in &summaries {
        println!(
            "  {:>14}: final best mean {} std {}",
            s["algorithm"].as_str().unwrap(),
            s["final_best_mean"],
            s["final_best_std"]
        );
    }
    Ok(())
}

fn cmd_arm(args: ArmArgs) -> Result<()> {
    let case = match args.case.as_str() {
        "sc" => ArmCase::Sc,
        "cc" => ArmCase::Cc,
        other => bail!("unknown arm case '{other}' (expected sc or cc)"),
    };
    let cells = (args.side * args.side) as u64;
    if args.fe % cells != 0 || args.fe / cells < 2 {
        bail!(
            "budget {} must be a multiple of L^2 = {cells}, at least {}",
            args.fe,
            2 * cells
        );
    }
    let depth = (args.fe / cells - 1) as usize;

    let model = match &args.model {
        Some(path) => load_model(path, Some(depth))?,
        None => {
            let mut dataset_rng = substream(args.seed, "dataset");
            let dataset = arm_dataset(
                case,
                args.segments,
                args.targets,
                args.radius,
                &mut dataset_rng,
            )?;
            let mut cfg = TrainConfig::new(args.side, dataset.instances[0].dim, args.seed);
            cfg.minibatch = args.minibatch;
            cfg.epochs = args.epochs;
            let (model, log) = train(&ModelConfig::ws3(), &dataset, &cfg)?;
            let model_path = args.output.join(format!("arm_{}_model.json", args.case));
            write_atomic(&model_path, model.to_json()?.as_bytes())?;
            write_atomic(
                &args.output.join(format!("arm_{}_train_log.csv", args.case)),
                log.to_csv_string().as_bytes(),
            )?;
            model.with_depth(depth)?
        }
    };

    let mut target_rng = substream(args.seed, "heldout");
    let mut run_rng = substream(args.seed, "runs");
    let mut decn_finals = Vec::with_capacity(args.test_targets);
    let mut rs_finals = Vec::with_capacity(args.test_targets);
    for rep in 0..args.test_targets {
        let target = sample_arm_target(args.radius, &mut target_rng);
        let inst = ObjectiveInstance::arm(case, args.segments, target, args.radius)?;
        let s0 = PopulationGrid::init(args.side, &inst, &mut run_rng);
        let (pop, mut record) = decn_run(s0, &model, &inst)?;
        record.meta.seed = args.seed;
        decn_finals.push(pop.best_fitness()?);
        write_record_csv(
            &args.output.join(format!("arm_{}_decn_r{rep:02}.csv", args.case)),
            &record,
        )?;
        let rs = random_search(&inst, args.fe, &mut run_rng)?;
        rs_finals.push(rs.best_fitness);
        write_record_csv(
            &args.output.join(format!("arm_{}_random_r{rep:02}.csv", args.case)),
            &rs.record,
        )?;
    }
    let doc = serde_json::json!({
        "case": args.case,
        "segments": args.segments,
        "radius": args.radius,
        "budget": args.fe,
        "test_targets": args.test_targets,
        "decn": summary_json("decn", &format!("arm-{}", args.case), args.segments, args.side,
                             args.test_targets, args.fe, &decn_finals, args.seed),
        "random_search": summary_json("random-search", &format!("arm-{}", args.case), args.segments,
                                      args.side, args.test_targets, args.fe, &rs_finals, args.seed),
    });
    write_atomic(
        &args.output.join(format!("arm_{}_summary.json", args.case)),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )?;
    println!(
        "arm {} (n={}, r={}, FE={}): decn mean distance {} ({}), random search {} ({})",
        args.case,
        args.segments,
        args.radius,
        args.fe,
        doc["decn"]["final_best_mean"],
        doc["decn"]["final_best_std"],
        doc["random_search"]["final_best_mean"],
        doc["random_search"]["final_best_std"],
    );
    Ok(())
}

fn cmd_dump_kernels(args: DumpKernelsArgs) -> Result<()> {
    let model = load_model(&args.model, None)?;
    fs::create_dir_all(&args.output)?;
    let mut written = 0;
    for (block_idx, em) in model.ems().iter().enumerate() {
        let label = if model.share_weights() {
            "em_shared".to_string()
        } else {
            format!("em{block_idx:02}")
        };
        for kernel in em.kernel_set.kernels() {
            let k = kernel.shape()[0];
            let mut csv = String::new();
            for row in 0..k {
                let cells: Vec<String> = (0..k)
                    .map(|col| kernel.data()[row * k + col].to_string())
                    .collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            write_atomic(&args.output.join(format!("{label}_k{k}.csv")), csv.as_bytes())?;
            written += 1;
        }
    }
    if model.share_weights() {
        println!(
            "wrote {written} kernel CSVs (one shared block, applied at depth {})",
            model.depth()
        );
    } else {
        println!("wrote {written} kernel CSVs across {} blocks", model.ems().len());
    }
    Ok(())
}
