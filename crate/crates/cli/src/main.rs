//! Command-line surface: training, schedule solving, benchmarking, and
//! ablation sweeps over the cached-sampler scheduling stack.

use clap::{Parser, Subcommand, ValueEnum};
use sparse_sched_core::cache::CacheExecutor;
use sparse_sched_core::checkpoint::NamedArrays;
use sparse_sched_core::config::RunConfig;
use sparse_sched_core::cost::{CandidateSet, CostMatrix};
use sparse_sched_core::dp::{
    solve_with_options, Budget, ScheduleFile, SolveMode, SparsitySchedule,
};
use sparse_sched_core::error::{Error, Result};
use sparse_sched_core::loss::LossKind;
use sparse_sched_core::metrics::{
    format_psnr, heatmap_svg, macs_csv, predict_macs, quality_metrics, schedule_stats,
};
use sparse_sched_core::model::{init_model, ToyDiTModel};
use sparse_sched_core::rng::SeededRng;
use sparse_sched_core::selector::ScoreKind;
use sparse_sched_core::trainer::{
    eval_distill_loss, eval_ssim, log_csv, median, train, train_stage1, train_stage2, Stage1Output,
    TrainOutput,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sparse-sched", version, about = "Budget-constrained token-sparsity scheduling for a cached toy diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Baseline {
    Full,
    Uniform,
    SkipSteps,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Axis {
    Interval,
    Delta,
    Loss,
    Score,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the cost tensors and emit checkpoint, schedule, and log files
    Train {
        #[arg(long, default_value = "config.json")]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Stage::All)]
        stage: Stage,
        /// override the training seed from the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve a schedule from a cost checkpoint at a given cache ratio
    Solve {
        /// checkpoint stem (the `.json` / `.bin` pair written by train)
        #[arg(long)]
        costs: PathBuf,
        /// target cache ratio R in [0, 1]
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// write the schedule here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a schedule or baseline against the full-compute teacher
    Bench {
        #[arg(long, default_value = "config.json")]
        config: PathBuf,
        #[arg(long, conflicts_with = "baseline")]
        schedule: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sweep one axis at desk scale and emit a CSV of the results
    Ablate {
        #[arg(long, default_value = "config.json")]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, stage, seed } => cmd_train(&config, stage, seed),
        Cmd::Solve {
            costs,
            ratio,
            config,
            out,
        } => cmd_solve(&costs, ratio, config.as_deref(), out.as_deref()),
        Cmd::Bench {
            config,
            schedule,
            baseline,
            samples,
            jobs,
        } => cmd_bench(&config, schedule.as_deref(), baseline, samples, jobs),
        Cmd::Ablate { config, axis } => cmd_ablate(&config, axis),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn solve_mode(cfg: &RunConfig) -> SolveMode {
    if cfg.budget.equality_mode {
        SolveMode::Equality
    } else {
        SolveMode::AtMost
    }
}

const FULL_STEPS_ARRAY: &str = "full_steps";

fn save_checkpoint(cfg: &RunConfig, stage1: &Stage1Output, layer: &CostMatrix) -> Result<()> {
    let mut arrays = layer.to_named_arrays(&stage1.step_costs);
    arrays.push(
        FULL_STEPS_ARRAY,
        &[stage1.full_steps.len()],
        stage1.full_steps.iter().map(|&t| t as f64).collect(),
    );
    let stem = PathBuf::from(&cfg.paths.checkpoint);
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    arrays.save(&stem)
}

fn load_stage1(cfg: &RunConfig) -> Result<Stage1Output> {
    let stem = PathBuf::from(&cfg.paths.checkpoint);
    if !stem.with_extension("json").exists() {
        return Err(Error::State(format!(
            "no stage-1 checkpoint at {}; run train --stage 1 first",
            stem.display()
        )));
    }
    let arrays = NamedArrays::load(&stem)?;
    let (layer_costs, step_costs) = CostMatrix::from_named_arrays(&arrays)?;
    let full_steps = arrays
        .get(FULL_STEPS_ARRAY)
        .map(|(_, data)| data.iter().map(|&v| v as usize).collect())
        .unwrap_or_default();
    Ok(Stage1Output {
        layer_costs,
        step_costs,
        full_steps,
        log: Vec::new(),
    })
}

fn emit_train_artifacts(cfg: &RunConfig, stage1: &Stage1Output, out: &TrainOutput) -> Result<()> {
    save_checkpoint(cfg, stage1, &out.layer_costs)?;
    let file = ScheduleFile::from_schedule(
        &out.schedule,
        cfg.model.num_steps,
        cfg.model.sub_layer_names(),
        Some(cfg.hash()),
    );
    write_file(Path::new(&cfg.paths.schedule), &file.to_json())?;
    let log = format!("# config_hash={}\n{}", cfg.hash(), log_csv(&out.log));
    write_file(
        &Path::new(&cfg.paths.report_dir).join("train_log.csv"),
        &log,
    )?;
    Ok(())
}

fn cmd_train(config_path: &Path, stage: Stage, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let model = init_model(&cfg.model)?;
    let set = cfg.candidate_set()?;
    let budget = cfg.budget()?;

    match stage {
        Stage::One => {
            let stage1 = train_stage1(&model, &budget, &set, &cfg.selector, &cfg.train)?;
            // emit a schedule for the stage-1 costs so the artifact set is
            // complete even before fine-tuning
            let schedule = solve_with_options(
                &stage1.layer_costs.rounded_f32(),
                &budget,
                &set,
                solve_mode(&cfg),
                true,
            )?;
            let out = TrainOutput {
                layer_costs: stage1.layer_costs.clone(),
                step_costs: stage1.step_costs.clone(),
                schedule,
                full_steps: stage1.full_steps.clone(),
                log: stage1.log.clone(),
                evaluated_schedules: 0,
            };
            emit_train_artifacts(&cfg, &stage1, &out)?;
            println!(
                "stage 1 done: {} full steps, budget_units={}",
                out.full_steps.len(),
                out.schedule.total_units()
            );
        }
        Stage::Two => {
            let stage1 = load_stage1(&cfg)?;
            let out = train_stage2(&model, &budget, &set, &cfg.selector, &cfg.train, stage1)?;
            let carried = Stage1Output {
                layer_costs: out.layer_costs.clone(),
                step_costs: out.step_costs.clone(),
                full_steps: out.full_steps.clone(),
                log: Vec::new(),
            };
            emit_train_artifacts(&cfg, &carried, &out)?;
            println!(
                "stage 2 done: total_cost={}, budget_units={}",
                out.schedule.achieved_cost,
                out.schedule.total_units()
            );
        }
        Stage::All => {
            let out = train(&model, &budget, &set, &cfg.selector, &cfg.train)?;
            let carried = Stage1Output {
                layer_costs: out.layer_costs.clone(),
                step_costs: out.step_costs.clone(),
                full_steps: out.full_steps.clone(),
                log: Vec::new(),
            };
            emit_train_artifacts(&cfg, &carried, &out)?;
            println!(
                "training done: total_cost={}, budget_units={}",
                out.schedule.achieved_cost,
                out.schedule.total_units()
            );
        }
    }
    Ok(())
}

fn cmd_solve(
    costs: &Path,
    ratio: f64,
    config_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = match config_path {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let arrays = NamedArrays::load(costs)?;
    let (layer, _step) = CostMatrix::from_named_arrays(&arrays)?;
    let set = CandidateSet::new(1.0 / (layer.candidates() - 1) as f64)?;
    let budget = Budget::new(ratio, layer.slots(), set.units_per_slot())?;
    let mode = cfg.as_ref().map_or(SolveMode::Equality, solve_mode);
    let schedule = solve_with_options(&layer, &budget, &set, mode, true)?;

    let (num_steps, names, hash) = match &cfg {
        Some(c) => {
            if c.model.schedulable_steps() != layer.schedulable_steps
                || c.model.sub_layer_count() != layer.sub_layers
            {
                return Err(Error::Contract(format!(
                    "config model is {} x {} slots, checkpoint is {} x {}",
                    c.model.schedulable_steps(),
                    c.model.sub_layer_count(),
                    layer.schedulable_steps,
                    layer.sub_layers
                )));
            }
            (c.model.num_steps, c.model.sub_layer_names(), Some(c.hash()))
        }
        None => (
            layer.schedulable_steps + 1,
            (0..layer.sub_layers).map(|l| format!("sub_layer{l}")).collect(),
            None,
        ),
    };
    let zero_skips = schedule.candidates.iter().filter(|&&s| s == 0).count();
    let file = ScheduleFile::from_schedule(&schedule, num_steps, names, hash);
    let json = file.to_json();
    match out {
        Some(p) => write_file(p, &json)?,
        None => print!("{json}"),
    }
    eprintln!(
        "budget_units={} total_cost={} zero_skips={}",
        schedule.total_units(),
        schedule.achieved_cost,
        zero_skips
    );
    Ok(())
}

/// Alternating full/skip step rows starting full, emulating a half-steps run.
fn skip_steps_schedule(tp: usize, ld: usize, set: &CandidateSet) -> SparsitySchedule {
    let u = set.units_per_slot();
    let candidates =
        ndarray::Array2::from_shape_fn((tp, ld), |(t, _)| if t % 2 == 0 { u } else { 0 });
    SparsitySchedule::new(candidates, set.clone())
}

fn bench_schedule(
    cfg: &RunConfig,
    schedule_path: Option<&Path>,
    baseline: Option<Baseline>,
) -> Result<SparsitySchedule> {
    let tp = cfg.model.schedulable_steps();
    let ld = cfg.model.sub_layer_count();
    let set = cfg.candidate_set()?;
    match (schedule_path, baseline) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            let file: ScheduleFile = serde_json::from_str(&text)?;
            let sched = file.to_schedule()?;
            if sched.schedulable_steps() != tp || sched.sub_layers() != ld {
                return Err(Error::Contract(format!(
                    "schedule is {} x {}, model needs {tp} x {ld}",
                    sched.schedulable_steps(),
                    sched.sub_layers()
                )));
            }
            Ok(sched)
        }
        (None, Some(Baseline::Full)) => Ok(SparsitySchedule::uniform(
            tp,
            ld,
            set.clone(),
            set.units_per_slot(),
        )),
        (None, Some(Baseline::Uniform)) => Ok(SparsitySchedule::uniform_spread(
            &cfg.budget()?,
            tp,
            ld,
            set.clone(),
        )),
        (None, Some(Baseline::SkipSteps)) => Ok(skip_steps_schedule(tp, ld, &set)),
        _ => Err(Error::Config(
            "pass exactly one of --schedule or --baseline".into(),
        )),
    }
}

fn bench_samples(
    model: &ToyDiTModel,
    schedule: &SparsitySchedule,
    cfg: &RunConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<(u64, f64, f64)>> {
    let jobs = jobs.max(1).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(jobs);
    let results: Vec<Result<Vec<(u64, f64, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk.max(1))
            .map(|part| {
                scope.spawn(move || {
                    let mut out = Vec::with_capacity(part.len());
                    for &s in part {
                        let cond = sparse_sched_core::model::make_condition(&model.config, s);
                        let noise = sparse_sched_core::model::make_noise(&model.config, s);
                        let teacher = model.sample(&cond, &noise)?;
                        let mut exec =
                            CacheExecutor::new(model, schedule.clone(), cfg.selector)?;
                        let student = exec.run_scheduled_sample(model, &cond, &noise)?;
                        let q = quality_metrics(&teacher, &student)?;
                        out.push((s, q.psnr, q.ssim));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut all = Vec::with_capacity(seeds.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

fn cmd_bench(
    config_path: &Path,
    schedule_path: Option<&Path>,
    baseline: Option<Baseline>,
    samples: usize,
    jobs: usize,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    if samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let model = init_model(&cfg.model)?;
    let schedule = bench_schedule(&cfg, schedule_path, baseline)?;
    let report = predict_macs(&cfg.model, &schedule, &cfg.selector)?;

    let mut rng = SeededRng::for_component(cfg.train.seed, "bench-samples");
    let seeds: Vec<u64> = (0..samples).map(|_| rng.next_u64()).collect();
    let rows = bench_samples(&model, &schedule, &cfg, &seeds, jobs)?;

    let hash = cfg.hash();
    let mut csv = format!("# config_hash={hash}\nsample,seed,psnr,ssim,macs,selector_macs,speedup\n");
    for (i, (seed, psnr, ssim)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{seed},{},{ssim},{},{},{}\n",
            format_psnr(*psnr),
            report.total,
            report.selector_total,
            report.speedup
        ));
    }
    let report_dir = Path::new(&cfg.paths.report_dir);
    write_file(&report_dir.join("bench.csv"), &csv)?;
    write_file(
        &report_dir.join("bench_macs.csv"),
        &format!("# config_hash={hash}\n{}", macs_csv(&cfg.model, &report)),
    )?;
    write_file(
        &report_dir.join("heatmap.svg"),
        &format!("<!-- config_hash={hash} -->\n{}", heatmap_svg(&schedule)),
    )?;

    let ssims: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let stats = schedule_stats(&cfg.model, &schedule);
    println!(
        "samples={} median_ssim={:.6} speedup={:.4} mean_retention={:.4} zero_skips={}",
        rows.len(),
        median(&ssims),
        report.speedup,
        stats.mean_retention,
        stats.zero_skip_count
    );
    Ok(())
}

fn ablate_row(
    cfg: &RunConfig,
    label: &str,
) -> Result<(String, f64, f64, f64)> {
    let model = init_model(&cfg.model)?;
    let set = cfg.candidate_set()?;
    let budget = cfg.budget()?;
    let out = train(&model, &budget, &set, &cfg.selector, &cfg.train)?;
    // budget exactness is re-verified on every row before it is recorded
    if out.schedule.total_units() != budget.total_units {
        return Err(Error::Budget(format!(
            "row {label}: schedule spends {} units, budget is {}",
            out.schedule.total_units(),
            budget.total_units
        )));
    }
    let mut rng = SeededRng::for_component(cfg.train.seed, "ablate-eval");
    let eval_seeds: Vec<u64> = (0..2).map(|_| rng.next_u64()).collect();
    let losses = eval_distill_loss(
        &model,
        &out.schedule,
        &cfg.selector,
        cfg.train.loss_kind,
        &eval_seeds,
    )?;
    let ssims = eval_ssim(&model, &out.schedule, &cfg.selector, &eval_seeds)?;
    let report = predict_macs(&cfg.model, &out.schedule, &cfg.selector)?;
    Ok((
        label.to_string(),
        losses.iter().sum::<f64>() / losses.len() as f64,
        ssims.iter().sum::<f64>() / ssims.len() as f64,
        report.speedup,
    ))
}

fn cmd_ablate(config_path: &Path, axis: Axis) -> Result<()> {
    let cfg = load_config(config_path)?;
    let mut rows = Vec::new();
    let (axis_name, settings): (&str, Vec<RunConfig>) = match axis {
        Axis::Interval => (
            "interval",
            [0.1, 0.125, 0.25, 0.5, 1.0]
                .iter()
                .map(|&v| {
                    let mut c = cfg.clone();
                    c.candidate.interval = v;
                    c
                })
                .collect(),
        ),
        Axis::Delta => (
            "delta",
            [0.0, 5.0, 10.0, 20.0]
                .iter()
                .map(|&v| {
                    let mut c = cfg.clone();
                    c.train.delta = v;
                    c
                })
                .collect(),
        ),
        Axis::Loss => (
            "loss",
            [LossKind::L2, LossKind::Ssim, LossKind::FeatureProxy]
                .iter()
                .map(|&v| {
                    let mut c = cfg.clone();
                    c.train.loss_kind = v;
                    c
                })
                .collect(),
        ),
        Axis::Score => (
            "score",
            [ScoreKind::Attention, ScoreKind::Similarity, ScoreKind::Norm]
                .iter()
                .map(|&v| {
                    let mut c = cfg.clone();
                    c.selector.score_kind = v;
                    c
                })
                .collect(),
        ),
    };
    for c in &settings {
        c.validate()?;
        let label = match axis {
            Axis::Interval => c.candidate.interval.to_string(),
            Axis::Delta => c.train.delta.to_string(),
            Axis::Loss => serde_json::to_string(&c.train.loss_kind)
                .expect("loss kind serializes")
                .trim_matches('"')
                .to_string(),
            Axis::Score => serde_json::to_string(&c.selector.score_kind)
                .expect("score kind serializes")
                .trim_matches('"')
                .to_string(),
        };
        rows.push(ablate_row(c, &label)?);
    }
    let mut csv = format!(
        "# config_hash={}\n{axis_name},distill_loss,ssim,speedup\n",
        cfg.hash()
    );
    for (label, loss, ssim, speedup) in &rows {
        csv.push_str(&format!("{label},{loss},{ssim},{speedup}\n"));
    }
    let path = Path::new(&cfg.paths.report_dir).join(format!("ablate_{axis_name}.csv"));
    write_file(&path, &csv)?;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}
