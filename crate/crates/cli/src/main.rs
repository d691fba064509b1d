//! `mip`: train, evaluate and inspect memory-prompt flow forecasters.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mip_core::bench::{bench_inference, BenchOptions};
use mip_core::checkpoint::Checkpoint;
use mip_core::data::{read_numeric_csv, save_dataset, write_numeric_csv, FlowTensor, Split, Units};
use mip_core::export::{export_prompt_scores, ExportRequest};
use mip_core::pipeline::{ablation_table, prepare_data, run_ablation, run_variant, VariantRun};
use mip_core::plot::{grouped_bars, line_chart};
use mip_core::synth::{generate_synthetic, ShiftProfile, SynthConfig};
use mip_core::{Config, MipError, Result, Variant};
use ndarray::{Array2, Array3};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mip", version, about = "Memory-prompt urban flow forecasting under distribution shift")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write checkpoint, log, loss curve and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test0/test1/test2 and their union.
    Evaluate(EvaluateArgs),
    /// Forecast the next window from the last window of a features CSV.
    Predict(PredictArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Time single-sample inference over node counts and horizons.
    Bench(BenchArgs),
    /// Export invariant and variant prompt scores for one node and horizon.
    ExportPrompts(ExportArgs),
    /// Train and evaluate every ablation variant on the same data.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with sections data, model, loss, train, intervention.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.max_epochs=5` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        self.apply(&mut config)?;
        Ok(config)
    }

    fn apply(&self, config: &mut Config) -> Result<()> {
        for o in &self.overrides {
            config.set(o)?;
        }
        config.validate()
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Report metrics averaged over all horizons instead of the final one.
    #[arg(long)]
    all_horizons: bool,
    /// Print JSON to stdout instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    report: ReportArgs,
    /// Overrides model.variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take the data section from this file instead of the checkpoint.
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    report: ReportArgs,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw features CSV (node-major columns); its last `T` rows are the input.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV with `T` forecast rows; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Read defaults from `[data.synthetic]` of this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    /// mean_shift, trend_break or amplitude.
    #[arg(long)]
    profile: Option<ShiftProfile>,
    #[arg(long)]
    magnitude: Option<f64>,
    /// Fraction of the series after which the shift applies.
    #[arg(long)]
    shift_start: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Model settings from a checkpoint (otherwise from --config / defaults).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,400")]
    nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "12")]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    repetitions: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Node index, counted from 0.
    #[arg(long)]
    node: usize,
    /// Horizon within the window, counted from 1.
    #[arg(long)]
    horizon: usize,
    /// Split whose windows are exported.
    #[arg(long, default_value = "test0")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    report: ReportArgs,
    /// Comma-separated subset; all six by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a),
        Command::ExportPrompts(a) => export(a),
        Command::Ablate(a) => ablate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MipError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MipError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn emit(json: bool, value: &impl Serialize, table: String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{table}");
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(v) = args.variant {
        config.model.variant = v;
    }
    let (data, graph) = prepare_data(&config)?;
    create_dir(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let (model, run) = run_variant(&config, config.model.variant, &data, &graph, |r| {
        log::info!("epoch {} total {:.5} val {:.5}", r.epoch, r.loss_total, r.val_mae)
    })?;
    let mut log = Vec::new();
    run.training.write_jsonl(&mut log).map_err(|e| MipError::io(&log_path, e))?;
    fs::write(&log_path, log).map_err(|e| MipError::io(&log_path, e))?;
    write_text(&args.out.join("loss_curve.svg"), &loss_curve(&run))?;
    Checkpoint::new(&model, &config, Some(&data.normalizer)).save(&args.out.join("checkpoint.json"))?;
    write_json(&args.out.join("metrics.json"), &run.metrics)?;
    let table = format!(
        "variant {} | best epoch {:?} | val MAE {:.5}\n{}",
        run.variant,
        run.training.best_epoch,
        run.training.best_val_mae.unwrap_or(f64::NAN),
        run.metrics.table(args.report.all_horizons)
    );
    emit(args.report.json, &run, table)
}

fn loss_curve(run: &VariantRun) -> String {
    let e = &run.training.epochs;
    let col = |f: fn(&mip_core::train::EpochRecord) -> f64| e.iter().map(f).collect::<Vec<_>>();
    let (total, task, inv, reg, val) = (
        col(|r| r.loss_total),
        col(|r| r.loss_task),
        col(|r| r.loss_inv),
        col(|r| r.loss_reg),
        col(|r| r.val_mae),
    );
    line_chart(
        &format!("training losses ({})", run.variant),
        "epoch",
        "loss",
        &[("total", &total), ("task", &task), ("invariant", &inv), ("memory reg", &reg), ("val MAE", &val)],
    )
}

fn load_checkpoint_config(path: &Path, args: &ConfigArgs) -> Result<(Checkpoint, Config)> {
    let ckpt = Checkpoint::load(path)?;
    let mut config = ckpt.config.clone();
    if let Some(file) = &args.config {
        config.data = Config::from_file(file)?.data;
    }
    args.apply(&mut config)?;
    Ok((ckpt, config))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (ckpt, config) = load_checkpoint_config(&args.checkpoint, &args.config)?;
    let model = ckpt.model()?;
    let (data, _) = prepare_data(&config)?;
    if ckpt.normalizer.as_ref().is_some_and(|n| n != &data.normalizer) {
        log::warn!("normalizer fitted on this data differs from the checkpoint's");
    }
    let report = mip_core::eval::evaluate(&model, &data, config.train.batch_size)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    emit(args.report.json, &report, report.table(args.report.all_horizons))
}

fn predict(args: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let dims = model.dims();
    let normalizer = ckpt
        .normalizer
        .clone()
        .ok_or_else(|| MipError::Config("checkpoint has no normalizer".into()))?;
    let rows = read_numeric_csv(&args.input)?;
    let width = dims.nodes * dims.features;
    if rows.len() < dims.window {
        return Err(MipError::Data(format!("need at least {} rows, got {}", dims.window, rows.len())));
    }
    let recent = &rows[rows.len() - dims.window..];
    if let Some(r) = recent.iter().find(|r| r.len() != width) {
        return Err(MipError::Data(format!("rows must have {width} values, found {}", r.len())));
    }
    let flat: Vec<f64> = recent.iter().flatten().copied().collect();
    let raw = FlowTensor {
        values: Array3::from_shape_vec((dims.window, dims.nodes, dims.features), flat).expect("checked width"),
        units: Units::Raw,
    };
    let input = normalizer.normalize(&raw)?;
    let x = input
        .values
        .into_shape_with_order((dims.window * dims.nodes, dims.features))
        .expect("contiguous");
    let pred: Array2<f64> = model.predict(&x)?;
    let pred = FlowTensor {
        values: pred.into_shape_with_order((dims.window, dims.nodes, dims.features)).expect("model output"),
        units: Units::Normalized,
    };
    let out = normalizer.denormalize(&pred)?;
    let lines = out.values.outer_iter().map(|step| step.iter().copied().collect::<Vec<f64>>());
    match &args.out {
        Some(path) => write_numeric_csv(path, lines),
        None => {
            for line in lines {
                println!("{}", line.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            }
            Ok(())
        }
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => Config::from_file(path)?.data.synthetic.unwrap_or_default(),
        None => SynthConfig::default(),
    };
    if let Some(v) = args.nodes {
        cfg.num_nodes = v;
    }
    if let Some(v) = args.steps {
        cfg.num_steps = v;
    }
    if let Some(v) = args.features {
        cfg.num_features = v;
    }
    if let Some(v) = args.profile {
        cfg.shift_profile = v;
    }
    if let Some(v) = args.magnitude {
        cfg.shift_magnitude = v;
    }
    if let Some(v) = args.shift_start {
        cfg.shift_start = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let (series, graph) = generate_synthetic(&cfg)?;
    save_dataset(&args.out, &series, &graph)?;
    println!(
        "wrote {} steps × {} nodes × {} features ({} edges) to {}",
        series.len(),
        series.num_nodes(),
        series.num_features(),
        graph.num_edges(),
        args.out.display()
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let model_config = match &args.checkpoint {
        Some(path) => Checkpoint::load(path)?.config.model,
        None => args.config.load()?.model,
    };
    let opts = BenchOptions {
        repetitions: args.repetitions,
        warmup: args.warmup,
        ..BenchOptions::default()
    };
    let report = bench_inference(&model_config, &args.nodes, &args.horizons, &opts)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    emit(args.json, &report, report.table())
}

fn export(args: ExportArgs) -> Result<()> {
    let (ckpt, config) = load_checkpoint_config(&args.checkpoint, &args.config)?;
    let model = ckpt.model()?;
    let (data, _) = prepare_data(&config)?;
    let split: Split = args.split.parse()?;
    let request = ExportRequest {
        node: args.node,
        horizon: args.horizon,
        windows: data.splits.get(split).collect(),
    };
    let export = export_prompt_scores(&model, &data, &request, &args.out)?;
    for f in &export.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let config = args.config.load()?;
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let (data, graph) = prepare_data(&config)?;
    let runs = run_ablation(&config, &variants, &data, &graph)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("ablation.json"), &runs)?;
    let pick = |m: &mip_core::metrics::Metrics, rmse: bool| if rmse { m.rmse } else { m.mae };
    for (name, rmse) in [("mae", false), ("rmse", true)] {
        let groups: Vec<String> = runs[0].metrics.blocks.iter().map(|b| b.split.clone()).collect();
        let series: Vec<(&str, Vec<f64>)> = runs
            .iter()
            .map(|r| {
                let values = r
                    .metrics
                    .blocks
                    .iter()
                    .map(|b| {
                        let m = if args.report.all_horizons { &b.all_horizons } else { &b.final_horizon };
                        pick(m, rmse).unwrap_or(f64::NAN)
                    })
                    .collect();
                (r.variant.label(), values)
            })
            .collect();
        let group_refs: Vec<&str> = groups.iter().map(String::as_str).collect();
        let svg = grouped_bars(&format!("{} per test set", name.to_uppercase()), &name.to_uppercase(), &group_refs, &series);
        write_text(&args.out.join(format!("ablation_{name}.svg")), &svg)?;
    }
    emit(args.report.json, &runs, ablation_table(&runs, args.report.all_horizons))
}
