//! Command-line surface for the integer Mamba inference engine, the cycle
//! simulator, and the configuration sweeper.

mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use qmamba_core::approx::{fit_piecewise, ErrorMetric, FitTarget, PiecewiseLinearFn};
use qmamba_core::mamba::{
    deploy_fits, model_container, model_from_container, quantize_model_with_fits,
    quantized_model_container, quantized_model_from_container, random_frames, random_weights,
    reference_forward, Container, MambaConfig, TensorData,
};
use qmamba_core::nas::{
    eval_metrics, mark_front, sweep, sweep_csv, MetricsFile, Objective, SweepGrid, Task,
};
use qmamba_core::pipesim::{
    compare_presets, report_table, simulate, sweep_units, PipelineConfig, StageLatencyTable,
};
use qmamba_core::RealTensor;

use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(
    name = "qmamba",
    version,
    about = "Integer-only Mamba inference, accelerator pipeline simulation, and configuration sweeps"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout instead of human text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a piecewise-linear approximation and write it as a JSON artifact.
    FitApprox(FitApproxArgs),
    /// Generate a random-weight model container (fixture; training is out of scope).
    GenModel(GenModelArgs),
    /// Generate random input frames (optionally with model-derived labels).
    GenFrames(GenFramesArgs),
    /// Calibrate activation scales over frames and write the quantized model.
    Quantize(QuantizeArgs),
    /// Run the integer model over frames and write predictions.
    Infer(InferArgs),
    /// Run the integer model and score predictions against labels.
    Eval(EvalArgs),
    /// Simulate the token pipeline for one preset.
    Simulate(SimulateArgs),
    /// Side-by-side pipeline reports for the accelerated preset, the
    /// baseline, and the range-norm-only ablation.
    ComparePresets(ComparePresetsArgs),
    /// Enumerate configurations, count parameters, simulate latency, join
    /// metrics, and flag the Pareto front.
    Sweep(SweepArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitApprox(a) => cmd_fit_approx(a, cli.json),
        Command::GenModel(a) => cmd_gen_model(a, cli.json),
        Command::GenFrames(a) => cmd_gen_frames(a, cli.json),
        Command::Quantize(a) => cmd_quantize(a, cli.json),
        Command::Infer(a) => cmd_infer(a, cli.json),
        Command::Eval(a) => cmd_eval(a, cli.json),
        Command::Simulate(a) => cmd_simulate(a, cli.json),
        Command::ComparePresets(a) => cmd_compare_presets(a, cli.json),
        Command::Sweep(a) => cmd_sweep(a, cli.json),
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn load_config_arg(name: &str) -> Result<MambaConfig> {
    match name {
        "mars" => Ok(MambaConfig::mars()),
        "fashion-mnist" | "fmnist" => Ok(MambaConfig::fashion_mnist()),
        "cifar10" => Ok(MambaConfig::cifar10()),
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {path}"))?;
            let config: MambaConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {path}"))?;
            config.validate()?;
            Ok(config)
        }
    }
}

fn load_frames(path: &Path) -> Result<(Vec<RealTensor>, Container)> {
    let c = Container::load(path).with_context(|| format!("loading {}", path.display()))?;
    let frames = c
        .real_tensor("frames")
        .with_context(|| format!("{} has no frames tensor", path.display()))?;
    let shape = &frames.shape;
    if shape.len() != 4 {
        bail!("frames tensor must be [count, channels, height, width], got {shape:?}");
    }
    let (count, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let per = ch * h * w;
    let list = (0..count)
        .map(|i| {
            RealTensor::new(
                frames.data[i * per..(i + 1) * per].to_vec(),
                vec![ch, h, w],
            )
            .map_err(|e| anyhow!("frame {i}: {e}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((list, c))
}

fn load_fit(path: &Path) -> Result<PiecewiseLinearFn> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let fitted: PiecewiseLinearFn = serde_json::from_str(&text)?;
    fitted
        .validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(fitted)
}

fn print_or_json(json_mode: bool, value: &impl Serialize, human: &str) -> Result<()> {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{human}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-approx

#[derive(Args, Serialize)]
struct FitApproxArgs {
    /// Function to approximate: silu, exp, or identity.
    #[arg(long = "fn")]
    function: String,
    /// Fit domain as "lo,hi". Defaults per function: silu -7,7; exp -4,1.
    #[arg(long)]
    domain: Option<String>,
    /// Error bound. Defaults per function: silu 0.03; exp 0.01.
    #[arg(long)]
    max_err: Option<f64>,
    /// Error metric. Defaults per function: silu relative-with-floor; exp absolute.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum MetricArg {
    #[value(name = "relative-with-floor")]
    RelativeWithFloor,
    Absolute,
}

impl From<MetricArg> for ErrorMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::RelativeWithFloor => ErrorMetric::RelativeWithFloor,
            MetricArg::Absolute => ErrorMetric::Absolute,
        }
    }
}

fn cmd_fit_approx(args: FitApproxArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("fit-approx", &args)?;
    let target: FitTarget = args.function.parse()?;
    let (domain, max_err, metric) = match target {
        FitTarget::Silu => ((-7.0, 7.0), 0.03, ErrorMetric::RelativeWithFloor),
        FitTarget::Exp => ((-4.0, 1.0), 0.01, ErrorMetric::Absolute),
        FitTarget::Identity => ((-1.0, 1.0), 0.03, ErrorMetric::Absolute),
    };
    let domain = match &args.domain {
        Some(text) => {
            let parts: Vec<&str> = text.split(',').collect();
            if parts.len() != 2 {
                bail!("--domain expects \"lo,hi\"");
            }
            (parts[0].trim().parse()?, parts[1].trim().parse()?)
        }
        None => domain,
    };
    let max_err = args.max_err.unwrap_or(max_err);
    let metric = args.metric.map(ErrorMetric::from).unwrap_or(metric);

    // on failure the error message carries the achieved error
    let fitted = fit_piecewise(target, domain, max_err, metric).map_err(|e| anyhow!("{e}"))?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&fitted)?)?;
    m.output(&args.out);
    m.finish()?;
    print_or_json(
        json_mode,
        &json!({
            "function": target.name(),
            "domain": [domain.0, domain.1],
            "segments": fitted.segments(),
            "max_err": max_err,
            "achieved_err": fitted.achieved_err,
            "out": args.out,
        }),
        &format!(
            "fitted {} over [{}, {}]: {} segments, worst error {:.4} of the {} bound\nwrote {}",
            target.name(),
            domain.0,
            domain.1,
            fitted.segments(),
            fitted.achieved_err,
            max_err,
            args.out.display()
        ),
    )
}

// ---------------------------------------------------------------------------
// fixtures

#[derive(Args, Serialize)]
struct GenModelArgs {
    /// mars, fashion-mnist, cifar10, or a config JSON path.
    #[arg(long, default_value = "mars")]
    config: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_model(args: GenModelArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("gen-model", &args)?;
    let config = load_config_arg(&args.config)?;
    let weights = random_weights(&config, args.seed);
    model_container(&config, &weights).save(&args.out)?;
    m.output(&args.out);
    m.finish()?;
    print_or_json(
        json_mode,
        &json!({
            "config": config.key(),
            "seed": args.seed,
            "params": weights.count_elements(),
            "out": args.out,
        }),
        &format!(
            "wrote {} model ({} parameters, seed {}) to {}",
            config.key(),
            weights.count_elements(),
            args.seed,
            args.out.display()
        ),
    )
}

#[derive(Args, Serialize)]
struct GenFramesArgs {
    #[arg(long, default_value = "mars")]
    config: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Derive labels from this model's floating-point path.
    #[arg(long)]
    labels_from: Option<PathBuf>,
    #[arg(long, requires = "labels_from")]
    labels_out: Option<PathBuf>,
    /// Label kind when --labels-from is given.
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    task: TaskArg,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq)]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

fn cmd_gen_frames(args: GenFramesArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("gen-frames", &args)?;
    let config = load_config_arg(&args.config)?;
    if args.count == 0 {
        bail!("--count must be positive");
    }
    let frames = random_frames(&config, args.count, args.seed);
    let per = config.in_channels * config.in_height * config.in_width;
    let mut flat = Vec::with_capacity(args.count * per);
    for f in &frames {
        flat.extend_from_slice(&f.data);
    }
    let tensor = RealTensor::new(
        flat,
        vec![args.count, config.in_channels, config.in_height, config.in_width],
    )
    .map_err(|e| anyhow!("{e}"))?;
    let container = Container {
        config: Some(config.clone()),
        tensors: vec![("frames".into(), TensorData::Real(tensor))],
        ..Default::default()
    };
    container.save(&args.out)?;
    m.output(&args.out);

    let mut label_note = String::new();
    if let Some(model_path) = &args.labels_from {
        let labels_out = args.labels_out.as_ref().expect("clap enforces labels_out");
        m.input(model_path);
        let c = Container::load(model_path)?;
        let (mcfg, weights) = model_from_container(&c)?;
        if mcfg != config {
            bail!("model config {} does not match frame config {}", mcfg.key(), config.key());
        }
        let mut flat = Vec::new();
        let mut label_dim = 0;
        for f in &frames {
            let out = reference_forward(f, &mcfg, &weights, None).map_err(|e| anyhow!("{e}"))?;
            match args.task {
                TaskArg::Regression => {
                    label_dim = out.len();
                    flat.extend_from_slice(&out.data);
                }
                TaskArg::Classification => {
                    label_dim = 1;
                    let argmax = out
                        .data
                        .iter()
                        .enumerate()
                        .max_by(|(_, a), (_, b)| a.total_cmp(b))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    flat.push(argmax as f32);
                }
            }
        }
        let labels =
            RealTensor::new(flat, vec![args.count, label_dim]).map_err(|e| anyhow!("{e}"))?;
        let lc = Container {
            config: Some(config.clone()),
            tensors: vec![("labels".into(), TensorData::Real(labels))],
            ..Default::default()
        };
        lc.save(labels_out)?;
        m.output(labels_out);
        label_note = format!(", labels to {}", labels_out.display());
    }
    m.finish()?;
    print_or_json(
        json_mode,
        &json!({
            "config": config.key(),
            "count": args.count,
            "seed": args.seed,
            "out": args.out,
        }),
        &format!(
            "wrote {} frames (seed {}) to {}{}",
            args.count,
            args.seed,
            args.out.display(),
            label_note
        ),
    )
}

// ---------------------------------------------------------------------------
// quantize

#[derive(Args, Serialize)]
struct QuantizeArgs {
    #[arg(long)]
    model_in: PathBuf,
    /// Calibration frames container.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 8)]
    act_bits: u32,
    /// Calibration clipping coverage in (0, 1].
    #[arg(long, default_value_t = 0.999)]
    coverage: f64,
    /// Piecewise SiLU artifact to embed (defaults to the deployment fit).
    #[arg(long)]
    silu_fit: Option<PathBuf>,
    /// Piecewise exp artifact to embed (defaults to the deployment fit).
    #[arg(long)]
    exp_fit: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_quantize(args: QuantizeArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("quantize", &args)?;
    m.input(&args.model_in);
    m.input(&args.calib);
    let c = Container::load(&args.model_in)?;
    let (mut config, weights) = model_from_container(&c)?;
    config.act_bits = args.act_bits;
    let (frames, _) = load_frames(&args.calib)?;
    if frames.is_empty() {
        bail!("calibration set is empty");
    }
    let (default_silu, default_exp) = deploy_fits().map_err(|e| anyhow!("{e}"))?;
    let silu = match &args.silu_fit {
        Some(p) => {
            m.input(p);
            load_fit(p)?
        }
        None => default_silu,
    };
    let exp = match &args.exp_fit {
        Some(p) => {
            m.input(p);
            load_fit(p)?
        }
        None => default_exp,
    };
    let model = quantize_model_with_fits(&config, &weights, &frames, args.coverage, silu, exp)
        .map_err(|e| anyhow!("{e}"))?;
    quantized_model_container(&model).save(&args.out)?;
    m.output(&args.out);
    m.finish()?;
    print_or_json(
        json_mode,
        &json!({
            "config": config.key(),
            "act_bits": args.act_bits,
            "coverage": args.coverage,
            "calib_frames": frames.len(),
            "input_scale_exp": model.scales.input,
            "out": args.out,
        }),
        &format!(
            "calibrated {} over {} frames (coverage {}); wrote quantized model to {}",
            config.key(),
            frames.len(),
            args.coverage,
            args.out.display()
        ),
    )
}

// ---------------------------------------------------------------------------
// infer / eval

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run the floating-point reference path and report the divergence.
    #[arg(long)]
    compare_float: bool,
}

fn run_model(
    model_path: &Path,
    input_path: &Path,
    compare_float: bool,
) -> Result<(Vec<Vec<f32>>, Option<serde_json::Value>, MambaConfig)> {
    let c = Container::load(model_path)?;
    let model = quantized_model_from_container(&c).map_err(|e| anyhow!("{e}"))?;
    let prepared = model.prepare().map_err(|e| anyhow!("{e}"))?;
    let (frames, _) = load_frames(input_path)?;
    let mut predictions = Vec::with_capacity(frames.len());
    let mut max_div = 0.0f64;
    let mut abs_div_sum = 0.0f64;
    let mut div_n = 0usize;
    for f in &frames {
        let out = prepared.forward_real(f).map_err(|e| anyhow!("{e}"))?;
        if compare_float {
            let reference = reference_forward(f, &model.config, &model.weights, None)
                .map_err(|e| anyhow!("{e}"))?;
            for (a, b) in out.data.iter().zip(reference.data.iter()) {
                let d = (*a as f64 - *b as f64).abs();
                max_div = max_div.max(d);
                abs_div_sum += d;
                div_n += 1;
            }
        }
        predictions.push(out.data);
    }
    let divergence = compare_float.then(|| {
        json!({
            "max_abs": max_div,
            "mean_abs": abs_div_sum / div_n.max(1) as f64,
            "output_lsb": prepared.output_lsb(),
            "max_abs_in_lsb": max_div / prepared.output_lsb(),
        })
    });
    Ok((predictions, divergence, model.config))
}

fn cmd_infer(args: InferArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("infer", &args)?;
    m.input(&args.model);
    m.input(&args.input);
    let (predictions, divergence, config) =
        run_model(&args.model, &args.input, args.compare_float)?;
    let result = json!({
        "config": config.key(),
        "frames": predictions.len(),
        "out_dim": config.out_dim,
        "predictions": predictions,
        "float_divergence": divergence,
    });
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&result)?)?;
        m.output(out);
    }
    m.finish()?;
    let mut human = format!(
        "ran {} frames through {}: {} outputs each",
        predictions.len(),
        config.key(),
        config.out_dim
    );
    if let Some(d) = &divergence {
        human.push_str(&format!(
            "\nfloat divergence: max {:.6} ({:.2} output LSBs), mean {:.6}",
            d["max_abs"].as_f64().unwrap(),
            d["max_abs_in_lsb"].as_f64().unwrap(),
            d["mean_abs"].as_f64().unwrap()
        ));
    }
    if let Some(out) = &args.out {
        human.push_str(&format!("\nwrote predictions to {}", out.display()));
    }
    print_or_json(json_mode, &result, &human)
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    task: TaskArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("eval", &args)?;
    m.input(&args.model);
    m.input(&args.input);
    m.input(&args.labels);
    let (predictions, _, config) = run_model(&args.model, &args.input, false)?;
    let lc = Container::load(&args.labels)?;
    let labels = lc.real_tensor("labels").map_err(|e| anyhow!("{e}"))?;
    if labels.shape.len() != 2 || labels.shape[0] != predictions.len() {
        bail!(
            "labels shape {:?} does not match {} predictions",
            labels.shape,
            predictions.len()
        );
    }
    let dim = labels.shape[1];
    let ground_truth: Vec<Vec<f32>> = (0..labels.shape[0])
        .map(|i| labels.data[i * dim..(i + 1) * dim].to_vec())
        .collect();
    let record = eval_metrics(&predictions, &ground_truth, args.task.into())
        .map_err(|e| anyhow!("{e}"))?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&record)?)?;
        m.output(out);
    }
    m.finish()?;
    let mut human = format!("evaluated {} over {} frames:", config.key(), record.count);
    if let Some(mae) = record.mae {
        human.push_str(&format!("\n  MAE  {:.4}\n  RMSE {:.4}", mae, record.rmse.unwrap()));
        if let Some(axes) = &record.per_axis {
            for a in axes {
                human.push_str(&format!("\n  {}: MAE {:.4}  RMSE {:.4}", a.axis, a.mae, a.rmse));
            }
        }
    }
    if let Some(acc) = record.accuracy {
        human.push_str(&format!("\n  top-1 accuracy {:.2}%", acc * 100.0));
    }
    print_or_json(json_mode, &record, &human)
}

// ---------------------------------------------------------------------------
// simulate / compare-presets

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// emamba or naive-mamba (ignored when --preset-file is given).
    #[arg(long, default_value = "emamba")]
    preset: String,
    /// Load the stage-latency table from a JSON file instead.
    #[arg(long)]
    preset_file: Option<PathBuf>,
    #[arg(long, default_value = "mars")]
    config: String,
    /// Range-normalization compute units; defaults to full parallelism (D).
    #[arg(long)]
    units: Option<usize>,
    #[arg(long, default_value_t = 100e6)]
    clock_hz: f64,
    /// Also sweep these unit counts (comma-separated) and write the curve.
    #[arg(long)]
    units_sweep: Option<String>,
    /// CSV path for the unit-sweep curve.
    #[arg(long, requires = "units_sweep")]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_table(preset: &str, preset_file: &Option<PathBuf>) -> Result<StageLatencyTable> {
    match preset_file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            StageLatencyTable::from_json(&text).map_err(|e| anyhow!("{e}"))
        }
        None => StageLatencyTable::by_name(preset).map_err(|e| anyhow!("{e}")),
    }
}

fn cmd_simulate(args: SimulateArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("simulate", &args)?;
    let table = load_table(&args.preset, &args.preset_file)?;
    if let Some(p) = &args.preset_file {
        m.input(p);
    }
    let config = load_config_arg(&args.config)?;
    let units = args.units.unwrap_or(config.model_dim);
    let pc = PipelineConfig::from_model(&config, units, args.clock_hz);
    let report = simulate(&pc, &table).map_err(|e| anyhow!("{e}"))?;

    let sweep_rows = match &args.units_sweep {
        Some(list) => {
            let units: Vec<usize> = list
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("parsing --units-sweep"))
                .collect::<Result<_>>()?;
            let rows = sweep_units(&pc, &table, &units).map_err(|e| anyhow!("{e}"))?;
            if let Some(csv_path) = &args.csv {
                std::fs::write(csv_path, qmamba_core::pipesim::sweep_csv(&rows))?;
                m.output(csv_path);
            }
            Some(rows)
        }
        None => None,
    };
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
        m.output(out);
    }
    m.finish()?;

    if json_mode {
        let value = json!({
            "report": report,
            "units_sweep": sweep_rows.as_ref().map(|rows| rows.iter().map(|(u, r)| {
                json!({"units": u, "frame_latency_cycles": r.frame_latency_cycles})
            }).collect::<Vec<_>>()),
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{}", report_table(std::slice::from_ref(&report)));
        if let Some(rows) = &sweep_rows {
            println!("\nunit sweep:");
            for (u, r) in rows {
                println!("  {u:>3} units -> {:>7} cycles/frame", r.frame_latency_cycles);
            }
        }
    }
    Ok(())
}

#[derive(Args, Serialize)]
struct ComparePresetsArgs {
    #[arg(long, default_value = "mars")]
    config: String,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long, default_value_t = 100e6)]
    clock_hz: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_compare_presets(args: ComparePresetsArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("compare-presets", &args)?;
    let config = load_config_arg(&args.config)?;
    let units = args.units.unwrap_or(config.model_dim);
    let pc = PipelineConfig::from_model(&config, units, args.clock_hz);
    let reports = compare_presets(&pc).map_err(|e| anyhow!("{e}"))?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&reports)?)?;
        m.output(out);
    }
    m.finish()?;
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        print!("{}", report_table(&reports));
        let gain =
            reports[1].frame_latency_cycles as f64 / reports[0].frame_latency_cycles as f64;
        println!("\nframe-latency gain over the baseline: {gain:.2}x");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args, Serialize)]
struct SweepArgs {
    /// "default" or a grid JSON path.
    #[arg(long, default_value = "default")]
    grid: String,
    /// Metrics JSON file keyed by the config tuple.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value = "emamba")]
    preset: String,
    #[arg(long, default_value_t = 20)]
    units: usize,
    #[arg(long, default_value_t = 100e6)]
    clock_hz: f64,
    /// Pareto objectives, comma-separated from params, bytes, latency, metric.
    #[arg(long)]
    objectives: Option<String>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs, json_mode: bool) -> Result<()> {
    let mut m = ManifestBuilder::new("sweep", &args)?;
    let grid = match args.grid.as_str() {
        "default" => SweepGrid::mars_default(),
        path => {
            m.input(Path::new(path));
            serde_json::from_str(&std::fs::read_to_string(path)?)
                .with_context(|| format!("parsing grid {path}"))?
        }
    };
    let metrics: Option<MetricsFile> = match &args.metrics {
        Some(p) => {
            m.input(p);
            Some(
                serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing metrics {}", p.display()))?,
            )
        }
        None => None,
    };
    let table = StageLatencyTable::by_name(&args.preset).map_err(|e| anyhow!("{e}"))?;
    let mut points = sweep(&grid, &table, args.units, args.clock_hz, metrics.as_ref())
        .map_err(|e| anyhow!("{e}"))?;

    let objectives: Vec<Objective> = match &args.objectives {
        Some(list) => list
            .split(',')
            .map(|s| match s.trim() {
                "params" => Ok(Objective::Params),
                "bytes" => Ok(Objective::Bytes),
                "latency" => Ok(Objective::Latency),
                "metric" => Ok(Objective::Metric),
                other => Err(anyhow!("unknown objective {other:?}")),
            })
            .collect::<Result<_>>()?,
        // metric joins make params/metric the natural default; otherwise
        // trade parameters against simulated latency
        None => {
            if metrics.is_some() {
                vec![Objective::Params, Objective::Metric]
            } else {
                vec![Objective::Params, Objective::Latency]
            }
        }
    };
    mark_front(&mut points, &objectives).map_err(|e| anyhow!("{e}"))?;

    std::fs::write(&args.out, sweep_csv(&points))?;
    m.output(&args.out);
    if let Some(jp) = &args.json_out {
        std::fs::write(jp, serde_json::to_string_pretty(&points)?)?;
        m.output(jp);
    }
    m.finish()?;
    let front = points.iter().filter(|p| p.on_front).count();
    print_or_json(
        json_mode,
        &json!({
            "points": points.len(),
            "front": front,
            "units": args.units,
            "out": args.out,
        }),
        &format!(
            "swept {} configurations ({} on the Pareto front); wrote {}",
            points.len(),
            front,
            args.out.display()
        ),
    )
}
