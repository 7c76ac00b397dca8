use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semistream::concurrent::run_inference_threaded;
use semistream::image::read_image;
use semistream::package::{load_package, save_package};
use semistream::report::{Format, PerfReport};
use semistream::verify::{run_verify, Fault, VerifyConfig};
use semistream_core::dataflow::{check_image, schedule_rounds, SchedulerConfig};
use semistream_core::engines::{layer_stats, Engine, EngineStats, DEFAULT_ADD_OPS_PER_CYCLE};
use semistream_core::model::{build_mobilenet_v2, prepare, random_image, PreparedModel, QTensor};
use semistream_core::oracle::run_sequential;
use semistream_core::perf::{gbps_to_bytes, ClockConfig, CALIBRATED_BANDWIDTH_GBPS};
use semistream_core::quant::Rounding;

#[derive(Parser)]
#[command(name = "semistream", version, about = "Semi-streaming MobileNetV2 accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded random MobileNetV2 model package.
    GenModel(GenModelArgs),
    /// Re-derive the integer constants of a package for a rounding mode.
    Prepare(PrepareArgs),
    /// Run one image through a model.
    Infer(InferArgs),
    /// Compare every engine with the reference evaluation on random layers.
    Verify(VerifyArgs),
    /// Throughput, bandwidth and per-round latency tables.
    Report(ReportArgs),
}

fn parse_rounding(s: &str) -> Result<Rounding, String> {
    s.parse().map_err(|e: semistream_core::Error| e.to_string())
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    width_multiplier: f64,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    #[arg(long, default_value = "nearest", value_parser = parse_rounding)]
    rounding: Rounding,
    /// Package directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "nearest", value_parser = parse_rounding)]
    rounding: Rounding,
    /// Defaults to rewriting `--model` in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Stream,
    Sequential,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// P6 PPM or RAWHWC blob; a seeded random image when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Stream)]
    mode: Mode,
    /// Logits file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Also compare whole-model inference for this package.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 2)]
    model_images: usize,
    #[arg(long, default_value = "nearest", value_parser = parse_rounding)]
    rounding: Rounding,
    /// Test fixture: perturb the engines' requantization.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

fn parse_bandwidth(s: &str) -> Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number of Gb/s or `inf`, got {s:?}")),
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Package to report on; the standard 224×224 model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed of the standard model when no package is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100.0)]
    freq_mhz: f64,
    /// External weight bus in gigabits per second, or `inf`.
    #[arg(long, default_value_t = CALIBRATED_BANDWIDTH_GBPS, value_parser = parse_bandwidth)]
    bandwidth_gbps: f64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[arg(long, default_value_t = DEFAULT_ADD_OPS_PER_CYCLE)]
    add_ops_per_cycle: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Writes to stdout; a reader that went away early is not an error.
fn say(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => say(text),
    }
}

fn load(path: &Path) -> Result<PreparedModel> {
    load_package(path).with_context(|| format!("loading model package {}", path.display()))
}

fn plan_summary(model: &PreparedModel) -> Result<String> {
    let plan = schedule_rounds(model)?;
    let mut out = String::new();
    let regular = plan.iter().filter(|r| !r.trailing).count();
    writeln!(
        out,
        "layers: {}  input: {}  classes: {}",
        model.layers().len(),
        model.graph.input,
        model.graph.num_classes
    )?;
    writeln!(out, "rounds: {regular} (+{} trailing)", plan.len() - regular)?;
    for r in &plan {
        let slots: Vec<String> =
            r.assignments().into_iter().map(|(e, i)| format!("{e}={}", model.layer(i).name)).collect();
        let tag = if r.trailing { " trailing" } else { "" };
        writeln!(out, "round {:2}{tag}: {}", r.round_index, slots.join(" "))?;
    }
    Ok(out)
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let graph = build_mobilenet_v2(a.width_multiplier, a.resolution, a.seed)?;
    let model = prepare(&graph, a.rounding)?;
    save_package(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    say(&plan_summary(&model)?)?;
    say(&format!("wrote {}\n", a.out.display()))
}

fn prepare_cmd(a: PrepareArgs) -> Result<()> {
    let model = load(&a.model)?;
    let model = prepare(&model.graph, a.rounding)?;
    let out = a.out.as_deref().unwrap_or(&a.model);
    save_package(&model, out).with_context(|| format!("writing {}", out.display()))?;
    say(&format!("prepared {} with {} rounding\n", out.display(), a.rounding.as_str()))
}

fn engine_totals(model: &PreparedModel) -> Result<Vec<(EngineStats, usize)>> {
    let mut totals: Vec<(EngineStats, usize)> = Engine::ALL.iter().map(|&e| (EngineStats::empty(e), 0)).collect();
    for layer in model.layers() {
        let s = layer_stats(layer)?;
        let t = totals.iter_mut().find(|(t, _)| t.engine == s.engine).expect("every engine listed");
        t.0.merge(&s);
        t.1 += 1;
    }
    Ok(totals)
}

fn logits_text(logits: &QTensor) -> String {
    let mut out = String::from("# class raw dequantized\n");
    for (i, &q) in logits.data.iter().enumerate() {
        let real = logits.scale * (q as f64 - logits.zero_point as f64);
        let _ = writeln!(out, "{i} {q} {real}");
    }
    out
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load(&a.model)?;
    let image = match &a.image {
        Some(p) => read_image(p, model.graph.input_quant)?,
        None => random_image(model.graph.input, a.seed),
    };
    check_image(&model, &image)?;
    let logits = match a.mode {
        Mode::Stream => run_inference_threaded(&model, &image, &SchedulerConfig::default())?,
        Mode::Sequential => run_sequential(&model, &image)?,
    };
    emit(&logits_text(&logits), a.out.as_deref())?;
    let mut stats = String::from("# engine layers cycles madds useful_madds\n");
    for (s, n) in engine_totals(&model)? {
        writeln!(stats, "{} {n} {} {} {}", s.engine, s.cycles, s.madds, s.useful_madds)?;
    }
    if a.out.is_some() {
        say(&stats)?;
    } else {
        eprint!("{stats}");
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let model = a.model.as_deref().map(load).transpose()?;
    let config = VerifyConfig {
        seed: a.seed,
        trials: a.trials,
        rounding: a.rounding,
        fault: a.inject_fault.then_some(Fault::RequantOffByOne),
        model_images: a.model_images,
    };
    let report = run_verify(model.as_ref(), &config);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    say(&report.render())?;
    Ok(report.passed())
}

fn report(a: ReportArgs) -> Result<()> {
    if !(a.freq_mhz.is_finite() && a.freq_mhz > 0.0) {
        bail!("--freq-mhz must be positive");
    }
    let model = match &a.model {
        Some(p) => load(p)?,
        None => prepare(&build_mobilenet_v2(1.0, 224, a.seed)?, Rounding::Nearest)?,
    };
    let clock = ClockConfig::new((a.freq_mhz * 1e6).round() as u64, gbps_to_bytes(a.bandwidth_gbps))?;
    let r = PerfReport::build(&model, clock, a.add_ops_per_cycle)?;
    let format = match a.format {
        OutputFormat::Text => Format::Text,
        OutputFormat::Csv => Format::Csv,
    };
    emit(&r.render(format), a.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => gen_model(a).map(|_| true),
        Command::Prepare(a) => prepare_cmd(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Verify(a) => verify(a),
        Command::Report(a) => report(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
