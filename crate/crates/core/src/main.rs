use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cryalert::alert::{AlertEmitter, AlertPolicy, AlertSink, CommandSink, HttpSink, WriterSink, DEFAULT_THRESHOLD};
use cryalert::nn::{Network, NetworkConfig};
use cryalert::spectro::{export_spectrogram, stft_magnitude, ExportFormat, StftConfig};
use cryalert::train::{evaluate, train_with_progress, PreparedSplit, TrainConfig, TrainReport};
use cryalert::wav_io::{load_dataset, read_wav_file, resample, Split, SplitRatios, CANONICAL_RATE};
use cryalert::{synth, watch, Error, Model, Result};

const SEED_ENV: &str = "CRYALERT_SEED";

#[derive(Parser)]
#[command(name = "cryalert", version, about = "Classify baby sounds and raise alerts for distress cries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of class subdirectories
    Train(TrainArgs),
    /// Score a model on one split of a dataset
    Eval(EvalArgs),
    /// Classify a single WAV file
    Predict(PredictArgs),
    /// Watch a directory and classify new WAV files as they arrive
    Watch(WatchArgs),
    /// Export the magnitude spectrogram of a WAV file
    Spectrogram(SpectrogramArgs),
    /// Generate the synthetic four-class corpus
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 1e-4, value_parser = parse_lr)]
    lr: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, env = SEED_ENV, default_value_t = 42)]
    seed: u64,
    /// Train, validation and test fractions
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: SplitRatios,
    /// Stop after this many epochs without validation-loss improvement
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    patience: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Print the confusion matrix
    #[arg(long)]
    confusion: bool,
    /// Fractions used when the model was trained
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: SplitRatios,
    /// Split seed; defaults to the seed stored in the model
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct WatchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, value_parser = parse_threshold)]
    threshold: f64,
    /// POST alerts to this URL
    #[arg(long)]
    alert_url: Option<String>,
    /// Run this shell command per alert, JSON on stdin
    #[arg(long)]
    alert_cmd: Option<String>,
    /// Seconds after an alert during which further alerts are not forwarded
    #[arg(long, default_value_t = 0.0, value_parser = parse_cooldown)]
    cooldown: f64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    poll_ms: u64,
    /// Classes that raise alerts
    #[arg(long, value_delimiter = ',', default_value = "crying,screaming")]
    alert_classes: Vec<String>,
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output file; the .pgm or .csv extension selects the format
    #[arg(long, value_parser = parse_export_path)]
    out: (PathBuf, ExportFormat),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = synth::DEFAULT_PER_CLASS, value_parser = parse_count)]
    per_class: usize,
    #[arg(long, env = SEED_ENV, default_value_t = synth::DEFAULT_SEED)]
    seed: u64,
}

fn parse_lr(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("'{s}' is not a finite non-negative number")),
    }
}

fn parse_threshold(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        _ => Err(format!("'{s}' is not in (0, 1]")),
    }
}

fn parse_cooldown(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("'{s}' is not a non-negative number of seconds")),
    }
}

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("'{s}' is not a positive integer")),
    }
}

fn parse_export_path(s: &str) -> std::result::Result<(PathBuf, ExportFormat), String> {
    let path = PathBuf::from(s);
    ExportFormat::from_path(&path)
        .map(|f| (path, f))
        .ok_or_else(|| format!("'{s}' must end in .pgm or .csv"))
}

fn report_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = load_dataset(&args.data, args.split, args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs as usize,
        batch_size: args.batch as usize,
        seed: args.seed,
        lr: args.lr,
        patience: args.patience.map(|p| p as usize),
        stft: StftConfig::default(),
    };
    let mut net = Network::<f32>::new(NetworkConfig::canonical(data.class_count()), args.seed)?;
    println!(
        "training on {} clips ({} train / {} val / {} test), classes: {}",
        data.items.len(),
        data.splits.train.len(),
        data.splits.val.len(),
        data.splits.test.len(),
        data.class_names.join(", ")
    );
    println!("{}", TrainReport::table_header());
    let report = train_with_progress(&mut net, &data, &cfg, |s| println!("{}", TrainReport::table_row(s)))?;
    if report.stopped_early {
        println!("stopped early after {} epochs", report.epochs_run);
    }
    if let (Some(loss), Some(acc)) = (report.test_loss, report.test_accuracy) {
        println!("test_loss {loss:.4}  test_accuracy {acc:.4}");
    }
    Model::new(net, cfg.stft, data.class_names.clone())?.save(&args.out)?;
    let report_file = report_path(&args.out);
    report.save_json(&report_file)?;
    println!("wrote {} and {}", args.out.display(), report_file.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let seed = args.seed.unwrap_or(model.network.seed());
    let data = load_dataset(&args.data, args.ratios, seed)?;
    if data.class_names != model.class_names {
        return Err(Error::Config(format!(
            "model classes {:?} do not match dataset classes {:?}",
            model.class_names, data.class_names
        )));
    }
    let split = PreparedSplit::<f32>::from_dataset(&data, args.split, &model.stft)?;
    if split.is_empty() {
        return Err(Error::Dataset(format!("the {:?} split is empty", args.split)));
    }
    let result = evaluate(&model.network, &split.inputs, &split.labels, &model.class_names)?;
    println!("accuracy {:.4}", result.accuracy);
    println!("loss {:.4}", result.loss);
    if args.confusion {
        print!("{}", result.confusion.to_table());
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionJson<'a> {
    source: String,
    predicted_label: &'a str,
    probabilities: BTreeMap<String, f64>,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let clip = read_wav_file(&args.input)?;
    let prediction = model.predict(&clip)?;
    if args.json {
        let doc = PredictionJson {
            source: args.input.display().to_string(),
            predicted_label: prediction.label(),
            probabilities: prediction.to_map(),
        };
        println!("{}", serde_json::to_string(&doc).expect("prediction serializes"));
    } else {
        for (name, p) in prediction.ranked() {
            println!("{name:<16} {p:.4}");
        }
    }
    Ok(())
}

fn cmd_watch(args: WatchArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let policy = AlertPolicy::new(&model.class_names, &args.alert_classes, args.threshold)?;
    let mut sinks: Vec<Box<dyn AlertSink>> = vec![Box::new(WriterSink::stdout())];
    if let Some(url) = args.alert_url {
        sinks.push(Box::new(HttpSink::new(url)?));
    }
    if let Some(cmd) = args.alert_cmd {
        sinks.push(Box::new(CommandSink::new(cmd)?));
    }
    let mut emitter = AlertEmitter::new(sinks, Duration::from_secs_f64(args.cooldown))?;
    let mut watcher = watch::Watcher::new(&args.dir)?;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| Error::Config(format!("cannot install signal handler: {e}")))?;
    log::info!("watching {}", args.dir.display());
    let summary = watch::run(
        &model,
        &policy,
        &mut emitter,
        &mut watcher,
        Duration::from_millis(args.poll_ms),
        &stop,
    )?;
    eprintln!(
        "stopped: {} classified, {} alerts, {} failed",
        summary.classified, summary.alerts, summary.failed
    );
    Ok(())
}

fn cmd_spectrogram(args: SpectrogramArgs) -> Result<()> {
    let (out, format) = args.out;
    let clip = resample(&read_wav_file(&args.input)?, CANONICAL_RATE)?;
    let spec = stft_magnitude(&clip, &StftConfig::default())?;
    export_spectrogram(&spec, &out, format)?;
    println!("{} x {}", spec.num_frames(), spec.num_bins());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    synth::generate_corpus(&args.out, args.per_class, args.seed)?;
    println!(
        "wrote {} clips per class for {} classes to {}",
        args.per_class,
        synth::SynthClass::ALL.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Watch(a) => cmd_watch(a),
        Command::Spectrogram(a) => cmd_spectrogram(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
