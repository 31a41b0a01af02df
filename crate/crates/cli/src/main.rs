use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tvseg_core::canonical::to_canonical_json;
use tvseg_core::data::{self, pgm, Dataset, SynthConfig};
use tvseg_core::gradcheck::{self, GradcheckOptions, NETWORK_TOLERANCE};
use tvseg_core::metrics::{self, binarize, default_thresholds, match_recall, threshold_sweep};
use tvseg_core::model::{self, UNetConfig, UNetParams};
use tvseg_core::report;
use tvseg_core::trainer::{self, FitOptions, TrainConfig};
use tvseg_core::Error;

#[derive(Parser)]
#[command(name = "tvseg", version, about = "U-Net segmentation with total-variation regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset.
    Synth(SynthArgs),
    /// Train a network from a JSON config.
    Train(TrainArgs),
    /// Metrics table over a list of thresholds.
    Sweep(SweepArgs),
    /// Precision-recall curve and average precision.
    Prcurve(PrArgs),
    /// Write a binary mask for every image in a directory.
    Predict(PredictArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Compare two checkpoints at matched recall levels.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Ellipses per image, as MIN:MAX.
    #[arg(long)]
    blobs: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write test-set masks at this threshold to predictions/.
    #[arg(long)]
    predict_threshold: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory with images/ and masks/ (and optionally groups.csv).
    #[arg(long)]
    data: PathBuf,
    /// START:END:STEP or a comma-separated list.
    #[arg(long, default_value = "0.1:0.8:0.1")]
    thresholds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_svg: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    ckpt_a: PathBuf,
    #[arg(long)]
    ckpt_b: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0.975,0.945,0.91,0.85")]
    recall_targets: String,
    /// A row is marked not achievable when the closest recall misses the
    /// target by more than this.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

type CmdResult = Result<(), Error>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Load { .. } | Error::Format { .. } | Error::Manifest(_) | Error::Label(_) | Error::Io { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Rounds away the binary noise of decimal grids (0.30000000000000004).
fn tidy(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, Error> {
    let bad = |msg: String| Error::Config(format!("--{what}: {msg}"));
    let parts: Vec<&str> = text.split(':').collect();
    let values = if parts.len() == 3 {
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("{p:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || end < start {
            return Err(bad(format!("empty or invalid range {text}")));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        (0..=count).map(|i| tidy(start + i as f64 * step)).collect()
    } else if text.trim().is_empty() {
        Vec::new()
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("{p:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?
    };
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(bad(format!("value {v} is outside [0, 1]")));
    }
    Ok(values)
}

fn load_ckpt(path: &Path) -> Result<(UNetConfig, UNetParams), Error> {
    model::load_checkpoint(path)
}

/// Loads an `images/` + `masks/` directory at the network's input size.
fn load_eval_data(dir: &Path, config: &UNetConfig) -> Result<Dataset, Error> {
    let ds = data::load_dataset_dir(dir)?;
    let [h, w] = config.input_size;
    Ok(ds.resized(h, w))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = SynthConfig {
        size: a.size,
        ..Default::default()
    };
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    if let Some(b) = &a.blobs {
        let (lo, hi) = b
            .split_once(':')
            .and_then(|(l, h)| Some((l.trim().parse().ok()?, h.trim().parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("--blobs expects MIN:MAX, got {b:?}")))?;
        cfg.blob_count = [lo, hi];
    }
    let ds = data::synth_blobs(a.n, &cfg, a.seed)?;
    data::save_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn host_summary() -> serde_json::Value {
    let hostname = fs::read_to_string("/etc/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_default();
    json!({
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "hostname": hostname,
        "available_parallelism": std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

fn read_train_config(path: &Path) -> Result<TrainConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut config = read_train_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.checkpoint = None;
    config.validate()?;
    let data_cfg = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("config has no \"data\" section".into()))?;
    let splits = trainer::load_splits(&data_cfg, &config.unet, config.seed)?;
    let options = FitOptions::from_env();

    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), to_canonical_json(&config)?)?;
    write_file(&a.out.join("split.json"), splits.manifest.to_json()?)?;
    let metadata = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::to_value(&config).map_err(|e| Error::Internal(e.to_string()))?,
        "seed": config.seed,
        "started_unix": unix_now(),
        "threads": options.threads,
        "checkpoint_policy": "best validation loss",
        "samples": {
            "train": splits.train.len(),
            "val": splits.val.len(),
            "test": splits.test.len(),
        },
        "host": host_summary(),
    });
    write_file(&a.out.join("metadata.json"), to_canonical_json(&metadata)?)?;

    let result = trainer::fit_with(&config, &splits.train, &splits.val, &options, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  val P {:.3} R {:.3}  lr {:e}",
            r.epoch, r.train_loss, r.val_loss, r.val_precision, r.val_recall, r.lr
        );
    })?;
    write_file(&a.out.join("history.csv"), report::history_csv(&result.history))?;
    write_file(&a.out.join("timing.csv"), report::timing_csv(&result.history))?;
    model::save_checkpoint(&a.out.join("best.ckpt"), &config.unet, &result.best_params)?;
    model::save_checkpoint(&a.out.join("last.ckpt"), &config.unet, &result.params)?;

    let mut summary = json!({
        "stop_reason": result.stop_reason.as_str(),
        "epochs_run": result.history.len(),
        "best_epoch": result.best_epoch,
    });
    if !splits.test.is_empty() {
        let eval = trainer::evaluate(&result.best_params, &config.unet, &splits.test, &default_thresholds())?;
        write_file(&a.out.join("test_sweep.csv"), report::sweep_csv(&eval.sweep))?;
        if let Some(ap) = eval.average_precision {
            summary["test_average_precision"] = json!(format!("{ap:.6}"));
        }
        if let Some(t) = a.predict_threshold {
            let dir = a.out.join("predictions");
            create_dir(&dir)?;
            let probs = trainer::predict_dataset(&result.best_params, &config.unet, &splits.test)?;
            for (s, p) in splits.test.samples.iter().zip(&probs) {
                let mask = data::mask_to_u8(&binarize(p, t));
                pgm::write_pgm(&dir.join(format!("{}.pgm", s.name)), s.width, s.height, &mask)?;
            }
        }
    }
    write_file(&a.out.join("summary.json"), to_canonical_json(&summary)?)?;
    println!(
        "{} after {} epochs; best epoch {}",
        result.stop_reason.as_str(),
        result.history.len(),
        result.best_epoch
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let thresholds = parse_list(&a.thresholds, "thresholds")?;
    let (config, params) = load_ckpt(&a.ckpt)?;
    let ds = load_eval_data(&a.data, &config)?;
    let probs = trainer::predict_dataset(&params, &config, &ds)?;
    let gts: Vec<&[u8]> = ds.samples.iter().map(|s| s.mask.as_slice()).collect();
    let rows = threshold_sweep(&probs, &gts, &thresholds)?;
    write_file(&a.out, report::sweep_csv(&rows))
}

fn cmd_prcurve(a: PrArgs) -> CmdResult {
    let (config, params) = load_ckpt(&a.ckpt)?;
    let ds = load_eval_data(&a.data, &config)?;
    let probs = trainer::predict_dataset(&params, &config, &ds)?;
    let gts: Vec<&[u8]> = ds.samples.iter().map(|s| s.mask.as_slice()).collect();
    let points = metrics::pr_curve(&probs, &gts).map_err(|e| match e {
        Error::NotComputable(m) => Error::Load {
            path: a.data.clone(),
            msg: m,
        },
        other => other,
    })?;
    let ap = metrics::average_precision(&points);
    write_file(&a.out_csv, report::pr_csv(&points, ap))?;
    if let Some(svg) = &a.out_svg {
        write_file(svg, report::pr_svg(&points, ap))?;
    }
    println!("AP {ap:.6} over {} points", points.len());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("--threshold must be in [0, 1], got {}", a.threshold)));
    }
    let (config, params) = load_ckpt(&a.ckpt)?;
    let inputs = data::list_pgm(&a.images)?;
    create_dir(&a.out)?;
    let [h, w] = config.input_size;
    let mut failures = 0;
    for path in &inputs {
        let result = (|| -> CmdResult {
            let img = pgm::read_pgm(path)?;
            let plane: Vec<f64> = img.pixels.iter().map(|&v| v as f64 / img.maxval as f64).collect();
            let resized = data::resize_plane_bilinear(&plane, img.height, img.width, h, w);
            let batch = tvseg_core::tensor::Tensor4::from_vec(tvseg_core::tensor::Shape4::new(1, 1, h, w), resized)?;
            let probs = model::predict(&params, &config, &batch)?;
            let back = data::resize_plane_bilinear(probs.foreground_plane(0), h, w, img.height, img.width);
            let mask = data::mask_to_u8(&binarize(&back, a.threshold));
            let name = path.file_name().expect("listed files have names");
            pgm::write_pgm(&a.out.join(name), img.width, img.height, &mask)
        })();
        if let Err(e) = result {
            eprintln!("warning: {}: {e}", path.display());
            failures += 1;
        }
    }
    if !inputs.is_empty() && failures == inputs.len() {
        return Err(Error::Load {
            path: a.images.clone(),
            msg: "no image could be processed".into(),
        });
    }
    println!("wrote {} masks to {}", inputs.len() - failures, a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool, Error> {
    let results = gradcheck::run_suite(&GradcheckOptions {
        seed: a.seed,
        seeds: a.seeds.max(1),
        corrupt: a.corrupt,
        ..Default::default()
    })?;
    let mut ok = true;
    for r in &results {
        let pass = r.max_rel_error < NETWORK_TOLERANCE;
        ok &= pass;
        println!(
            "{:<16} max_rel_error {:.3e}  (target {:.0e}, {} seeds)  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.seeds,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn predict_resized(config: &UNetConfig, params: &UNetParams, ds: &Dataset) -> Result<(Vec<Vec<f64>>, Dataset), Error> {
    let [h, w] = config.input_size;
    let resized = ds.resized(h, w);
    Ok((trainer::predict_dataset(params, config, &resized)?, resized))
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let targets = parse_list(&a.recall_targets, "recall-targets")?;
    let (cfg_a, params_a) = load_ckpt(&a.ckpt_a)?;
    let (cfg_b, params_b) = load_ckpt(&a.ckpt_b)?;
    let ds = data::load_dataset_dir(&a.data)?;
    let (probs_a, ds_a) = predict_resized(&cfg_a, &params_a, &ds)?;
    let (probs_b, ds_b) = predict_resized(&cfg_b, &params_b, &ds)?;

    let mut out = String::from(
        "target_recall,threshold_a,recall_a,precision_a,miou_a,dice_a,threshold_b,recall_b,precision_b,miou_b,dice_b\n",
    );
    for &target in &targets {
        out.push_str(&format!("{target:.6}"));
        for (probs, ds) in [(&probs_a, &ds_a), (&probs_b, &ds_b)] {
            let gts: Vec<&[u8]> = ds.samples.iter().map(|s| s.mask.as_slice()).collect();
            match match_recall(probs, &gts, target)? {
                Some((t, achieved)) if (achieved - target).abs() <= a.tolerance => {
                    let row = &threshold_sweep(probs, &gts, &[t])?[0];
                    out.push_str(&format!(
                        ",{t:.6},{:.6},{:.6},{:.6},{:.6}",
                        row.recall, row.precision, row.miou, row.dice
                    ));
                }
                _ => out.push_str(",not_achievable,NA,NA,NA,NA"),
            }
        }
        out.push('\n');
    }
    match &a.out {
        Some(path) => write_file(path, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Prcurve(a) => cmd_prcurve(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
