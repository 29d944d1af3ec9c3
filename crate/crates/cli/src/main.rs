//! `snndhz`: train, run and profile the spiking dehazing network.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use snn_dehaze::checkpoint::Checkpoint;
use snn_dehaze::colorspace::{rgb_to_lab_sequence, LabScaling};
use snn_dehaze::config::RunConfig;
use snn_dehaze::dataset::{list_images, load_dataset, load_image, save_image, PairedDataset};
use snn_dehaze::energy::{energy_report, CmosCosts, EnergyMode};
use snn_dehaze::metrics::evaluate;
use snn_dehaze::model::DehazeModel;
use snn_dehaze::train::fit;
use snn_dehaze::{Error, Tensor};

const THREADS_ENV: &str = "SNNDHZ_THREADS";

#[derive(Parser)]
#[command(name = "snndhz", version, about = "Spiking neural network underwater image dehazing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on paired hazy/reference folders.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_hazy: PathBuf,
        #[arg(long)]
        data_ref: PathBuf,
        /// Validation folders; the training pairs are used when absent.
        #[arg(long, requires = "val_ref")]
        val_hazy: Option<PathBuf>,
        #[arg(long, requires = "val_hazy")]
        val_ref: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dehaze images (files or directories of PNGs).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timesteps: Option<usize>,
        /// Defaults to `config.toml` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Spike-rate, SOPs and energy ledger for one image.
    Energy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mac-first")]
        mode: String,
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PSNR / SSIM over paired folders.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_hazy: PathBuf,
        #[arg(long)]
        data_ref: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Learnable-parameter count per module.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the network's LAB view of images (offset scaling) as PNG.
    Convert {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Dataset(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = setup_threads().and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(1)
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn setup_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Failure::Usage(format!("{THREADS_ENV} must be at least 1")));
        }
        snn_dehaze::configure_threads(n)?;
    }
    Ok(())
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train {
            config,
            data_hazy,
            data_ref,
            val_hazy,
            val_ref,
            out,
            seed,
            resume,
        } => cmd_train(config, &data_hazy, &data_ref, val_hazy.zip(val_ref), &out, seed, resume),
        Command::Infer {
            ckpt,
            input,
            out,
            timesteps,
            config,
        } => cmd_infer(&ckpt, &input, &out, timesteps, config),
        Command::Energy {
            ckpt,
            input,
            out,
            mode,
            timesteps,
            config,
        } => cmd_energy(&ckpt, &input, &out, &mode, timesteps, config),
        Command::Eval {
            ckpt,
            data_hazy,
            data_ref,
            out,
            timesteps,
            config,
        } => cmd_eval(&ckpt, &data_hazy, &data_ref, out.as_deref(), timesteps, config),
        Command::Params { config } => cmd_params(config),
        Command::Convert { input, out } => cmd_convert(&input, &out),
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if !p.is_dir() {
        return Err(Failure::Usage(format!("{what} directory not found: {}", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> CliResult<()> {
    if !p.is_file() {
        return Err(Failure::Usage(format!("{what} not found: {}", p.display())));
    }
    Ok(())
}

fn make_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Explicit config, else `config.toml` beside the checkpoint, else defaults.
fn config_for_ckpt(explicit: Option<PathBuf>, ckpt: &Path) -> CliResult<RunConfig> {
    if explicit.is_some() {
        return load_config(explicit.as_deref());
    }
    let sibling = ckpt.parent().map(|d| d.join("config.toml"));
    match sibling {
        Some(p) if p.is_file() => load_config(Some(&p)),
        _ => Ok(RunConfig::default()),
    }
}

fn load_model(ckpt: &Path, cfg: &RunConfig) -> CliResult<(DehazeModel, snn_dehaze::params::ParamStore)> {
    require_file(ckpt, "checkpoint")?;
    let model = DehazeModel::new(cfg.model_config())?;
    let mut params = model.init(cfg.train.seed);
    let ck = Checkpoint::load(ckpt)?;
    ck.restore(&mut params)
        .map_err(|e| Failure::Runtime(format!("{}: {e} (does the config match the checkpoint?)", ckpt.display())))?;
    Ok((model, params))
}

fn check_dims(path: &Path, img: &Tensor) -> CliResult<()> {
    let (h, w) = (img.dim(1), img.dim(2));
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Failure::Usage(format!(
            "{}: size {w}x{h} is not divisible by 8; resize it to e.g. {}x{}",
            path.display(),
            w / 8 * 8,
            h / 8 * 8
        )));
    }
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p)?.into_values());
        } else {
            require_file(p, "input")?;
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Failure::Usage("no input images".into()));
    }
    Ok(files)
}

fn cmd_train(
    config: Option<PathBuf>,
    data_hazy: &Path,
    data_ref: &Path,
    val: Option<(PathBuf, PathBuf)>,
    out: &Path,
    seed: Option<u64>,
    resume: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    require_dir(data_hazy, "hazy data")?;
    require_dir(data_ref, "reference data")?;
    if let Some((h, r)) = &val {
        require_dir(h, "validation hazy")?;
        require_dir(r, "validation reference")?;
    }
    let resume = match resume {
        Some(p) => {
            require_file(&p, "resume checkpoint")?;
            Some(Checkpoint::load(&p)?)
        }
        None => None,
    };
    let train = load_dataset(data_hazy, data_ref, cfg.train.resolution)?;
    let val_set: Option<PairedDataset> = match &val {
        Some((h, r)) => Some(load_dataset(h, r, cfg.train.resolution)?),
        None => None,
    };
    let model = DehazeModel::new(cfg.model_config())?;
    let mut params = model.init(cfg.train.seed);

    make_out(out)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let log_path = out.join("train_log.csv");
    let mut log = String::from("epoch,step,train_loss,val_loss\n");
    write(&log_path, &log)?;
    let result = fit(
        &model,
        &mut params,
        &train,
        val_set.as_ref().unwrap_or(&train),
        &cfg.train,
        resume.as_ref(),
        |row| {
            let val = row.val_loss.map(|v| v.to_string()).unwrap_or_default();
            log.push_str(&format!("{},{},{},{}\n", row.epoch, row.step, row.train_loss, val));
            let _ = std::fs::write(&log_path, &log);
            println!(
                "epoch {:>4}  step {:>7}  train {:.6}  val {}",
                row.epoch,
                row.step,
                row.train_loss,
                if val.is_empty() { "-".to_string() } else { val }
            );
        },
    )?;
    result.best.save(&out.join("best.ckpt"))?;
    result.last.save(&out.join("last.ckpt"))?;
    println!(
        "best epoch {} written to {}",
        result.best_epoch,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn cmd_infer(
    ckpt: &Path,
    inputs: &[PathBuf],
    out: &Path,
    timesteps: Option<usize>,
    config: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = config_for_ckpt(config, ckpt)?;
    let steps = timesteps.unwrap_or(cfg.train.timesteps);
    if steps == 0 {
        return Err(Failure::Usage("timesteps must be at least 1".into()));
    }
    let (model, params) = load_model(ckpt, &cfg)?;
    let files = expand_inputs(inputs)?;
    let mut images = Vec::with_capacity(files.len());
    for p in &files {
        let img = load_image(p)?;
        check_dims(p, &img)?;
        images.push(img);
    }
    make_out(out)?;
    for (p, img) in files.iter().zip(&images) {
        let y = model.infer(&params, img, steps)?;
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = out.join(format!("{name}.png"));
        save_image(&dest, &y)?;
        println!("{} -> {}", p.display(), dest.display());
    }
    Ok(())
}

fn cmd_energy(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    mode: &str,
    timesteps: Option<usize>,
    config: Option<PathBuf>,
) -> CliResult<()> {
    let mode: EnergyMode = mode.parse()?;
    let cfg = config_for_ckpt(config, ckpt)?;
    let steps = timesteps.unwrap_or(cfg.train.timesteps);
    if steps == 0 {
        return Err(Failure::Usage("timesteps must be at least 1".into()));
    }
    let (model, params) = load_model(ckpt, &cfg)?;
    require_file(input, "input")?;
    let img = load_image(input)?;
    check_dims(input, &img)?;
    let ledger = energy_report(&model, &params, &img, steps, CmosCosts::default(), mode)?;
    make_out(out)?;
    let text = ledger.to_text();
    write(&out.join("energy.txt"), &text)?;
    write(&out.join("energy.toml"), &ledger.to_toml()?)?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data_hazy: &Path,
    data_ref: &Path,
    out: Option<&Path>,
    timesteps: Option<usize>,
    config: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = config_for_ckpt(config, ckpt)?;
    let steps = timesteps.unwrap_or(cfg.train.timesteps);
    if steps == 0 {
        return Err(Failure::Usage("timesteps must be at least 1".into()));
    }
    require_dir(data_hazy, "hazy data")?;
    require_dir(data_ref, "reference data")?;
    let (model, params) = load_model(ckpt, &cfg)?;
    let data = load_dataset(data_hazy, data_ref, cfg.train.resolution)?;
    let report = evaluate(&model, &params, &data, steps)?;
    let text = report.to_text();
    if let Some(out) = out {
        make_out(out)?;
        write(&out.join("eval.txt"), &text)?;
        write(&out.join("eval.toml"), &report.to_toml()?)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_params(config: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config.as_deref())?;
    let model = DehazeModel::new(cfg.model_config())?;
    let params = model.init(cfg.train.seed);
    for (module, n) in params.breakdown() {
        println!("{module:<16} {n:>10}");
    }
    println!("{:<16} {:>10}", "total", DehazeModel::param_count(&params));
    Ok(())
}

fn cmd_convert(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let files = expand_inputs(inputs)?;
    make_out(out)?;
    for p in &files {
        let img = load_image(p)?;
        let (h, w) = (img.dim(1), img.dim(2));
        let seq = img.reshape(&[1, 3, h, w])?;
        let lab = rgb_to_lab_sequence(&seq, LabScaling::Offset)?.reshape(&[3, h, w])?;
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = out.join(format!("{name}_lab.png"));
        save_image(&dest, &lab)?;
        println!("{} -> {}", p.display(), dest.display());
    }
    Ok(())
}
