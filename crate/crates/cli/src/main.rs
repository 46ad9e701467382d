mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inrcodec::codec::Codec;
use inrcodec::coder::Bitstream;
use inrcodec::compressor::{train_compressor, Compressor};
use inrcodec::data::*;
use inrcodec::meta::{encode_all, meta_train, MetaModel, TrainingStats};
use inrcodec::metrics::{self, RdPoint, RateUnit};
use inrcodec::{Error, Tensor};
use serde_json::json;

use config::{ConfigError, Quality, RunConfig};

#[derive(Parser)]
#[command(name = "inrcodec", version, about = "Neural compression with meta-learned gated SIREN modulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Log progress to standard error.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Clone, Default)]
struct Io {
    /// Dataset directory with a manifest.txt of NTF files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Meta-model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantizer checkpoint.
    #[arg(long)]
    quantizer: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the shared network; writes the checkpoint, latents and stats sidecars.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Fit latents for new items with the meta-learned initialisation.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Train analysis, synthesis and entropy model at one rate-distortion weight.
    TrainQuantizer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Items to bitstream.
    Compress {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Bitstream to reconstructed NTF items.
    Decompress {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Rate and quality of a bitstream against the original items.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        /// Score these reconstructions instead of decoding the bitstream.
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Sweep the rate-distortion weight and write an RD CSV plus the reference overlay.
    RdCurve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[arg(long = "lambda")]
        lambdas: Vec<f64>,
    },
    /// Write a synthetic RGB image dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let verbose = match &cli.command {
        Command::Synth { .. } => false,
        Command::MetaTrain { common, .. }
        | Command::Fit { common, .. }
        | Command::TrainQuantizer { common, .. }
        | Command::Compress { common, .. }
        | Command::Decompress { common, .. }
        | Command::Eval { common, .. }
        | Command::RdCurve { common, .. } => common.verbose,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose { "info" } else { "warn" }))
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: configuration: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::HashMismatch { .. } => ExitCode::from(2),
                Error::NumericFault { .. } | Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.set_seed(s);
    }
    if let Some(t) = common.threads {
        config.set_threads(t);
    }
    config.validate()?;
    Ok(config)
}

/// Command-line flag, else the config path, else an error naming both.
fn need(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("--{name} (or paths.{name}) is required")))
}

fn sidecar(model: &Path, suffix: &str) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_items(config: &RunConfig, dir: &Path) -> Result<Vec<Tensor>> {
    let items = load_dataset(dir, config.modality.rescale_u8)?;
    let first = items
        .first()
        .ok_or_else(|| CliError::Config(format!("{}: empty dataset", dir.display())))?;
    config.check_items(first.shape())?;
    Ok(items)
}

/// A directory with a manifest, or a single NTF file.
fn load_items_or_file(config: &RunConfig, path: &Path) -> Result<Vec<Tensor>> {
    if path.is_dir() {
        load_items(config, path)
    } else {
        let item = load_ntf(path)?.to_tensor(config.modality.rescale_u8);
        config.check_items(item.shape())?;
        Ok(vec![item])
    }
}

fn load_model(path: &Path) -> Result<(MetaModel, TrainingStats)> {
    let model = MetaModel::load(path)?;
    let stats = TrainingStats::load(sidecar(path, ".stats.json"))?;
    Ok((model, stats))
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            output,
            count,
            size,
            seed,
        } => {
            let items: Vec<NtfArray> = synthetic_images(count, size, seed).iter().map(NtfArray::from_f64).collect();
            write_dataset(&output, &items)?;
            print(json!({ "items": count, "output": output }));
            Ok(())
        }
        Command::MetaTrain { common, io } => {
            let config = load_config(&common)?;
            let data = need(&io.data, &config.paths.data, "data")?;
            let model_path = need(&io.model, &config.paths.model, "model")?;
            let items = load_items(&config, &data)?;
            let norm = if config.modality.standardize {
                FeatureNorm::fit(&items)
            } else {
                FeatureNorm::identity(config.inr.feature_dim)
            };
            let (set, _) = prepare(&items, &config.modality, &norm)?;
            log::info!("meta-training on {} patches of {} items", set.len(), items.len());
            let out = meta_train(&set, &config.inr, &config.meta)?;
            out.model.save(&model_path)?;
            TrainingStats {
                latent: out.stats,
                features: norm,
            }
            .save(sidecar(&model_path, ".stats.json"))?;
            save_latents(&sidecar(&model_path, ".latents.ntf"), &out.latents)?;
            print(json!({
                "items": items.len(),
                "patches": set.len(),
                "final_loss": out.losses.last(),
                "model_hash": format!("{:016x}", out.model.hash()),
            }));
            Ok(())
        }
        Command::Fit { common, io } => {
            let config = load_config(&common)?;
            let (model, stats) = load_model(&need(&io.model, &config.paths.model, "model")?)?;
            let items = load_items(&config, &need(&io.data, &config.paths.data, "data")?)?;
            let output = need(&io.output, &config.paths.output, "output")?;
            let (set, _) = prepare(&items, &config.modality, &stats.features)?;
            let latents = encode_all(&model, &set, config.fit_steps(), config.meta.threads)?;
            save_latents(&output, &latents)?;
            print(json!({ "items": items.len(), "patches": latents.len(), "output": output }));
            Ok(())
        }
        Command::TrainQuantizer { common, io, lambda } => {
            let mut config = load_config(&common)?;
            if let Some(l) = lambda {
                config.rd.lambda = l;
                config.validate()?;
            }
            let model_path = need(&io.model, &config.paths.model, "model")?;
            let (model, stats) = load_model(&model_path)?;
            let items = load_items(&config, &need(&io.data, &config.paths.data, "data")?)?;
            let quantizer = need(&io.quantizer, &config.paths.quantizer, "quantizer")?;
            let latent_path = io
                .input
                .clone()
                .or(config.paths.input.clone())
                .unwrap_or_else(|| sidecar(&model_path, ".latents.ntf"));
            let latents = load_latents(&latent_path)?;
            let (set, _) = prepare(&items, &config.modality, &stats.features)?;
            if latents.len() != set.len() {
                return Err(CliError::Config(format!(
                    "{} holds {} latents but the data has {} patches",
                    latent_path.display(),
                    latents.len(),
                    set.len()
                )));
            }
            let out = train_compressor(&model, &set, &latents, &stats.latent, &config.rd)?;
            out.compressor.save(&quantizer)?;
            let last = out.history.last();
            print(json!({
                "lambda": config.rd.lambda,
                "rate_bits": last.map(|t| t.rate_bits),
                "distortion": last.map(|t| t.distortion),
                "quantizer_hash": format!("{:016x}", out.compressor.hash()),
            }));
            Ok(())
        }
        Command::Compress { common, io } => {
            let config = load_config(&common)?;
            let (model, stats) = load_model(&need(&io.model, &config.paths.model, "model")?)?;
            let comp = Compressor::load(need(&io.quantizer, &config.paths.quantizer, "quantizer")?)?;
            let source = io
                .input
                .clone()
                .or(io.data.clone())
                .or(config.paths.input.clone())
                .or(config.paths.data.clone())
                .ok_or_else(|| CliError::Config("--input or --data is required".into()))?;
            let output = need(&io.output, &config.paths.output, "output")?;
            let items = load_items_or_file(&config, &source)?;
            let codec = Codec::new(&model, &comp, config.modality.clone(), stats.features, config.fit_steps())?;
            let stream = codec.compress(&items, config.meta.threads)?;
            let bytes = stream.pack()?;
            std::fs::write(&output, &bytes)?;
            let payload_bits = payload_bits(&stream);
            print(json!({
                "items": items.len(),
                "bytes": bytes.len(),
                "payload_bits": payload_bits,
                "rate": rate(&config, &items, payload_bits as f64),
                "rate_unit": RateUnit::from(config.eval.rate_unit).as_str(),
            }));
            Ok(())
        }
        Command::Decompress { common, io } => {
            let config = load_config(&common)?;
            let (model, stats) = load_model(&need(&io.model, &config.paths.model, "model")?)?;
            let comp = Compressor::load(need(&io.quantizer, &config.paths.quantizer, "quantizer")?)?;
            let input = need(&io.input, &config.paths.input, "input")?;
            let output = need(&io.output, &config.paths.output, "output")?;
            let bytes = std::fs::read(&input)?;
            let codec = Codec::new(&model, &comp, config.modality.clone(), stats.features, config.fit_steps())?;
            let items = codec.decompress(&bytes, config.meta.threads)?;
            let arrays: Vec<NtfArray> = items.iter().map(NtfArray::from_f64).collect();
            write_dataset(&output, &arrays)?;
            print(json!({ "items": items.len(), "output": output }));
            Ok(())
        }
        Command::Eval { common, io, recon } => {
            let config = load_config(&common)?;
            let originals = load_items_or_file(&config, &need(&io.data, &config.paths.data, "data")?)?;
            let input = need(&io.input, &config.paths.input, "input")?;
            let bytes = std::fs::read(&input)?;
            let decoded = match recon {
                Some(dir) => load_dataset(&dir, false)?,
                None => {
                    let (model, stats) = load_model(&need(&io.model, &config.paths.model, "model")?)?;
                    let comp = Compressor::load(need(&io.quantizer, &config.paths.quantizer, "quantizer")?)?;
                    let codec =
                        Codec::new(&model, &comp, config.modality.clone(), stats.features, config.fit_steps())?;
                    codec.decompress(&bytes, config.meta.threads)?
                }
            };
            let stream = Bitstream::unpack(&bytes)?;
            if decoded.len() != originals.len() {
                return Err(CliError::Config(format!(
                    "{} reconstructions for {} original items",
                    decoded.len(),
                    originals.len()
                )));
            }
            let bits = payload_bits(&stream) as f64;
            let q = quality(&config, &originals, &decoded)?;
            let key = match config.eval.quality {
                Quality::Psnr => "psnr_db",
                Quality::Accuracy => "accuracy",
            };
            print(json!({
                "items": originals.len(),
                key: q,
                "payload_bits": bits,
                "rate": rate(&config, &originals, bits),
                "rate_unit": RateUnit::from(config.eval.rate_unit).as_str(),
            }));
            Ok(())
        }
        Command::RdCurve { common, io, lambdas } => {
            let config = load_config(&common)?;
            let lambdas = if lambdas.is_empty() { config.lambdas.clone() } else { lambdas };
            if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
                return Err(CliError::Config("rd-curve needs positive --lambda values (or lambdas)".into()));
            }
            let model_path = need(&io.model, &config.paths.model, "model")?;
            let (model, stats) = load_model(&model_path)?;
            let data = need(&io.data, &config.paths.data, "data")?;
            let items = load_items(&config, &data)?;
            let eval_items = match io.input.clone().or(config.paths.input.clone()) {
                Some(p) => load_items_or_file(&config, &p)?,
                None => items.clone(),
            };
            let output = need(&io.output, &config.paths.output, "output")?;
            let latents = load_latents(&sidecar(&model_path, ".latents.ntf"))?;
            let (set, _) = prepare(&items, &config.modality, &stats.features)?;
            if latents.len() != set.len() {
                return Err(CliError::Config("latents sidecar does not match the data".into()));
            }
            let mut points = Vec::new();
            for &lambda in &lambdas {
                log::info!("rate-distortion weight {lambda}");
                let rd = inrcodec::compressor::RdConfig {
                    lambda,
                    ..config.rd.clone()
                };
                let comp = train_compressor(&model, &set, &latents, &stats.latent, &rd)?.compressor;
                let codec =
                    Codec::new(&model, &comp, config.modality.clone(), stats.features.clone(), config.fit_steps())?;
                let stream = codec.compress(&eval_items, config.meta.threads)?;
                let decoded = codec.decompress(&stream.pack()?, config.meta.threads)?;
                let bits = payload_bits(&stream) as f64;
                points.push(RdPoint {
                    dataset: config.eval.dataset.clone(),
                    lambda: Some(lambda),
                    rate: rate(&config, &eval_items, bits),
                    unit: config.eval.rate_unit.into(),
                    psnr_db: quality(&config, &eval_items, &decoded)?,
                    items: eval_items.len(),
                });
            }
            let overlay = metrics::write_rd_csv(&output, &points)?;
            print(json!({
                "output": output,
                "reference": overlay,
                "points": points.iter().map(|p| json!({"lambda": p.lambda, "rate": p.rate, "quality": p.psnr_db})).collect::<Vec<_>>(),
            }));
            Ok(())
        }
    }
}

fn save_latents(path: &Path, latents: &[Tensor]) -> Result<()> {
    let n = latents.first().map_or(0, |t| t.len());
    let data: Vec<f64> = latents.iter().flat_map(|t| t.data().iter().copied()).collect();
    save_ntf(path, &NtfArray::from_f64(&Tensor::new([latents.len(), n], data)))?;
    Ok(())
}

fn load_latents(path: &Path) -> Result<Vec<Tensor>> {
    let t = load_ntf(path)?.to_tensor(false);
    if t.rank() != 2 {
        return Err(CliError::Core(Error::Format(format!(
            "{}: latents must be a [count, dim] array",
            path.display()
        ))));
    }
    let n = t.cols();
    Ok((0..t.rows()).map(|i| Tensor::new([n], t.row(i).to_vec())).collect())
}

fn payload_bits(stream: &Bitstream) -> u64 {
    stream.items.iter().map(|i| i.payload.len() as u64 * 8).sum()
}

/// Payload bits per pixel, or kilobits per second of signal.
fn rate(config: &RunConfig, items: &[Tensor], bits: f64) -> f64 {
    match config.eval.rate_unit {
        config::RateKind::Bpp => {
            let pixels: usize = items.iter().map(|t| t.shape()[..t.rank() - 1].iter().product::<usize>()).sum();
            metrics::bpp(bits, pixels)
        }
        config::RateKind::Kbps => {
            let sr = config.eval.sample_rate.expect("validated sample rate");
            let seconds: f64 = items.iter().map(|t| t.shape()[0] as f64 / sr).sum();
            metrics::kbps(bits, seconds)
        }
    }
}

/// Mean per-item PSNR or voxel accuracy.
fn quality(config: &RunConfig, originals: &[Tensor], decoded: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for (o, d) in originals.iter().zip(decoded) {
        if o.shape() != d.shape() {
            return Err(CliError::Config(format!(
                "reconstruction shape {:?} differs from original {:?}",
                d.shape(),
                o.shape()
            )));
        }
        total += match config.eval.quality {
            Quality::Psnr => metrics::psnr(metrics::mse(o.data(), d.data())),
            Quality::Accuracy => metrics::voxel_accuracy(d.data(), o.data(), config.eval.threshold),
        };
    }
    Ok(total / originals.len() as f64)
}
