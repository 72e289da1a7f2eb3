//! `cift`: command-line front end for the compressible-feature toolkit.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cift_core::eval::{bd_rate, curves_by_kind, parse_rd_csv, write_rd_csv, MetricKind};
use cift_core::experiment::run_experiment;
use cift_core::featcodec::{decode_levels, encode_levels, tile, write_pgm, Bitstream, ExternalCodec};
use cift_core::mtl::{evaluate, format_log, make_dataset, train, Checkpoint, Config, TaskWeights};
use cift_core::quantizer::{dequantize, quantize, QuantParams, DEFAULT_BITS};
use cift_core::rateloss::{rate_loss, rate_loss_backward, RateLossConfig};
use cift_core::{Error, FeatureTensor, LevelTensor, Result};

#[derive(Parser)]
#[command(name = "cift", version, about = "Compressible multi-task features: rate loss, feature codec, training and BD-rate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the compressibility loss of an FTEN tensor.
    RateLoss {
        /// Feature tensor (FTEN).
        file: PathBuf,
        /// Also write the gradient with respect to the tensor (FTEN).
        #[arg(long, value_name = "OUT")]
        grad: Option<PathBuf>,
        /// Derivative of |x| at 0.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        abs_grad_at_zero: f64,
    },
    /// Quantize and tile an FTEN tensor into a PGM image plus a `.q` sidecar.
    Quantize {
        /// Feature tensor (FTEN).
        file: PathBuf,
        #[command(flatten)]
        q: QuantArgs,
        /// Output PGM; the sidecar is written next to it with extension `.q`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize, tile and losslessly code an FTEN tensor into a CIFB container.
    Encode {
        /// Feature tensor (FTEN).
        file: PathBuf,
        #[command(flatten)]
        q: QuantArgs,
        /// Output CIFB container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a CIFB container into a dequantized FTEN tensor.
    Decode {
        /// CIFB container.
        file: PathBuf,
        /// Output FTEN tensor.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy multi-task model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for `model.ckpt` and `train_log.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over the codec sweep and write RD points as CSV.
    Evaluate {
        /// Checkpoint written by `train`.
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip the external codec and evaluate the lossless codec only.
        #[arg(long)]
        lossless_only: bool,
        /// Output RD CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate of TEST against REF (RD CSV files), one line per metric.
    Bdrate {
        /// Reference RD CSV.
        reference: PathBuf,
        /// Test RD CSV.
        test: PathBuf,
    },
    /// Render synthetic samples (image and disparity as FTEN, labels as PGM).
    GenData {
        /// Dataset seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of samples.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train benchmark and proposed models, evaluate both and compare.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip the external codec sweep.
        #[arg(long)]
        lossless_only: bool,
        /// Artifacts directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct QuantArgs {
    /// Bit depth of the Q-layer.
    #[arg(long, default_value_t = DEFAULT_BITS)]
    bits: u8,
    /// Tile grid `RxC`; defaults to the near-square layout.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Clipping range `lo,hi`; defaults to the tensor's min and max.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    range: Option<(f64, f64)>,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training epochs (overrides the config).
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Add the compressibility loss, `true` or `false` (overrides the config).
    #[arg(long)]
    include_rate: Option<bool>,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or("expected RxC")?;
    Ok((r.parse().map_err(|_| "bad row count")?, c.parse().map_err(|_| "bad column count")?))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    Ok((lo.trim().parse().map_err(|_| "bad lo")?, hi.trim().parse().map_err(|_| "bad hi")?))
}

impl QuantArgs {
    fn params(&self, f: &FeatureTensor) -> Result<QuantParams> {
        match self.range {
            Some((lo, hi)) => QuantParams::new(self.bits, lo, hi),
            None => QuantParams::fitted(self.bits, f),
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.include_rate {
            cfg.include_rate = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn external_codec(cfg: &Config, lossless_only: bool) -> Option<ExternalCodec> {
    (!lossless_only).then(|| ExternalCodec::new(cfg.encode_cmd.clone(), cfg.decode_cmd.clone()))
}

fn levels_to_u8_pgm(levels: &LevelTensor, path: &Path) -> Result<()> {
    let img = tile(levels, Some((1, 1)))?;
    write_pgm(create(path)?, &img, 8)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RateLoss { file, grad, abs_grad_at_zero } => {
            let f = FeatureTensor::load(&file)?;
            println!("{}", rate_loss(&f));
            if let Some(out) = grad {
                let cfg = RateLossConfig::new(abs_grad_at_zero)?;
                rate_loss_backward(&f, cfg).write_ften(create(&out)?)?;
            }
        }
        Command::Quantize { file, q, out } => {
            let f = FeatureTensor::load(&file)?;
            let params = q.params(&f)?;
            let img = tile(&quantize(&f, &params), q.grid)?;
            write_pgm(create(&out)?, &img, params.bits())?;
            write_text(&out.with_extension("q"), &format!("{params}\n"))?;
        }
        Command::Encode { file, q, out } => {
            let f = FeatureTensor::load(&file)?;
            let params = q.params(&f)?;
            let stream = encode_levels(&quantize(&f, &params), q.grid, &params)?;
            let mut w = create(&out)?;
            w.write_all(&stream.to_bytes())?;
            w.flush()?;
        }
        Command::Decode { file, out } => {
            let stream = Bitstream::from_bytes(&fs::read(&file)?)?;
            let levels = decode_levels(&stream)?;
            dequantize(&levels, &stream.header.quant)?.write_ften(create(&out)?)?;
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let data = cift_core::mtl::train_set(&cfg)?;
            let outcome = train(&cfg, &data)?;
            fs::create_dir_all(&out)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            write_text(&out.join("train_log.csv"), &format_log(&outcome.log))?;
            outcome.checkpoint.save(out.join("model.ckpt"))?;
            let TaskWeights { log_weights } = outcome.checkpoint.weights;
            eprintln!("trained {} epochs; final log-weights {log_weights:?}", cfg.epochs);
        }
        Command::Evaluate { checkpoint, cfg, lossless_only, out } => {
            let cfg = cfg.load()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = cift_core::mtl::test_set(&cfg)?;
            let codec = external_codec(&cfg, lossless_only);
            let report = evaluate(&ck, &data, &cfg, codec.as_ref())?;
            write_text(&out, &write_rd_csv(&report.rd_points()))?;
        }
        Command::Bdrate { reference, test } => {
            let read = |p: &Path| -> Result<_> {
                let text = fs::read_to_string(p)?;
                curves_by_kind(&parse_rd_csv(&text)?)
            };
            let (rc, tc) = (read(&reference)?, read(&test)?);
            let mut any = false;
            for kind in MetricKind::ALL {
                let (Some(r), Some(t)) =
                    (rc.iter().find(|c| c.kind() == kind), tc.iter().find(|c| c.kind() == kind))
                else {
                    continue;
                };
                println!("{kind}\t{:.2}%", bd_rate(r, t)?);
                any = true;
            }
            if !any {
                return Err(Error::Eval("the two files share no metric kind".into()));
            }
        }
        Command::GenData { seed, count, out } => {
            fs::create_dir_all(&out)?;
            for (i, s) in make_dataset(seed, count)?.iter().enumerate() {
                FeatureTensor::from_tensor(&s.image)?.write_ften(create(&out.join(format!("image_{i:04}.ften")))?)?;
                FeatureTensor::from_tensor(&s.disparity)?
                    .write_ften(create(&out.join(format!("disparity_{i:04}.ften")))?)?;
                let n = s.labels.len();
                let side = (n as f64).sqrt() as usize;
                let labels = LevelTensor::new(side, side, 1, s.labels.iter().map(|&l| l as u16).collect())?;
                levels_to_u8_pgm(&labels, &out.join(format!("labels_{i:04}.pgm")))?;
            }
        }
        Command::Experiment { cfg, lossless_only, out } => {
            let cfg = cfg.load()?;
            let codec = external_codec(&cfg, lossless_only);
            let report = run_experiment(&cfg, &out, codec.as_ref(), &mut |line| eprintln!("{line}"))?;
            print!("{}", fs::read_to_string(out.join("summary.txt"))?);
            if !report.directional_claim_holds() {
                eprintln!("note: the proposed model did not meet the BPFE/task-loss target");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
