use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};

use edanet_core::analyzer::{analyze, render_report, ReportFormat};
use edanet_core::imageio::{colorize, read_ppm, write_pgm, Palette};
use edanet_core::netdef::{build_variant_for, parse_netspec, serialize_netspec, Dataset, Variant};
use edanet_core::runtime::{fold_batch_norm, infer_image, init_weights, load_weights, save_weights};
use edanet_core::selftest::run_selftest;
use edanet_core::{Error, NetworkSpec, Shape};

#[derive(Debug, Parser)]
#[command(name = "edanet", version, about = "Build, analyze and run EDANet-style segmentation networks")]
struct Cli {
    /// Worker threads for intra-op parallelism (default: all cores)
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the network description of a built-in variant
    Build {
        #[arg(long)]
        variant: Variant,
        /// Defaults to the dataset's class count
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value = "cityscapes")]
        dataset: Dataset,
        /// Output file, stdout if not present
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer shapes, parameters, multiply-adds and receptive fields
    Analyze {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value = "512x1024")]
        input_size: Size,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write deterministic weights for a network
    Init {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a binary PPM image into a PGM label map
    Infer {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a colour rendering as PPM
        #[arg(long)]
        color: Option<PathBuf>,
        /// Palette file, one `r g b` line per class
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Merge batch norms into convolutions first
        #[arg(long)]
        fold: bool,
        /// Repeat inference N times and report the mean wall-clock time
        #[arg(long, value_name = "N")]
        bench: Option<usize>,
    },
    /// Write the batch-norm-folded network and weights
    Fold {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_net: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// Run the built-in numerical and structural checks
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Size {
    h: usize,
    w: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension `{v}`"));
        Ok(Size { h: parse(h)?, w: parse(w)? })
    }
}

/// Failure with the process exit code it maps to.
enum Failure {
    Io(String),
    Invalid(String),
    Selftest(usize),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 3,
            Failure::Invalid(_) => 4,
            Failure::Selftest(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Io(m) | Failure::Invalid(m) => f.write_str(m),
            Failure::Selftest(n) => write!(f, "{n} selftest check(s) failed"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(io) => Failure::Io(io.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write(p, text.as_bytes()),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Io(e.to_string())),
    }
}

fn load_net(path: &Path) -> Result<NetworkSpec, Failure> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Failure::Invalid(format!("{}: not UTF-8", path.display())))?;
    parse_netspec(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_bound_weights(net: &NetworkSpec, path: &Path) -> Result<edanet_core::WeightStore, Failure> {
    let weights = load_weights(path).map_err(|e| match e {
        Error::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
        other => Failure::Invalid(format!("{}: {other}", path.display())),
    })?;
    weights.validate(net)?;
    Ok(weights)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Build {
            variant,
            classes,
            dataset,
            out,
        } => {
            let net = build_variant_for(variant, dataset, classes.unwrap_or(dataset.classes()))?;
            emit(out.as_deref(), &serialize_netspec(&net))
        }
        Command::Analyze {
            net,
            input_size,
            format,
            out,
        } => {
            let net = load_net(&net)?;
            let report = analyze(&net, Shape::chw(net.input_channels(), input_size.h, input_size.w))?;
            emit(out.as_deref(), &render_report(&report, format))
        }
        Command::Init { net, seed, out } => {
            let net = load_net(&net)?;
            let weights = init_weights(&net, seed)?;
            write(&out, &weights.to_bytes()?)
        }
        Command::Infer {
            net,
            weights,
            image,
            out,
            color,
            palette,
            fold,
            bench,
        } => {
            let net = load_net(&net)?;
            let weights = load_bound_weights(&net, &weights)?;
            let input = read_ppm(&read(&image)?).map_err(|e| Failure::Invalid(format!("{}: {e}", image.display())))?;
            let palette = match palette {
                Some(p) => {
                    let text = String::from_utf8(read(&p)?)
                        .map_err(|_| Failure::Invalid(format!("{}: not UTF-8", p.display())))?;
                    Some(Palette::parse(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let start = Instant::now();
            let labels = infer_image(&net, &weights, &input, fold)?;
            if let Some(n) = bench.filter(|&n| n > 1) {
                for _ in 1..n {
                    infer_image(&net, &weights, &input, fold)?;
                }
                let mean = start.elapsed().as_secs_f64() * 1e3 / n as f64;
                eprintln!("mean inference time over {n} runs: {mean:.1} ms");
            } else if bench.is_some() {
                eprintln!("inference time: {:.1} ms", start.elapsed().as_secs_f64() * 1e3);
            }
            write(&out, &write_pgm(&labels)?)?;
            if let Some(path) = color {
                let palette = palette.unwrap_or_else(|| Palette::generated(net.classes));
                write(&path, &colorize(&labels, &palette)?.to_ppm())?;
            }
            Ok(())
        }
        Command::Fold {
            net,
            weights,
            out_net,
            out_weights,
        } => {
            let net = load_net(&net)?;
            let weights = load_bound_weights(&net, &weights)?;
            let folded = fold_batch_norm(&net, &weights)?;
            write(&out_net, serialize_netspec(&folded.net).as_bytes())?;
            save_weights(&folded.weights, &out_weights)?;
            Ok(())
        }
        Command::Selftest { seed } => {
            let results = run_selftest(seed);
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Failure::Selftest(failed));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(usize::from(n)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
