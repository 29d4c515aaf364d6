use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use winsorcam::bundle::{write_bundle, SaliencyBundle, BUNDLE_EXTENSION};
use winsorcam::cli::{
    cmd_compute, cmd_evaluate, cmd_sweep, default_p_grid, parse_p_grid, summary_table, sweep_table, CliError,
    RenderOptions,
};
use winsorcam::metrics::BinaryMask;
use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::service::{serve, Catalog, Service};
use winsorcam::{Error, WinsorParams};

#[derive(Parser)]
#[command(name = "winsorcam", version, about = "Percentile-tunable multi-layer Grad-CAM")]
struct Cli {
    /// Report failures as one line of JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Knobs {
    /// Aggregation of channel weights: mean or max.
    #[arg(long, default_value = "mean")]
    agg: String,
    /// Resampling kernel: bilinear or nearest.
    #[arg(long, default_value = "bilinear")]
    interp: String,
    /// Output range of positive layer weights, `L,H`.
    #[arg(long, default_value = "0.1,1.0")]
    bounds: String,
    /// Normalization maximum: pre_clip or post_clip.
    #[arg(long, default_value = "pre_clip")]
    range: String,
}

impl Knobs {
    fn params(&self, p: f64) -> winsorcam::Result<WinsorParams> {
        Ok(WinsorParams {
            p,
            aggregation: self.agg.parse()?,
            interp: self.interp.parse()?,
            bounds: self.bounds.parse()?,
            range: self.range.parse()?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render fused, overlay and binary PNGs plus importance.json for one p.
    Compute {
        bundle: PathBuf,
        #[arg(long, default_value_t = 50.0, allow_negative_numbers = true)]
        p: f64,
        /// Overlay opacity of the heatmap.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Score one bundle over a grid of p against its mask.
    Sweep {
        bundle: PathBuf,
        /// `0,25,50` or `start:stop:step`. Default 0:100:10.
        #[arg(long)]
        p_grid: Option<String>,
        /// Also write sweep.csv and sweep.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Sweep every bundle in a directory and aggregate.
    Evaluate {
        dir: PathBuf,
        #[arg(long)]
        p_grid: Option<String>,
        /// Write records/summary CSV, JSON and text here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// HTTP API under /v1/ plus static files.
    Serve {
        #[arg(long)]
        bundle_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Directory of UI assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Write synthetic micro-CNN bundles with masks.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn grid(s: &Option<String>) -> winsorcam::Result<Vec<f64>> {
    s.as_deref().map_or_else(|| Ok(default_p_grid()), parse_p_grid)
}

fn usage<T>(r: winsorcam::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::usage)
}

fn data<T>(r: winsorcam::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::data)
}

fn run(command: Command) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match command {
        Command::Compute { bundle, p, alpha, out, knobs } => {
            let opts = RenderOptions {
                params: usage(knobs.params(p))?,
                alpha,
            };
            usage(opts.validate())?;
            for path in data(cmd_compute(&bundle, &out, &opts))? {
                let _ = writeln!(stdout, "{}", path.display());
            }
        }
        Command::Sweep { bundle, p_grid, out, knobs } => {
            let (grid, params) = (usage(grid(&p_grid))?, usage(knobs.params(50.0))?);
            let report = data(cmd_sweep(&bundle, &grid, &params, out.as_deref()))?;
            let _ = write!(stdout, "{}", sweep_table(&report));
        }
        Command::Evaluate { dir, p_grid, out, knobs } => {
            let (grid, params) = (usage(grid(&p_grid))?, usage(knobs.params(50.0))?);
            let eval = data(cmd_evaluate(&dir, &grid, &params, out.as_deref()))?;
            let _ = write!(stdout, "{}", summary_table(&eval.summary));
        }
        Command::Serve { bundle_dir, port, host, static_dir, workers } => {
            let (catalog, failed) = data(Catalog::load(&bundle_dir))?;
            for (path, err) in failed {
                eprintln!("skipping {}: {err}", path.display());
            }
            let addr = SocketAddr::new(host, port);
            eprintln!("serving {} bundle(s) on http://{addr}/", catalog.ids().count());
            data(serve(Arc::new(Service::new(catalog, static_dir)), addr, workers))?;
        }
        Command::Fixture { out, count, seed } => {
            data(std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e }))?;
            for s in seed..seed + count {
                let f = make_synthetic_fixture(s);
                let mask = data(BinaryMask::from_tensor(&f.mask))?;
                let mut bundle = data(SaliencyBundle::from_model(&f.model, &f.image, f.target_class, Some(mask)))?;
                bundle.manifest.true_class = Some(f.target_class);
                let path = out.join(format!("fixture_{s:03}.{BUNDLE_EXTENSION}"));
                data(write_bundle(&bundle, &path))?;
                let _ = writeln!(stdout, "{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if json_errors && e.use_stderr() => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let err = CliError::usage(Error::InvalidArgument(first.trim_start_matches("error: ").to_string()));
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code);
        }
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if cli.json_errors {
                eprintln!("{}", err.to_json_line());
            } else {
                eprintln!("error: {}", err.error);
            }
            ExitCode::from(err.exit_code)
        }
    }
}
