//! `narr` — trains rate-region estimators over SNR sweeps or region traces
//! and writes the results as CSV.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;

use narr::cli::{
    self, exit_code, write_results, ConfigBuilder, ExperimentConfig, CSV_HEADER, SEED_ENV,
};
use narr::Error;

#[derive(Debug, Parser)]
#[command(
    name = "narr",
    version,
    about = "Neural achievable-rate-region estimation for Gaussian and optical MACs"
)]
struct Args {
    /// key=value configuration file; flags override its settings.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["awgn-mac", "oi-mac", "p2p-awgn"])]
    channel: Option<String>,
    #[arg(long, value_parser = ["narr", "mine", "both"])]
    method: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    p1_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p2_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    a1_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    a2_db: Option<f64>,
    #[arg(long)]
    mean_ratio: Option<f64>,
    /// Comma-separated SNR points in dB.
    #[arg(long, allow_hyphen_values = true)]
    snr_list: Option<String>,
    /// Comma-separated region weights in [0, 1]; switches to a region trace.
    #[arg(long)]
    lambda_grid: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr_narr: Option<f64>,
    #[arg(long)]
    lr_nit: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Defaults to $NARR_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output CSV; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

impl Args {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        push("channel", self.channel.clone());
        push("method", self.method.clone());
        push("p1_db", self.p1_db.map(|v| v.to_string()));
        push("p2_db", self.p2_db.map(|v| v.to_string()));
        push("a1_db", self.a1_db.map(|v| v.to_string()));
        push("a2_db", self.a2_db.map(|v| v.to_string()));
        push("mean_ratio", self.mean_ratio.map(|v| v.to_string()));
        push("snr_list", self.snr_list.clone());
        push("lambda_grid", self.lambda_grid.clone());
        push("batch", self.batch.map(|v| v.to_string()));
        push("iters", self.iters.map(|v| v.to_string()));
        push("lr_narr", self.lr_narr.map(|v| v.to_string()));
        push("lr_nit", self.lr_nit.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("bins", self.bins.map(|v| v.to_string()));
        push("eval_samples", self.eval_samples.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("jobs", self.jobs.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        kv
    }

    fn into_config(self) -> narr::Result<ExperimentConfig> {
        let mut builder = ConfigBuilder::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            builder.parse_text(&text)?;
        }
        for (k, v) in self.overrides() {
            builder.set(k, &v, 0)?;
        }
        let env_seed = std::env::var(SEED_ENV).ok();
        builder.finish(env_seed.as_deref())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = match Args::parse().into_config() {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    match execute(&config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

/// Runs the experiment; `Ok(false)` when some point failed.
fn execute(config: &ExperimentConfig) -> narr::Result<bool> {
    if let Some(path) = &config.out_path {
        cli::prepare_output(path)?;
    }
    let rows = cli::run_experiment(config)?;
    match &config.out_path {
        Some(path) => write_results(&rows, path)?,
        None => {
            let mut out = std::io::stdout().lock();
            let mut emit = || -> std::io::Result<()> {
                writeln!(out, "{CSV_HEADER}")?;
                for row in &rows {
                    writeln!(out, "{}", row.csv_line())?;
                }
                out.flush()
            };
            emit().map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        error!("{failed} of {} points failed", rows.len());
    }
    Ok(failed == 0)
}
