//! Experiment configuration, sweep execution and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{error, info};

use crate::channels::{db_to_linear, snr_sweep_points, ChannelKind, ChannelSpec, SweepConfig};
use crate::error::{Error, Result};
use crate::estimators::RateTriple;
use crate::trainer::{run, Method, RateWeights, TrainConfig};

/// Environment variable supplying the seed when none is configured.
pub const SEED_ENV: &str = "NARR_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Narr,
    Mine,
    Both,
}

impl MethodChoice {
    pub fn methods(self) -> &'static [Method] {
        match self {
            Self::Narr => &[Method::Narr],
            Self::Mine => &[Method::Mine],
            Self::Both => &[Method::Narr, Method::Mine],
        }
    }
}

impl FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narr" => Ok(Self::Narr),
            "mine" => Ok(Self::Mine),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub channel: ChannelKind,
    pub sigma2: f64,
    pub p1: f64,
    pub p2: f64,
    pub a1: f64,
    pub a2: f64,
    pub mean_ratio: f64,
    pub method: MethodChoice,
    /// SNR points in dB; when set, powers (or peaks) follow each point.
    pub snr_db: Option<Vec<f64>>,
    /// Added to user 1's level at every SNR point.
    pub user1_offset_db: f64,
    /// Region-trace weights λ ∈ [0, 1].
    pub lambda_grid: Option<Vec<f64>>,
    pub train: TrainConfig,
    pub out_path: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            channel: ChannelKind::AwgnMac,
            sigma2: 1.0,
            p1: 10.0,
            p2: 5.0,
            a1: db_to_linear(10.0),
            a2: db_to_linear(5.0),
            mean_ratio: 0.2,
            method: MethodChoice::Narr,
            snr_db: None,
            user1_offset_db: 0.0,
            lambda_grid: None,
            train: TrainConfig::default(),
            out_path: None,
            jobs: 1,
        }
    }
}

/// Accumulates `key=value` settings; `eval_samples` defaults to ten times
/// the batch unless set explicitly.
#[derive(Debug, Default)]
pub struct ConfigBuilder {
    config: ExperimentConfig,
    eval_samples_set: bool,
    seed_set: bool,
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one setting. `line` is reported in errors (0 = command line).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let err = |message: String| Error::Parse {
            line,
            key: key.to_string(),
            message,
        };
        let num = || {
            value
                .parse::<f64>()
                .map_err(|e| err(format!("`{value}` is not a number: {e}")))
        };
        let int = || {
            value
                .parse::<usize>()
                .map_err(|e| err(format!("`{value}` is not a nonnegative integer: {e}")))
        };
        let pos = || -> Result<f64> {
            let v = num()?;
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("must be positive, got {v}")))
            }
        };
        let c = &mut self.config;
        match key {
            "channel" => c.channel = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "method" => c.method = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "sigma2" => c.sigma2 = pos()?,
            "p1" => c.p1 = pos()?,
            "p2" => c.p2 = pos()?,
            "p1_db" => c.p1 = db_to_linear(num()?),
            "p2_db" => c.p2 = db_to_linear(num()?),
            "a1" => c.a1 = pos()?,
            "a2" => c.a2 = pos()?,
            "a1_db" => c.a1 = db_to_linear(num()?),
            "a2_db" => c.a2 = db_to_linear(num()?),
            "mean_ratio" => {
                let r = num()?;
                if !(r > 0.0 && r < 1.0) {
                    return Err(err(format!("must lie in (0, 1), got {r}")));
                }
                c.mean_ratio = r;
            }
            "snr_list" | "snr_db" => {
                let l = parse_list(value).map_err(err)?;
                if l.is_empty() {
                    return Err(err("empty SNR list".into()));
                }
                c.snr_db = Some(l);
            }
            "p1_offset_db" => c.user1_offset_db = num()?,
            "lambda_grid" => {
                let l = parse_list(value).map_err(err)?;
                if l.is_empty() || l.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(err("weights must be a nonempty list in [0, 1]".into()));
                }
                c.lambda_grid = Some(l);
            }
            "batch" => c.train.batch_size = int()?,
            "iters" => c.train.max_iters = int()?,
            "lr_narr" => c.train.lr_narr = pos()?,
            "lr_nit" => c.train.lr_nit = pos()?,
            "alpha" => c.train.alpha = pos()?,
            "bins" => c.train.bins = int()?,
            "eval_every" => c.train.eval_every = int()?,
            "eval_samples" => {
                c.train.eval_samples = int()?;
                self.eval_samples_set = true;
            }
            "convergence_window" => c.train.convergence_window = int()?,
            "convergence_tol" => c.train.convergence_tol = pos()?,
            "seed" => {
                c.train.seed = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?;
                self.seed_set = true;
            }
            "jobs" => c.jobs = int()?.max(1),
            "out" => c.out_path = Some(PathBuf::from(value)),
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    /// Parses whitespace-separated `key=value` tokens; `#` starts a comment.
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("");
            for token in content.split_whitespace() {
                let (key, value) = token.split_once('=').ok_or_else(|| Error::Parse {
                    line: i + 1,
                    key: token.to_string(),
                    message: "expected key=value".into(),
                })?;
                self.set(key, value, i + 1)?;
            }
        }
        Ok(())
    }

    /// Validates and fills derived defaults. `env_seed` is used only when no
    /// seed was configured.
    pub fn finish(mut self, env_seed: Option<&str>) -> Result<ExperimentConfig> {
        if !self.seed_set {
            if let Some(s) = env_seed {
                self.set("seed", s, 0)?;
            }
        }
        let c = &mut self.config;
        if !self.eval_samples_set {
            c.train.eval_samples = 10 * c.train.batch_size;
        }
        c.train.validate()?;
        for spec in channel_specs(c)? {
            spec.validate()?;
        }
        Ok(self.config)
    }
}

/// Parses a configuration file body with no overrides.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut b = ConfigBuilder::new();
    b.parse_text(text)?;
    b.finish(None)
}

/// Channel at the configured operating point.
pub fn point_spec(c: &ExperimentConfig) -> Result<ChannelSpec> {
    match c.channel {
        ChannelKind::AwgnMac => ChannelSpec::awgn_mac(c.p1, c.p2, c.sigma2),
        ChannelKind::P2pAwgn => ChannelSpec::p2p_awgn(c.p1, c.sigma2),
        ChannelKind::OiMac => ChannelSpec::oi_mac(c.a1, c.a2, c.mean_ratio, c.sigma2),
    }
}

fn channel_specs(c: &ExperimentConfig) -> Result<Vec<ChannelSpec>> {
    match &c.snr_db {
        Some(points) => {
            let mut specs = snr_sweep_points(&SweepConfig {
                kind: c.channel,
                points_db: points.clone(),
                user1_offset_db: c.user1_offset_db,
                mean_ratio: Some(c.mean_ratio),
            })?;
            for s in &mut specs {
                s.sigma2 = c.sigma2;
            }
            Ok(specs)
        }
        None => Ok(vec![point_spec(c)?]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub channel: ChannelKind,
    /// Position in the sweep or region trace.
    pub index: usize,
    pub snr_db: Option<f64>,
    pub lambda: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub sigma2: f64,
    pub method: Method,
    /// Raw estimates in nats; negative values are clamped only on output.
    pub rates: RateTriple,
    pub capacity: Option<RateTriple>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub seed: u64,
    pub error: Option<String>,
}

pub const CSV_HEADER: &str = "channel,index,snr_db,lambda,p1,p2,a1,a2,sigma2,method,\
r1_nats,r2_nats,rsum_nats,r1_bits,r2_bits,rsum_bits,clamped,\
capacity_r1_nats,capacity_r2_nats,capacity_rsum_nats,iterations,converged,seed,error";

/// `%.12g`-style formatting.
pub fn format_g12(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..12).contains(&exp) {
        let fixed = format!("{:.*}", (11 - exp) as usize, v);
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{exp}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_g12).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace(['\n', '\r'], " "))
    } else {
        s.to_string()
    }
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        let r = self.rates.as_array();
        let clamped = r.iter().any(|v| *v < 0.0);
        let nats: Vec<f64> = r.iter().map(|v| v.max(0.0)).collect();
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{},{},{},{},{},{},{},{},{}",
            self.channel,
            self.index,
            opt(self.snr_db),
            opt(self.lambda),
            opt(self.p1),
            opt(self.p2),
            opt(self.a1),
            opt(self.a2),
            format_g12(self.sigma2),
            self.method
        );
        for v in &nats {
            let _ = write!(line, ",{}", format_g12(*v));
        }
        for v in &nats {
            let _ = write!(line, ",{}", format_g12(v / std::f64::consts::LN_2));
        }
        let _ = write!(line, ",{clamped}");
        match self.capacity {
            Some(c) => {
                for v in c.as_array() {
                    let _ = write!(line, ",{}", format_g12(v));
                }
            }
            None => line.push_str(",,,"),
        }
        let _ = write!(
            line,
            ",{},{},{},{}",
            self.iterations,
            self.converged,
            self.seed,
            csv_escape(self.error.as_deref().unwrap_or(""))
        );
        line
    }
}

/// Writes the CSV (fixed header, LF endings). Wall-clock times vary between
/// runs, so they go to a `<path>.timings.csv` sidecar to keep the main file
/// a deterministic function of the configuration.
pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut body = String::with_capacity(128 * (rows.len() + 1));
    body.push_str(CSV_HEADER);
    body.push('\n');
    let mut timings = String::from("index,method,wall_time_s\n");
    for row in rows {
        body.push_str(&row.csv_line());
        body.push('\n');
        let _ = writeln!(
            timings,
            "{},{},{:.3}",
            row.index, row.method, row.wall_time_s
        );
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    let sidecar = timings_path(path);
    fs::write(&sidecar, timings).map_err(|e| Error::io(sidecar, e))
}

pub fn timings_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".timings.csv");
    PathBuf::from(s)
}

#[derive(Debug, Clone)]
struct Job {
    index: usize,
    spec: ChannelSpec,
    snr_db: Option<f64>,
    lambda: Option<f64>,
    method: Method,
}

fn execute(job: &Job, base: &TrainConfig) -> ResultRow {
    let mut train = base.clone();
    train.seed = base.seed ^ job.index as u64;
    train.method = job.method;
    if let Some(l) = job.lambda {
        train.weights = RateWeights::region(l);
    }
    let start = Instant::now();
    let outcome = run(&job.spec, &train);
    let wall_time_s = start.elapsed().as_secs_f64();
    let capacity = job.spec.capacity().map(|c| RateTriple {
        r1: c.r1,
        r2: c.r2,
        rsum: c.rsum,
    });
    let (rates, iterations, converged, error) = match outcome {
        Ok((rates, trace)) => (rates, trace.iterations, trace.converged, None),
        Err(e) => {
            error!("point {} ({}) failed: {e}", job.index, job.method);
            let nan = RateTriple {
                r1: f64::NAN,
                r2: f64::NAN,
                rsum: f64::NAN,
            };
            (nan, 0, false, Some(e.to_string()))
        }
    };
    info!(
        "point {} {}: r1 {:.4} r2 {:.4} rsum {:.4} nats in {:.1}s",
        job.index, job.method, rates.r1, rates.r2, rates.rsum, wall_time_s
    );
    ResultRow {
        channel: job.spec.kind,
        index: job.index,
        snr_db: job.snr_db,
        lambda: job.lambda,
        p1: job.spec.p1,
        p2: job.spec.p2,
        a1: job.spec.a1,
        a2: job.spec.a2,
        sigma2: job.spec.sigma2,
        method: job.method,
        rates,
        capacity,
        iterations,
        converged,
        wall_time_s,
        seed: train.seed,
        error,
    }
}

/// Runs jobs on up to `jobs` threads. Rows come back in job order; if
/// `partial` is set, the finished prefix is rewritten there after each job.
fn execute_all(
    jobs: &[Job],
    config: &ExperimentConfig,
    partial: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let slots: Mutex<Vec<Option<ResultRow>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(k) else { break };
        let row = execute(job, &config.train);
        let mut guard = slots.lock().expect("result lock");
        guard[k] = Some(row);
        if let Some(path) = partial {
            let done: Vec<ResultRow> = guard.iter().map_while(|r| r.clone()).collect();
            if let Err(e) = write_results(&done, path) {
                io_error.lock().expect("error lock").get_or_insert(e);
            }
        }
    };
    let threads = config.jobs.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..threads {
            s.spawn(worker);
        }
        worker();
    });
    if let Some(e) = io_error.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect())
}

/// One row per (point, method); all methods at a point share its seed.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let specs = channel_specs(config)?;
    let mut jobs = Vec::new();
    for (index, spec) in specs.into_iter().enumerate() {
        for &method in config.method.methods() {
            jobs.push(Job {
                index,
                spec: spec.clone(),
                snr_db: config.snr_db.as_ref().map(|l| l[index]),
                lambda: None,
                method,
            });
        }
    }
    execute_all(&jobs, config, config.out_path.as_deref())
}

/// One row per region weight λ at the configured operating point, each
/// maximising `λ·r1 + (1 − λ)·r2 + rsum`.
pub fn run_region_trace(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let grid = config
        .lambda_grid
        .clone()
        .ok_or_else(|| Error::Config("region trace needs lambda_grid".into()))?;
    let spec = point_spec(config)?;
    let mut jobs = Vec::new();
    for (index, &lambda) in grid.iter().enumerate() {
        for &method in config.method.methods() {
            jobs.push(Job {
                index,
                spec: spec.clone(),
                snr_db: None,
                lambda: Some(lambda),
                method,
            });
        }
    }
    execute_all(&jobs, config, config.out_path.as_deref())
}

/// Region trace when a λ grid is configured, else an SNR sweep.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    if config.lambda_grid.is_some() {
        run_region_trace(config)
    } else {
        run_sweep(config)
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 1,
        Error::Io { .. } => 3,
        _ => 2,
    }
}

/// Ensures the output directory exists before any training starts.
pub fn prepare_output(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(path, e))
}
