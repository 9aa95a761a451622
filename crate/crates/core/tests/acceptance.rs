//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything (about half an hour on
//! one core); `cargo test --test acceptance -- c1 c7` runs a selection.
//! A FAIL is reported but only fails the process when
//! `NARR_ACCEPTANCE_STRICT=1` is set.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use narr::channels::{channel_forward, ChannelSpec};
use narr::divergence::{
    chi2_up, dv_lower_bound, dv_lower_bound_grad, kl_lower_bound, KlLowerBoundParams,
};
use narr::estimators::{sample_reference, SampleBatch, Var};
use narr::nit::{
    avg_power_normalize, avg_power_normalize_backward, intensity_constrain,
    intensity_constrain_backward, UserConstraint,
};
use narr::nn::{adam_step, AdamState, HiddenActivation, Matrix, Mlp, OutputActivation};
use narr::trainer::{run, run_state, Method, RateWeights, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("c1", "gaussian-kl-oracle", gaussian_kl_oracle),
    ("c2", "chi2-sandwich", chi2_sandwich),
    ("c3", "p2p-awgn-sanity", p2p_sanity),
    ("c4", "awgn-mac-region", awgn_mac_region),
    ("c5", "narr-vs-mine-high-snr", narr_vs_mine),
    ("c6", "oi-mac-feasibility-shape", oi_mac_trace),
    ("c7", "gradient-suite", gradient_suite),
    ("c8", "determinism", determinism),
];

fn main() {
    let selected: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let strict = std::env::var("NARR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    let mut ran = 0;
    for &(id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.iter().any(|s| s == id || s == name) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = check();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {id} {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.pass {
            failed.push(id);
        }
    }
    println!(
        "acceptance: {} of {ran} criteria passed{}",
        ran - failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failed.join(", "))
        }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}

fn normals(n: usize, mean: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| mean + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

// ---------------------------------------------------------------- c1

fn gaussian_kl_oracle() -> Outcome {
    const TRUE_KL: f64 = 0.5;
    const BAND: (f64, f64) = (0.45, 0.55);
    const BATCH: usize = 2000;
    const STEPS: usize = 2000;
    const EVAL_EVERY: usize = 200;
    const EVAL_BATCH: usize = 100_000;
    const LR: f64 = 1e-3;
    const TIME_LIMIT_S: f64 = 60.0;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut critic = Mlp::new(
        &[1, 64, 64, 64, 1],
        HiddenActivation::Relu,
        OutputActivation::Identity,
        &mut rng,
    )
    .unwrap();
    let mut opt = AdamState::for_mlp(&critic, LR).unwrap();
    let tilted = KlLowerBoundParams::new(2.0).unwrap();
    let mut ordering_violations = 0;
    let mut evals = Vec::new();
    for step in 1..=STEPS {
        let mut xs = normals(BATCH, 1.0, &mut rng);
        xs.extend(normals(BATCH, 0.0, &mut rng));
        let (out, tape) = critic.forward(&Matrix::column_vector(xs)).unwrap();
        let (tp, tq) = out.as_slice().split_at(BATCH);
        let (dp, dq) = dv_lower_bound_grad(tp, tq).unwrap();
        let up: Vec<f64> = dp.iter().chain(&dq).map(|g| -g).collect();
        let (grads, _) = critic.backward(&tape, &Matrix::column_vector(up)).unwrap();
        adam_step(&mut opt, &mut critic, &grads).unwrap();
        if step % EVAL_EVERY == 0 {
            let p = critic
                .predict(&Matrix::column_vector(normals(EVAL_BATCH, 1.0, &mut rng)))
                .unwrap();
            let q = critic
                .predict(&Matrix::column_vector(normals(EVAL_BATCH, 0.0, &mut rng)))
                .unwrap();
            let dv = dv_lower_bound(p.as_slice(), q.as_slice()).unwrap();
            let tl = kl_lower_bound(p.as_slice(), q.as_slice(), tilted).unwrap();
            if tl > dv {
                ordering_violations += 1;
            }
            evals.push((dv, tl));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (dv, tl) = *evals.last().unwrap();
    let pass =
        (BAND.0..=BAND.1).contains(&dv) && ordering_violations == 0 && elapsed < TIME_LIMIT_S;
    Outcome::new(
        pass,
        format!(
            "DV {dv:.4} nats (true {TRUE_KL}, band [{}, {}]), tilted a=2 {tl:.4}; tilted > DV on {ordering_violations}/{} eval batches; {elapsed:.1}s < {TIME_LIMIT_S}s",
            BAND.0,
            BAND.1,
            evals.len()
        ),
    )
}

// ---------------------------------------------------------------- c2

fn chi2_sandwich() -> Outcome {
    const TRIALS: usize = 1000;
    const ATOMS: usize = 10;
    const MIN_PROB: f64 = 0.01;
    const SLACK: f64 = 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let w: Vec<f64> = (0..ATOMS).map(|_| rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        w.iter()
            .map(|v| MIN_PROB + (1.0 - ATOMS as f64 * MIN_PROB) * v / s)
            .collect()
    };
    let chi2 = |p: &[f64], q: &[f64]| {
        p.iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b) / b)
            .sum::<f64>()
    };
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..TRIALS {
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let up = chi2_up(chi2(&p, &q), chi2(&q, &p)).unwrap();
        min_gap = min_gap.min(up - kl);
        if up < kl - SLACK {
            violations += 1;
        }
    }
    Outcome::new(
        violations == 0,
        format!(
            "{violations} violations in {TRIALS} pairs; smallest gap chi2_up − KL = {min_gap:.3e}"
        ),
    )
}

// ---------------------------------------------------------------- c3

fn p2p_sanity() -> Outcome {
    const BAND: (f64, f64) = (0.24, 0.35);
    const TRUE_MI: f64 = 0.346_573_590_279_972_6;
    const OVERSHOOT: f64 = 0.05;
    const TIME_LIMIT_S: f64 = 180.0;

    let spec = ChannelSpec::p2p_awgn(1.0, 1.0).unwrap();
    let config = TrainConfig {
        max_iters: 3000,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (rates, trace) = match run(&spec, &config) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("run failed: {e}")),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let peak = trace
        .records
        .iter()
        .map(|r| r.rates.r1)
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = (BAND.0..=BAND.1).contains(&rates.r1)
        && peak <= TRUE_MI + OVERSHOOT
        && elapsed < TIME_LIMIT_S;
    Outcome::new(
        pass,
        format!(
            "I(X;Z) {:.4} nats (band [{}, {}], true {TRUE_MI:.4}); max over {} evaluations {peak:.4} (limit {:.4}); {} iterations in {elapsed:.0}s",
            rates.r1,
            BAND.0,
            BAND.1,
            trace.records.len(),
            TRUE_MI + OVERSHOOT,
            trace.iterations
        ),
    )
}

// ---------------------------------------------------------------- c4

fn awgn_mac_region() -> Outcome {
    const R1_BAND: (f64, f64) = (0.85, 1.25);
    const R2_BAND: (f64, f64) = (0.60, 0.95);
    const RSUM_BAND: (f64, f64) = (1.00, 1.45);
    const TIME_LIMIT_S: f64 = 360.0;

    let spec = ChannelSpec::awgn_mac(10.0, 5.0, 1.0).unwrap();
    let cap = spec.capacity().unwrap();
    let config = TrainConfig {
        max_iters: 3000,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (r, trace) = match run(&spec, &config) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("run failed: {e}")),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let inside = |v: f64, band: (f64, f64)| (band.0..=band.1).contains(&v);
    let pass = inside(r.r1, R1_BAND)
        && inside(r.r2, R2_BAND)
        && inside(r.rsum, RSUM_BAND)
        && elapsed <= TIME_LIMIT_S;
    Outcome::new(
        pass,
        format!(
            "r1 {:.4} in [{}, {}] (C {:.4}); r2 {:.4} in [{}, {}] (C {:.4}); rsum {:.4} in [{}, {}] (C {:.4}); {} iterations in {elapsed:.0}s",
            r.r1, R1_BAND.0, R1_BAND.1, cap.r1, r.r2, R2_BAND.0, R2_BAND.1, cap.r2, r.rsum, RSUM_BAND.0, RSUM_BAND.1, cap.rsum,
            trace.iterations
        ),
    )
}

// ---------------------------------------------------------------- c5

fn narr_vs_mine() -> Outcome {
    const SNR_DB: f64 = 15.0;
    const SEEDS: [u64; 4] = [0, 1, 2, 3];
    const REQUIRED_WINS: usize = 3;

    let level = 10f64.powf(SNR_DB / 10.0);
    let spec = ChannelSpec::awgn_mac(level, level, 1.0).unwrap();
    let cap = spec.capacity().unwrap().rsum;
    let mut wins = 0;
    let mut mine_over = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let estimate = |method| {
            let config = TrainConfig {
                max_iters: 1500,
                seed,
                method,
                ..TrainConfig::default()
            };
            run(&spec, &config).map(|(r, _)| r.rsum)
        };
        match (estimate(Method::Narr), estimate(Method::Mine)) {
            (Ok(n), Ok(m)) => {
                if (n - cap).abs() <= (m - cap).abs() {
                    wins += 1;
                }
                if m > cap {
                    mine_over += 1;
                }
                parts.push(format!("seed {seed}: narr {n:.4} mine {m:.4}"));
            }
            (n, m) => parts.push(format!(
                "seed {seed}: run failed ({:?} / {:?})",
                n.err(),
                m.err()
            )),
        }
    }
    Outcome::new(
        wins >= REQUIRED_WINS,
        format!(
            "{SNR_DB} dB, closed-form rsum {cap:.4}; NARR at least as close on {wins}/{} seeds (need {REQUIRED_WINS}); MINE above closed form on {mine_over} (expected, not a failure); {}",
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- c6

fn oi_mac_trace() -> Outcome {
    const LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    const MEAN_TOL: f64 = 0.02;
    const MONOTONE_SLACK: f64 = 0.05;
    const CHECK_SAMPLES: usize = 10_000;

    // User 1 carries the 10 dB peak; its rate is r1.
    let (a1, a2, ratio) = (10.0, 10f64.powf(0.5), 0.2);
    let spec = ChannelSpec::oi_mac(a1, a2, ratio, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut infeasible = Vec::new();
    for &lambda in &LAMBDAS {
        let config = TrainConfig {
            max_iters: 1500,
            weights: RateWeights::region(lambda),
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&spec, &config).unwrap();
        let rates = match run_state(&mut state) {
            Ok((r, _, _)) => r,
            Err(e) => return Outcome::new(false, format!("λ = {lambda}: run failed: {e}")),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let seeds = state.nit().draw_seeds(CHECK_SAMPLES, &mut rng);
        let inputs = state.nit().sample(&seeds).unwrap();
        for (u, (x, peak)) in inputs.iter().zip([a1, a2]).enumerate() {
            let v = x.as_slice();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let in_range = v.iter().all(|s| (0.0..=peak).contains(s));
            if !in_range || (mean - ratio * peak).abs() > MEAN_TOL * ratio * peak {
                infeasible.push(format!(
                    "λ = {lambda} user {}: mean {mean:.4}, in range {in_range}",
                    u + 1
                ));
            }
        }
        rows.push((lambda, rates));
    }
    let finite = rows.iter().all(|(_, r)| r.is_finite());
    // Shape is judged on the raw estimates: clamping only shapes the CSV and
    // would make an all-negative trace trivially monotone.
    let monotone = rows
        .windows(2)
        .all(|w| w[1].1.r2 <= w[0].1.r2 + MONOTONE_SLACK);
    let raw_negative = rows
        .iter()
        .filter(|(_, r)| r.r1 < 0.0 || r.r2 < 0.0)
        .count();
    let trace: Vec<String> = rows
        .iter()
        .map(|(l, r)| format!("λ {l}: ({:.3}, {:.3}, {:.3})", r.r1, r.r2, r.rsum))
        .collect();
    Outcome::new(
        infeasible.is_empty() && finite && monotone,
        format!(
            "feasible {}{}; finite {finite}; r2 non-increasing within {MONOTONE_SLACK} {monotone}; {raw_negative} rows clamped; (r1, r2, rsum) {}",
            infeasible.is_empty(),
            if infeasible.is_empty() { String::new() } else { format!(" [{}]", infeasible.join("; ")) },
            trace.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- c7

const PROBES: usize = 100;
const LAYER_TOL: f64 = 1e-4;
const CHAIN_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference at 0, or `None` when the step straddles a kink
/// (differences at `h` and `h/4` disagree beyond `tol`).
fn derivative(f: impl Fn(f64) -> f64, tol: f64) -> Option<f64> {
    let cd = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (coarse, fine) = (cd(FD_STEP), cd(FD_STEP / 4.0));
    (rel_err(coarse, fine, 1e-8) <= tol * 0.1).then_some(fine)
}

#[derive(Default)]
struct ProbeStats {
    probes: usize,
    kinks: usize,
    worst: f64,
}

impl ProbeStats {
    fn record(&mut self, analytic: f64, numeric: Option<f64>, floor: f64) -> bool {
        match numeric {
            Some(n) => {
                self.probes += 1;
                self.worst = self.worst.max(rel_err(analytic, n, floor));
                true
            }
            None => {
                self.kinks += 1;
                false
            }
        }
    }
}

fn check_network(dims: &[usize], output: OutputActivation, rng: &mut ChaCha8Rng) -> ProbeStats {
    let mut net = Mlp::new(dims, HiddenActivation::Relu, output, rng).unwrap();
    for p in net.params_mut() {
        *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    let batch = 16;
    let x = Matrix::from_fn(batch, dims[0], |_, _| rng.sample(StandardNormal));
    let c = Matrix::from_fn(batch, *dims.last().unwrap(), |_, _| {
        rng.sample(StandardNormal)
    });
    let (_, tape) = net.forward(&x).unwrap();
    let (grads, _) = net.backward(&tape, &c).unwrap();
    let loss = |n: &Mlp| -> f64 {
        n.predict(&x)
            .unwrap()
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(o, w)| o * w)
            .sum()
    };
    let mut stats = ProbeStats::default();
    while stats.probes < PROBES && stats.kinks < 10 * PROBES {
        let k = rng.random_range(0..net.num_params());
        let numeric = derivative(
            |h| {
                let mut moved = net.clone();
                moved.params_mut()[k] += h;
                loss(&moved)
            },
            LAYER_TOL,
        );
        stats.record(grads.as_slice()[k], numeric, 1e-8);
    }
    stats
}

type Layer = (
    Box<dyn Fn(&[f64]) -> Vec<f64>>,
    Box<dyn Fn(&[f64], &[f64]) -> Vec<f64>>,
);

fn check_layer(layer: &Layer, scale: f64, rng: &mut ChaCha8Rng) -> ProbeStats {
    let (forward, backward) = layer;
    let mut stats = ProbeStats::default();
    while stats.probes < PROBES && stats.kinks < 10 * PROBES {
        let n = 12;
        let v: Vec<f64> = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let c: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let analytic = backward(&v, &c);
        let j = rng.random_range(0..n);
        let numeric = derivative(
            |h| {
                let mut w = v.clone();
                w[j] += h;
                forward(&w).iter().zip(&c).map(|(o, g)| o * g).sum()
            },
            LAYER_TOL,
        );
        stats.record(analytic[j], numeric, 1e-8);
    }
    stats
}

/// Weighted phase-2 objective on fixed seeds and channel noise, with the
/// critic input normalisation frozen at `frame`.
fn chain_objective(
    state: &TrainState,
    seeds: &Matrix,
    noise_seed: u64,
    frame: &SampleBatch,
) -> f64 {
    let inputs = state.nit().sample(seeds).unwrap();
    let z = channel_forward(
        state.spec(),
        &inputs[0],
        inputs.get(1),
        &mut ChaCha8Rng::seed_from_u64(noise_seed),
    )
    .unwrap();
    let column = |v: Var| match v {
        Var::X => &inputs[0],
        Var::Y => &inputs[1],
        Var::Z => &z,
    };
    state
        .nit_terms()
        .map(|(net, vars, weight)| {
            let cols: Vec<&Matrix> = vars.iter().map(|&v| column(v)).collect();
            let mut joint = Matrix::hstack(&cols).unwrap();
            let bounds: Vec<(f64, f64)> = vars.iter().map(|&v| frame.support(v)[0]).collect();
            let width = joint.cols();
            for (k, s) in joint.as_mut_slice().iter_mut().enumerate() {
                let (lo, hi) = bounds[k % width];
                *s = (*s - lo) * 2.0 / (hi - lo) - 1.0;
            }
            let out = net.predict(&joint).unwrap();
            weight * out.as_slice().iter().sum::<f64>() / out.rows() as f64
        })
        .sum()
}

fn check_chain(spec: &ChannelSpec, rng: &mut ChaCha8Rng) -> ProbeStats {
    let config = TrainConfig {
        batch_size: 200,
        max_iters: 20,
        eval_samples: 1000,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(spec, &config).unwrap();
    for _ in 0..config.max_iters {
        state.step().unwrap();
    }
    // Move the generators off their near-zero output layers.
    for g in &mut state.nit_mut().users {
        for p in g.core.params_mut() {
            *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let n = 64;
    let noise_seed = 77;
    let seeds = state.nit().draw_seeds(n, rng);
    let (inputs, tape) = state.nit().forward(&seeds).unwrap();
    let z = channel_forward(
        spec,
        &inputs[0],
        inputs.get(1),
        &mut ChaCha8Rng::seed_from_u64(noise_seed),
    )
    .unwrap();
    let y = inputs
        .get(1)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(n, 0));
    let frame = sample_reference(inputs[0].clone(), y, z, rng).unwrap();
    let (dx, dy) = state.input_gradient(&frame).unwrap();
    let upstream: Vec<&Matrix> = std::iter::once(&dx).chain(dy.as_ref()).collect();
    let grads = state.nit().backward(&tape, &upstream).unwrap();

    let mut stats = ProbeStats::default();
    while stats.probes < PROBES && stats.kinks < 10 * PROBES {
        let u = rng.random_range(0..state.nit().num_users());
        let count = state.nit().users[u].core.num_params();
        // Index `count` stands for the pass-through gain.
        let k = rng.random_range(0..=count);
        let analytic = if k == count {
            grads.users[u].1
        } else {
            grads.users[u].0.as_slice()[k]
        };
        let numeric = derivative(
            |h| {
                let mut moved = TrainState::clone(&state);
                let g = &mut moved.nit_mut().users[u];
                if k == count {
                    g.gain += h;
                } else {
                    g.core.params_mut()[k] += h;
                }
                chain_objective(&moved, &seeds, noise_seed, &frame)
            },
            CHAIN_TOL,
        );
        stats.record(analytic, numeric, 1e-6);
    }
    stats
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lines = Vec::new();
    let mut pass = true;
    let mut judge = |name: &str, s: ProbeStats, tol: f64| {
        let ok = s.probes == PROBES && s.worst < tol;
        pass &= ok;
        lines.push(format!(
            "{name} {:.1e}{}",
            s.worst,
            if ok { "" } else { " (FAIL)" }
        ));
        if s.kinks > 0 {
            lines
                .last_mut()
                .unwrap()
                .push_str(&format!(" [{} kink resamples]", s.kinks));
        }
    };
    for (name, dims) in [
        ("critic[3]", vec![3, 64, 64, 64, 1]),
        ("critic[2]", vec![2, 64, 64, 64, 1]),
        ("critic[1]", vec![1, 64, 64, 64, 1]),
        ("generator-core", vec![1, 64, 64, 64, 64, 1]),
    ] {
        judge(
            name,
            check_network(&dims, OutputActivation::Identity, &mut rng),
            LAYER_TOL,
        );
    }
    judge(
        "scaled-sigmoid-net",
        check_network(
            &[2, 16, 16, 2],
            OutputActivation::ScaledSigmoid { lo: -1.0, hi: 3.0 },
            &mut rng,
        ),
        LAYER_TOL,
    );
    let layers: [(&str, Layer, f64); 3] = [
        (
            "power-normalisation",
            (
                Box::new(|v| avg_power_normalize(v, 1.0).unwrap()),
                Box::new(|v, g| avg_power_normalize_backward(v, 1.0, g)),
            ),
            3.0,
        ),
        (
            "peak+power",
            {
                let c = UserConstraint::AvgPower {
                    power: 2.0,
                    peak: Some(3.0),
                };
                (
                    Box::new(move |v| c.apply(v).unwrap()),
                    Box::new(move |v, g| c.backward(v, g)),
                )
            },
            3.0,
        ),
        (
            "intensity",
            (
                Box::new(|v| intensity_constrain(v, 10.0, 0.2).unwrap()),
                Box::new(|v, g| intensity_constrain_backward(v, 10.0, 0.2, g)),
            ),
            2.0,
        ),
    ];
    for (name, layer, scale) in &layers {
        judge(name, check_layer(layer, *scale, &mut rng), LAYER_TOL);
    }
    judge(
        "chain awgn-mac",
        check_chain(&ChannelSpec::awgn_mac(10.0, 5.0, 1.0).unwrap(), &mut rng),
        CHAIN_TOL,
    );
    judge(
        "chain oi-mac",
        check_chain(
            &ChannelSpec::oi_mac(10.0, 10f64.powf(0.5), 0.2, 1.0).unwrap(),
            &mut rng,
        ),
        CHAIN_TOL,
    );
    Outcome::new(
        pass,
        format!(
            "worst relative error over {PROBES} probes (layers < {LAYER_TOL:e}, chain < {CHAIN_TOL:e}): {}",
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- c8

fn run_cli(args: &[&str], out: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_narr"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("exit {status}"));
    }
    std::fs::read(out).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let experiments: [(&str, &[&str]); 3] = [
        (
            "awgn sweep",
            &[
                "--channel",
                "awgn-mac",
                "--method",
                "both",
                "--snr-list",
                "0,5,10",
                "--iters",
                "60",
                "--batch",
                "200",
                "--jobs",
                "2",
                "--seed",
                "11",
            ],
        ),
        (
            "p2p",
            &[
                "--channel",
                "p2p-awgn",
                "--snr-list",
                "0",
                "--iters",
                "60",
                "--batch",
                "200",
            ],
        ),
        (
            "oi trace",
            &[
                "--channel",
                "oi-mac",
                "--lambda-grid",
                "0,1",
                "--iters",
                "40",
                "--batch",
                "200",
                "--jobs",
                "2",
            ],
        ),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, (name, args)) in experiments.iter().enumerate() {
        let a = run_cli(args, &dir.path().join(format!("{i}a.csv")));
        let b = run_cli(args, &dir.path().join(format!("{i}b.csv")));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let same = a == b;
                pass &= same;
                parts.push(format!(
                    "{name}: {} bytes {}",
                    a.len(),
                    if same { "identical" } else { "DIFFER" }
                ));
            }
            (a, b) => {
                pass = false;
                parts.push(format!("{name}: {:?} / {:?}", a.err(), b.err()));
            }
        }
    }
    Outcome::new(pass, parts.join("; "))
}
