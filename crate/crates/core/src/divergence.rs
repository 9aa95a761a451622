//! Variational lower bounds on KL divergence and a χ²-based upper bound
//! computed from histogram plug-in estimates.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Critic values are clamped to this before exponentiation.
pub const EXP_CLAMP: f64 = 50.0;
/// Reference-bin mass below this counts as empty.
pub const BIN_FLOOR: f64 = 1e-12;
/// Cap on χ² when the reference has empty bins under data mass.
pub const CHI2_CAP: f64 = 1e6;

/// Scale constant `a` of the tilted lower bound; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlLowerBoundParams {
    a: f64,
}

impl KlLowerBoundParams {
    pub fn new(a: f64) -> Result<Self> {
        if a > 0.0 && a.is_finite() {
            Ok(Self { a })
        } else {
            Err(Error::Config(format!(
                "bound scale must be positive and finite, got {a}"
            )))
        }
    }

    pub fn a(self) -> f64 {
        self.a
    }
}

fn check_critic_values(t_on_p: &[f64], t_on_q: &[f64]) -> Result<()> {
    if t_on_p.is_empty() || t_on_q.is_empty() {
        return Err(Error::Contract(
            "critic value vectors must be nonempty".into(),
        ));
    }
    if !t_on_p.iter().chain(t_on_q).all(|t| t.is_finite()) {
        return Err(Error::Numeric {
            context: "critic values".into(),
            layer: None,
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn clamped_exp(t: f64) -> f64 {
    t.min(EXP_CLAMP).exp()
}

/// `log mean exp(min(t, 50))`, computed stably.
fn log_mean_exp(t: &[f64]) -> f64 {
    let m = t
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b.min(EXP_CLAMP)));
    let s: f64 = t.iter().map(|&v| (v.min(EXP_CLAMP) - m).exp()).sum();
    m + (s / t.len() as f64).ln()
}

/// Donsker–Varadhan bound `E_P[T] − log E_Q[e^T]`.
pub fn dv_lower_bound(t_on_p: &[f64], t_on_q: &[f64]) -> Result<f64> {
    check_critic_values(t_on_p, t_on_q)?;
    Ok(mean(t_on_p) - log_mean_exp(t_on_q))
}

/// `E_P[T] − E_Q[e^T]/a − log a + 1`.
pub fn kl_lower_bound(t_on_p: &[f64], t_on_q: &[f64], params: KlLowerBoundParams) -> Result<f64> {
    check_critic_values(t_on_p, t_on_q)?;
    let a = params.a;
    let eq = t_on_q.iter().map(|&t| clamped_exp(t)).sum::<f64>() / t_on_q.len() as f64;
    Ok(mean(t_on_p) - eq / a - a.ln() + 1.0)
}

/// Derivatives of [`dv_lower_bound`] with respect to each critic value.
pub fn dv_lower_bound_grad(t_on_p: &[f64], t_on_q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_critic_values(t_on_p, t_on_q)?;
    let dp = vec![1.0 / t_on_p.len() as f64; t_on_p.len()];
    let m = t_on_q
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b.min(EXP_CLAMP)));
    let w: Vec<f64> = t_on_q
        .iter()
        .map(|&t| (t.min(EXP_CLAMP) - m).exp())
        .collect();
    let s: f64 = w.iter().sum();
    let dq = t_on_q
        .iter()
        .zip(&w)
        .map(|(&t, &wi)| if t > EXP_CLAMP { 0.0 } else { -wi / s })
        .collect();
    Ok((dp, dq))
}

/// Derivatives of [`kl_lower_bound`] with respect to each critic value.
pub fn kl_lower_bound_grad(
    t_on_p: &[f64],
    t_on_q: &[f64],
    params: KlLowerBoundParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_critic_values(t_on_p, t_on_q)?;
    let dp = vec![1.0 / t_on_p.len() as f64; t_on_p.len()];
    let scale = params.a * t_on_q.len() as f64;
    let dq = t_on_q
        .iter()
        .map(|&t| if t > EXP_CLAMP { 0.0 } else { -t.exp() / scale })
        .collect();
    Ok((dp, dq))
}

/// Normalised histogram over a 1-D or 2-D box; 2-D mass is row-major in
/// (first-dim bin, second-dim bin).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins_per_dim: usize,
    pub range_per_dim: Vec<(f64, f64)>,
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn dims(&self) -> usize {
        self.range_per_dim.len()
    }
}

fn widen_degenerate(range: (f64, f64)) -> (f64, f64) {
    if range.1 > range.0 {
        range
    } else {
        warn!(
            "degenerate histogram range [{}, {}] widened by 1e-6",
            range.0, range.1
        );
        (range.0 - 1e-6, range.1 + 1e-6)
    }
}

fn bin_index(v: f64, (lo, hi): (f64, f64), m: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * m as f64).floor();
    if t <= 0.0 || t.is_nan() {
        0
    } else {
        (t as usize).min(m - 1)
    }
}

/// Out-of-range samples land in the nearest edge bin.
pub fn build_histogram(
    samples: &Matrix,
    bins_per_dim: usize,
    range_per_dim: &[(f64, f64)],
) -> Result<Histogram> {
    let dims = samples.cols();
    if !(1..=2).contains(&dims) {
        return Err(Error::Contract(format!(
            "histograms support 1 or 2 dimensions, got {dims}"
        )));
    }
    if range_per_dim.len() != dims {
        return Err(Error::shape(
            "build_histogram ranges",
            dims,
            range_per_dim.len(),
        ));
    }
    if samples.rows() == 0 {
        return Err(Error::Contract(
            "histogram needs at least one sample".into(),
        ));
    }
    if bins_per_dim == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if range_per_dim
        .iter()
        .any(|r| !(r.0.is_finite() && r.1.is_finite()) || r.0 > r.1)
    {
        return Err(Error::Contract(format!(
            "invalid histogram range {range_per_dim:?}"
        )));
    }
    let ranges: Vec<_> = range_per_dim
        .iter()
        .copied()
        .map(widen_degenerate)
        .collect();
    let m = bins_per_dim;
    let mut counts = vec![0usize; m.pow(dims as u32)];
    for r in 0..samples.rows() {
        let idx = samples
            .row(r)
            .iter()
            .zip(&ranges)
            .fold(0, |acc, (&v, &rg)| acc * m + bin_index(v, rg, m));
        counts[idx] += 1;
    }
    let n = samples.rows() as f64;
    Ok(Histogram {
        bins_per_dim: m,
        range_per_dim: ranges,
        mass: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

static EMPTY_BIN_WARNED: AtomicBool = AtomicBool::new(false);

/// Plug-in `Σ (f − g)² / g` of histogram `p` against reference `q`.
pub fn chi_squared(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bins_per_dim != q.bins_per_dim || p.range_per_dim != q.range_per_dim {
        return Err(Error::Contract(
            "χ² needs histograms with identical geometry".into(),
        ));
    }
    let mut total = 0.0;
    let mut empty_reference = false;
    for (&f, &g) in p.mass.iter().zip(&q.mass) {
        if g >= BIN_FLOOR {
            total += (f - g) * (f - g) / g;
        } else if f >= BIN_FLOOR {
            total += f * f / BIN_FLOOR;
            empty_reference = true;
        }
    }
    if empty_reference {
        // Routine in the reverse direction (data tails rarely cover the
        // reference box), so only the first occurrence is a warning.
        if EMPTY_BIN_WARNED.swap(true, Ordering::Relaxed) {
            debug!(
                "χ² reference histogram has empty bins under data mass; value capped at {CHI2_CAP}"
            );
        } else {
            warn!("χ² reference histogram has empty bins under data mass; value capped at {CHI2_CAP} (further occurrences logged at debug level)");
        }
        total = total.min(CHI2_CAP);
    }
    Ok(total)
}

/// Upper bound on KL from the χ² divergences in both directions, in nats.
pub fn chi2_up(chi_pq: f64, chi_qp: f64) -> Result<f64> {
    if !(chi_pq >= 0.0 && chi_qp >= 0.0) {
        return Err(Error::Contract(format!(
            "χ² arguments must be nonnegative, got ({chi_pq}, {chi_qp})"
        )));
    }
    if chi_pq < 1e-12 && chi_qp < 1e-12 {
        return Ok(0.0);
    }
    let denom = (1.0 + chi_qp) * (1.0 + chi_pq).powi(2) - 1.0;
    Ok(chi_pq.ln_1p() - 1.5 * chi_pq * chi_pq / denom)
}

/// Per-column joint `[min, max]` of two sample sets.
pub fn joint_range(p: &Matrix, q: &Matrix) -> Result<Vec<(f64, f64)>> {
    if p.cols() != q.cols() {
        return Err(Error::shape("joint_range columns", p.cols(), q.cols()));
    }
    Ok((0..p.cols())
        .map(|c| {
            p.column_iter(c)
                .chain(q.column_iter(c))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        })
        .collect())
}

/// χ²-bounded KL upper estimate from samples of P and Q on a shared grid.
pub fn kl_upper_bound_hist(
    p_samples: &Matrix,
    q_samples: &Matrix,
    bins_per_dim: usize,
) -> Result<f64> {
    let range = joint_range(p_samples, q_samples)?;
    let hp = build_histogram(p_samples, bins_per_dim, &range)?;
    let hq = build_histogram(q_samples, bins_per_dim, &range)?;
    chi2_up(chi_squared(&hp, &hq)?, chi_squared(&hq, &hp)?)
}
