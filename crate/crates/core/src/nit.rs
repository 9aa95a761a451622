//! Input transformer: per-user generators mapping standard-normal seeds to
//! channel inputs that satisfy the channel's input constraints.
//!
//! Each user owns an independent generator, so the two inputs stay
//! independent as a multiple-access channel requires. A generator computes
//! `v = core(n) + gain·n` and passes `v` through a constraint layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channels::{ChannelKind, ChannelSpec};
use crate::error::{Error, Result};
use crate::nn::{
    read_f64, read_u64, sigmoid, AdamState, ForwardTape, Gradients, HiddenActivation, Matrix, Mlp,
    OutputActivation,
};

pub const GENERATOR_WIDTH: usize = 64;
/// Initial seed pass-through gain; with the peak-bounded output layer this
/// starts each user close to a uniform input.
pub const GAIN_INIT: f64 = 1.7;
const CHECKPOINT_MAGIC: &[u8; 8] = b"NARRNIT1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UserConstraint {
    /// Scale-down-only power normalisation, preceded by `peak·tanh(v/2)`
    /// when an amplitude limit is set.
    AvgPower { power: f64, peak: Option<f64> },
    /// `peak·sigmoid(v + b)`, with the shift `b` solved per batch so the
    /// batch mean is exactly `mean_ratio·peak`.
    Intensity { peak: f64, mean_ratio: f64 },
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub core: Mlp,
    pub gain: f64,
    pub constraint: UserConstraint,
}

#[derive(Debug, Clone)]
pub struct Nit {
    pub users: Vec<Generator>,
}

#[derive(Debug, Clone)]
struct UserTape {
    core: ForwardTape,
    seeds: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NitTape {
    users: Vec<UserTape>,
    gains: Vec<f64>,
}

/// Gradients per user: core parameters and the pass-through gain.
#[derive(Debug, Clone)]
pub struct NitGrads {
    pub users: Vec<(Gradients, f64)>,
}

impl NitGrads {
    pub fn is_zero(&self) -> bool {
        self.users.iter().all(|(g, k)| g.is_zero() && *k == 0.0)
    }
}

/// Adam state for every trainable NIT parameter.
#[derive(Debug, Clone)]
pub struct NitOptimizer {
    users: Vec<(AdamState, AdamState)>,
}

impl NitOptimizer {
    pub fn lr(&self) -> f64 {
        self.users[0].0.lr
    }
}

fn check_batch(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::Contract(format!(
            "constraint layers need a batch of at least 2, got {}",
            v.len()
        )));
    }
    Ok(())
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// `s·v` with `s = sqrt(p / max(mean v², p))`.
pub fn avg_power_normalize(v: &[f64], p: f64) -> Result<Vec<f64>> {
    check_batch(v)?;
    if p.is_nan() || p <= 0.0 {
        return Err(Error::Config(format!(
            "power limit must be positive, got {p}"
        )));
    }
    let ms = mean_square(v);
    if ms <= p {
        return Ok(v.to_vec());
    }
    let s = (p / ms).sqrt();
    Ok(v.iter().map(|x| s * x).collect())
}

/// Vector-Jacobian product of [`avg_power_normalize`], batch statistic included.
pub fn avg_power_normalize_backward(v: &[f64], p: f64, upstream: &[f64]) -> Vec<f64> {
    let ms = mean_square(v);
    if ms <= p {
        return upstream.to_vec();
    }
    let s = (p / ms).sqrt();
    let n = v.len() as f64;
    let gv: f64 = upstream.iter().zip(v).map(|(g, x)| g * x).sum();
    upstream
        .iter()
        .zip(v)
        .map(|(g, x)| s * g - s * x * gv / (n * ms))
        .collect()
}

fn logit(r: f64) -> f64 {
    (r / (1.0 - r)).ln()
}

/// Shift `b` with `mean sigmoid(v + b) = r`.
fn solve_shift(v: &[f64], r: f64) -> f64 {
    let (vmin, vmax) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let (mut lo, mut hi) = (logit(r) - vmax, logit(r) - vmin);
    let mut b = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (mut f, mut df) = (0.0, 0.0);
        for &x in v {
            let s = sigmoid(x + b);
            f += s;
            df += s * (1.0 - s);
        }
        let n = v.len() as f64;
        f = f / n - r;
        df /= n;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = b;
        } else {
            lo = b;
        }
        let newton = b - f / df;
        b = if df > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * (1.0 + b.abs()) {
            break;
        }
    }
    b
}

/// Maps `v` into `(0, a)` with batch mean exactly `mean_ratio·a`.
pub fn intensity_constrain(v: &[f64], a: f64, mean_ratio: f64) -> Result<Vec<f64>> {
    check_batch(v)?;
    if a.is_nan() || a <= 0.0 || !(0.0..1.0).contains(&mean_ratio) || mean_ratio == 0.0 {
        return Err(Error::Config(format!(
            "need a > 0 and 0 < mean_ratio < 1, got ({a}, {mean_ratio})"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            context: "intensity layer input".into(),
            layer: None,
        });
    }
    let b = solve_shift(v, mean_ratio);
    Ok(v.iter().map(|&x| a * sigmoid(x + b)).collect())
}

/// Vector-Jacobian product of [`intensity_constrain`]; the shift's
/// dependence on the batch enters through `∂b/∂v_j = −σ'_j / Σσ'`.
pub fn intensity_constrain_backward(
    v: &[f64],
    a: f64,
    mean_ratio: f64,
    upstream: &[f64],
) -> Vec<f64> {
    let b = solve_shift(v, mean_ratio);
    let ds: Vec<f64> = v
        .iter()
        .map(|&x| {
            let s = sigmoid(x + b);
            s * (1.0 - s)
        })
        .collect();
    let total: f64 = ds.iter().sum();
    let coupling = if total > 0.0 {
        upstream.iter().zip(&ds).map(|(g, d)| g * d).sum::<f64>() / total
    } else {
        0.0
    };
    upstream
        .iter()
        .zip(&ds)
        .map(|(g, d)| a * d * (g - coupling))
        .collect()
}

impl UserConstraint {
    pub fn apply(self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::AvgPower { power, peak: None } => avg_power_normalize(v, power),
            Self::AvgPower {
                power,
                peak: Some(peak),
            } => {
                check_batch(v)?;
                let w: Vec<f64> = v.iter().map(|&x| peak * (0.5 * x).tanh()).collect();
                avg_power_normalize(&w, power)
            }
            Self::Intensity { peak, mean_ratio } => intensity_constrain(v, peak, mean_ratio),
        }
    }

    pub fn backward(self, v: &[f64], upstream: &[f64]) -> Vec<f64> {
        match self {
            Self::AvgPower { power, peak: None } => {
                avg_power_normalize_backward(v, power, upstream)
            }
            Self::AvgPower {
                power,
                peak: Some(peak),
            } => {
                let w: Vec<f64> = v.iter().map(|&x| peak * (0.5 * x).tanh()).collect();
                let dw = avg_power_normalize_backward(&w, power, upstream);
                dw.iter()
                    .zip(v)
                    .map(|(g, &x)| {
                        let t = (0.5 * x).tanh();
                        g * peak * 0.5 * (1.0 - t * t)
                    })
                    .collect()
            }
            Self::Intensity { peak, mean_ratio } => {
                intensity_constrain_backward(v, peak, mean_ratio, upstream)
            }
        }
    }

    /// Whether `x` satisfies the constraint within `tol` (mean tolerance is relative).
    pub fn is_satisfied(self, x: &[f64], tol: f64) -> bool {
        match self {
            Self::AvgPower { power, peak } => {
                mean_square(x) <= power * (1.0 + tol)
                    && peak.is_none_or(|a| x.iter().all(|v| v.abs() <= a + tol))
            }
            Self::Intensity { peak, mean_ratio } => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                x.iter().all(|&v| (-tol..=peak + tol).contains(&v))
                    && (mean - mean_ratio * peak).abs() <= tol * mean_ratio * peak
            }
        }
    }
}

impl Generator {
    /// Core MLP `[1, 64, 64, 64, 64, 1]` with a zeroed output layer, so the
    /// untrained generator is the pass-through `gain·n`.
    pub fn new<R: Rng + ?Sized>(constraint: UserConstraint, rng: &mut R) -> Result<Self> {
        let w = GENERATOR_WIDTH;
        let mut core = Mlp::new(
            &[1, w, w, w, w, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            rng,
        )?;
        let last = core.num_params() - (w + 1);
        core.params_mut()[last..].iter_mut().for_each(|p| *p = 0.0);
        Ok(Self {
            core,
            gain: GAIN_INIT,
            constraint,
        })
    }

    fn pre_activation(&self, seeds: &[f64]) -> Result<(Vec<f64>, ForwardTape)> {
        let (c, tape) = self.core.forward(&Matrix::column_vector(seeds.to_vec()))?;
        let v = c
            .as_slice()
            .iter()
            .zip(seeds)
            .map(|(c, s)| c + self.gain * s)
            .collect();
        Ok((v, tape))
    }

    pub fn sample(&self, seeds: &[f64]) -> Result<Vec<f64>> {
        let (v, _) = self.pre_activation(seeds)?;
        self.constraint.apply(&v)
    }
}

impl Nit {
    /// One generator per user, constrained as the channel demands. Gaussian
    /// channels bound amplitudes by the channel's peak limit when given, else
    /// by `sqrt(3·power)`, the support of a uniform input of that power:
    /// inputs close to the uniform references keep the histogram penalties
    /// tight, where Gaussian-shaped inputs cost tenths of a nat per term.
    pub fn new<R: Rng + ?Sized>(spec: &ChannelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let missing = |what: &str| Error::Config(format!("{what} is required for {}", spec.kind));
        let constraint = |user: usize| -> Result<UserConstraint> {
            let (p, a) = if user == 0 {
                (spec.p1, spec.a1)
            } else {
                (spec.p2, spec.a2)
            };
            match spec.kind {
                ChannelKind::AwgnMac | ChannelKind::P2pAwgn => {
                    let power = p.ok_or_else(|| missing("average power"))?;
                    Ok(UserConstraint::AvgPower {
                        power,
                        peak: Some(a.unwrap_or((3.0 * power).sqrt())),
                    })
                }
                ChannelKind::OiMac => Ok(UserConstraint::Intensity {
                    peak: a.ok_or_else(|| missing("peak"))?,
                    mean_ratio: spec.mean_ratio.ok_or_else(|| missing("mean_ratio"))?,
                }),
            }
        };
        let users = (0..spec.kind.users())
            .map(|u| Generator::new(constraint(u)?, rng))
            .collect::<Result<_>>()?;
        Ok(Self { users })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn constraints(&self) -> impl Iterator<Item = UserConstraint> + '_ {
        self.users.iter().map(|g| g.constraint)
    }

    /// Standard-normal seeds, one column per user.
    pub fn draw_seeds<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Matrix {
        Matrix::from_fn(batch, self.num_users(), |_, _| rng.sample(StandardNormal))
    }

    /// Channel inputs for each user (single-column matrices) and a tape.
    pub fn forward(&self, seeds: &Matrix) -> Result<(Vec<Matrix>, NitTape)> {
        if seeds.cols() != self.num_users() {
            return Err(Error::shape(
                "NIT seeds columns",
                self.num_users(),
                seeds.cols(),
            ));
        }
        if seeds.rows() < 2 {
            return Err(Error::Contract(format!(
                "NIT batch must be at least 2, got {}",
                seeds.rows()
            )));
        }
        let mut outs = Vec::with_capacity(self.num_users());
        let mut tapes = Vec::with_capacity(self.num_users());
        for (u, g) in self.users.iter().enumerate() {
            let s = seeds.column(u);
            let (v, core) = g.pre_activation(&s)?;
            outs.push(Matrix::column_vector(g.constraint.apply(&v)?));
            tapes.push(UserTape { core, seeds: s, v });
        }
        Ok((
            outs,
            NitTape {
                users: tapes,
                gains: self.users.iter().map(|g| g.gain).collect(),
            },
        ))
    }

    /// Inputs only, no tape.
    pub fn sample(&self, seeds: &Matrix) -> Result<Vec<Matrix>> {
        if seeds.cols() != self.num_users() {
            return Err(Error::shape(
                "NIT seeds columns",
                self.num_users(),
                seeds.cols(),
            ));
        }
        (0..self.num_users())
            .map(|u| {
                Ok(Matrix::column_vector(
                    self.users[u].sample(&seeds.column(u))?,
                ))
            })
            .collect()
    }

    /// Parameter gradients given the upstream gradient of each user's output.
    pub fn backward(&self, tape: &NitTape, upstream: &[&Matrix]) -> Result<NitGrads> {
        if upstream.len() != self.num_users() || tape.users.len() != self.num_users() {
            return Err(Error::shape(
                "NIT upstream users",
                self.num_users(),
                upstream.len(),
            ));
        }
        if tape
            .gains
            .iter()
            .zip(&self.users)
            .any(|(k, g)| *k != g.gain)
        {
            return Err(Error::Contract("NIT tape is stale".into()));
        }
        let users = self
            .users
            .iter()
            .zip(&tape.users)
            .zip(upstream)
            .map(|((g, t), up)| {
                if up.shape() != (t.v.len(), 1) {
                    return Err(Error::shape("NIT upstream", t.v.len(), up.rows()));
                }
                let dv = g.constraint.backward(&t.v, up.as_slice());
                let dgain = dv.iter().zip(&t.seeds).map(|(d, s)| d * s).sum();
                let (core, _) = g.core.backward(&t.core, &Matrix::column_vector(dv))?;
                Ok((core, dgain))
            })
            .collect::<Result<_>>()?;
        Ok(NitGrads { users })
    }

    pub fn optimizer(&self, lr: f64) -> Result<NitOptimizer> {
        let users = self
            .users
            .iter()
            .map(|g| Ok((AdamState::for_mlp(&g.core, lr)?, AdamState::new(1, lr)?)))
            .collect::<Result<_>>()?;
        Ok(NitOptimizer { users })
    }

    pub fn adam_step(&mut self, opt: &mut NitOptimizer, grads: &NitGrads) -> Result<()> {
        // Validate everything before touching any parameter.
        for (g, k) in &grads.users {
            if let Some(i) = g.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    context: "NIT gradient".into(),
                    layer: Some(self.users[0].core.layer_of_param(i)),
                });
            }
            if !k.is_finite() {
                return Err(Error::Numeric {
                    context: "NIT gain gradient".into(),
                    layer: None,
                });
            }
        }
        for ((g, (og, ok)), (dg, dk)) in self.users.iter_mut().zip(&mut opt.users).zip(&grads.users)
        {
            crate::nn::adam_step(og, &mut g.core, dg)?;
            let mut gain = [g.gain];
            ok.update(&mut gain, &[*dk]).expect("checked finite");
            g.gain = gain[0];
        }
        Ok(())
    }

    pub fn set_lr(opt: &mut NitOptimizer, lr: f64) {
        for (a, b) in &mut opt.users {
            a.lr = lr;
            b.lr = lr;
        }
    }

    /// Little-endian checkpoint: magic, user count, then per user the
    /// constraint, gain and core network (layer dims header + parameters).
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.users.len() as u64).to_le_bytes())?;
        for g in &self.users {
            let (code, a, b) = match g.constraint {
                UserConstraint::AvgPower { power, peak } => (0u64, power, peak.unwrap_or(f64::NAN)),
                UserConstraint::Intensity { peak, mean_ratio } => (1, peak, mean_ratio),
            };
            w.write_all(&code.to_le_bytes())?;
            w.write_all(&a.to_le_bytes())?;
            w.write_all(&b.to_le_bytes())?;
            w.write_all(&g.gain.to_le_bytes())?;
            g.core.write_le(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Contract(format!("truncated NIT checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Contract("not a NIT checkpoint".into()));
        }
        let n = read_u64(r).map_err(bad)?;
        if !(1..=2).contains(&n) {
            return Err(Error::Contract(format!("checkpoint has {n} users")));
        }
        let users = (0..n)
            .map(|_| {
                let code = read_u64(r).map_err(bad)?;
                let a = read_f64(r).map_err(bad)?;
                let b = read_f64(r).map_err(bad)?;
                let constraint = match code {
                    0 => UserConstraint::AvgPower {
                        power: a,
                        peak: (!b.is_nan()).then_some(b),
                    },
                    1 => UserConstraint::Intensity {
                        peak: a,
                        mean_ratio: b,
                    },
                    c => return Err(Error::Contract(format!("unknown constraint code {c}"))),
                };
                let gain = read_f64(r).map_err(bad)?;
                let core = Mlp::read_le(r)?;
                Ok(Generator {
                    core,
                    gain,
                    constraint,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { users })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut BufReader::new(file))
    }
}
