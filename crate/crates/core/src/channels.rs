//! Memoryless additive Gaussian channels and their closed-form capacities.
//!
//! User 1 sends `X` (power `p1`, peak `a1`), user 2 sends `Y` (`p2`, `a2`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Slack allowed when validating optical-intensity inputs.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    AwgnMac,
    OiMac,
    P2pAwgn,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AwgnMac => "awgn_mac",
            Self::OiMac => "oi_mac",
            Self::P2pAwgn => "p2p_awgn",
        }
    }

    pub fn users(self) -> usize {
        match self {
            Self::P2pAwgn => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "awgn_mac" => Ok(Self::AwgnMac),
            "oi_mac" => Ok(Self::OiMac),
            "p2p_awgn" => Ok(Self::P2pAwgn),
            other => Err(Error::Config(format!("unknown channel kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub sigma2: f64,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub mean_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityReference {
    pub r1: f64,
    pub r2: f64,
    pub rsum: f64,
}

fn positive(name: &str, v: Option<f64>) -> Result<f64> {
    match v {
        Some(x) if x > 0.0 && x.is_finite() => Ok(x),
        Some(x) => Err(Error::Config(format!(
            "{name} must be positive and finite, got {x}"
        ))),
        None => Err(Error::Config(format!(
            "{name} is required for this channel"
        ))),
    }
}

impl ChannelSpec {
    pub fn awgn_mac(p1: f64, p2: f64, sigma2: f64) -> Result<Self> {
        let spec = Self {
            kind: ChannelKind::AwgnMac,
            sigma2,
            p1: Some(p1),
            p2: Some(p2),
            a1: None,
            a2: None,
            mean_ratio: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn p2p_awgn(p: f64, sigma2: f64) -> Result<Self> {
        let spec = Self {
            kind: ChannelKind::P2pAwgn,
            sigma2,
            p1: Some(p),
            p2: None,
            a1: None,
            a2: None,
            mean_ratio: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn oi_mac(a1: f64, a2: f64, mean_ratio: f64, sigma2: f64) -> Result<Self> {
        let spec = Self {
            kind: ChannelKind::OiMac,
            sigma2,
            p1: None,
            p2: None,
            a1: Some(a1),
            a2: Some(a2),
            mean_ratio: Some(mean_ratio),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        positive("sigma2", Some(self.sigma2))?;
        for (name, v) in [
            ("p1", self.p1),
            ("p2", self.p2),
            ("a1", self.a1),
            ("a2", self.a2),
        ] {
            if v.is_some() {
                positive(name, v)?;
            }
        }
        match self.kind {
            ChannelKind::AwgnMac => {
                positive("p1", self.p1)?;
                positive("p2", self.p2)?;
            }
            ChannelKind::P2pAwgn => {
                positive("p1", self.p1)?;
            }
            ChannelKind::OiMac => {
                positive("a1", self.a1)?;
                positive("a2", self.a2)?;
                match self.mean_ratio {
                    Some(r) if r > 0.0 && r < 1.0 => {}
                    Some(r) => {
                        return Err(Error::Config(format!(
                            "mean_ratio must lie in (0, 1), got {r}"
                        )))
                    }
                    None => return Err(Error::Config("mean_ratio is required for oi_mac".into())),
                }
            }
        }
        Ok(())
    }

    /// Closed-form capacity corner points where known.
    pub fn capacity(&self) -> Option<CapacityReference> {
        match self.kind {
            ChannelKind::AwgnMac => awgn_mac_capacity(self.p1?, self.p2?, self.sigma2).ok(),
            ChannelKind::P2pAwgn => {
                let r = 0.5 * (self.p1? / self.sigma2).ln_1p();
                Some(CapacityReference {
                    r1: r,
                    r2: 0.0,
                    rsum: r,
                })
            }
            ChannelKind::OiMac => None,
        }
    }
}

/// `z = x + y + n`, `n ~ N(0, σ²)` drawn fresh from `rng`. `y` is absent for
/// the point-to-point channel.
pub fn channel_forward<R: Rng + ?Sized>(
    spec: &ChannelSpec,
    x: &Matrix,
    y: Option<&Matrix>,
    rng: &mut R,
) -> Result<Matrix> {
    if x.cols() != 1 {
        return Err(Error::shape("channel input columns", 1, x.cols()));
    }
    match (spec.kind.users(), y) {
        (2, Some(y)) if y.shape() != x.shape() => {
            return Err(Error::shape(
                "channel inputs",
                format!("{:?}", x.shape()),
                format!("{:?}", y.shape()),
            ))
        }
        (2, None) => return Err(Error::Contract("two-user channel needs both inputs".into())),
        (1, Some(_)) => {
            return Err(Error::Contract(
                "point-to-point channel takes a single input".into(),
            ))
        }
        _ => {}
    }
    if spec.kind == ChannelKind::OiMac {
        let check = |name: &str, m: &Matrix, a: f64| -> Result<()> {
            match m
                .as_slice()
                .iter()
                .find(|&&v| !(v >= -FEASIBILITY_TOL && v <= a + FEASIBILITY_TOL))
            {
                Some(v) => Err(Error::Constraint(format!("{name} = {v} outside [0, {a}]"))),
                None => Ok(()),
            }
        };
        check("x", x, positive("a1", spec.a1)?)?;
        check("y", y.expect("checked above"), positive("a2", spec.a2)?)?;
    }
    let noise = Normal::new(0.0, spec.sigma2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &xi)| xi + y.map_or(0.0, |y| y.as_slice()[i]) + noise.sample(rng))
        .collect();
    Matrix::from_vec(x.rows(), 1, data)
}

/// Gradient of an additive channel: both inputs receive `dz` unchanged.
pub fn channel_backward(spec: &ChannelSpec, dz: &Matrix) -> (Matrix, Option<Matrix>) {
    let dy = (spec.kind.users() == 2).then(|| dz.clone());
    (dz.clone(), dy)
}

pub fn awgn_mac_capacity(p1: f64, p2: f64, sigma2: f64) -> Result<CapacityReference> {
    for (name, v) in [("p1", p1), ("p2", p2), ("sigma2", sigma2)] {
        positive(name, Some(v))?;
    }
    Ok(CapacityReference {
        r1: 0.5 * (p1 / sigma2).ln_1p(),
        r2: 0.5 * (p2 / sigma2).ln_1p(),
        rsum: 0.5 * ((p1 + p2) / sigma2).ln_1p(),
    })
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// SNR sweep with unit noise. Each point sets user 2's level to the point's
/// dB value and user 1's to that plus `user1_offset_db`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub kind: ChannelKind,
    pub points_db: Vec<f64>,
    pub user1_offset_db: f64,
    pub mean_ratio: Option<f64>,
}

pub fn snr_sweep_points(sweep: &SweepConfig) -> Result<Vec<ChannelSpec>> {
    if sweep.points_db.is_empty() {
        return Err(Error::Config("SNR sweep has no points".into()));
    }
    sweep
        .points_db
        .iter()
        .map(|&db| {
            if !db.is_finite() {
                return Err(Error::Config(format!("invalid SNR point {db} dB")));
            }
            let (l1, l2) = (db_to_linear(db + sweep.user1_offset_db), db_to_linear(db));
            match sweep.kind {
                ChannelKind::AwgnMac => ChannelSpec::awgn_mac(l1, l2, 1.0),
                ChannelKind::P2pAwgn => ChannelSpec::p2p_awgn(l2, 1.0),
                ChannelKind::OiMac => {
                    ChannelSpec::oi_mac(l1, l2, sweep.mean_ratio.unwrap_or(0.2), 1.0)
                }
            }
        })
        .collect()
}
