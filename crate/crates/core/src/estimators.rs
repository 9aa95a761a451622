//! Rate estimators assembled from divergence bounds.
//!
//! With references drawn i.i.d. uniform over each column's batch support,
//! every differential entropy splits into a cross-entropy (a log-volume)
//! minus a KL divergence to the reference; the log-volumes cancel in each
//! mutual-information identity, leaving signed sums of KL terms:
//!
//! ```text
//! I(X;Z|Y)  = D_XYZ + D_Y − D_XY − D_YZ
//! I(Y;Z|X)  = D_XYZ + D_X − D_XY − D_XZ
//! I(X,Y;Z)  = D_XYZ − D_XY − D_Z
//! I(X;Z)    = D_XZ  − D_X  − D_Z
//! ```
//!
//! Positive terms get a trained variational lower bound, negative terms a
//! histogram χ² upper bound, so the result is a lower bound on the rate.

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::divergence::{
    dv_lower_bound, dv_lower_bound_grad, kl_lower_bound, kl_lower_bound_grad, kl_upper_bound_hist,
    KlLowerBoundParams,
};
use crate::error::{Error, Result};
use crate::nn::{ForwardTape, Gradients, HiddenActivation, Matrix, Mlp, OutputActivation};

/// Hidden width of every critic.
pub const CRITIC_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    Z,
}

/// Channel inputs, outputs and their uniform references. `y` has zero
/// columns for a point-to-point channel.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub x: Matrix,
    pub y: Matrix,
    pub z: Matrix,
    pub x_ref: Matrix,
    pub y_ref: Matrix,
    pub z_ref: Matrix,
    boxes: [Vec<(f64, f64)>; 3],
}

fn column_box(m: &Matrix) -> Vec<(f64, f64)> {
    (0..m.cols())
        .map(|c| {
            let (lo, hi) = m
                .column_iter(c)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 1e-6, hi + 1e-6)
            }
        })
        .collect()
}

fn uniform_like<R: Rng + ?Sized>(rows: usize, bounds: &[(f64, f64)], rng: &mut R) -> Matrix {
    let dists: Vec<_> = bounds
        .iter()
        .map(|&(lo, hi)| Uniform::new_inclusive(lo, hi).expect("finite ordered bounds"))
        .collect();
    let mut m = Matrix::zeros(rows, bounds.len());
    for r in 0..rows {
        for (c, d) in dists.iter().enumerate() {
            m.set(r, c, d.sample(rng));
        }
    }
    m
}

/// Attaches references drawn uniformly over each data column's
/// `[min, max]`, independently per column.
pub fn sample_reference<R: Rng + ?Sized>(
    x: Matrix,
    y: Matrix,
    z: Matrix,
    rng: &mut R,
) -> Result<SampleBatch> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Contract(format!(
            "reference sampling needs at least 2 samples, got {n}"
        )));
    }
    if y.rows() != n || z.rows() != n {
        return Err(Error::shape(
            "sample_reference rows",
            n,
            format!("{} / {}", y.rows(), z.rows()),
        ));
    }
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::Numeric {
            context: "channel samples".into(),
            layer: None,
        });
    }
    let boxes = [column_box(&x), column_box(&y), column_box(&z)];
    let x_ref = uniform_like(n, &boxes[0], rng);
    let y_ref = uniform_like(n, &boxes[1], rng);
    let z_ref = uniform_like(n, &boxes[2], rng);
    Ok(SampleBatch {
        x,
        y,
        z,
        x_ref,
        y_ref,
        z_ref,
        boxes,
    })
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(v: Var) -> usize {
        match v {
            Var::X => 0,
            Var::Y => 1,
            Var::Z => 2,
        }
    }

    pub fn data(&self, v: Var) -> &Matrix {
        match v {
            Var::X => &self.x,
            Var::Y => &self.y,
            Var::Z => &self.z,
        }
    }

    pub fn reference(&self, v: Var) -> &Matrix {
        match v {
            Var::X => &self.x_ref,
            Var::Y => &self.y_ref,
            Var::Z => &self.z_ref,
        }
    }

    /// Per-column support box of a variable.
    pub fn support(&self, v: Var) -> &[(f64, f64)] {
        &self.boxes[Self::idx(v)]
    }

    /// Joint data and reference samples of `vars`, unnormalised.
    pub fn joint(&self, vars: &[Var]) -> Result<(Matrix, Matrix)> {
        let data: Vec<&Matrix> = vars.iter().map(|&v| self.data(v)).collect();
        let refs: Vec<&Matrix> = vars.iter().map(|&v| self.reference(v)).collect();
        Ok((Matrix::hstack(&data)?, Matrix::hstack(&refs)?))
    }

    /// Critic inputs for `vars`: data rows stacked above reference rows,
    /// each column mapped affinely from its support box onto `[-1, 1]`.
    /// Also returns the per-column slope of that map.
    pub fn critic_inputs(&self, vars: &[Var], with_refs: bool) -> Result<(Matrix, Vec<f64>)> {
        let (data, refs) = self.joint(vars)?;
        let bounds: Vec<(f64, f64)> = vars
            .iter()
            .flat_map(|&v| self.support(v).iter().copied())
            .collect();
        if bounds.len() != data.cols() {
            return Err(Error::shape("critic inputs", data.cols(), bounds.len()));
        }
        let slopes: Vec<f64> = bounds.iter().map(|(lo, hi)| 2.0 / (hi - lo)).collect();
        let stacked = if with_refs {
            Matrix::vstack(&[&data, &refs])?
        } else {
            data
        };
        let cols = stacked.cols();
        let mut out = stacked;
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            let c = k % cols;
            *v = (*v - bounds[c].0) * slopes[c] - 1.0;
        }
        Ok((out, slopes))
    }

    /// Input columns of a variable inside a joint critic input.
    pub fn column_span(&self, vars: &[Var], target: Var) -> Option<std::ops::Range<usize>> {
        let mut at = 0;
        for &v in vars {
            let w = self.data(v).cols();
            if v == target {
                return Some(at..at + w);
            }
            at += w;
        }
        None
    }
}

/// Which variational bound a critic maximises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Tilted(KlLowerBoundParams),
    DonskerVaradhan,
}

impl Objective {
    pub fn value(self, t_on_p: &[f64], t_on_q: &[f64]) -> Result<f64> {
        match self {
            Self::Tilted(p) => kl_lower_bound(t_on_p, t_on_q, p),
            Self::DonskerVaradhan => dv_lower_bound(t_on_p, t_on_q),
        }
    }

    pub fn grad(self, t_on_p: &[f64], t_on_q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::Tilted(p) => kl_lower_bound_grad(t_on_p, t_on_q, p),
            Self::DonskerVaradhan => dv_lower_bound_grad(t_on_p, t_on_q),
        }
    }
}

/// Critic values on data and on references.
pub fn critic_values(
    critic: &Mlp,
    batch: &SampleBatch,
    vars: &[Var],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (inputs, _) = batch.critic_inputs(vars, true)?;
    let out = critic.predict(&inputs)?.into_vec();
    let refs = out[batch.len()..].to_vec();
    let mut data = out;
    data.truncate(batch.len());
    Ok((data, refs))
}

/// Data values, reference values, forward tape and per-column input slopes.
pub(crate) type TapedValues = (Vec<f64>, Vec<f64>, ForwardTape, Vec<f64>);

/// Critic values plus the tape needed to differentiate them.
pub(crate) fn critic_values_taped(
    critic: &Mlp,
    batch: &SampleBatch,
    vars: &[Var],
    with_refs: bool,
) -> Result<TapedValues> {
    let (inputs, slopes) = batch.critic_inputs(vars, with_refs)?;
    let (out, tape) = critic.forward(&inputs)?;
    let out = out.into_vec();
    let (data, refs) = out.split_at(batch.len());
    Ok((data.to_vec(), refs.to_vec(), tape, slopes))
}

/// Parameter gradient of `objective` for one critic.
pub fn objective_param_grad(
    critic: &Mlp,
    batch: &SampleBatch,
    vars: &[Var],
    objective: Objective,
) -> Result<(f64, Gradients)> {
    let (tp, tq, tape, _) = critic_values_taped(critic, batch, vars, true)?;
    let value = objective.value(&tp, &tq)?;
    let (gp, gq) = objective.grad(&tp, &tq)?;
    let upstream = Matrix::column_vector(gp.into_iter().chain(gq).collect());
    let (grads, _) = critic.backward(&tape, &upstream)?;
    Ok((value, grads))
}

/// Log-volume of the uniform reference box: its cross-entropy in nats.
pub fn uniform_cross_entropy(ranges: &[(f64, f64)]) -> f64 {
    ranges.iter().map(|(lo, hi)| (hi - lo).ln()).sum()
}

/// Upper bound on differential entropy: cross-entropy to the reference minus
/// a lower bound on the divergence from it.
pub fn entropy_upper_bound(
    t_on_p: &[f64],
    t_on_q: &[f64],
    cross_entropy: f64,
    a: f64,
) -> Result<f64> {
    Ok(cross_entropy - kl_lower_bound(t_on_p, t_on_q, KlLowerBoundParams::new(a)?)?)
}

/// χ² upper bounds on the KL terms subtracted in the decompositions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Chi2Penalties {
    pub xy: f64,
    pub yz: f64,
    pub xz: f64,
    pub x: f64,
    pub z: f64,
}

/// Histogram bin counts for 1-D and 2-D penalty terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bins {
    pub one_d: usize,
    pub two_d: usize,
}

impl Bins {
    /// 2-D terms use 60% of the 1-D count per axis.
    pub fn from_one_d(one_d: usize) -> Self {
        Self {
            one_d,
            two_d: ((one_d as f64 * 0.6).round() as usize).max(1),
        }
    }
}

fn penalty(batch: &SampleBatch, vars: &[Var], bins: Bins) -> Result<f64> {
    let (data, refs) = batch.joint(vars)?;
    let m = if data.cols() == 1 {
        bins.one_d
    } else {
        bins.two_d
    };
    kl_upper_bound_hist(&data, &refs, m)
}

/// Penalties for every negative term the channel needs.
pub fn compute_penalties(batch: &SampleBatch, bins: Bins) -> Result<Chi2Penalties> {
    let mut p = Chi2Penalties {
        x: penalty(batch, &[Var::X], bins)?,
        z: penalty(batch, &[Var::Z], bins)?,
        ..Default::default()
    };
    if batch.y.cols() > 0 {
        p.xy = penalty(batch, &[Var::X, Var::Y], bins)?;
        p.yz = penalty(batch, &[Var::Y, Var::Z], bins)?;
        p.xz = penalty(batch, &[Var::X, Var::Z], bins)?;
    }
    Ok(p)
}

fn tilted(critic: &Mlp, batch: &SampleBatch, vars: &[Var], a: f64) -> Result<f64> {
    let (tp, tq) = critic_values(critic, batch, vars)?;
    kl_lower_bound(&tp, &tq, KlLowerBoundParams::new(a)?)
}

/// Lower bound on `I(X;Z)`; `penalties = (χ²-bound on D_X, on D_Z)`.
pub fn mi_lower_bound(
    batch: &SampleBatch,
    critic: &Mlp,
    a: f64,
    penalties: (f64, f64),
) -> Result<f64> {
    Ok(tilted(critic, batch, &[Var::X, Var::Z], a)? - penalties.0 - penalties.1)
}

/// Lower bound on `I(X;Z|Y)`; `t1` sees `(x, y, z)`, `t2` sees `y`;
/// `penalties = (D_XY, D_YZ)`.
pub fn cond_mi_lower_bound(
    batch: &SampleBatch,
    t1: &Mlp,
    t2: &Mlp,
    a1: f64,
    a2: f64,
    penalties: (f64, f64),
) -> Result<f64> {
    Ok(
        tilted(t1, batch, NarrCritics::T1_VARS, a1)? + tilted(t2, batch, NarrCritics::T2_VARS, a2)?
            - penalties.0
            - penalties.1,
    )
}

/// Lower bound on `I(Y;Z|X)`; `s1` sees `(y, x, z)`, `s2` sees `x`;
/// `penalties = (D_XY, D_XZ)`.
pub fn cond_mi_lower_bound_given_x(
    batch: &SampleBatch,
    s1: &Mlp,
    s2: &Mlp,
    b1: f64,
    b2: f64,
    penalties: (f64, f64),
) -> Result<f64> {
    Ok(
        tilted(s1, batch, NarrCritics::S1_VARS, b1)? + tilted(s2, batch, NarrCritics::S2_VARS, b2)?
            - penalties.0
            - penalties.1,
    )
}

/// Lower bound on `I(X,Y;Z)`; `penalties = (D_XY, D_Z)`.
pub fn sum_rate_lower_bound(
    batch: &SampleBatch,
    u: &Mlp,
    gamma: f64,
    penalties: (f64, f64),
) -> Result<f64> {
    Ok(tilted(u, batch, NarrCritics::U_VARS, gamma)? - penalties.0 - penalties.1)
}

/// Estimated rates in nats: `r1 = I(X;Z|Y)`, `r2 = I(Y;Z|X)`, `rsum = I(X,Y;Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateTriple {
    pub r1: f64,
    pub r2: f64,
    pub rsum: f64,
}

impl RateTriple {
    pub fn as_array(self) -> [f64; 3] {
        [self.r1, self.r2, self.rsum]
    }

    pub fn is_finite(self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(self) -> f64 {
        self.as_array().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn critic<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::new(
        &[input_dim, CRITIC_WIDTH, CRITIC_WIDTH, CRITIC_WIDTH, 1],
        HiddenActivation::Relu,
        OutputActivation::Identity,
        rng,
    )
}

/// The five critics of the two-user estimator and their fixed scales.
#[derive(Debug, Clone)]
pub struct NarrCritics {
    pub t1: Mlp,
    pub t2: Mlp,
    pub s1: Mlp,
    pub s2: Mlp,
    pub u: Mlp,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
}

/// Per-critic terms of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NarrLossTerms {
    pub t1: f64,
    pub t2: f64,
    pub s1: f64,
    pub s2: f64,
    pub u: f64,
}

impl NarrLossTerms {
    pub fn total(&self) -> f64 {
        self.t1 + self.t2 + self.s1 + self.s2 + self.u
    }
}

impl NarrCritics {
    pub const T1_VARS: &'static [Var] = &[Var::X, Var::Y, Var::Z];
    pub const T2_VARS: &'static [Var] = &[Var::Y];
    pub const S1_VARS: &'static [Var] = &[Var::Y, Var::X, Var::Z];
    pub const S2_VARS: &'static [Var] = &[Var::X];
    pub const U_VARS: &'static [Var] = &[Var::X, Var::Y, Var::Z];

    /// Fresh 4-layer, 64-wide critics with every scale set to `scale`.
    pub fn new<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<Self> {
        KlLowerBoundParams::new(scale)?;
        Ok(Self {
            t1: critic(3, rng)?,
            t2: critic(1, rng)?,
            s1: critic(3, rng)?,
            s2: critic(1, rng)?,
            u: critic(3, rng)?,
            alpha1: scale,
            alpha2: scale,
            beta1: scale,
            beta2: scale,
            gamma: scale,
        })
    }

    /// `(name, network, input variables, scale)` for each critic.
    pub fn members(&self) -> [(&'static str, &Mlp, &'static [Var], f64); 5] {
        [
            ("t1", &self.t1, Self::T1_VARS, self.alpha1),
            ("t2", &self.t2, Self::T2_VARS, self.alpha2),
            ("s1", &self.s1, Self::S1_VARS, self.beta1),
            ("s2", &self.s2, Self::S2_VARS, self.beta2),
            ("u", &self.u, Self::U_VARS, self.gamma),
        ]
    }

    pub fn members_mut(&mut self) -> [(&'static str, &mut Mlp); 5] {
        [
            ("t1", &mut self.t1),
            ("t2", &mut self.t2),
            ("s1", &mut self.s1),
            ("s2", &mut self.s2),
            ("u", &mut self.u),
        ]
    }

    /// Rate estimates given precomputed penalties.
    pub fn rates(&self, batch: &SampleBatch, p: &Chi2Penalties) -> Result<RateTriple> {
        Ok(RateTriple {
            r1: cond_mi_lower_bound(
                batch,
                &self.t1,
                &self.t2,
                self.alpha1,
                self.alpha2,
                (p.xy, p.yz),
            )?,
            r2: cond_mi_lower_bound_given_x(
                batch,
                &self.s1,
                &self.s2,
                self.beta1,
                self.beta2,
                (p.xy, p.xz),
            )?,
            rsum: sum_rate_lower_bound(batch, &self.u, self.gamma, (p.xy, p.z))?,
        })
    }
}

/// One loss term: `−mean T(data) + mean e^{T(ref)}/a + log a`.
fn loss_term(critic: &Mlp, batch: &SampleBatch, vars: &[Var], a: f64) -> Result<f64> {
    Ok(1.0 - tilted(critic, batch, vars, a)?)
}

/// Joint critic loss and its per-critic breakdown. Penalties are constant
/// in the critic parameters and are left out.
pub fn narr_loss(batch: &SampleBatch, critics: &NarrCritics) -> Result<(f64, NarrLossTerms)> {
    let mut v = [0.0; 5];
    for (slot, (name, net, vars, a)) in v.iter_mut().zip(critics.members()) {
        *slot = loss_term(net, batch, vars, a)?;
        if !slot.is_finite() {
            return Err(Error::Numeric {
                context: format!("loss term {name}"),
                layer: None,
            });
        }
    }
    let terms = NarrLossTerms {
        t1: v[0],
        t2: v[1],
        s1: v[2],
        s2: v[3],
        u: v[4],
    };
    Ok((terms.total(), terms))
}

/// [`narr_loss`] with the parameter gradient of each critic, in
/// [`NarrCritics::members`] order.
pub fn narr_loss_grads(
    batch: &SampleBatch,
    critics: &NarrCritics,
) -> Result<(f64, NarrLossTerms, Vec<Gradients>)> {
    let mut v = [0.0; 5];
    let mut grads = Vec::with_capacity(5);
    for (slot, (name, net, vars, a)) in v.iter_mut().zip(critics.members()) {
        let (value, mut g) = objective_param_grad(
            net,
            batch,
            vars,
            Objective::Tilted(KlLowerBoundParams::new(a)?),
        )?;
        *slot = 1.0 - value;
        if !slot.is_finite() {
            return Err(Error::Numeric {
                context: format!("loss term {name}"),
                layer: None,
            });
        }
        g.as_mut_slice().iter_mut().for_each(|x| *x = -*x);
        grads.push(g);
    }
    let terms = NarrLossTerms {
        t1: v[0],
        t2: v[1],
        s1: v[2],
        s2: v[3],
        u: v[4],
    };
    Ok((terms.total(), terms, grads))
}

/// One Donsker–Varadhan critic per distinct KL term of the two-user
/// decompositions. The assembled estimate is neither a lower nor an upper
/// bound.
#[derive(Debug, Clone)]
pub struct MineCritics {
    pub xyz: Mlp,
    pub x: Mlp,
    pub y: Mlp,
    pub xy: Mlp,
    pub yz: Mlp,
    pub xz: Mlp,
    pub z: Mlp,
}

impl MineCritics {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(Self {
            xyz: critic(3, rng)?,
            x: critic(1, rng)?,
            y: critic(1, rng)?,
            xy: critic(2, rng)?,
            yz: critic(2, rng)?,
            xz: critic(2, rng)?,
            z: critic(1, rng)?,
        })
    }
}

fn dv(critic: &Mlp, batch: &SampleBatch, vars: &[Var]) -> Result<f64> {
    let (tp, tq) = critic_values(critic, batch, vars)?;
    dv_lower_bound(&tp, &tq)
}

pub fn mine_rate_triple(batch: &SampleBatch, c: &MineCritics) -> Result<RateTriple> {
    use Var::{X, Y, Z};
    let xyz = dv(&c.xyz, batch, &[X, Y, Z])?;
    let xy = dv(&c.xy, batch, &[X, Y])?;
    Ok(RateTriple {
        r1: xyz + dv(&c.y, batch, &[Y])? - xy - dv(&c.yz, batch, &[Y, Z])?,
        r2: xyz + dv(&c.x, batch, &[X])? - xy - dv(&c.xz, batch, &[X, Z])?,
        rsum: xyz - xy - dv(&c.z, batch, &[Z])?,
    })
}
