//! Alternating optimisation of critics and input transformer.
//!
//! Every iteration runs two phases on two independent batches:
//! 1. critics ascend their variational bounds with the NIT frozen;
//! 2. the NIT ascends the weighted rate estimate with critics frozen.
//!
//! Subtracted KL terms are estimated by χ² histograms for reporting. Those
//! are piecewise constant in the inputs, so phase 2 instead differentiates
//! auxiliary critics that lower-bound the same terms; without them the
//! input gradient would only see the positive terms and would reward
//! collapsing the input distribution.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channels::{channel_backward, channel_forward, ChannelKind, ChannelSpec};
use crate::divergence::KlLowerBoundParams;
use crate::error::{Error, Result};
use crate::estimators::{
    compute_penalties, critic, critic_values_taped, mi_lower_bound, mine_rate_triple,
    objective_param_grad, sample_reference, Bins, Chi2Penalties, MineCritics, NarrCritics,
    Objective, RateTriple, SampleBatch, Var,
};
use crate::nit::{Nit, NitOptimizer};
use crate::nn::{adam_step, read_u64, AdamState, Gradients, Matrix, Mlp};

/// Any reported estimate beyond this many nats aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Narr,
    Mine,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Narr => "narr",
            Self::Mine => "mine",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narr" => Ok(Self::Narr),
            "mine" => Ok(Self::Mine),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Weights of `r1`, `r2`, `rsum` in the NIT objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateWeights {
    pub r1: f64,
    pub r2: f64,
    pub rsum: f64,
}

impl Default for RateWeights {
    fn default() -> Self {
        Self {
            r1: 1.0,
            r2: 1.0,
            rsum: 1.0,
        }
    }
}

impl RateWeights {
    /// `λ·r1 + (1 − λ)·r2 + rsum`: λ = 1 favours user 1, λ = 0 user 2.
    pub fn region(lambda: f64) -> Self {
        Self {
            r1: lambda,
            r2: 1.0 - lambda,
            rsum: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr_narr: f64,
    pub lr_nit: f64,
    /// Scale of every tilted bound.
    pub alpha: f64,
    /// Histogram bins per axis for 1-D terms; 2-D terms use 60% of this.
    pub bins: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub seed: u64,
    pub method: Method,
    pub weights: RateWeights,
    /// When false the inputs stay at their initial distribution.
    pub train_nit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            max_iters: 5000,
            lr_narr: 1e-3,
            lr_nit: 1e-4,
            alpha: 2.0,
            bins: 20,
            eval_every: 100,
            eval_samples: 10_000,
            convergence_window: 10,
            convergence_tol: 0.01,
            seed: 0,
            method: Method::Narr,
            weights: RateWeights::default(),
            train_nit: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.eval_samples < self.batch_size {
            return fail(format!(
                "evaluation samples ({}) must be at least the batch size ({})",
                self.eval_samples, self.batch_size
            ));
        }
        for (name, v) in [
            ("lr_narr", self.lr_narr),
            ("lr_nit", self.lr_nit),
            ("convergence_tol", self.convergence_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        KlLowerBoundParams::new(self.alpha)?;
        if self.bins == 0 || self.eval_every == 0 || self.convergence_window == 0 {
            return fail("bins, eval_every and convergence_window must be positive".into());
        }
        let w = self.weights;
        if ![w.r1, w.r2, w.rsum]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return fail(format!("rate weights must be nonnegative, got {w:?}"));
        }
        Ok(())
    }

    pub fn bins(&self) -> Bins {
        Bins::from_one_d(self.bins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub rates: RateTriple,
    /// Critic loss on the latest phase-1 batch.
    pub loss: f64,
    pub penalties: Chi2Penalties,
    /// Mean-square of each user's evaluation inputs.
    pub power: Vec<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub iterations: usize,
    pub converged: bool,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str =
        "iteration,r1,r2,rsum,loss,pen_xy,pen_yz,pen_xz,pen_x,pen_z,power1,power2,wall_time_s";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let p = &r.penalties;
            let power = |u: usize| r.power.get(u).map_or(String::new(), |v| v.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.rates.r1,
                r.rates.r2,
                r.rates.rsum,
                r.loss,
                p.xy,
                p.yz,
                p.xz,
                p.x,
                p.z,
                power(0),
                power(1),
                r.wall_time_s
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// A critic, its optimiser, the bound it maximises and its signed
/// contribution to `(r1, r2, rsum)`.
#[derive(Debug, Clone)]
struct Slot {
    name: &'static str,
    vars: &'static [Var],
    net: Mlp,
    opt: AdamState,
    objective: Objective,
    coef: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rates: RateTriple,
    pub penalties: Chi2Penalties,
    pub power: Vec<f64>,
}

/// Phase-1 outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStep {
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    spec: ChannelSpec,
    config: TrainConfig,
    nit: Nit,
    nit_opt: NitOptimizer,
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
    iteration: usize,
    lr_halved: bool,
    /// Bound value of each critic on the latest phase-1 batch.
    last_values: Vec<f64>,
}

fn slot_table(
    kind: ChannelKind,
    method: Method,
) -> Vec<(&'static str, &'static [Var], bool, [f64; 3])> {
    use Var::{X, Y, Z};
    // (name, vars, reported, coefficients in r1, r2, rsum)
    match (kind.users(), method) {
        (2, Method::Narr) => vec![
            ("t1", NarrCritics::T1_VARS, true, [1.0, 0.0, 0.0]),
            ("t2", NarrCritics::T2_VARS, true, [1.0, 0.0, 0.0]),
            ("s1", NarrCritics::S1_VARS, true, [0.0, 1.0, 0.0]),
            ("s2", NarrCritics::S2_VARS, true, [0.0, 1.0, 0.0]),
            ("u", NarrCritics::U_VARS, true, [0.0, 0.0, 1.0]),
            ("aux_xy", &[X, Y], false, [-1.0, -1.0, -1.0]),
            ("aux_yz", &[Y, Z], false, [-1.0, 0.0, 0.0]),
            ("aux_xz", &[X, Z], false, [0.0, -1.0, 0.0]),
            ("aux_z", &[Z], false, [0.0, 0.0, -1.0]),
        ],
        (2, Method::Mine) => vec![
            ("xyz", &[X, Y, Z], true, [1.0, 1.0, 1.0]),
            ("x", &[X], true, [0.0, 1.0, 0.0]),
            ("y", &[Y], true, [1.0, 0.0, 0.0]),
            ("xy", &[X, Y], true, [-1.0, -1.0, -1.0]),
            ("yz", &[Y, Z], true, [-1.0, 0.0, 0.0]),
            ("xz", &[X, Z], true, [0.0, -1.0, 0.0]),
            ("z", &[Z], true, [0.0, 0.0, -1.0]),
        ],
        (_, Method::Narr) => vec![
            ("t", &[X, Z], true, [1.0, 0.0, 0.0]),
            ("aux_x", &[X], false, [-1.0, 0.0, 0.0]),
            ("aux_z", &[Z], false, [-1.0, 0.0, 0.0]),
        ],
        (_, Method::Mine) => vec![
            ("xz", &[X, Z], true, [1.0, 0.0, 0.0]),
            ("x", &[X], true, [-1.0, 0.0, 0.0]),
            ("z", &[Z], true, [-1.0, 0.0, 0.0]),
        ],
    }
}

fn mean_square(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.rows().max(1) as f64
}

impl TrainState {
    pub fn new(spec: &ChannelSpec, config: &TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let nit = Nit::new(spec, &mut init)?;
        let nit_opt = nit.optimizer(config.lr_nit)?;
        let objective = match config.method {
            Method::Narr => Objective::Tilted(KlLowerBoundParams::new(config.alpha)?),
            Method::Mine => Objective::DonskerVaradhan,
        };
        let slots = slot_table(spec.kind, config.method)
            .into_iter()
            .map(|(name, vars, _, coef)| {
                let net = critic(vars.len(), &mut init)?;
                let opt = AdamState::for_mlp(&net, config.lr_narr)?;
                Ok(Slot {
                    name,
                    vars,
                    net,
                    opt,
                    objective,
                    coef,
                })
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            spec: spec.clone(),
            config: config.clone(),
            nit,
            nit_opt,
            slots,
            rng,
            iteration: 0,
            lr_halved: false,
            last_values: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn nit(&self) -> &Nit {
        &self.nit
    }

    pub fn nit_mut(&mut self) -> &mut Nit {
        &mut self.nit
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Every critic as `(name, network)`.
    pub fn critics(&self) -> impl Iterator<Item = (&'static str, &Mlp)> {
        self.slots.iter().map(|s| (s.name, &s.net))
    }

    /// NIT checkpoint, critic count, then every critic in `critics()` order.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.nit.write_checkpoint(w)?;
        w.write_all(&(self.slots.len() as u64).to_le_bytes())?;
        self.slots.iter().try_for_each(|s| s.net.write_le(w))
    }

    /// Restores networks written by a state of the same channel and method.
    /// Optimiser moments, RNG streams and the iteration count restart.
    pub fn read_checkpoint<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let nit = Nit::read_checkpoint(r)?;
        if !nit.constraints().eq(self.nit.constraints()) {
            return Err(Error::Contract(
                "checkpoint NIT constraints differ from the channel".into(),
            ));
        }
        let n = read_u64(r).map_err(|e| Error::Contract(format!("truncated checkpoint: {e}")))?;
        if n as usize != self.slots.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {n} critics, expected {}",
                self.slots.len()
            )));
        }
        let nets = self
            .slots
            .iter()
            .map(|s| {
                let net = Mlp::read_le(r)?;
                if net.num_params() != s.net.num_params() {
                    return Err(Error::Contract(format!(
                        "critic {} has a different shape in the checkpoint",
                        s.name
                    )));
                }
                Ok(net)
            })
            .collect::<Result<Vec<_>>>()?;
        self.nit_opt = nit.optimizer(self.nit_opt.lr())?;
        self.nit = nit;
        for (s, net) in self.slots.iter_mut().zip(nets) {
            s.opt = AdamState::for_mlp(&net, s.opt.lr)?;
            s.net = net;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        self.read_checkpoint(&mut BufReader::new(file))
    }

    fn net(&self, name: &str) -> &Mlp {
        &self
            .slots
            .iter()
            .find(|s| s.name == name)
            .expect("known critic")
            .net
    }

    /// The five reported critics of a two-user NARR run.
    pub fn narr_critics(&self) -> Option<NarrCritics> {
        if self.config.method != Method::Narr || self.spec.kind.users() != 2 {
            return None;
        }
        let a = self.config.alpha;
        Some(NarrCritics {
            t1: self.net("t1").clone(),
            t2: self.net("t2").clone(),
            s1: self.net("s1").clone(),
            s2: self.net("s2").clone(),
            u: self.net("u").clone(),
            alpha1: a,
            alpha2: a,
            beta1: a,
            beta2: a,
            gamma: a,
        })
    }

    pub fn mine_critics(&self) -> Option<MineCritics> {
        if self.config.method != Method::Mine || self.spec.kind.users() != 2 {
            return None;
        }
        Some(MineCritics {
            xyz: self.net("xyz").clone(),
            x: self.net("x").clone(),
            y: self.net("y").clone(),
            xy: self.net("xy").clone(),
            yz: self.net("yz").clone(),
            xz: self.net("xz").clone(),
            z: self.net("z").clone(),
        })
    }

    /// Fresh inputs, channel outputs and references from the current NIT.
    pub fn generate_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        let seeds = self.nit.draw_seeds(n, rng);
        let inputs = self.nit.sample(&seeds)?;
        self.batch_from_inputs(&inputs, rng)
    }

    fn batch_from_inputs<R: Rng + ?Sized>(
        &self,
        inputs: &[Matrix],
        rng: &mut R,
    ) -> Result<SampleBatch> {
        let x = inputs[0].clone();
        let y = inputs
            .get(1)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), 0));
        let z = channel_forward(&self.spec, &x, inputs.get(1), rng)?;
        sample_reference(x, y, z, rng)
    }

    /// Phase 1: one Adam step for every critic on one shared batch. A
    /// non-finite loss or gradient skips the step and halves the critic
    /// learning rates; a second occurrence is an error.
    pub fn train_step_narr(&mut self, batch: &SampleBatch) -> Result<CriticStep> {
        let mut results: Vec<(f64, Gradients)> = Vec::with_capacity(self.slots.len());
        let mut failure = None;
        for s in &self.slots {
            match objective_param_grad(&s.net, batch, s.vars, s.objective) {
                Ok((v, g)) if v.is_finite() && g.as_slice().iter().all(|x| x.is_finite()) => {
                    results.push((v, g))
                }
                Ok(_) => {
                    failure = Some(format!("critic {}", s.name));
                    break;
                }
                Err(Error::Numeric { context, .. }) => {
                    failure = Some(format!("critic {}: {context}", s.name));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(what) = failure {
            return self.numeric_failure(what).map(|_| CriticStep {
                loss: f64::NAN,
                skipped: true,
            });
        }
        let mut loss = 0.0;
        self.last_values = results.iter().map(|(v, _)| *v).collect();
        for (s, (value, mut g)) in self.slots.iter_mut().zip(results) {
            // Report the loss form −bound + 1 for tilted critics, −bound for DV.
            loss += match s.objective {
                Objective::Tilted(_) => 1.0 - value,
                Objective::DonskerVaradhan => -value,
            };
            g.as_mut_slice().iter_mut().for_each(|x| *x = -*x);
            adam_step(&mut s.opt, &mut s.net, &g)?;
        }
        Ok(CriticStep {
            loss,
            skipped: false,
        })
    }

    fn numeric_failure(&mut self, what: String) -> Result<()> {
        if self.lr_halved {
            return Err(Error::Numeric {
                context: format!("{what} (after learning-rate reduction)"),
                layer: None,
            });
        }
        warn!("non-finite {what}; skipping step and halving learning rates");
        self.lr_halved = true;
        for s in &mut self.slots {
            s.opt.lr *= 0.5;
        }
        Nit::set_lr(&mut self.nit_opt, self.config.lr_nit * 0.5);
        Ok(())
    }

    /// Signed weight of each critic in the NIT objective.
    fn nit_coefficients(&self) -> Vec<f64> {
        let w = self.config.weights;
        self.slots
            .iter()
            .map(|s| s.coef[0] * w.r1 + s.coef[1] * w.r2 + s.coef[2] * w.rsum)
            .collect()
    }

    /// Critics entering the phase-2 objective, with their weights; the
    /// objective is `Σ weight · mean T(data)` on normalised inputs.
    pub fn nit_terms(&self) -> impl Iterator<Item = (&Mlp, &'static [Var], f64)> {
        self.slots
            .iter()
            .zip(self.nit_coefficients())
            .filter(|(_, c)| *c != 0.0)
            .map(|(s, c)| (&s.net, s.vars, c))
    }

    /// Gradient of the weighted objective with respect to the channel
    /// inputs, with the NIT frozen: `d/dx` and `d/dy` (absent for one user).
    /// References are detached, so only data rows matter; each carries
    /// weight `c/N` under either bound.
    pub fn input_gradient(&self, batch: &SampleBatch) -> Result<(Matrix, Option<Matrix>)> {
        let n = batch.len();
        let coefs = self.nit_coefficients();
        let mut grads = [
            Matrix::zeros(n, 1),
            Matrix::zeros(n, 1),
            Matrix::zeros(n, 1),
        ];
        for (s, &c) in self.slots.iter().zip(&coefs) {
            if c == 0.0 {
                continue;
            }
            let (_, _, tape, slopes) = critic_values_taped(&s.net, batch, s.vars, false)?;
            let up = Matrix::column_vector(vec![c / n as f64; n]);
            let dx = s.net.input_grad(&tape, &up)?;
            for (&var, g) in [Var::X, Var::Y, Var::Z].iter().zip(&mut grads) {
                if let Some(span) = batch.column_span(s.vars, var) {
                    let k = span.start;
                    for (r, gv) in g.as_mut_slice().iter_mut().enumerate() {
                        *gv += dx.get(r, k) * slopes[k];
                    }
                }
            }
        }
        let [gx, gy, gz] = grads;
        let (cx, cy) = channel_backward(&self.spec, &gz);
        let add = |a: Matrix, b: &Matrix| {
            Matrix::from_vec(
                a.rows(),
                1,
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(u, v)| u + v)
                    .collect(),
            )
            .expect("same shape")
        };
        let dx = add(gx, &cx);
        let dy = cy.map(|cy| add(gy, &cy));
        Ok((dx, dy))
    }

    /// Weighted objective assembled from the latest phase-1 bound values.
    pub fn surrogate_objective(&self) -> f64 {
        self.nit_coefficients()
            .iter()
            .zip(&self.last_values)
            .map(|(c, v)| c * v)
            .sum()
    }

    /// Phase 2: one Adam step on the NIT against the negated weighted
    /// estimate, computed on a fresh batch with every critic frozen. Returns
    /// the current surrogate objective.
    pub fn train_step_nit(&mut self) -> Result<f64> {
        let n = self.config.batch_size;
        let seeds = self.nit.draw_seeds(n, &mut self.rng);
        let (inputs, tape) = self.nit.forward(&seeds)?;
        let mut rng = self.rng.clone();
        let batch = self.batch_from_inputs(&inputs, &mut rng)?;
        self.rng = rng;
        let (dx, dy) = self.input_gradient(&batch)?;
        // Ascend: the loss is −objective.
        let neg = |m: &Matrix| m.map(|v| -v);
        let ups: Vec<Matrix> = std::iter::once(neg(&dx))
            .chain(dy.as_ref().map(neg))
            .collect();
        let refs: Vec<&Matrix> = ups.iter().collect();
        let grads = self.nit.backward(&tape, &refs)?;
        let finite = grads
            .users
            .iter()
            .all(|(g, k)| k.is_finite() && g.as_slice().iter().all(|v| v.is_finite()));
        if !finite {
            self.numeric_failure("NIT gradient".into())?;
            return Ok(f64::NAN);
        }
        self.nit.adam_step(&mut self.nit_opt, &grads)?;
        Ok(self.surrogate_objective())
    }

    /// One full iteration: phase 1 on one batch, phase 2 on another.
    pub fn step(&mut self) -> Result<CriticStep> {
        let mut rng = self.rng.clone();
        let batch = self.generate_batch(self.config.batch_size, &mut rng)?;
        self.rng = rng;
        let out = self.train_step_narr(&batch)?;
        if self.config.train_nit {
            self.train_step_nit()?;
        }
        self.iteration += 1;
        Ok(out)
    }

    /// Rates on `m` fresh samples with fresh references and penalties.
    pub fn evaluate<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Evaluation> {
        let batch = self.generate_batch(m, rng)?;
        self.evaluate_batch(&batch)
    }

    pub fn evaluate_batch(&self, batch: &SampleBatch) -> Result<Evaluation> {
        let penalties = compute_penalties(batch, self.config.bins())?;
        let two_user = self.spec.kind.users() == 2;
        let rates = match (self.config.method, two_user) {
            (Method::Narr, true) => self
                .narr_critics()
                .expect("two-user narr")
                .rates(batch, &penalties)?,
            (Method::Mine, true) => {
                mine_rate_triple(batch, &self.mine_critics().expect("two-user mine"))?
            }
            (Method::Narr, false) => {
                let r = mi_lower_bound(
                    batch,
                    self.net("t"),
                    self.config.alpha,
                    (penalties.x, penalties.z),
                )?;
                RateTriple {
                    r1: r,
                    r2: 0.0,
                    rsum: r,
                }
            }
            (Method::Mine, false) => {
                let dv = |name: &str, vars: &[Var]| -> Result<f64> {
                    let (tp, tq) = crate::estimators::critic_values(self.net(name), batch, vars)?;
                    crate::divergence::dv_lower_bound(&tp, &tq)
                };
                let r = dv("xz", &[Var::X, Var::Z])? - dv("x", &[Var::X])? - dv("z", &[Var::Z])?;
                RateTriple {
                    r1: r,
                    r2: 0.0,
                    rsum: r,
                }
            }
        };
        let mut power = vec![mean_square(&batch.x)];
        if two_user {
            power.push(mean_square(&batch.y));
        }
        Ok(Evaluation {
            rates,
            penalties,
            power,
        })
    }
}

fn converged(records: &[TraceRecord], window: usize, tol: f64) -> bool {
    if records.len() < window {
        return false;
    }
    let tail = &records[records.len() - window..];
    (0..3).all(|k| {
        let (lo, hi) = tail
            .iter()
            .map(|r| r.rates.as_array()[k])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v), b.max(v))
            });
        hi - lo < tol
    })
}

/// Trains critics and NIT until convergence or `max_iters`, then evaluates
/// on `eval_samples` fresh samples.
pub fn run(spec: &ChannelSpec, config: &TrainConfig) -> Result<(RateTriple, TrainTrace)> {
    let mut state = TrainState::new(spec, config)?;
    let (rates, trace, _) = run_state(&mut state)?;
    Ok((rates, trace))
}

/// [`run`] on an existing state; also returns the final evaluation.
pub fn run_state(state: &mut TrainState) -> Result<(RateTriple, TrainTrace, Evaluation)> {
    let config = state.config.clone();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(2);
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut last_loss = f64::NAN;

    let record = |state: &TrainState,
                  trace: &mut TrainTrace,
                  loss: f64,
                  rng: &mut ChaCha8Rng|
     -> Result<Evaluation> {
        let ev = state.evaluate(config.eval_samples, rng)?;
        let rec = TraceRecord {
            iteration: state.iteration,
            rates: ev.rates,
            loss,
            penalties: ev.penalties,
            power: ev.power.clone(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        debug!(
            "iter {:>6}  r1 {:.4}  r2 {:.4}  rsum {:.4}  loss {:.4}  power {:?}",
            rec.iteration, rec.rates.r1, rec.rates.r2, rec.rates.rsum, loss, rec.power
        );
        trace.records.push(rec);
        if !ev.rates.is_finite() || ev.rates.max_abs() > DIVERGENCE_LIMIT {
            let value = ev.rates.as_array().into_iter().fold(0.0, |m: f64, v| {
                if v.is_nan() || v.abs() > m.abs() {
                    v
                } else {
                    m
                }
            });
            warn!("run diverged; trace so far: {:?}", trace.records);
            return Err(Error::Diverged {
                iteration: state.iteration,
                value,
            });
        }
        Ok(ev)
    };

    while state.iteration < config.max_iters {
        let step = state.step()?;
        if !step.skipped {
            last_loss = step.loss;
        }
        if state.iteration.is_multiple_of(config.eval_every) {
            record(state, &mut trace, last_loss, &mut eval_rng)?;
            if converged(
                &trace.records,
                config.convergence_window,
                config.convergence_tol,
            ) {
                trace.converged = true;
                info!("converged after {} iterations", state.iteration);
                break;
            }
        }
    }
    if trace.records.last().map(|r| r.iteration) == Some(state.iteration) {
        trace.records.pop();
    }
    let final_eval = record(state, &mut trace, last_loss, &mut eval_rng)?;
    trace.iterations = state.iteration;
    Ok((final_eval.rates, trace, final_eval))
}
