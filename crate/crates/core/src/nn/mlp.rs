use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::matrix::{gemm, Matrix, View};
use crate::error::{Error, Result};

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Identity,
    /// `lo + (hi - lo) * sigmoid(z)`.
    ScaledSigmoid {
        lo: f64,
        hi: f64,
    },
}

impl OutputActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::ScaledSigmoid { lo, hi } => lo + (hi - lo) * sigmoid(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::ScaledSigmoid { lo, hi } => {
                let s = sigmoid(z);
                (hi - lo) * s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense feed-forward network. Parameters live in one flat buffer, layer by
/// layer: the `(out, in)` row-major weight block followed by the bias.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden: HiddenActivation,
    output: OutputActivation,
    params: Vec<f64>,
    offsets: Vec<usize>,
    stamp: u64,
}

/// Flat gradient buffer laid out exactly like [`Mlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Intermediates recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
///
/// Hidden layers keep only their post-activations (the ReLU derivative is
/// recoverable from them); the output layer keeps its pre-activation.
pub struct ForwardTape {
    stamp: u64,
    batch: usize,
    input: Matrix,
    hidden: Vec<Matrix>,
    output_pre: Matrix,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Post-activation values of each hidden layer.
    pub fn hidden_activations(&self) -> &[Matrix] {
        &self.hidden
    }

    /// Pre-activation values of the output layer.
    pub fn output_pre_activation(&self) -> &Matrix {
        &self.output_pre
    }
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut at = 0;
    offsets.push(0);
    for w in dims.windows(2) {
        at += w[0] * w[1] + w[1];
        offsets.push(at);
    }
    offsets
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "network needs at least 2 layer dims, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dims must be positive: {dims:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(dims)?;
        let offsets = layer_offsets(dims);
        let mut params = vec![0.0; *offsets.last().unwrap()];
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new(-limit, limit).expect("positive limit");
            let start = offsets[l];
            for p in &mut params[start..start + fan_in * fan_out] {
                *p = dist.sample(rng);
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
            offsets,
            stamp: next_stamp(),
        })
    }

    pub fn from_params(
        dims: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        validate_dims(dims)?;
        let offsets = layer_offsets(dims);
        if params.len() != *offsets.last().unwrap() {
            return Err(Error::shape(
                "Mlp::from_params",
                offsets.last().unwrap(),
                params.len(),
            ));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numeric {
                context: "network parameters".into(),
                layer: Some(layer_of(&offsets, i)),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
            offsets,
            stamp: next_stamp(),
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.stamp = next_stamp();
        &mut self.params
    }

    /// Weight block of layer `l`, row-major `(out, in)`.
    pub fn weight(&self, l: usize) -> &[f64] {
        let start = self.offsets[l];
        &self.params[start..start + self.dims[l] * self.dims[l + 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let start = self.offsets[l] + self.dims[l] * self.dims[l + 1];
        &self.params[start..self.offsets[l + 1]]
    }

    /// Layer that owns flat parameter index `i`.
    pub fn layer_of_param(&self, i: usize) -> usize {
        layer_of(&self.offsets, i)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            dims: self.dims.clone(),
            data: vec![0.0; self.params.len()],
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dims[0] {
            return Err(Error::shape(
                "Mlp::forward input columns",
                self.dims[0],
                x.cols(),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Numeric {
                context: "network input".into(),
                layer: None,
            });
        }
        Ok(())
    }

    /// Affine map of layer `l`: `h · Wᵀ + b`.
    fn affine(&self, l: usize, h: &Matrix) -> Matrix {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let mut z = Matrix::zeros(h.rows(), fan_out);
        let w = View::row_major(self.weight(l), fan_out, fan_in);
        gemm(View::of(h), w.t(), 0.0, z.as_mut_slice());
        let b = self.bias(l);
        for row in z.as_mut_slice().chunks_exact_mut(fan_out) {
            row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
        }
        z
    }

    fn hidden_layer(&self, l: usize, h: &Matrix) -> Matrix {
        let mut z = self.affine(l, h);
        match self.hidden {
            HiddenActivation::Relu => z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
        }
        z
    }

    fn output_layer(&self, z: &Matrix) -> Matrix {
        match self.output {
            OutputActivation::Identity => z.clone(),
            out => z.map(|v| out.apply(v)),
        }
    }

    fn check_output(&self, out: &Matrix) -> Result<()> {
        if out.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                context: "network output".into(),
                layer: Some(self.num_layers() - 1),
            })
        }
    }

    /// Forward pass without recording intermediates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut h = None;
        for l in 0..last {
            h = Some(self.hidden_layer(l, h.as_ref().unwrap_or(x)));
        }
        let z = self.affine(last, h.as_ref().unwrap_or(x));
        let out = match self.output {
            OutputActivation::Identity => z,
            out => z.map(|v| out.apply(v)),
        };
        self.check_output(&out)?;
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTape)> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut hidden: Vec<Matrix> = Vec::with_capacity(last);
        for l in 0..last {
            let h = self.hidden_layer(l, hidden.last().unwrap_or(x));
            hidden.push(h);
        }
        let output_pre = self.affine(last, hidden.last().unwrap_or(x));
        let out = self.output_layer(&output_pre);
        self.check_output(&out)?;
        Ok((
            out,
            ForwardTape {
                stamp: self.stamp,
                batch: x.rows(),
                input: x.clone(),
                hidden,
                output_pre,
            },
        ))
    }

    fn check_tape(&self, tape: &ForwardTape, upstream: &Matrix) -> Result<()> {
        if tape.stamp != self.stamp || tape.hidden.len() + 1 != self.num_layers() {
            return Err(Error::Contract(
                "tape was not recorded by this network's current parameters".into(),
            ));
        }
        if upstream.shape() != (tape.batch, self.output_dim()) {
            return Err(Error::shape(
                "Mlp::backward upstream",
                format!("{:?}", (tape.batch, self.output_dim())),
                format!("{:?}", upstream.shape()),
            ));
        }
        Ok(())
    }

    /// Parameter and input gradients of `Σ upstream ⊙ output`.
    pub fn backward(&self, tape: &ForwardTape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        self.check_tape(tape, upstream)?;
        let mut grads = self.zero_grads();
        let dx = self.backprop(tape, upstream, Some(&mut grads));
        Ok((grads, dx))
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn input_grad(&self, tape: &ForwardTape, upstream: &Matrix) -> Result<Matrix> {
        self.check_tape(tape, upstream)?;
        Ok(self.backprop(tape, upstream, None))
    }

    fn backprop(
        &self,
        tape: &ForwardTape,
        upstream: &Matrix,
        mut grads: Option<&mut Gradients>,
    ) -> Matrix {
        let n = self.num_layers();
        let out = self.output;
        let mut delta = match out {
            OutputActivation::Identity => upstream.clone(),
            _ => Matrix::from_fn(tape.batch, self.output_dim(), |i, j| {
                upstream.get(i, j) * out.derivative(tape.output_pre.get(i, j))
            }),
        };
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let h = if l == 0 {
                &tape.input
            } else {
                &tape.hidden[l - 1]
            };
            if let Some(g) = grads.as_deref_mut() {
                let start = self.offsets[l];
                let (wg, rest) = g.data[start..self.offsets[l + 1]].split_at_mut(fan_in * fan_out);
                gemm(View::of(&delta).t(), View::of(h), 0.0, wg);
                for row in delta.as_slice().chunks_exact(fan_out) {
                    rest.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                }
            }
            let mut prev = Matrix::zeros(tape.batch, fan_in);
            let w = View::row_major(self.weight(l), fan_out, fan_in);
            gemm(View::of(&delta), w, 0.0, prev.as_mut_slice());
            if l > 0 {
                match self.hidden {
                    // relu(z) > 0 exactly when z > 0; the derivative at 0 is 0.
                    HiddenActivation::Relu => {
                        let h = &tape.hidden[l - 1];
                        prev.as_mut_slice()
                            .iter_mut()
                            .zip(h.as_slice())
                            .for_each(|(d, &hv)| {
                                if hv <= 0.0 {
                                    *d = 0.0;
                                }
                            });
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Little-endian serialization: layer count, dims, activation codes, parameters.
    pub fn write_le<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let (code, lo, hi) = match self.output {
            OutputActivation::Identity => (0u64, 0.0, 0.0),
            OutputActivation::ScaledSigmoid { lo, hi } => (1, lo, hi),
        };
        w.write_all(&code.to_le_bytes())?;
        w.write_all(&lo.to_le_bytes())?;
        w.write_all(&hi.to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_le<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Contract(format!("truncated network checkpoint: {e}"));
        let n = read_u64(r).map_err(bad)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Contract(format!(
                "implausible layer count {n} in checkpoint"
            )));
        }
        let dims = (0..n)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        validate_dims(&dims)?;
        let code = read_u64(r).map_err(bad)?;
        let lo = read_f64(r).map_err(bad)?;
        let hi = read_f64(r).map_err(bad)?;
        let output = match code {
            0 => OutputActivation::Identity,
            1 => OutputActivation::ScaledSigmoid { lo, hi },
            c => {
                return Err(Error::Contract(format!(
                    "unknown output activation code {c}"
                )))
            }
        };
        let count = *layer_offsets(&dims).last().unwrap();
        let params = (0..count)
            .map(|_| read_f64(r))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        Self::from_params(&dims, HiddenActivation::Relu, output, params)
    }
}

fn layer_of(offsets: &[usize], i: usize) -> usize {
    offsets.partition_point(|&o| o <= i) - 1
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Gradients {
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let start = layer_offsets(&self.dims)[l];
        &self.data[start..start + self.dims[l] * self.dims[l + 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let offsets = layer_offsets(&self.dims);
        &self.data[offsets[l] + self.dims[l] * self.dims[l + 1]..offsets[l + 1]]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.dims, other.dims, "gradient layouts differ");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += scale * b);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&g| g == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(w: f64, b: f64) -> Mlp {
        Mlp::from_params(
            &[1, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            vec![w, b],
        )
        .unwrap()
    }

    #[test]
    fn single_affine_layer() {
        let net = affine(2.0, 1.0);
        let (y, tape) = net.forward(&Matrix::column_vector(vec![3.0])).unwrap();
        assert_eq!(y.as_slice(), &[7.0]);
        let (g, dx) = net
            .backward(&tape, &Matrix::column_vector(vec![1.0]))
            .unwrap();
        assert_eq!(g.weight(0), &[3.0]);
        assert_eq!(g.bias(0), &[1.0]);
        assert_eq!(dx.as_slice(), &[2.0]);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let net = Mlp::from_params(
            &[1, 2, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            vec![1.0, 1.0, -5.0, -5.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let (_, tape) = net.forward(&Matrix::column_vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.hidden_activations()[0]
            .as_slice()
            .iter()
            .all(|&h| h == 0.0));
    }

    #[test]
    fn empty_batch_gives_empty_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(
            &[3, 8, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            &mut rng,
        )
        .unwrap();
        let (y, tape) = net.forward(&Matrix::zeros(0, 3)).unwrap();
        assert_eq!(y.shape(), (0, 1));
        let (g, dx) = net.backward(&tape, &Matrix::zeros(0, 1)).unwrap();
        assert!(g.is_zero());
        assert_eq!(dx.shape(), (0, 3));
    }

    #[test]
    fn invalid_dims_are_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dims in [&[][..], &[3], &[3, 0, 1]] {
            let r = Mlp::new(
                dims,
                HiddenActivation::Relu,
                OutputActivation::Identity,
                &mut rng,
            );
            assert!(matches!(r, Err(Error::Config(_))));
        }
    }

    #[test]
    fn he_uniform_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::new(
            &[3, 64, 64, 64, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            &mut rng,
        )
        .unwrap();
        for l in 0..net.num_layers() {
            let lim = (6.0 / net.layer_dims()[l] as f64).sqrt();
            assert!(net.weight(l).iter().all(|w| w.abs() <= lim));
            assert!(net.bias(l).iter().all(|&b| b == 0.0));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let twin = Mlp::new(
            &[3, 64, 64, 64, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            &mut rng2,
        )
        .unwrap();
        assert_eq!(net.params(), twin.params());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = affine(1.0, 0.0);
        let (_, tape) = net.forward(&Matrix::column_vector(vec![1.0])).unwrap();
        net.params_mut()[0] = 2.0;
        let r = net.backward(&tape, &Matrix::column_vector(vec![1.0]));
        assert!(matches!(r, Err(Error::Contract(_))));
        let other = affine(1.0, 0.0);
        assert!(other
            .backward(&tape, &Matrix::column_vector(vec![1.0]))
            .is_err());
    }

    #[test]
    fn shape_mismatch_on_forward() {
        let net = affine(1.0, 0.0);
        assert!(matches!(
            net.forward(&Matrix::zeros(2, 3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn layer_of_param_maps_offsets() {
        let net = Mlp::from_params(
            &[2, 3, 1],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            vec![0.0; 13],
        )
        .unwrap();
        assert_eq!(net.layer_of_param(0), 0);
        assert_eq!(net.layer_of_param(8), 0);
        assert_eq!(net.layer_of_param(9), 1);
        assert_eq!(net.layer_of_param(12), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(
            &[1, 5, 1],
            HiddenActivation::Relu,
            OutputActivation::ScaledSigmoid { lo: -2.0, hi: 2.0 },
            &mut rng,
        )
        .unwrap();
        let mut buf = Vec::new();
        net.write_le(&mut buf).unwrap();
        let back = Mlp::read_le(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.output_activation(), net.output_activation());
        assert!(Mlp::read_le(&mut &buf[..buf.len() - 3]).is_err());
    }
}
