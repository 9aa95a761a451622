use super::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn for_mlp(net: &Mlp, lr: f64) -> Result<Self> {
        Self::new(net.num_params(), lr)
    }

    /// Bias-corrected Adam update of a flat parameter slice. Rejects the
    /// whole step (nothing mutated) if any gradient is non-finite, reporting
    /// the offending flat index.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> std::result::Result<(), usize> {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(i);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One Adam step on a network.
pub fn adam_step(state: &mut AdamState, net: &mut Mlp, grads: &Gradients) -> Result<()> {
    if grads.layer_dims() != net.layer_dims() {
        return Err(Error::shape(
            "adam_step gradients",
            format!("{:?}", net.layer_dims()),
            format!("{:?}", grads.layer_dims()),
        ));
    }
    if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            context: "gradient".into(),
            layer: Some(net.layer_of_param(i)),
        });
    }
    state
        .update(net.params_mut(), grads.as_slice())
        .expect("gradients checked finite");
    Ok(())
}
