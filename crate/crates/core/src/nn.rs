//! Fully connected building blocks shared by the model families.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Tanh,
    Sigmoid,
}

/// Stack of dense layers with relu between them.
///
/// Parameters live in a [`ParamStore`] as `{prefix}.{i}.weight` and
/// `{prefix}.{i}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub output: OutputActivation,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize], output: OutputActivation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        Mlp {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            output,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_prefix(&self, i: usize) -> String {
        format!("{}.{i}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|i| {
                let p = self.layer_prefix(i);
                [format!("{p}.weight"), format!("{p}.bias")]
            })
            .collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for i in 0..self.num_layers() {
            store.init_linear(&self.layer_prefix(i), self.dims[i], self.dims[i + 1], rng)?;
        }
        Ok(())
    }

    /// Zeroes the final layer so the pre-activation output is exactly 0.
    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        store.zero_prefix(&format!("{}.", self.layer_prefix(self.num_layers() - 1)));
    }

    /// Forward pass. With `trainable` false the weights enter the tape as
    /// constants.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let mut h = x;
        for i in 0..self.num_layers() {
            let p = self.layer_prefix(i);
            let (w, b) = if trainable {
                (
                    tape.param(store, &format!("{p}.weight"))?,
                    tape.param(store, &format!("{p}.bias"))?,
                )
            } else {
                (
                    tape.frozen_param(store, &format!("{p}.weight"))?,
                    tape.frozen_param(store, &format!("{p}.bias"))?,
                )
            };
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i + 1 < self.num_layers() {
                h = tape.relu(h)?;
            }
        }
        match self.output {
            OutputActivation::Linear => Ok(h),
            OutputActivation::Tanh => tape.tanh(h),
            OutputActivation::Sigmoid => tape.sigmoid(h),
        }
    }

    /// Gradient-free evaluation on a detached batch.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xi, false)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("net", &[4, 16, 3], OutputActivation::Linear);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng).unwrap();
        assert_eq!(store.len(), 4);
        let w = store.get("net.0.weight").unwrap();
        assert_eq!(w.shape(), &[4, 16]);
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        assert!(store.get("net.1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(store.num_values(), 4 * 16 + 16 + 16 * 3 + 3);
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new("g", &[5, 8, 8, 2], OutputActivation::Linear);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng).unwrap();
        mlp.zero_last_layer(&mut store);
        let y = mlp.eval(&store, &Tensor::randn(&[7, 5], &mut rng)).unwrap();
        assert_eq!(y.shape(), &[7, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
