use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{ParamId, ParamStore, Tape, Var};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fan-in uniform initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// `activation(W·x + b)`, with `x` holding one sample per column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, output, input, input));
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, output, 1, input));
        Linear {
            weight,
            bias,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let wx = tape.matmul(w, x)?;
        let y = tape.add_bias(wx, b)?;
        match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Identity => Ok(y),
        }
    }
}

/// Stack of [`Linear`] layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Layers chained through `dims`; hidden layers use ReLU, the last `last`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        last: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid MLP dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { Activation::Relu };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].weight).cols()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[self.layers.len() - 1].weight).rows()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let expected = self.in_dim(store);
        let got = tape.value(x).rows();
        if got != expected {
            return Err(Error::shape(format!("MLP expects {expected} input rows, got {got}")));
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, store, h))
    }

    /// Untracked evaluation on a plain tensor.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, v)?;
        Ok(tape.value(y).clone())
    }

    /// Overwrites the layers with `W = I` (rectangular identity) and `b = 0`.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            let w = store.get_mut(layer.weight);
            let (r, c) = (w.rows(), w.cols());
            for i in 0..r {
                for j in 0..c {
                    w.set(i, j, if i == j { 1.0 } else { 0.0 });
                }
            }
            store.get_mut(layer.bias).data_mut().fill(0.0);
        }
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            store.get_mut(layer.weight).data_mut().fill(0.0);
            store.get_mut(layer.bias).data_mut().fill(0.0);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 3], Activation::Identity, &mut rng).unwrap();
        mlp.set_identity(&mut store);
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(mlp.eval(&store, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 3], Activation::Identity, &mut rng).unwrap();
        store.get_mut(mlp.layers[0].weight).data_mut().fill(0.0);
        store.get_mut(mlp.layers[0].bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let x = Tensor::from_rows(&[vec![5.0, -4.0], vec![9.0, 1.0]]).unwrap();
        let y = mlp.eval(&store, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn random_mlp_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 5, 2], Activation::Identity, &mut rng).unwrap();
        let x = init_uniform(&mut rng, 4, 3, 1);
        let y = mlp.eval(&store, &x).unwrap();
        for col in 0..3 {
            let mut h = x.column_vec(col);
            for layer in &mlp.layers {
                let (w, b) = (store.get(layer.weight), store.get(layer.bias));
                h = (0..w.rows())
                    .map(|i| {
                        let s = b.data()[i] + (0..w.cols()).map(|j| w.get(i, j) * h[j]).sum::<f64>();
                        match layer.activation {
                            Activation::Relu => s.max(0.0),
                            Activation::Identity => s,
                        }
                    })
                    .collect();
            }
            for (i, v) in h.iter().enumerate() {
                assert!((y.get(i, col) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = init_uniform(&mut rng, 10, 10, 16);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn input_width_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], Activation::Identity, &mut rng).unwrap();
        assert!(mlp.eval(&store, &Tensor::zeros(2, 1)).is_err());
        assert!(Mlp::new(&mut store, "bad", &[3], Activation::Identity, &mut rng).is_err());
    }
}
