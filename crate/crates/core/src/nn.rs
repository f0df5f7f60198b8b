//! Dense layers built on the autodiff graph, plus seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Deterministic generator for `(seed, stream)`. Separate streams keep
/// components independent while sharing one user-facing seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform `[-bound, bound]` entries. Values are drawn as `f64` and then
/// converted, so `f32` and `f64` stores see the same stream.
pub fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape product matches length")
}

/// `y = x·W + b` with `W: [d_in×d_out]` and an optional `b: [d_out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/√d_in`, bias zero.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = Self::init_unbiased(store, prefix, d_in, d_out, rng)?;
        layer.bias = Some(store.add(format!("{prefix}.bias"), Tensor::zeros(vec![d_out]), false)?);
        Ok(layer)
    }

    /// As [`Linear::init`] without a bias term.
    pub fn init_unbiased<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{prefix}.weight"), uniform_tensor(rng, vec![d_in, d_out], bound), false)?;
        Ok(Self {
            weight,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut layer = Self::bind_unbiased(store, prefix, d_in, d_out)?;
        layer.bias = Some(store.require(&format!("{prefix}.bias"), &[d_out])?);
        Ok(layer)
    }

    pub fn bind_unbiased<T: Scalar>(store: &ParamStore<T>, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.require(&format!("{prefix}.weight"), &[d_in, d_out])?,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let xw = g.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = g.param(store, bias);
                g.add_bias(xw, b)
            }
            None => Ok(xw),
        }
    }

    /// Same computation with the parameters entering as constants.
    pub fn forward_detached<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.constant(store.get(self.weight).tensor.clone());
        let xw = g.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = g.constant(store.get(bias).tensor.clone());
                g.add_bias(xw, b)
            }
            None => Ok(xw),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Two-layer perceptron `linear → activation → linear` without bias terms.
///
/// With ReLU, tanh or identity activations the map is odd or positively
/// homogeneous, so a cosine objective on its output trains the same way
/// whatever the scale of its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d_in, d_hidden, d_out) = dims;
        Ok(Self {
            hidden: Linear::init_unbiased(store, &format!("{prefix}.0"), d_in, d_hidden, rng)?,
            output: Linear::init_unbiased(store, &format!("{prefix}.1"), d_hidden, d_out, rng)?,
            activation,
        })
    }

    pub fn bind<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        activation: Activation,
    ) -> Result<Self> {
        let (d_in, d_hidden, d_out) = dims;
        Ok(Self {
            hidden: Linear::bind_unbiased(store, &format!("{prefix}.0"), d_in, d_hidden)?,
            output: Linear::bind_unbiased(store, &format!("{prefix}.1"), d_hidden, d_out)?,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let a = g.activation(h, self.activation);
        self.output.forward(g, store, a)
    }

    pub fn forward_detached<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward_detached(g, store, x)?;
        let a = g.activation(h, self.activation);
        self.output.forward_detached(g, store, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.params();
        ids.extend(self.output.params());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;

    #[test]
    fn identity_weight_and_bias_passthrough() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = rng_for(1, 0);
        let lin = Linear::init(&mut s, "l", 2, 2, &mut rng).unwrap();
        s.get_mut(lin.weight).tensor = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = lin.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        s.get_mut(lin.bias.unwrap()).tensor = Tensor::vector(vec![3.0, 4.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = lin.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = rng_for(3, 0);
        let mlp = Mlp::init(&mut s, "m", (3, 5, 2), Activation::Tanh, &mut rng).unwrap();
        let x = uniform_tensor::<f64>(&mut rng, vec![4, 3], 1.0);
        let err = finite_difference_check(&mut s, 1e-5, |g, st| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, st, xv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bind_checks_shapes() {
        let mut s = ParamStore::<f64>::new();
        Linear::init(&mut s, "l", 2, 3, &mut rng_for(0, 0)).unwrap();
        assert!(Linear::bind(&s, "l", 2, 3).is_ok());
        assert!(Linear::bind(&s, "l", 3, 2).is_err());
        assert!(Linear::bind(&s, "missing", 2, 3).is_err());
    }
}
