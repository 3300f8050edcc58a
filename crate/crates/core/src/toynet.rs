//! Small randomly initialized networks for experiments and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network, Padding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyNet {
    /// conv3x3 → relu → conv3x3, valid padding; one feature per output
    /// channel.
    ConvRelu {
        hidden: usize,
        n_features: usize,
        seed: u64,
    },
    /// conv3x3 → relu → maxpool 2/2 → dense → softmax; one feature per
    /// output neuron.
    SoftmaxHead {
        hidden: usize,
        n_features: usize,
        seed: u64,
    },
    /// `ConvRelu` with the weights and bias of output channel `dead`
    /// zeroed.
    DeadFilter {
        hidden: usize,
        n_features: usize,
        seed: u64,
        dead: usize,
    },
}

impl ToyNet {
    pub fn n_features(&self) -> usize {
        match self {
            ToyNet::ConvRelu { n_features, .. }
            | ToyNet::SoftmaxHead { n_features, .. }
            | ToyNet::DeadFilter { n_features, .. } => *n_features,
        }
    }

    pub fn build(&self, input_shape: &[usize]) -> Result<Network> {
        let &[h, w, c] = input_shape else {
            return Err(Error::shape("toy network input", &[0, 0, 0], input_shape));
        };
        match *self {
            ToyNet::ConvRelu { hidden, n_features, seed } => conv_relu(h, w, c, hidden, n_features, seed, None),
            ToyNet::DeadFilter {
                hidden,
                n_features,
                seed,
                dead,
            } => {
                if dead >= n_features {
                    return Err(Error::Config(format!("dead filter {dead} out of range for {n_features} features")));
                }
                conv_relu(h, w, c, hidden, n_features, seed, Some(dead))
            }
            ToyNet::SoftmaxHead { hidden, n_features, seed } => softmax_head(h, w, c, hidden, n_features, seed),
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut self.rng)).collect()).expect("sized")
    }

    fn bias(&mut self, n: usize) -> Tensor {
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        Tensor::from_vec((0..n).map(|_| normal.sample(&mut self.rng)).collect())
    }
}

fn conv_relu(h: usize, w: usize, c: usize, hidden: usize, n_f: usize, seed: u64, dead: Option<usize>) -> Result<Network> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let w1 = init.tensor(&[hidden, 3, 3, c], 9 * c);
    let b1 = init.bias(hidden);
    let mut w2 = init.tensor(&[n_f, 3, 3, hidden], 9 * hidden);
    let mut b2 = init.bias(n_f);
    if let Some(f) = dead {
        let per = 9 * hidden;
        w2.data_mut()[f * per..(f + 1) * per].iter_mut().for_each(|v| *v = 0.0);
        b2.data_mut()[f] = 0.0;
    }
    Network::new(
        vec![h, w, c],
        vec![
            Layer::Conv2d {
                weight: w1,
                padding: Padding::Valid,
            },
            Layer::BiasAdd { bias: b1 },
            Layer::Relu,
            Layer::Conv2d {
                weight: w2,
                padding: Padding::Valid,
            },
            Layer::BiasAdd { bias: b2 },
        ],
    )
}

fn softmax_head(h: usize, w: usize, c: usize, hidden: usize, n_f: usize, seed: u64) -> Result<Network> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let w1 = init.tensor(&[hidden, 3, 3, c], 9 * c);
    let b1 = init.bias(hidden);
    let flat = (h.saturating_sub(2) / 2) * (w.saturating_sub(2) / 2) * hidden;
    let w2 = init.tensor(&[n_f, flat], flat);
    let b2 = init.bias(n_f);
    Network::new(
        vec![h, w, c],
        vec![
            Layer::Conv2d {
                weight: w1,
                padding: Padding::Valid,
            },
            Layer::BiasAdd { bias: b1 },
            Layer::Relu,
            Layer::MaxPool2d { size: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense { weight: w2 },
            Layer::BiasAdd { bias: b2 },
            Layer::Softmax,
        ],
    )
}
