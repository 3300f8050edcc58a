//! Feedforward layer chains with reverse-mode differentiation.

mod format;
mod layers;

pub use format::{load_network, save_network, NetworkDocument};
pub use layers::{Layer, Padding};
pub(crate) use layers::{pool_argmax, sigmoid};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor;

/// A differentiable map between tensors with a recorded forward pass.
///
/// `record` runs the forward pass and keeps whatever the backward pass
/// needs; `backward` pulls a cotangent of the output back to the input.
pub trait Differentiable: Sync {
    type Tape: Sync;

    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    fn record(&self, v: &Tensor) -> Result<Self::Tape>;
    fn output<'t>(&self, tape: &'t Self::Tape) -> &'t Tensor;
    fn backward(&self, tape: &Self::Tape, cotangent: &Tensor) -> Result<Tensor>;

    fn eval(&self, v: &Tensor) -> Result<Tensor> {
        let tape = self.record(v)?;
        Ok(self.output(&tape).clone())
    }

    /// `cᵀ · D f(v)`, shaped like `v`.
    fn vjp(&self, v: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let tape = self.record(v)?;
        self.backward(&tape, cotangent)
    }
}

/// Jacobian of a vector-valued map: row `f` is the gradient of output `f`
/// with respect to the flattened input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JacobianMatrix {
    matrix: Matrix,
}

impl JacobianMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite("jacobian".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn n_features(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_params(&self) -> usize {
        self.matrix.cols()
    }

    pub fn scaled(&self, alpha: f64) -> JacobianMatrix {
        JacobianMatrix {
            matrix: self.matrix.scale(alpha),
        }
    }
}

/// Full Jacobian of `f` at `v` using one backward pass per output.
///
/// Rows are computed in parallel; each row only depends on the shared
/// forward tape, so the result does not depend on scheduling.
pub fn jacobian<F: Differentiable>(f: &F, v: &Tensor) -> Result<JacobianMatrix> {
    let tape = f.record(v)?;
    let out = f.output(&tape);
    if out.shape().len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs a vector-valued map, output shape is {:?}",
            out.shape()
        )));
    }
    let n_f = out.len();
    let rows: Vec<Vec<f64>> = (0..n_f)
        .into_par_iter()
        .map(|i| {
            let mut e = Tensor::zeros(&[n_f]);
            e.data_mut()[i] = 1.0;
            f.backward(&tape, &e).map(Tensor::into_data)
        })
        .collect::<Result<_>>()?;
    JacobianMatrix::new(Matrix::from_rows(&rows)?)
}

/// An ordered chain of layers with validated shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// `shapes[i]` is the output shape of layer `i`.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            current = layer.output_shape(&current).map_err(|e| match e {
                Error::Shape {
                    expected, actual, ..
                } => Error::Shape {
                    context: format!("layer {i} ({})", layer.kind()),
                    expected,
                    actual,
                },
                other => Error::InvalidArgument(format!("layer {i} ({}): {other}", layer.kind())),
            })?;
            shapes.push(current.clone());
        }
        Ok(Self {
            layers,
            input_shape,
            shapes,
        })
    }

    pub fn identity(shape: Vec<usize>) -> Self {
        Self::new(shape, Vec::new()).expect("empty chain is valid")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to a layer's weights; shapes must be preserved.
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        self.eval(v)
    }

    fn check_input(&self, v: &Tensor) -> Result<()> {
        if v.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("network input", &self.input_shape, v.shape()));
        }
        Ok(())
    }
}

/// Activations of every layer boundary; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct NetworkTape {
    activations: Vec<Tensor>,
}

impl Differentiable for Network {
    type Tape = NetworkTape;

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap_or(&self.input_shape)
    }

    fn record(&self, v: &Tensor) -> Result<NetworkTape> {
        self.check_input(v)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(v.clone());
        for (i, (layer, shape)) in self.layers.iter().zip(&self.shapes).enumerate() {
            let out = layer.forward(activations.last().expect("nonempty"), shape);
            out.check_finite(&format!("forward of layer {i} ({})", layer.kind()))?;
            activations.push(out);
        }
        Ok(NetworkTape { activations })
    }

    fn output<'t>(&self, tape: &'t NetworkTape) -> &'t Tensor {
        tape.activations.last().expect("tape holds the input")
    }

    fn backward(&self, tape: &NetworkTape, cotangent: &Tensor) -> Result<Tensor> {
        if cotangent.shape() != self.output_shape() {
            return Err(Error::shape(
                "network cotangent",
                self.output_shape(),
                cotangent.shape(),
            ));
        }
        let mut grad = cotangent.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(&tape.activations[i], &tape.activations[i + 1], &grad);
            grad.check_finite(&format!("backward of layer {i} ({})", layer.kind()))?;
        }
        Ok(grad)
    }
}
