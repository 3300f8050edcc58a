//! The composite map `v -> y = agg(N(P(v)))` from parameters to features.

use crate::error::{Error, Result};
use crate::network::{jacobian, Differentiable, JacobianMatrix, Network, NetworkTape};
use crate::objective::{aggregate, aggregate_vjp, Aggregation, FeatureResponse};
use crate::parametrize::Parametrization;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    param: Parametrization,
    network: Network,
    aggregation: Aggregation,
    n_features: [usize; 1],
}

pub struct PipelineTape {
    image: (Tensor, Tensor),
    network: NetworkTape,
    y: Tensor,
}

impl PipelineTape {
    pub fn image(&self) -> &Tensor {
        &self.image.1
    }

    pub fn response(&self) -> FeatureResponse {
        FeatureResponse::new(self.y.data().to_vec())
    }
}

impl FeaturePipeline {
    pub fn new(param: Parametrization, network: Network, aggregation: Aggregation) -> Result<Self> {
        if network.input_shape() != param.shape() {
            return Err(Error::shape("network input vs image", param.shape(), network.input_shape()));
        }
        let out = network.output_shape();
        let n_f = match (aggregation, out) {
            (Aggregation::Identity, [n]) => *n,
            (Aggregation::Identity, _) => {
                return Err(Error::shape("identity aggregation input", &[0], out));
            }
            (_, [_, _, c]) => {
                // validates spatial constraints of the aggregation
                aggregate(&Tensor::zeros(out), aggregation)?;
                *c
            }
            _ => return Err(Error::shape(format!("{aggregation:?} aggregation input"), &[0, 0, 0], out)),
        };
        Ok(Self {
            param,
            network,
            aggregation,
            n_features: [n_f],
        })
    }

    pub fn parametrization(&self) -> &Parametrization {
        &self.param
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn n_features(&self) -> usize {
        self.n_features[0]
    }

    pub fn n_params(&self) -> usize {
        self.param.n_params()
    }

    pub fn response(&self, v: &Tensor) -> Result<FeatureResponse> {
        Ok(self.record(v)?.response())
    }

    /// `Dy = D(agg ∘ N ∘ P)(v)`, shape `n_f × n_p`.
    pub fn jacobian(&self, v: &Tensor) -> Result<JacobianMatrix> {
        jacobian(self, v)
    }
}

impl Differentiable for FeaturePipeline {
    type Tape = PipelineTape;

    fn input_shape(&self) -> &[usize] {
        self.param.shape()
    }

    fn output_shape(&self) -> &[usize] {
        &self.n_features
    }

    fn record(&self, v: &Tensor) -> Result<PipelineTape> {
        let image = self.param.record(v)?;
        let network = self.network.record(&image.1)?;
        let y = aggregate(self.network.output(&network), self.aggregation)?;
        Ok(PipelineTape {
            image,
            network,
            y: Tensor::from_vec(y.values().to_vec()),
        })
    }

    fn output<'t>(&self, tape: &'t PipelineTape) -> &'t Tensor {
        &tape.y
    }

    fn backward(&self, tape: &PipelineTape, cotangent: &Tensor) -> Result<Tensor> {
        let acts = self.network.output(&tape.network);
        let g = aggregate_vjp(acts, self.aggregation, cotangent.data())?;
        let g = self.network.backward(&tape.network, &g)?;
        self.param.backward(&tape.image, &g)
    }
}
