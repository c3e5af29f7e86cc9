use std::fmt;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is, which decides decay, clipping and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    /// Latent real weights of a binarized layer.
    LatentWeight,
    /// Weights of a full-precision layer.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    /// Raw activation self-distribution factor (before its constraint).
    AsdRaw,
    /// Raw weight self-distribution factor (before sigmoid).
    WsdRaw,
    /// Weights and biases of a dynamic self-distribution head.
    DasdHead,
}

impl ParamClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamClass::LatentWeight => "latent_weight",
            ParamClass::Weight => "weight",
            ParamClass::Bias => "bias",
            ParamClass::BnGamma => "bn_gamma",
            ParamClass::BnBeta => "bn_beta",
            ParamClass::AsdRaw => "asd_beta",
            ParamClass::WsdRaw => "wsd_alpha",
            ParamClass::DasdHead => "dasd_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "latent_weight" => ParamClass::LatentWeight,
            "weight" => ParamClass::Weight,
            "bias" => ParamClass::Bias,
            "bn_gamma" => ParamClass::BnGamma,
            "bn_beta" => ParamClass::BnBeta,
            "asd_beta" => ParamClass::AsdRaw,
            "wsd_alpha" => ParamClass::WsdRaw,
            "dasd_head" => ParamClass::DasdHead,
            _ => return None,
        })
    }

    /// Weight decay applies to real weights and the head, never to raw
    /// self-distribution factors or batch-norm affine terms.
    pub fn decays(self) -> bool {
        matches!(self, ParamClass::LatentWeight | ParamClass::Weight | ParamClass::DasdHead)
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub class: ParamClass,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub learnable: bool,
}

/// Owns every optimizable leaf of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, class: ParamClass, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name: name.into(), class, value, grad, learnable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    class: p.class,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    learnable: p.learnable,
                })
                .collect(),
        }
    }
}
