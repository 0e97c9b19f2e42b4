use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Gradients, Tape, TensorError, Var};

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    Uniform {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Zeros,
    Ones,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Init::Uniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("non-negative std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<(), TensorError> {
        if self.index.contains_key(&p.name) {
            return Err(TensorError::DuplicateParameter(p.name));
        }
        if p.shape.iter().product::<usize>() != p.values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter {} has shape {:?} but {} values",
                p.name,
                p.shape,
                p.values.len()
            )));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    /// Creates a trainable parameter drawn from `init`.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<(), TensorError> {
        let n = shape.iter().product();
        self.insert(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: init.sample(n, rng),
            trainable: true,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.values.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Records every parameter on `tape`; trainable ones receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                tape.leaf(p.shape.clone(), p.values.clone(), p.trainable)
                    .expect("parameter shape validated on insert")
            })
            .collect();
        Bound {
            index: self.index.clone(),
            lens: self.params.iter().map(|p| p.values.len()).collect(),
            vars,
        }
    }
}

/// A [`ParamSet`] recorded on a tape.
#[derive(Debug)]
pub struct Bound<'t> {
    index: HashMap<String, usize>,
    lens: Vec<usize>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>, TensorError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Gradients aligned with the parameter order; zeros where none flowed.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.lens)
            .map(|(v, &n)| grads.get_or_zeros(*v, n))
            .collect()
    }
}
