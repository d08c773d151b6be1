//! Named parameter sets and the layer helpers shared by every network.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Channel-width and resolution settings shared by all networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input resolution; must be a multiple of 16.
    pub resolution: usize,
    /// Every convolution width is divided by this (1 = full width).
    pub width_divisor: usize,
    /// Length of each encoder head (μ and σ); `V_latent` is twice this.
    pub latent_dim: usize,
}

impl ModelConfig {
    pub fn full(resolution: usize) -> Self {
        Self {
            resolution,
            width_divisor: 1,
            latent_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of 16",
                self.resolution
            )));
        }
        if self.width_divisor == 0 || self.latent_dim == 0 {
            return Err(Error::Config("width_divisor and latent_dim must be positive".into()));
        }
        let cells = (self.resolution / 16).pow(2);
        if (2 * self.latent_dim) % cells != 0 {
            return Err(Error::Config(format!(
                "latent length {} is not divisible by the {cells} cells of the injection grid",
                2 * self.latent_dim
            )));
        }
        Ok(())
    }

    /// Scaled channel count, never below one.
    pub fn width(&self, full: usize) -> usize {
        (full / self.width_divisor).max(1)
    }

    /// Side length of the latent injection grid.
    pub fn grid(&self) -> usize {
        self.resolution / 16
    }
}

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot/Xavier uniform over `(fan_in, fan_out)`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn conv(name: &str, kernel: usize, c_in: usize, c_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{name}.kernel"),
                shape: vec![kernel, kernel, c_in, c_out],
                init: Init::GlorotUniform {
                    fan_in: kernel * kernel * c_in,
                    fan_out: kernel * kernel * c_out,
                },
            },
            ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![c_out],
                init: Init::Zeros,
            },
        ]
    }

    /// Transposed-convolution kernel, stored as `(k, k, c_out, c_in)`.
    pub fn deconv(name: &str, kernel: usize, c_in: usize, c_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{name}.kernel"),
                shape: vec![kernel, kernel, c_out, c_in],
                init: Init::GlorotUniform {
                    fan_in: kernel * kernel * c_in,
                    fan_out: kernel * kernel * c_out,
                },
            },
            ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![c_out],
                init: Init::Zeros,
            },
        ]
    }

    pub fn dense(name: &str, d_in: usize, d_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{name}.kernel"),
                shape: vec![d_in, d_out],
                init: Init::GlorotUniform {
                    fan_in: d_in,
                    fan_out: d_out,
                },
            },
            ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![d_out],
                init: Init::Zeros,
            },
        ]
    }
}

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    /// Initialises every spec in order from `rng`.
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::GlorotUniform { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-limit..limit))
                }
            };
            tensors.insert(spec.name.clone(), t);
        }
        Self { tensors }
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        Self {
            tensors: specs
                .iter()
                .map(|s| (s.name.clone(), Tensor::zeros(&s.shape)))
                .collect(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn conforms_to(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Shape(format!("missing parameter `{}`", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} tensors, expected {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        Ok(())
    }

    /// Records every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }
}

/// Graph variables for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("no parameter named `{name}`")))
    }

    /// Variables in name order, matching [`ParamSet::iter`].
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// Same-padded convolution + bias + activation; the output is tagged `name`.
pub fn conv_block(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, act: Activation) -> Result<Var> {
    let k = p.var(&format!("{name}.kernel"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = g.conv2d(x, k, stride)?;
    let y = g.bias_add(y, b)?;
    let y = activate(g, y, act);
    Ok(g.tag(y, name))
}

pub fn deconv_block(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, act: Activation) -> Result<Var> {
    let k = p.var(&format!("{name}.kernel"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = g.deconv2d(x, k, stride)?;
    let y = g.bias_add(y, b)?;
    let y = activate(g, y, act);
    Ok(g.tag(y, name))
}

pub fn dense_block(g: &mut Graph, p: &Bound, name: &str, x: Var, act: Activation) -> Result<Var> {
    let w = p.var(&format!("{name}.kernel"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = g.dense(x, w)?;
    let y = g.bias_add(y, b)?;
    let y = activate(g, y, act);
    Ok(g.tag(y, name))
}

/// Flattens `(N, …)` to `(N, rest)`.
pub fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    g.reshape(x, &[s[0], rest])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let specs = ParamSpec::conv("c", 3, 4, 8);
        let p = ParamSet::init(&specs, &mut ChaCha8Rng::seed_from_u64(1));
        let limit = (6.0f64 / (36.0 + 72.0)).sqrt();
        assert!(p.get("c.kernel").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert!(p.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
        p.conforms_to(&specs).unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::full(256).validate().is_ok());
        assert!(ModelConfig::full(100).validate().is_err());
        let cfg = ModelConfig {
            resolution: 16 * 5,
            width_divisor: 1,
            latent_dim: 256,
        };
        // 512 is not divisible by 25 cells
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
