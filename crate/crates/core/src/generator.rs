//! Fully convolutional encoder–decoder generator with skip connections and a
//! mid-network injection of the domain latent.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation, Bound, ModelConfig, ParamSet, ParamSpec};
use crate::tensor::Tensor;

pub const PREFIX: &str = "gen";
const KERNEL: usize = 3;

/// Stride-1 stem convolutions.
const STEM: [(&str, usize); 2] = [("3-b", 32), ("3-c", 32)];
/// Down stages: (stride-2 conv, stride-1 conv, width). The stride-1 output
/// of each stage feeds the matching up stage.
const DOWN: [(&str, &str, usize); 4] = [
    ("3-d", "3-e", 64),
    ("3-f", "3-g", 128),
    ("3-h", "3-i", 256),
    ("3-j", "3-k", 512),
];
/// Up stages: (deconv, skip concat, fusion conv, width, skip source).
const UP: [(&str, &str, &str, usize, &str); 4] = [
    ("3-M", "3-N", "3-O", 256, "3-i"),
    ("3-P", "3-Q", "3-R", 128, "3-g"),
    ("3-S", "3-T", "3-U", 64, "3-e"),
    ("3-V", "3-W", "3-X", 32, "3-c"),
];
const OUTPUT: &str = "3-Y";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Generator {
    cfg: ModelConfig,
}

fn key(row: &str) -> String {
    format!("{PREFIX}.{row}")
}

impl Generator {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Channels of the reshaped latent at the injection point.
    pub fn injection_channels(&self) -> usize {
        2 * self.cfg.latent_dim / self.cfg.grid().pow(2)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let w = |c| self.cfg.width(c);
        let mut specs = Vec::new();
        let mut c_in = 3;
        for (row, c) in STEM {
            specs.extend(ParamSpec::conv(&key(row), KERNEL, c_in, w(c)));
            c_in = w(c);
        }
        let mut skip_channels = vec![c_in];
        for (down, same, c) in DOWN {
            specs.extend(ParamSpec::conv(&key(down), KERNEL, c_in, w(c)));
            specs.extend(ParamSpec::conv(&key(same), KERNEL, w(c), w(c)));
            c_in = w(c);
            skip_channels.push(c_in);
        }
        // the deepest stage is not a skip source
        skip_channels.pop();
        c_in += self.injection_channels();
        for (i, (deconv, _, fuse, c)) in UP.iter().map(|u| (u.0, u.1, u.2, u.3)).enumerate() {
            specs.extend(ParamSpec::deconv(&key(deconv), KERNEL, c_in, w(c)));
            let skip = skip_channels[skip_channels.len() - 1 - i];
            specs.extend(ParamSpec::conv(&key(fuse), KERNEL, w(c) + skip, w(c)));
            c_in = w(c);
        }
        specs.extend(ParamSpec::conv(&key(OUTPUT), KERNEL, c_in, 3));
        specs
    }

    /// Builds the forward pass; every Table-style row is tagged `gen.<row>`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x_crop: Var, v_latent: Var) -> Result<Var> {
        let r = self.cfg.resolution;
        let xs = g.shape(x_crop).to_vec();
        if xs.len() != 4 || xs[1] != r || xs[2] != r || xs[3] != 3 {
            return Err(Error::Shape(format!("generator expects (N, {r}, {r}, 3), got {xs:?}")));
        }
        let vs = g.shape(v_latent).to_vec();
        if vs != [xs[0], 2 * self.cfg.latent_dim] {
            return Err(Error::Shape(format!(
                "generator expects latent ({}, {}), got {vs:?}",
                xs[0],
                2 * self.cfg.latent_dim
            )));
        }
        let side = self.cfg.grid();
        let injected = g.reshape(v_latent, &[xs[0], side, side, self.injection_channels()])?;
        let injected = g.tag(injected, key("3-a"));

        let mut h = x_crop;
        for (row, _) in STEM {
            h = nn::conv_block(g, p, &key(row), h, 1, Activation::Relu)?;
        }
        let mut skips = vec![(key("3-c"), h)];
        for (down, same, _) in DOWN {
            h = nn::conv_block(g, p, &key(down), h, 2, Activation::Relu)?;
            h = nn::conv_block(g, p, &key(same), h, 1, Activation::Relu)?;
            skips.push((key(same), h));
        }
        skips.pop();
        let mid = g.concat_last(h, injected)?;
        h = g.tag(mid, key("3-L"));
        for (deconv, concat, fuse, _, source) in UP {
            h = nn::deconv_block(g, p, &key(deconv), h, 2, Activation::Relu)?;
            let (name, skip) = skips.pop().expect("one skip per up stage");
            debug_assert_eq!(name, key(source));
            let joined = g.concat_last(h, skip)?;
            h = g.tag(joined, key(concat));
            h = nn::conv_block(g, p, &key(fuse), h, 1, Activation::Relu)?;
        }
        nn::conv_block(g, p, &key(OUTPUT), h, 1, Activation::Sigmoid)
    }

    pub fn generate(&self, params: &ParamSet, x_crop: &Tensor, v_latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.leaf(x_crop.clone());
        let v = g.leaf(v_latent.clone());
        let out = self.forward(&mut g, &p, x, v)?;
        Ok(g.value(out).clone())
    }
}

/// Broadcasts an `(N, H, W)` or `(N, H, W, 1)` weight map over `channels`.
pub fn broadcast_weight(w: &Tensor, channels: usize) -> Result<Tensor> {
    let s = w.shape();
    let (n, h, wd) = match s {
        [n, h, w] | [n, h, w, 1] => (*n, *h, *w),
        _ => return Err(Error::Shape(format!("weight map must be (N,H,W[,1]), got {s:?}"))),
    };
    let data = w
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(channels))
        .collect();
    Tensor::new(vec![n, h, wd, channels], data)
}

/// Foreground-weighted L1: mean over every element of `|w ⊙ (x_rec − x_real)|`.
pub fn weighted_reconstruction_loss_in(g: &mut Graph, x_rec: Var, x_real: &Tensor, w_fb: &Tensor) -> Result<Var> {
    let c = *x_real
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("empty image shape".into()))?;
    let w = broadcast_weight(w_fb, c)?;
    g.weighted_l1_mean(x_rec, x_real, &w)
}

pub fn weighted_reconstruction_loss(x_rec: &Tensor, x_real: &Tensor, w_fb: &Tensor) -> Result<f64> {
    x_rec.expect_shape(x_real.shape())?;
    let mut g = Graph::new();
    let x = g.leaf(x_rec.clone());
    let l = weighted_reconstruction_loss_in(&mut g, x, x_real, w_fb)?;
    Ok(g.value(l).item())
}

/// Takes hole pixels from `x_rec` and every other pixel from `x_crop`.
pub fn composite(x_rec: &Tensor, x_crop: &Tensor, hole_mask: &Tensor) -> Result<Tensor> {
    x_rec.expect_shape(x_crop.shape())?;
    let c = *x_rec.shape().last().unwrap_or(&1);
    let mask = broadcast_weight(hole_mask, c)?;
    mask.expect_shape(x_rec.shape())?;
    let mut out = x_crop.clone();
    for ((o, &r), &m) in out.data_mut().iter_mut().zip(x_rec.data()).zip(mask.data()) {
        if m != 0.0 {
            *o = r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            width_divisor: 8,
            latent_dim: 16,
        }
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let gen = Generator::new(small()).unwrap();
        let mut params = ParamSet::init(&gen.param_specs(), &mut ChaCha8Rng::seed_from_u64(1));
        for (name, t) in params.iter_mut() {
            if name.starts_with("gen.3-Y") {
                t.data_mut().fill(0.0);
            }
        }
        let x = Tensor::full(&[1, 32, 32, 3], 0.7);
        let v = Tensor::full(&[1, 32], 0.2);
        let y = gen.generate(&params, &x, &v).unwrap();
        assert_eq!(y.shape(), &[1, 32, 32, 3]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn latent_changes_output() {
        let gen = Generator::new(small()).unwrap();
        let params = ParamSet::init(&gen.param_specs(), &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::from_fn(&[1, 32, 32, 3], |i| (i % 11) as f64 / 11.0);
        let a = gen.generate(&params, &x, &Tensor::full(&[1, 32], 0.0)).unwrap();
        let b = gen.generate(&params, &x, &Tensor::full(&[1, 32], 1.0)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_latent_length_rejected() {
        let gen = Generator::new(small()).unwrap();
        let params = ParamSet::zeros(&gen.param_specs());
        let x = Tensor::zeros(&[1, 32, 32, 3]);
        assert!(gen.generate(&params, &x, &Tensor::zeros(&[1, 31])).is_err());
    }

    #[test]
    fn loss_examples() {
        let real = Tensor::full(&[1, 2, 2, 3], 0.5);
        let ones = Tensor::full(&[1, 2, 2, 1], 1.0);
        assert_eq!(weighted_reconstruction_loss(&real, &real, &ones).unwrap(), 0.0);
        let rec = real.map(|v| v + 0.2);
        assert!((weighted_reconstruction_loss(&rec, &real, &ones).unwrap() - 0.2).abs() < 1e-12);
        let w = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 1.0, 0.5, 0.5]).unwrap();
        let rec = real.map(|v| v + 0.4);
        assert!((weighted_reconstruction_loss(&rec, &real, &w).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn composite_selects_by_mask() {
        let rec = Tensor::full(&[1, 2, 2, 3], 0.9);
        let crop = Tensor::full(&[1, 2, 2, 3], 0.1);
        let ones = Tensor::full(&[1, 2, 2, 1], 1.0);
        assert_eq!(composite(&rec, &crop, &ones).unwrap(), rec);
        assert_eq!(composite(&rec, &crop, &Tensor::zeros(&[1, 2, 2, 1])).unwrap(), crop);
    }
}
