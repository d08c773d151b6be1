//! Domain embedding network: two convolutional encoders produce Gaussian
//! parameters for the face-region and landmark latents, samples are drawn by
//! reparameterization, and three decoders reconstruct the face mask, the face
//! part and the landmark image. A latent classifier pushes the encoded
//! latents toward the standard normal prior.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation, Bound, ModelConfig, ParamSet, ParamSpec};
use crate::tensor::Tensor;

const ENCODER_WIDTHS: [(&str, usize); 5] = [("1-a", 32), ("1-b", 64), ("1-c", 128), ("1-d", 128), ("1-e", 128)];
const DECODER_WIDTHS: [(&str, usize); 4] = [("2-b", 128), ("2-c", 64), ("2-d", 32), ("2-e", 16)];
const ENCODER_KERNEL: usize = 4;
const DECODER_KERNEL: usize = 4;

pub const FACE_ENCODER: &str = "embed.face_enc";
pub const LANDMARK_ENCODER: &str = "embed.lmk_enc";
pub const MASK_DECODER: &str = "embed.mask_dec";
pub const PART_DECODER: &str = "embed.part_dec";
pub const LANDMARK_DECODER: &str = "embed.lmk_dec";

/// Mean and standard deviation of a diagonal Gaussian, batched as `(N, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        sigma.expect_shape(mu.shape())?;
        if !mu.all_finite() || !sigma.all_finite() {
            return Err(Error::Numeric("Gaussian parameters must be finite".into()));
        }
        if sigma.data().iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("sigma must be non-negative".into()));
        }
        Ok(Self { mu, sigma })
    }
}

/// Graph handles for one encoder's two heads.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Graph handles for the three decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct DecodedVars {
    pub mask: Var,
    pub part: Var,
    pub landmark: Var,
}

/// Reconstruction targets for the three decoders. `mask` and `landmark` are
/// single-channel binary images; `part` has three channels.
#[derive(Debug, Clone)]
pub struct DomainTargets {
    pub mask: Tensor,
    pub part: Tensor,
    pub landmark: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DomainLosses {
    pub mask: Var,
    pub part: Var,
    pub landmark: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainEmbedding {
    cfg: ModelConfig,
}

impl DomainEmbedding {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Spatial side of the last encoder feature map.
    fn encoder_side(&self) -> usize {
        let mut s = self.cfg.resolution;
        for _ in 0..ENCODER_WIDTHS.len() {
            s = s.div_ceil(2);
        }
        s
    }

    fn encoder_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = 3;
        for (row, w) in ENCODER_WIDTHS {
            let c_out = self.cfg.width(w);
            specs.extend(ParamSpec::conv(&format!("{prefix}.{row}"), ENCODER_KERNEL, c_in, c_out));
            c_in = c_out;
        }
        let flat = self.encoder_side().pow(2) * c_in;
        specs.extend(ParamSpec::dense(&format!("{prefix}.1-f"), flat, self.cfg.latent_dim));
        specs.extend(ParamSpec::dense(&format!("{prefix}.1-g"), flat, self.cfg.latent_dim));
        specs
    }

    fn decoder_specs(&self, prefix: &str, input_len: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = input_len / self.cfg.grid().pow(2);
        for (row, w) in DECODER_WIDTHS {
            let c_out = self.cfg.width(w);
            specs.extend(ParamSpec::deconv(&format!("{prefix}.{row}"), DECODER_KERNEL, c_in, c_out));
            c_in = c_out;
        }
        specs.extend(ParamSpec::conv(&format!("{prefix}.2-f"), 1, c_in, 3));
        specs
    }

    /// Every parameter of the two encoders and three decoders. None are shared.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.cfg.latent_dim;
        let mut specs = self.encoder_specs(FACE_ENCODER);
        specs.extend(self.encoder_specs(LANDMARK_ENCODER));
        specs.extend(self.decoder_specs(MASK_DECODER, 2 * d));
        specs.extend(self.decoder_specs(PART_DECODER, 2 * d));
        specs.extend(self.decoder_specs(LANDMARK_DECODER, d));
        specs
    }

    fn check_image(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let r = self.cfg.resolution;
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::Shape(format!("encoder expects (N, {r}, {r}, 3), got {s:?}")));
        }
        Ok(())
    }

    fn forward_encoder(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<GaussianVars> {
        self.check_image(g, x)?;
        let mut h = x;
        for (row, _) in ENCODER_WIDTHS {
            h = nn::conv_block(g, p, &format!("{prefix}.{row}"), h, 2, Activation::LeakyRelu)?;
        }
        let flat = nn::flatten(g, h)?;
        let mu = nn::dense_block(g, p, &format!("{prefix}.1-f"), flat, Activation::Sigmoid)?;
        let sigma = nn::dense_block(g, p, &format!("{prefix}.1-g"), flat, Activation::Sigmoid)?;
        Ok(GaussianVars { mu, sigma })
    }

    pub fn forward_face_encoder(&self, g: &mut Graph, p: &Bound, x_crop: Var) -> Result<GaussianVars> {
        self.forward_encoder(g, p, FACE_ENCODER, x_crop)
    }

    pub fn forward_landmark_encoder(&self, g: &mut Graph, p: &Bound, x_crop: Var) -> Result<GaussianVars> {
        self.forward_encoder(g, p, LANDMARK_ENCODER, x_crop)
    }

    fn forward_decoder(&self, g: &mut Graph, p: &Bound, prefix: &str, v: Var, expected_len: usize) -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s.len() != 2 || s[1] != expected_len {
            return Err(Error::Shape(format!(
                "{prefix} expects latent (N, {expected_len}), got {s:?}"
            )));
        }
        let side = self.cfg.grid();
        let h = g.reshape(v, &[s[0], side, side, expected_len / (side * side)])?;
        let mut h = g.tag(h, format!("{prefix}.2-a"));
        for (row, _) in DECODER_WIDTHS {
            h = nn::deconv_block(g, p, &format!("{prefix}.{row}"), h, 2, Activation::Relu)?;
        }
        nn::conv_block(g, p, &format!("{prefix}.2-f"), h, 1, Activation::Sigmoid)
    }

    /// Mask and face-part decoders read `V_latent`; the landmark decoder
    /// reads `V_l` alone.
    pub fn forward_decoders(&self, g: &mut Graph, p: &Bound, v_latent: Var, v_l: Var) -> Result<DecodedVars> {
        let d = self.cfg.latent_dim;
        Ok(DecodedVars {
            mask: self.forward_decoder(g, p, MASK_DECODER, v_latent, 2 * d)?,
            part: self.forward_decoder(g, p, PART_DECODER, v_latent, 2 * d)?,
            landmark: self.forward_decoder(g, p, LANDMARK_DECODER, v_l, d)?,
        })
    }

    pub fn encode_face_region(&self, params: &ParamSet, x_crop: &Tensor) -> Result<GaussianParams> {
        self.encode_with(params, x_crop, FACE_ENCODER)
    }

    pub fn encode_landmark(&self, params: &ParamSet, x_crop: &Tensor) -> Result<GaussianParams> {
        self.encode_with(params, x_crop, LANDMARK_ENCODER)
    }

    fn encode_with(&self, params: &ParamSet, x_crop: &Tensor, prefix: &str) -> Result<GaussianParams> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.leaf(x_crop.clone());
        let out = self.forward_encoder(&mut g, &p, prefix, x)?;
        GaussianParams::new(g.value(out.mu).clone(), g.value(out.sigma).clone())
    }

    /// Returns `(x_m', x_f', x_l')`.
    pub fn decode_domains(&self, params: &ParamSet, v_latent: &Tensor, v_l: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let vl = g.leaf(v_latent.clone());
        let vlm = g.leaf(v_l.clone());
        let out = self.forward_decoders(&mut g, &p, vl, vlm)?;
        Ok((
            g.value(out.mask).clone(),
            g.value(out.part).clone(),
            g.value(out.landmark).clone(),
        ))
    }
}

/// Draws a tensor of i.i.d. standard normal values.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `z = μ + σ ⊙ ε` with `ε` supplied by the caller, differentiable in μ and σ.
pub fn reparameterize_in(g: &mut Graph, params: GaussianVars, eps: Tensor) -> Result<Var> {
    let noise = g.mul_const(params.sigma, eps)?;
    g.add(params.mu, noise)
}

/// Samples `z = μ + σ ⊙ ε`, `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(params: &GaussianParams, rng: &mut R) -> Tensor {
    let eps = standard_normal(rng, params.mu.shape());
    let mut z = params.mu.clone();
    for ((z, s), e) in z.data_mut().iter_mut().zip(params.sigma.data()).zip(eps.data()) {
        *z += s * e;
    }
    z
}

/// Repeats a single-channel image across three channels.
pub fn replicate_channels(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::Shape(format!("expected single-channel NHWC, got {s:?}")));
    }
    let data = x.data().iter().flat_map(|&v| [v, v, v]).collect();
    Tensor::new(vec![s[0], s[1], s[2], 3], data)
}

/// Mask and landmark losses are mean binary cross-entropy; the face-part
/// loss is mean L1.
pub fn domain_reconstruction_losses_in(g: &mut Graph, decoded: DecodedVars, targets: &DomainTargets) -> Result<DomainLosses> {
    for (name, t) in [("x_m", &targets.mask), ("x_f", &targets.part), ("x_l", &targets.landmark)] {
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN in target {name}")));
        }
    }
    for (name, v) in [("x_m'", decoded.mask), ("x_f'", decoded.part), ("x_l'", decoded.landmark)] {
        if g.value(v).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN in prediction {name}")));
        }
    }
    let mask_t = if targets.mask.shape().last() == Some(&1) {
        replicate_channels(&targets.mask)?
    } else {
        targets.mask.clone()
    };
    let lmk_t = if targets.landmark.shape().last() == Some(&1) {
        replicate_channels(&targets.landmark)?
    } else {
        targets.landmark.clone()
    };
    let ones = Tensor::full(targets.part.shape(), 1.0);
    Ok(DomainLosses {
        mask: g.bce_mean(decoded.mask, &mask_t)?,
        part: g.weighted_l1_mean(decoded.part, &targets.part, &ones)?,
        landmark: g.bce_mean(decoded.landmark, &lmk_t)?,
    })
}

/// Returns `(L_m_rec, L_f_rec, L_l_rec)`.
pub fn domain_reconstruction_losses(
    x_m_pred: &Tensor,
    x_f_pred: &Tensor,
    x_l_pred: &Tensor,
    targets: &DomainTargets,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let decoded = DecodedVars {
        mask: g.leaf(x_m_pred.clone()),
        part: g.leaf(x_f_pred.clone()),
        landmark: g.leaf(x_l_pred.clone()),
    };
    let l = domain_reconstruction_losses_in(&mut g, decoded, targets)?;
    Ok((g.value(l.mask).item(), g.value(l.part).item(), g.value(l.landmark).item()))
}

/// Fully connected prior-vs-encoded classifier for latents of one length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentClassifier {
    input_len: usize,
}

const CLASSIFIER_HIDDEN: [usize; 2] = [256, 128];

impl LatentClassifier {
    pub fn new(input_len: usize) -> Self {
        Self { input_len }
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn prefix(&self) -> String {
        format!("cls.v{}", self.input_len)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let prefix = self.prefix();
        let mut specs = Vec::new();
        let mut d = self.input_len;
        for (i, &w) in CLASSIFIER_HIDDEN.iter().enumerate() {
            specs.extend(ParamSpec::dense(&format!("{prefix}.fc{}", i + 1), d, w));
            d = w;
        }
        specs.extend(ParamSpec::dense(&format!("{prefix}.fc3"), d, 1));
        specs
    }

    /// `(N, d)` latents → `(N, 1)` probabilities of being a prior sample.
    pub fn forward(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s.len() != 2 || s[1] != self.input_len {
            return Err(Error::Shape(format!(
                "latent classifier expects (N, {}), got {s:?}",
                self.input_len
            )));
        }
        let prefix = self.prefix();
        let h = nn::dense_block(g, p, &format!("{prefix}.fc1"), v, Activation::LeakyRelu)?;
        let h = nn::dense_block(g, p, &format!("{prefix}.fc2"), h, Activation::LeakyRelu)?;
        nn::dense_block(g, p, &format!("{prefix}.fc3"), h, Activation::Sigmoid)
    }

    pub fn classify(&self, params: &ParamSet, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.leaf(v.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }
}

/// Classifier-side latent loss: `−E[log C(V_prior)] − E[log(1 − C(V_enc))]`.
pub fn latent_classification_loss_in(g: &mut Graph, prior_score: Var, encoded_score: Var) -> Result<Var> {
    let a = g.neg_log_mean(prior_score);
    let b = g.neg_log_one_minus_mean(encoded_score);
    g.weighted_sum(&[(a, 1.0), (b, 1.0)])
}

/// Encoder-side (non-saturating) latent loss: `−E[log C(V_enc)]`.
pub fn latent_encoder_loss_in(g: &mut Graph, encoded_score: Var) -> Var {
    g.neg_log_mean(encoded_score)
}

/// The two latent classifiers: one for 256-long latents, one for `V_latent`.
pub struct LatentClassifiers<'a> {
    pub short: &'a LatentClassifier,
    pub short_params: &'a ParamSet,
    pub long: &'a LatentClassifier,
    pub long_params: &'a ParamSet,
}

/// Classifier-side losses `(L_f_lat, L_l_lat, L_m_lat)` for encoded latents,
/// drawing prior samples of matching shape from `rng`.
pub fn latent_losses(
    v_f: &Tensor,
    v_l: &Tensor,
    v_latent: &Tensor,
    rng: &mut dyn rand::RngCore,
    cls: &LatentClassifiers<'_>,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let ps = cls.short_params.bind(&mut g);
    let pl = cls.long_params.bind(&mut g);
    let one = |g: &mut Graph, c: &LatentClassifier, p: &Bound, v: &Tensor, rng: &mut dyn rand::RngCore| -> Result<f64> {
        let prior = g.leaf(standard_normal(rng, v.shape()));
        let enc = g.leaf(v.clone());
        let sp = c.forward(g, p, prior)?;
        let se = c.forward(g, p, enc)?;
        let l = latent_classification_loss_in(g, sp, se)?;
        Ok(g.value(l).item())
    };
    let lf = one(&mut g, cls.short, &ps, v_f, rng)?;
    let ll = one(&mut g, cls.short, &ps, v_l, rng)?;
    let lm = one(&mut g, cls.long, &pl, v_latent, rng)?;
    Ok((lf, ll, lm))
}
