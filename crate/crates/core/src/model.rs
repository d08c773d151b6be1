//! The complete network bundle and the single forward pass that produces
//! every loss term of one training step.

use rand::Rng;

use crate::discriminators::{self, Discriminator};
use crate::domain_embedding::{self, DomainEmbedding, DomainTargets, LatentClassifier};
use crate::error::{Error, Result};
use crate::generator::{self, Generator};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ModelConfig, ParamSet, ParamSpec};
use crate::preprocessing::{foreground_weight_map, Batch};
use crate::tensor::Tensor;

/// Independently optimised parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Embedding,
    Generator,
    Global,
    Patch,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Embedding,
        Group::Generator,
        Group::Global,
        Group::Patch,
        Group::Classifier,
    ];

    /// Key prefix shared by every parameter in the group.
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Embedding => "embed",
            Group::Generator => generator::PREFIX,
            Group::Global => discriminators::GLOBAL_PREFIX,
            Group::Patch => discriminators::PATCH_PREFIX,
            Group::Classifier => "cls",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Networks {
    cfg: ModelConfig,
    pub embedding: DomainEmbedding,
    pub generator: Generator,
    pub global: Discriminator,
    pub patch: Discriminator,
    /// Classifier for `V_f` and `V_l`.
    pub short_classifier: LatentClassifier,
    /// Classifier for `V_latent`.
    pub long_classifier: LatentClassifier,
}

impl Networks {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            embedding: DomainEmbedding::new(cfg)?,
            generator: Generator::new(cfg)?,
            global: Discriminator::global(cfg)?,
            patch: Discriminator::patch(cfg)?,
            short_classifier: LatentClassifier::new(cfg.latent_dim),
            long_classifier: LatentClassifier::new(2 * cfg.latent_dim),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self, group: Group) -> Vec<ParamSpec> {
        match group {
            Group::Embedding => self.embedding.param_specs(),
            Group::Generator => self.generator.param_specs(),
            Group::Global => self.global.param_specs(),
            Group::Patch => self.patch.param_specs(),
            Group::Classifier => {
                let mut s = self.short_classifier.param_specs();
                s.extend(self.long_classifier.param_specs());
                s
            }
        }
    }
}

/// One [`ParamSet`] per [`Group`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    sets: [ParamSet; 5],
}

impl Parameters {
    /// Initialises groups in [`Group::ALL`] order from one stream.
    pub fn init<R: Rng>(nets: &Networks, rng: &mut R) -> Self {
        Self {
            sets: Group::ALL.map(|g| ParamSet::init(&nets.specs(g), rng)),
        }
    }

    pub fn from_sets(sets: [ParamSet; 5]) -> Self {
        Self { sets }
    }

    pub fn get(&self, group: Group) -> &ParamSet {
        &self.sets[group.index()]
    }

    pub fn get_mut(&mut self, group: Group) -> &mut ParamSet {
        &mut self.sets[group.index()]
    }

    pub fn conforms_to(&self, nets: &Networks) -> Result<()> {
        for g in Group::ALL {
            self.get(g).conforms_to(&nets.specs(g))?;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.sets.iter().map(ParamSet::num_scalars).sum()
    }
}

/// Per-step random draws: reparameterisation noise and prior samples for
/// the latent classifiers, each `(N, latent_dim)` or `(N, 2·latent_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub eps_f: Tensor,
    pub eps_l: Tensor,
    pub prior_f: Tensor,
    pub prior_l: Tensor,
    pub prior_latent: Tensor,
}

impl StepNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, latent_dim: usize) -> Self {
        let short = [batch, latent_dim];
        Self {
            eps_f: domain_embedding::standard_normal(rng, &short),
            eps_l: domain_embedding::standard_normal(rng, &short),
            prior_f: domain_embedding::standard_normal(rng, &short),
            prior_l: domain_embedding::standard_normal(rng, &short),
            prior_latent: domain_embedding::standard_normal(rng, &[batch, 2 * latent_dim]),
        }
    }

    /// Zero reparameterisation noise, so `V = μ`.
    pub fn deterministic(batch: usize, latent_dim: usize) -> Self {
        let short = [batch, latent_dim];
        Self {
            eps_f: Tensor::zeros(&short),
            eps_l: Tensor::zeros(&short),
            prior_f: Tensor::zeros(&short),
            prior_l: Tensor::zeros(&short),
            prior_latent: Tensor::zeros(&[batch, 2 * latent_dim]),
        }
    }
}

/// Scalar loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub m_rec: Var,
    pub f_rec: Var,
    pub l_rec: Var,
    pub f_lat: Var,
    pub l_lat: Var,
    pub m_lat: Var,
    /// Encoder-side latent terms `−E[log C(V)]`, summed over the three latents.
    pub encoder_lat: Var,
    pub x_rec: Var,
    pub adv_g: Var,
    pub adv_p: Var,
    pub gen_adv_g: Var,
    pub gen_adv_p: Var,
}

/// Loss values of one forward pass, in loss-history column order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub m_rec: f64,
    pub f_rec: f64,
    pub l_rec: f64,
    pub f_lat: f64,
    pub l_lat: f64,
    pub m_lat: f64,
    pub x_rec: f64,
    pub adv_g: f64,
    pub adv_p: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("L_m_rec", self.m_rec),
            ("L_f_rec", self.f_rec),
            ("L_l_rec", self.l_rec),
            ("L_f_lat", self.f_lat),
            ("L_l_lat", self.l_lat),
            ("L_m_lat", self.m_lat),
            ("L_x_rec", self.x_rec),
            ("L_adv_g", self.adv_g),
            ("L_adv_p", self.adv_p),
        ]
    }
}

/// Every graph handle of one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub bound: [Bound; 5],
    pub losses: LossVars,
    pub x_rec: Var,
    pub v_latent: Var,
}

impl ForwardPass {
    pub fn bound(&self, group: Group) -> &Bound {
        &self.bound[group.index()]
    }

    pub fn value(&self, v: Var) -> f64 {
        self.graph.value(v).item()
    }

    pub fn components(&self) -> LossComponents {
        let l = &self.losses;
        LossComponents {
            m_rec: self.value(l.m_rec),
            f_rec: self.value(l.f_rec),
            l_rec: self.value(l.l_rec),
            f_lat: self.value(l.f_lat),
            l_lat: self.value(l.l_lat),
            m_lat: self.value(l.m_lat),
            x_rec: self.value(l.x_rec),
            adv_g: self.value(l.adv_g),
            adv_p: self.value(l.adv_p),
        }
    }
}

/// Builds the full step graph without any detaches. Gradients of one group's
/// objective are always taken with respect to that group's parameters only,
/// so a shared graph yields exactly the per-network updates.
pub fn forward(nets: &Networks, params: &Parameters, batch: &Batch, noise: &StepNoise, gamma: f64) -> Result<ForwardPass> {
    let n = batch.len();
    let d = nets.config().latent_dim;
    for (name, t, len) in [
        ("eps_f", &noise.eps_f, d),
        ("eps_l", &noise.eps_l, d),
        ("prior_f", &noise.prior_f, d),
        ("prior_l", &noise.prior_l, d),
        ("prior_latent", &noise.prior_latent, 2 * d),
    ] {
        if t.shape() != [n, len] {
            return Err(Error::Shape(format!("{name} must be ({n}, {len}), got {:?}", t.shape())));
        }
    }

    let mut g = Graph::new();
    let bound = Group::ALL.map(|grp| params.get(grp).bind(&mut g));
    let [pe, pgen, pdg, pdp, pcls] = &bound;

    let x_crop = g.leaf(batch.x_crop.clone());
    let x_real = g.leaf(batch.x_real.clone());

    // embedding and sampling
    let face = nets.embedding.forward_face_encoder(&mut g, pe, x_crop)?;
    let lmk = nets.embedding.forward_landmark_encoder(&mut g, pe, x_crop)?;
    let v_f = domain_embedding::reparameterize_in(&mut g, face, noise.eps_f.clone())?;
    let v_l = domain_embedding::reparameterize_in(&mut g, lmk, noise.eps_l.clone())?;
    let v_latent = g.concat_last(v_f, v_l)?;

    // domain decoding
    let decoded = nets.embedding.forward_decoders(&mut g, pe, v_latent, v_l)?;
    let targets = DomainTargets {
        mask: batch.x_m.clone(),
        part: batch.x_f.clone(),
        landmark: batch.x_l.clone(),
    };
    let rec = domain_embedding::domain_reconstruction_losses_in(&mut g, decoded, &targets)?;

    // latent classification
    let mut lat = Vec::with_capacity(3);
    let mut enc = Vec::with_capacity(3);
    for (cls, v, prior) in [
        (&nets.short_classifier, v_f, &noise.prior_f),
        (&nets.short_classifier, v_l, &noise.prior_l),
        (&nets.long_classifier, v_latent, &noise.prior_latent),
    ] {
        let prior = g.leaf(prior.clone());
        let sp = cls.forward(&mut g, pcls, prior)?;
        let se = cls.forward(&mut g, pcls, v)?;
        lat.push(domain_embedding::latent_classification_loss_in(&mut g, sp, se)?);
        enc.push((domain_embedding::latent_encoder_loss_in(&mut g, se), 1.0));
    }
    let encoder_lat = g.weighted_sum(&enc)?;

    // generation
    let x_rec = nets.generator.forward(&mut g, pgen, x_crop, v_latent)?;
    let w_fb = foreground_weight_map(&batch.x_fg, gamma)?;
    let x_rec_loss = generator::weighted_reconstruction_loss_in(&mut g, x_rec, &batch.x_real, &w_fb)?;

    // discrimination
    let mut adv = [x_rec; 2];
    let mut gen_adv = [x_rec; 2];
    for (i, (d, p)) in [(&nets.global, pdg), (&nets.patch, pdp)].into_iter().enumerate() {
        let fake = d.forward(&mut g, p, x_rec)?;
        let real = d.forward(&mut g, p, x_real)?;
        adv[i] = discriminators::adversarial_loss_in(&mut g, fake, real)?;
        gen_adv[i] = discriminators::generator_adversarial_in(&mut g, fake);
    }

    let losses = LossVars {
        m_rec: rec.mask,
        f_rec: rec.part,
        l_rec: rec.landmark,
        f_lat: lat[0],
        l_lat: lat[1],
        m_lat: lat[2],
        encoder_lat,
        x_rec: x_rec_loss,
        adv_g: adv[0],
        adv_p: adv[1],
        gen_adv_g: gen_adv[0],
        gen_adv_p: gen_adv[1],
    };
    Ok(ForwardPass {
        graph: g,
        bound,
        losses,
        x_rec,
        v_latent,
    })
}

/// Inference: encodes `x_crop`, uses the posterior means as the latent and
/// returns `x_rec`.
pub fn inpaint(nets: &Networks, params: &Parameters, x_crop: &Tensor) -> Result<Tensor> {
    let emb = &nets.embedding;
    let pe = params.get(Group::Embedding);
    let mu_f = emb.encode_face_region(pe, x_crop)?.mu;
    let mu_l = emb.encode_landmark(pe, x_crop)?.mu;
    let mut g = Graph::new();
    let a = g.leaf(mu_f);
    let b = g.leaf(mu_l);
    let v = g.concat_last(a, b)?;
    let v = g.value(v).clone();
    nets.generator.generate(params.get(Group::Generator), x_crop, &v)
}
