//! Alternating optimisation of the embedding network, generator, both
//! discriminators and the latent classifiers.
//!
//! Every step runs one forward pass and differentiates four objectives, each
//! only with respect to its own parameter group:
//!
//! | group        | objective                                                        |
//! |--------------|------------------------------------------------------------------|
//! | embedding    | `λm·L_m_rec + λf·L_f_rec + λl·L_l_rec + λlat·Σ −log C(V)`         |
//! | generator    | `λx·L_x_rec + λadv_g·(−log D_g(x_rec)) + λadv_p·(−log D_p(x_rec))` |
//! | D_g, D_p     | `L_adv_g`, `L_adv_p`                                             |
//! | classifiers  | `L_f_lat + L_l_lat + L_m_lat`                                    |
//!
//! All four updates use gradients from the same pre-update forward pass.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{self, Group, LossComponents, LossVars, Networks, Parameters, StepNoise};
use crate::nn::{ModelConfig, ParamSet};
use crate::preprocessing::{Batch, BundleOptions, HoleSpec, RegionBundle};
use crate::tensor::Tensor;

/// Every training hyperparameter. Unknown keys are rejected when loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many steps in total, overriding `epochs`.
    pub max_steps: Option<u64>,
    pub lambda_m_rec: f64,
    pub lambda_f_rec: f64,
    pub lambda_l_rec: f64,
    pub lambda_lat: f64,
    pub lambda_adv_g: f64,
    pub lambda_adv_p: f64,
    /// Weight of the generator's foreground-weighted L1 loss.
    pub lambda_x_rec: f64,
    pub gamma: f64,
    pub resolution: usize,
    pub width_divisor: usize,
    pub latent_dim: usize,
    /// Hole specs applied to every training sample (`O1`..`O6`, `rect:…`, `mask:…`, `none`).
    pub holes: Vec<String>,
    pub fill_value: f64,
    /// Landmark disc radius in pixels at 256², scaled with resolution.
    pub landmark_radius: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            batch_size: 60,
            epochs: 80,
            max_steps: None,
            lambda_m_rec: 4000.0,
            lambda_f_rec: 4000.0,
            lambda_l_rec: 2000.0,
            lambda_lat: 30.0,
            lambda_adv_g: 1.0,
            lambda_adv_p: 30.0,
            lambda_x_rec: 4000.0,
            gamma: 0.5,
            resolution: 256,
            width_divisor: 1,
            latent_dim: 256,
            holes: ["O1", "O2", "O3", "O4", "O5", "O6"].map(String::from).to_vec(),
            fill_value: crate::preprocessing::DEFAULT_FILL,
            landmark_radius: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Reduced profile for CPU runs: 64², widths ÷4, batch 8.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            width_divisor: 4,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays the keys present in `s` onto `base`, then validates.
    pub fn layered(base: &Self, s: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut table = toml::Table::try_from(base).map_err(|e| err(&e))?;
        let overlay: toml::Table = toml::from_str(s).map_err(|e| err(&e))?;
        table.extend(overlay);
        let cfg: Self = table.try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            width_divisor: self.width_divisor,
            latent_dim: self.latent_dim,
        }
    }

    pub fn bundle_options(&self) -> BundleOptions {
        BundleOptions {
            landmark_radius: self.landmark_radius,
            ..BundleOptions::new(self.resolution)
        }
    }

    pub fn hole_specs(&self) -> Result<Vec<HoleSpec>> {
        self.holes
            .iter()
            .map(|s| Ok(s.parse::<HoleSpec>()?.with_fill(self.fill_value)))
            .collect()
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in self.lambdas() {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return bad(format!("fill_value must lie in [0, 1], got {}", self.fill_value));
        }
        if !(self.landmark_radius >= 0.0) {
            return bad(format!("landmark_radius must be non-negative, got {}", self.landmark_radius));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.model_config().validate()
    }

    fn lambdas(&self) -> [(&'static str, f64); 7] {
        [
            ("lambda_m_rec", self.lambda_m_rec),
            ("lambda_f_rec", self.lambda_f_rec),
            ("lambda_l_rec", self.lambda_l_rec),
            ("lambda_lat", self.lambda_lat),
            ("lambda_adv_g", self.lambda_adv_g),
            ("lambda_adv_p", self.lambda_adv_p),
            ("lambda_x_rec", self.lambda_x_rec),
        ]
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    /// Steps a fresh run over `n` samples performs.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.max_steps
            .unwrap_or((self.epochs * n.div_ceil(self.batch_size)) as u64)
    }
}

/// `λf·L_f_rec + λm·L_m_rec + λl·L_l_rec + λlat·(L_f_lat + L_m_lat + L_l_lat)
/// + λadv_g·L_adv_g + λadv_p·L_adv_p`. `L_x_rec` is reported separately.
pub fn total_loss(c: &LossComponents, cfg: &TrainConfig) -> Result<f64> {
    if let Some((name, v)) = cfg.lambdas().into_iter().find(|(_, v)| !(*v >= 0.0)) {
        return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
    }
    Ok(cfg.lambda_f_rec * c.f_rec
        + cfg.lambda_m_rec * c.m_rec
        + cfg.lambda_l_rec * c.l_rec
        + cfg.lambda_lat * (c.f_lat + c.m_lat + c.l_lat)
        + cfg.lambda_adv_g * c.adv_g
        + cfg.lambda_adv_p * c.adv_p)
}

/// [`total_loss`] plus `λx·L_x_rec`, as one differentiable graph node.
pub fn full_objective(g: &mut Graph, l: &LossVars, cfg: &TrainConfig) -> Result<Var> {
    g.weighted_sum(&[
        (l.f_rec, cfg.lambda_f_rec),
        (l.m_rec, cfg.lambda_m_rec),
        (l.l_rec, cfg.lambda_l_rec),
        (l.f_lat, cfg.lambda_lat),
        (l.m_lat, cfg.lambda_lat),
        (l.l_lat, cfg.lambda_lat),
        (l.adv_g, cfg.lambda_adv_g),
        (l.adv_p, cfg.lambda_adv_p),
        (l.x_rec, cfg.lambda_x_rec),
    ])
}

/// Adam in the form that folds bias correction into the step size:
/// `α_t = α·√(1−β2ᵗ)/(1−β1ᵗ)`, `θ ← θ − α_t·m/(√v + ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let zero = ParamSet::from_map(
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        );
        Self {
            t: 0,
            m: zero.clone(),
            v: zero,
        }
    }
}

impl Adam {
    /// One step over every parameter named in `grads`.
    pub fn update(&self, params: &mut ParamSet, state: &mut AdamState, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        state.t += 1;
        let t = state.t as i32;
        let lr_t = self.learning_rate * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for (name, grad) in grads {
            let missing = || Error::InvalidArgument(format!("no parameter `{name}` to update"));
            let p = params.get_mut(name).ok_or_else(missing)?;
            let m = state.m.get_mut(name).ok_or_else(missing)?;
            let v = state.v.get_mut(name).ok_or_else(missing)?;
            grad.expect_shape(p.shape())?;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data());
            for (((p, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub optim: [AdamState; 5],
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: parameters drawn from a stream seeded by `seed`, which
    /// then continues as the per-step noise source.
    pub fn new(nets: &Networks, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(nets, &mut rng);
        let optim = Group::ALL.map(|g| AdamState::zeros_like(params.get(g)));
        Self {
            params,
            optim,
            step: 0,
            rng,
        }
    }

    pub fn optim(&self, group: Group) -> &AdamState {
        &self.optim[group as usize]
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(rename = "L_m_rec")]
    pub m_rec: f64,
    #[serde(rename = "L_f_rec")]
    pub f_rec: f64,
    #[serde(rename = "L_l_rec")]
    pub l_rec: f64,
    #[serde(rename = "L_f_lat")]
    pub f_lat: f64,
    #[serde(rename = "L_l_lat")]
    pub l_lat: f64,
    #[serde(rename = "L_m_lat")]
    pub m_lat: f64,
    #[serde(rename = "L_x_rec")]
    pub x_rec: f64,
    #[serde(rename = "L_adv_g")]
    pub adv_g: f64,
    #[serde(rename = "L_adv_p")]
    pub adv_p: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: u64, c: &LossComponents, total: f64) -> Self {
        Self {
            step,
            m_rec: c.m_rec,
            f_rec: c.f_rec,
            l_rec: c.l_rec,
            f_lat: c.f_lat,
            l_lat: c.l_lat,
            m_lat: c.m_lat,
            x_rec: c.x_rec,
            adv_g: c.adv_g,
            adv_p: c.adv_p,
            total,
        }
    }
}

pub fn write_loss_history(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_loss_history(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn grads_by_name(fp: &model::ForwardPass, root: Var, group: Group) -> Result<BTreeMap<String, Tensor>> {
    let bound = fp.bound(group);
    let grads = fp.graph.gradients(root, &bound.vars())?;
    Ok(bound.names().into_iter().zip(grads).collect())
}

/// Gradients of each group's objective, all from one forward pass.
pub struct StepGradients {
    pub components: LossComponents,
    pub grads: [BTreeMap<String, Tensor>; 5],
}

/// Runs the forward pass on `batch` and differentiates every objective.
/// Fails with a numeric error naming the first non-finite term.
pub fn step_gradients(nets: &Networks, params: &Parameters, batch: &Batch, noise: &StepNoise, cfg: &TrainConfig) -> Result<StepGradients> {
    let mut fp = model::forward(nets, params, batch, noise, cfg.gamma)?;
    let components = fp.components();
    let l = fp.losses;
    let extra = [
        ("encoder latent term", fp.value(l.encoder_lat)),
        ("G_adv_g", fp.value(l.gen_adv_g)),
        ("G_adv_p", fp.value(l.gen_adv_p)),
    ];
    if let Some((name, v)) = components.named().into_iter().chain(extra).find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("loss term {name} is not finite ({v})")));
    }

    let g = &mut fp.graph;
    let vae = g.weighted_sum(&[
        (l.m_rec, cfg.lambda_m_rec),
        (l.f_rec, cfg.lambda_f_rec),
        (l.l_rec, cfg.lambda_l_rec),
        (l.encoder_lat, cfg.lambda_lat),
    ])?;
    let gen = g.weighted_sum(&[
        (l.x_rec, cfg.lambda_x_rec),
        (l.gen_adv_g, cfg.lambda_adv_g),
        (l.gen_adv_p, cfg.lambda_adv_p),
    ])?;
    let cls = g.weighted_sum(&[(l.f_lat, 1.0), (l.l_lat, 1.0), (l.m_lat, 1.0)])?;
    let roots = [vae, gen, l.adv_g, l.adv_p, cls];

    let mut grads: [BTreeMap<_, _>; 5] = Default::default();
    for (group, root) in Group::ALL.into_iter().zip(roots) {
        let gr = grads_by_name(&fp, root, group)?;
        if let Some((name, _)) = gr.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numeric(format!("gradient of `{name}` is not finite")));
        }
        grads[group as usize] = gr;
    }
    Ok(StepGradients { components, grads })
}

/// Applies the update for one group. Other groups are untouched.
pub fn apply_update(state: &mut TrainState, group: Group, grads: &BTreeMap<String, Tensor>, adam: &Adam) -> Result<()> {
    let i = group as usize;
    adam.update(state.params.get_mut(group), &mut state.optim[i], grads)
}

/// One training step: forward, then embedding, generator, D_g, D_p and
/// classifier updates in that order. Returns the pre-update losses.
pub fn train_step(nets: &Networks, state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossRecord> {
    let noise = StepNoise::draw(&mut state.rng, batch.len(), nets.config().latent_dim);
    let sg = step_gradients(nets, &state.params, batch, &noise, cfg)?;
    let adam = cfg.adam();
    for group in Group::ALL {
        apply_update(state, group, &sg.grads[group as usize], &adam)?;
    }
    state.step += 1;
    let total = total_loss(&sg.components, cfg)?;
    Ok(LossRecord::new(state.step, &sg.components, total))
}

/// Sample order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Bundle indices used by `step` (0-based).
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
    let order = epoch_order(seed, epoch, n);
    order[pos * batch_size..((pos + 1) * batch_size).min(n)].to_vec()
}

/// Where [`fit`] writes cadence checkpoints.
#[derive(Debug, Clone, Default)]
pub struct FitOutput {
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt-{step:08}.degn")
}

/// Trains from `state` until `cfg.total_steps` steps have been taken in
/// total. A resumed state continues its step count, data order and noise.
pub fn fit(
    nets: &Networks,
    data: &[RegionBundle],
    cfg: &TrainConfig,
    mut state: TrainState,
    out: &FitOutput,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(TrainState, Vec<LossRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if *nets.config() != cfg.model_config() {
        return Err(Error::Config("network and training configurations disagree".into()));
    }
    let total = cfg.total_steps(data.len());
    let mut history = Vec::new();
    while state.step < total {
        let idx = batch_indices(cfg.seed, state.step, data.len(), cfg.batch_size);
        let bundles: Vec<&RegionBundle> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_bundles(&bundles)?;
        let rec = train_step(nets, &mut state, &batch, cfg)?;
        on_step(&rec);
        history.push(rec);
        if let Some(dir) = &out.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let path = dir.join(checkpoint_file_name(state.step));
                crate::checkpoint::save_checkpoint(&state, cfg, &path)?;
                log::info!("step {}: wrote {}", state.step, path.display());
            }
        }
    }
    Ok((state, history))
}
