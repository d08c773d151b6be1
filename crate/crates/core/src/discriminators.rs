//! Global discriminator (one score per image) and patch discriminator (one
//! score per receptive-field patch), with their adversarial losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation, Bound, ModelConfig, ParamSet, ParamSpec};
use crate::tensor::Tensor;

pub const PATCH_PREFIX: &str = "dp";
pub const GLOBAL_PREFIX: &str = "dg";
const KERNEL: usize = 4;
const WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];
const PATCH_ROWS: [&str; 6] = ["4-a", "4-b", "4-c", "4-d", "4-e", "4-f"];
const GLOBAL_ROWS: [&str; 6] = ["5-a", "5-b", "5-c", "5-d", "5-e", "5-f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Patch,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discriminator {
    cfg: ModelConfig,
    kind: Kind,
}

impl Discriminator {
    pub fn patch(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, kind: Kind::Patch })
    }

    pub fn global(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, kind: Kind::Global })
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    fn rows(&self) -> (&'static str, [&'static str; 6]) {
        match self.kind {
            Kind::Patch => (PATCH_PREFIX, PATCH_ROWS),
            Kind::Global => (GLOBAL_PREFIX, GLOBAL_ROWS),
        }
    }

    /// Side of the final feature map (and of the patch score map).
    pub fn map_side(&self) -> usize {
        WIDTHS.iter().fold(self.cfg.resolution, |s, _| s.div_ceil(2))
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (prefix, rows) = self.rows();
        let mut specs = Vec::new();
        let mut c_in = 3;
        for (row, w) in rows.iter().zip(WIDTHS) {
            let c_out = self.cfg.width(w);
            specs.extend(ParamSpec::conv(&format!("{prefix}.{row}"), KERNEL, c_in, c_out));
            c_in = c_out;
        }
        let head = format!("{prefix}.{}", rows[5]);
        match self.kind {
            Kind::Patch => specs.extend(ParamSpec::conv(&head, 1, c_in, 1)),
            Kind::Global => specs.extend(ParamSpec::dense(&head, self.map_side().pow(2) * c_in, 1)),
        }
        specs
    }

    /// Patch: `(N, H/32, W/32, 1)` map. Global: `(N, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let r = self.cfg.resolution;
        let s = g.shape(x);
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::Shape(format!("discriminator expects (N, {r}, {r}, 3), got {s:?}")));
        }
        let (prefix, rows) = self.rows();
        let mut h = x;
        for row in &rows[..5] {
            h = nn::conv_block(g, p, &format!("{prefix}.{row}"), h, 2, Activation::LeakyRelu)?;
        }
        let head = format!("{prefix}.{}", rows[5]);
        match self.kind {
            Kind::Patch => nn::conv_block(g, p, &head, h, 1, Activation::Sigmoid),
            Kind::Global => {
                let flat = nn::flatten(g, h)?;
                nn::dense_block(g, p, &head, flat, Activation::Sigmoid)
            }
        }
    }

    pub fn discriminate(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }
}

/// `−E[log(1 − D(x_rec))] − E[log D(x_real)]`, averaged over batch and any
/// patch-map cells.
pub fn adversarial_loss_in(g: &mut Graph, fake_score: Var, real_score: Var) -> Result<Var> {
    let fake = g.neg_log_one_minus_mean(fake_score);
    let real = g.neg_log_mean(real_score);
    g.weighted_sum(&[(fake, 1.0), (real, 1.0)])
}

/// Non-saturating generator term `−E[log D(x_rec)]`.
pub fn generator_adversarial_in(g: &mut Graph, fake_score: Var) -> Var {
    g.neg_log_mean(fake_score)
}

/// Returns `(L_adv_g, L_adv_p)`.
pub fn adversarial_losses(
    x_rec: &Tensor,
    x_real: &Tensor,
    global: (&Discriminator, &ParamSet),
    patch: (&Discriminator, &ParamSet),
) -> Result<(f64, f64)> {
    let mut out = [0.0; 2];
    for (slot, (d, params)) in [global, patch].into_iter().enumerate() {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let fake = g.leaf(x_rec.clone());
        let real = g.leaf(x_real.clone());
        let sf = d.forward(&mut g, &p, fake)?;
        let sr = d.forward(&mut g, &p, real)?;
        let l = adversarial_loss_in(&mut g, sf, sr)?;
        out[slot] = g.value(l).item();
    }
    Ok((out[0], out[1]))
}

/// Returns `(G_adv_g, G_adv_p)`.
pub fn generator_adversarial_terms(
    x_rec: &Tensor,
    global: (&Discriminator, &ParamSet),
    patch: (&Discriminator, &ParamSet),
) -> Result<(f64, f64)> {
    let mut out = [0.0; 2];
    for (slot, (d, params)) in [global, patch].into_iter().enumerate() {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let fake = g.leaf(x_rec.clone());
        let sf = d.forward(&mut g, &p, fake)?;
        let l = generator_adversarial_in(&mut g, sf);
        out[slot] = g.value(l).item();
    }
    Ok((out[0], out[1]))
}
