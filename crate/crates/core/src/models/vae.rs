//! Variational autoencoder: shared encoder trunk with mean and log-variance
//! heads, a relu decoder with linear output, and the summed ELBO loss.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use super::{check_width, fit, stream, substream, Generative, LossTrace, TrainConfig, TrainData};
use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation};
use crate::tabular::TabularSchema;
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Squared error and KL summed over batch and dims.
    Sum,
    /// The summed loss divided by the batch size.
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::Config(format!("unknown reduction `{s}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    pub hidden: usize,
    pub latent: usize,
    pub reduction: Reduction,
    /// Multiplier on the KL term; 1 is the plain ELBO.
    pub kl_weight: f64,
    pub unit_scale: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden: 512,
            latent: 64,
            reduction: Reduction::Sum,
            kl_weight: 1.0,
            unit_scale: false,
        }
    }
}

/// Network shapes; parameters are passed in separately so the same
/// architecture can be evaluated on perturbed copies.
#[derive(Debug, Clone)]
pub struct VaeArch {
    pub data_dim: usize,
    pub latent: usize,
    pub reduction: Reduction,
    pub kl_weight: f64,
    trunk: Mlp,
    mu: Mlp,
    logvar: Mlp,
    decoder: Mlp,
}

impl VaeArch {
    pub fn new(data_dim: usize, hidden: usize, latent: usize, reduction: Reduction) -> Self {
        VaeArch {
            data_dim,
            latent,
            reduction,
            kl_weight: 1.0,
            trunk: Mlp::new("vae.enc", &[data_dim, hidden, hidden], OutputActivation::Linear),
            mu: Mlp::new("vae.mu", &[hidden, latent], OutputActivation::Linear),
            logvar: Mlp::new("vae.logvar", &[hidden, latent], OutputActivation::Linear),
            decoder: Mlp::new("vae.dec", &[latent, hidden, hidden, data_dim], OutputActivation::Linear),
        }
    }

    fn nets(&self) -> [&Mlp; 4] {
        [&self.trunk, &self.mu, &self.logvar, &self.decoder]
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for net in self.nets() {
            net.init(&mut store, rng)?;
        }
        Ok(store)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        shapes_of(&self.nets())
    }

    /// Zeroes both encoder heads so `mu = 0`, `logvar = 0`.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        self.mu.zero_last_layer(store);
        self.logvar.zero_last_layer(store);
    }

    pub fn encode_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, store, x, true)?;
        let h = tape.relu(h)?;
        let mu = self.mu.forward(tape, store, h, true)?;
        let logvar = self.logvar.forward(tape, store, h, true)?;
        Ok((mu, logvar))
    }

    pub fn decode_tape(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        self.decoder.forward(tape, store, z, true)
    }

    /// Total loss for a batch and a fixed noise draw `eps` (`[B, latent]`).
    pub fn loss_tape(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, eps: &Tensor) -> Result<VaeLossVars> {
        check_width("vae_loss", x, self.data_dim)?;
        check_width("vae_loss", eps, self.latent)?;
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_tape(tape, store, xv)?;
        let e = tape.constant(eps.clone());
        let z = reparameterize_tape(tape, mu, logvar, e)?;
        let x_hat = self.decode_tape(tape, store, z)?;
        let (mut total, recon, kl) = elbo_tape(tape, xv, x_hat, mu, logvar)?;
        if self.kl_weight != 1.0 {
            let wkl = tape.scale(kl, self.kl_weight)?;
            total = tape.add(recon, wkl)?;
        }
        let total = match self.reduction {
            Reduction::Sum => total,
            Reduction::Mean => tape.scale(total, 1.0 / x.rows() as f64)?,
        };
        Ok(VaeLossVars { total, recon, kl })
    }
}

pub(crate) fn shapes_of(nets: &[&Mlp]) -> Vec<(String, Vec<usize>)> {
    nets.iter()
        .flat_map(|net| {
            (0..net.num_layers()).flat_map(move |i| {
                let p = net.layer_prefix(i);
                [
                    (format!("{p}.weight"), vec![net.dims[i], net.dims[i + 1]]),
                    (format!("{p}.bias"), vec![net.dims[i + 1]]),
                ]
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct VaeLossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// `z = mu + exp(logvar / 2) * eps` on the tape.
pub fn reparameterize_tape(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, l, e) = (
        tape.constant(mu.clone()),
        tape.constant(logvar.clone()),
        tape.constant(eps.clone()),
    );
    let z = reparameterize_tape(&mut tape, m, l, e)?;
    Ok(tape.value(z).clone())
}

/// Summed squared error plus the closed-form Gaussian KL against N(0, I).
fn elbo_tape(tape: &mut Tape, x: Var, x_hat: Var, mu: Var, logvar: Var) -> Result<(Var, Var, Var)> {
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff)?;
    let recon = tape.sum(sq)?;
    let var = tape.exp(logvar)?;
    let mu2 = tape.square(mu)?;
    let t = tape.add(var, mu2)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum(t)?;
    let kl = tape.scale(s, 0.5)?;
    let total = tape.add(recon, kl)?;
    Ok((total, recon, kl))
}

/// `(total, recon, kl)` for given reconstructions and posterior parameters.
pub fn vae_loss(x: &Tensor, x_hat: &Tensor, mu: &Tensor, logvar: &Tensor) -> Result<(f64, f64, f64)> {
    for (name, t) in [("x", x), ("x_hat", x_hat), ("mu", mu), ("logvar", logvar)] {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("vae_loss input `{name}`")));
        }
    }
    if x.shape() != x_hat.shape() || mu.shape() != logvar.shape() {
        return Err(Error::ShapeMismatch {
            op: "vae_loss",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let vars = [x, x_hat, mu, logvar].map(|t| tape.constant(t.clone()));
    let (total, recon, kl) = elbo_tape(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok((tape.value(total).item()?, tape.value(recon).item()?, tape.value(kl).item()?))
}

/// Closed-form `KL(N(mu, diag e^logvar) || N(0, I))`.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| l.exp() + m * m - 1.0 - l)
        .sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub arch: VaeArch,
    pub params: ParamStore,
    schema: TabularSchema,
    unit_scale: bool,
    hidden: usize,
}

impl Vae {
    pub fn new(schema: TabularSchema, cfg: &VaeConfig, seed: u64) -> Result<Self> {
        if !(cfg.kl_weight.is_finite() && cfg.kl_weight > 0.0) {
            return Err(Error::Config(format!("kl_weight must be finite and > 0, got {}", cfg.kl_weight)));
        }
        let mut arch = VaeArch::new(schema.len(), cfg.hidden, cfg.latent, cfg.reduction);
        arch.kl_weight = cfg.kl_weight;
        let params = arch.init(&mut substream(seed, stream::INIT))?;
        Ok(Vae {
            arch,
            params,
            schema,
            unit_scale: cfg.unit_scale,
            hidden: cfg.hidden,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width("encode", x, self.arch.data_dim)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (mu, lv) = self.arch.encode_tape(&mut tape, &self.params, xv)?;
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        check_width("decode", z, self.arch.latent)?;
        self.arch.decoder.eval(&self.params, z)
    }

    /// Adam on the ELBO; trace columns are `loss, recon, kl`, per row.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<LossTrace> {
        let mut adam = AdamState::new(cfg.adam, &self.params);
        let arch = &self.arch;
        let params = &mut self.params;
        let latent = arch.latent;
        fit(data, cfg, seed, &["loss", "recon", "kl"], |batch, rng, info| {
            adam.config.lr = info.lr;
            let b = batch.rows();
            let eps = Tensor::randn(&[b, latent], rng);
            let mut tape = Tape::new();
            let l = arch.loss_tape(&mut tape, params, batch, &eps)?;
            let grads = tape.backward(l.total, params)?;
            let per_row = |v: Var| tape.value(v).item().map(|x| x / b as f64);
            let out = vec![per_row(l.recon)? + per_row(l.kl)?, per_row(l.recon)?, per_row(l.kl)?];
            if out[0].is_finite() {
                adam_step(params, &grads, &mut adam)?;
            }
            Ok(out)
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Vae)?;
        let hidden = ckpt.get("hidden")?;
        let latent = ckpt.get("latent")?;
        let reduction = ckpt.get("reduction")?;
        let mut arch = VaeArch::new(ckpt.schema.len(), hidden, latent, reduction);
        arch.kl_weight = ckpt.get("kl_weight")?;
        ckpt.expect_params(&arch.param_shapes())?;
        Ok(Vae {
            arch,
            params: ckpt.params.clone(),
            schema: ckpt.schema.clone(),
            unit_scale: ckpt.get("unit_scale")?,
            hidden,
        })
    }
}

impl Generative for Vae {
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
    }

    fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    fn unit_scale(&self) -> bool {
        self.unit_scale
    }

    fn sample_raw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let z = Tensor::randn(&[n, self.arch.latent], rng);
        self.decode(&z)
    }

    fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(ModelKind::Vae, self.schema.clone(), self.params.clone())
            .with("hidden", self.hidden)
            .with("latent", self.arch.latent)
            .with("reduction", self.arch.reduction)
            .with("kl_weight", self.arch.kl_weight);
        super::store_common(&mut c, self.unit_scale);
        c
    }
}
