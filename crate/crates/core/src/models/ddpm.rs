//! Denoising diffusion with a linear beta schedule, a time-conditioned noise
//! predictor and ancestral sampling from the Gaussian posterior.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand::Rng;

use super::vae::shapes_of;
use super::{check_width, fit, stream, substream, Generative, LossTrace, TrainConfig, TrainData};
use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation};
use crate::tabular::TabularSchema;
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};

/// Precomputed `beta`, `alpha`, `alpha_bar` and posterior variances, indexed
/// by step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("diffusion needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(DiffusionSchedule {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
            posterior,
        })
    }

    /// The 1000-step default range `[1e-4, 0.02]` stretched by `1000 / T`,
    /// so shorter chains still end near pure noise.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        let f = 1000.0 / steps as f64;
        DiffusionSchedule::new(steps, 1e-4 * f, (0.02 * f).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    /// `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.posterior[self.idx(t)]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(schedule: &DiffusionSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            left: x0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Per-row version of [`forward_diffuse`] with one step per row.
pub fn forward_diffuse_rows(schedule: &DiffusionSchedule, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    let d = x0.cols();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(x0.row(i).iter().zip(eps.row(i)).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(vec![ts.len(), d], out)
}

/// Sinusoidal step embedding: `dim / 2` frequencies geometric from 1 down to
/// 1e-4, sines then cosines.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            1e-4f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut e: Vec<f64> = (0..half).map(|k| (t as f64 * freq(k)).sin()).collect();
    e.extend((0..half).map(|k| (t as f64 * freq(k)).cos()));
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseVariance {
    Beta,
    BetaTilde,
}

impl FromStr for ReverseVariance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(ReverseVariance::Beta),
            "beta_tilde" => Ok(ReverseVariance::BetaTilde),
            _ => Err(Error::Config(format!("unknown reverse variance `{s}`"))),
        }
    }
}

impl std::fmt::Display for ReverseVariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReverseVariance::Beta => "beta",
            ReverseVariance::BetaTilde => "beta_tilde",
        })
    }
}

/// Anything that predicts the noise in `x_t` for per-row steps.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

/// `mean((eps - eps_hat)^2)` over batch and dims, with steps and noise given.
pub fn ddpm_loss_with<P: NoisePredictor + ?Sized>(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    net: &P,
) -> Result<f64> {
    let xt = forward_diffuse_rows(schedule, x0, ts, eps)?;
    let pred = net.predict(&xt, ts)?;
    Ok(eps
        .data()
        .iter()
        .zip(pred.data())
        .map(|(e, p)| (e - p) * (e - p))
        .sum::<f64>()
        / eps.len() as f64)
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per row.
pub fn draw_steps_and_noise(schedule: &DiffusionSchedule, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Tensor) {
    let ts = (0..rows).map(|_| rng.random_range(1..=schedule.steps())).collect();
    (ts, Tensor::randn(&[rows, dim], rng))
}

/// One reverse step: `(x - (1 - alpha) / sqrt(1 - alpha_bar) eps) / sqrt(alpha) + sigma z`.
pub fn reverse_step(x: &Tensor, eps: &Tensor, alpha: f64, alpha_bar: f64, sigma: f64, z: Option<&Tensor>) -> Tensor {
    let c = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out: Vec<f64> = x.data().iter().zip(eps.data()).map(|(x, e)| inv * (x - c * e)).collect();
    if let Some(z) = z {
        out.iter_mut().zip(z.data()).for_each(|(o, z)| *o += sigma * z);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Ancestral chain from `x_T`. With `rng` absent every `z` is zero.
pub fn ancestral_chain<P: NoisePredictor + ?Sized>(
    schedule: &DiffusionSchedule,
    net: &P,
    x_t: Tensor,
    variance: ReverseVariance,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let n = x_t.rows();
    let mut x = x_t;
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; n];
        let eps = net.predict(&x, &ts)?;
        let var = match variance {
            ReverseVariance::Beta => schedule.beta(t),
            ReverseVariance::BetaTilde => schedule.beta_tilde(t),
        };
        let z = match (&mut rng, t > 1) {
            (Some(r), true) => Some(Tensor::randn(x.shape(), *r)),
            _ => None,
        };
        x = reverse_step(&x, &eps, schedule.alpha(t), schedule.alpha_bar(t), var.sqrt(), z.as_ref());
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpmConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub variance: ReverseVariance,
    pub unit_scale: bool,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        DdpmConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 256,
            embed_dim: 128,
            variance: ReverseVariance::Beta,
            unit_scale: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DdpmArch {
    pub dim: usize,
    pub embed_dim: usize,
    pub net: Mlp,
    pub schedule: DiffusionSchedule,
    embeddings: Vec<Vec<f64>>,
}

impl DdpmArch {
    pub fn new(dim: usize, hidden: usize, embed_dim: usize, schedule: DiffusionSchedule) -> Self {
        let embeddings = (1..=schedule.steps()).map(|t| time_embedding(t, embed_dim)).collect();
        DdpmArch {
            dim,
            embed_dim,
            net: Mlp::new("ddpm.eps", &[dim + embed_dim, hidden, hidden, dim], OutputActivation::Linear),
            schedule,
            embeddings,
        }
    }

    fn embed(&self, ts: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ts.len() * self.embed_dim);
        for &t in ts {
            self.schedule.check_step(t)?;
            data.extend_from_slice(&self.embeddings[t - 1]);
        }
        Tensor::new(vec![ts.len(), self.embed_dim], data)
    }

    pub fn predict_tape(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, ts: &[usize], trainable: bool) -> Result<Var> {
        let e = tape.constant(self.embed(ts)?);
        let input = tape.concat(&[x_t, e])?;
        self.net.forward(tape, store, input, trainable)
    }

    /// L_simple for fixed steps and noise.
    pub fn loss_tape(&self, tape: &mut Tape, store: &ParamStore, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Var> {
        check_width("ddpm_loss", x0, self.dim)?;
        let xt = forward_diffuse_rows(&self.schedule, x0, ts, eps)?;
        let xv = tape.constant(xt);
        let pred = self.predict_tape(tape, store, xv, ts, true)?;
        let ev = tape.constant(eps.clone());
        let d = tape.sub(ev, pred)?;
        let sq = tape.square(d)?;
        tape.mean(sq)
    }
}

struct BoundNet<'a> {
    arch: &'a DdpmArch,
    params: &'a ParamStore,
}

impl NoisePredictor for BoundNet<'_> {
    fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let y = self.arch.predict_tape(&mut tape, self.params, x, ts, false)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct Ddpm {
    pub arch: DdpmArch,
    pub params: ParamStore,
    schema: TabularSchema,
    variance: ReverseVariance,
    unit_scale: bool,
    hidden: usize,
}

impl Ddpm {
    pub fn new(schema: TabularSchema, cfg: &DdpmConfig, seed: u64) -> Result<Self> {
        let schedule = DiffusionSchedule::new(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        if cfg.embed_dim < 2 || cfg.embed_dim % 2 != 0 {
            return Err(Error::Config("embed_dim must be even and >= 2".into()));
        }
        let arch = DdpmArch::new(schema.len(), cfg.hidden, cfg.embed_dim, schedule);
        let mut params = ParamStore::new();
        arch.net.init(&mut params, &mut substream(seed, stream::INIT))?;
        Ok(Ddpm {
            arch,
            params,
            schema,
            variance: cfg.variance,
            unit_scale: cfg.unit_scale,
            hidden: cfg.hidden,
        })
    }

    pub fn predictor(&self) -> impl NoisePredictor + '_ {
        BoundNet {
            arch: &self.arch,
            params: &self.params,
        }
    }

    /// Trace column: `loss`.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<LossTrace> {
        let mut adam = AdamState::new(cfg.adam, &self.params);
        let arch = &self.arch;
        let params = &mut self.params;
        fit(data, cfg, seed, &["loss"], |batch, rng, info| {
            adam.config.lr = info.lr;
            let (ts, eps) = draw_steps_and_noise(&arch.schedule, batch.rows(), arch.dim, rng);
            let mut tape = Tape::new();
            let loss = arch.loss_tape(&mut tape, params, batch, &ts, &eps)?;
            let v = tape.value(loss).item()?;
            if v.is_finite() {
                let g = tape.backward(loss, params)?;
                adam_step(params, &g, &mut adam)?;
            }
            Ok(vec![v])
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Ddpm)?;
        let schedule = DiffusionSchedule::new(ckpt.get("steps")?, ckpt.get("beta_start")?, ckpt.get("beta_end")?)?;
        let hidden = ckpt.get("hidden")?;
        let arch = DdpmArch::new(ckpt.schema.len(), hidden, ckpt.get("embed_dim")?, schedule);
        ckpt.expect_params(&shapes_of(&[&arch.net]))?;
        Ok(Ddpm {
            arch,
            params: ckpt.params.clone(),
            schema: ckpt.schema.clone(),
            variance: ckpt.get("variance")?,
            unit_scale: ckpt.get("unit_scale")?,
            hidden,
        })
    }
}

impl Generative for Ddpm {
    fn kind(&self) -> ModelKind {
        ModelKind::Ddpm
    }

    fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    fn unit_scale(&self) -> bool {
        self.unit_scale
    }

    fn sample_raw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let x_t = Tensor::randn(&[n, self.arch.dim], rng);
        ancestral_chain(&self.arch.schedule, &self.predictor(), x_t, self.variance, Some(rng))
    }

    fn to_checkpoint(&self) -> ModelCheckpoint {
        let s = &self.arch.schedule;
        let mut c = ModelCheckpoint::new(ModelKind::Ddpm, self.schema.clone(), self.params.clone())
            .with("steps", s.steps())
            .with("beta_start", format!("{:e}", s.beta_start))
            .with("beta_end", format!("{:e}", s.beta_end))
            .with("hidden", self.hidden)
            .with("embed_dim", self.arch.embed_dim)
            .with("variance", self.variance);
        super::store_common(&mut c, self.unit_scale);
        c
    }
}
