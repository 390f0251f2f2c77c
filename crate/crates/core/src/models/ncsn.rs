//! Noise-conditional score network: denoising score matching over a
//! geometric noise ladder and annealed Langevin sampling.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vae::shapes_of;
use super::{check_width, fit, stream, substream, Generative, LossTrace, TrainConfig, TrainData};
use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation};
use crate::tabular::TabularSchema;
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, Tensor};

/// Geometric noise levels from `sigma_max` down to `sigma_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn new(sigma_max: f64, sigma_min: f64, levels: usize) -> Result<Self> {
        if levels == 0 || !(sigma_min > 0.0 && sigma_max >= sigma_min && sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need sigma_max >= sigma_min > 0 and L >= 1, got ({sigma_max}, {sigma_min}, {levels})"
            )));
        }
        let (a, b) = (sigma_max.ln(), sigma_min.ln());
        let sigmas = (0..levels)
            .map(|i| {
                if levels == 1 {
                    sigma_max
                } else {
                    (a + (b - a) * i as f64 / (levels - 1) as f64).exp()
                }
            })
            .collect();
        Ok(SigmaSchedule {
            sigma_max,
            sigma_min,
            sigmas,
        })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn contains(&self, sigma: f64) -> bool {
        let tol = 1e-12;
        sigma >= self.sigma_min * (1.0 - tol) && sigma <= self.sigma_max * (1.0 + tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelSelection {
    /// One level drawn uniformly for each row of each batch.
    Random,
    /// Every level for every row, summed over levels.
    Sequential,
}

impl FromStr for LevelSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(LevelSelection::Random),
            "sequential" => Ok(LevelSelection::Sequential),
            _ => Err(Error::Config(format!("unknown level selection `{s}`"))),
        }
    }
}

impl std::fmt::Display for LevelSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LevelSelection::Random => "random",
            LevelSelection::Sequential => "sequential",
        })
    }
}

/// Noised training rows: each batch row paired with one level and one noise
/// draw `n ~ N(0, sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    /// Rows of the original batch each entry came from.
    pub source: Vec<usize>,
    pub sigma: Vec<f64>,
    pub noise: Tensor,
    /// Original batch size (the loss averages over it).
    pub batch: usize,
}

impl NoisyBatch {
    pub fn draw(x: &Tensor, sigmas: &SigmaSchedule, mode: LevelSelection, rng: &mut ChaCha8Rng) -> Self {
        let (b, d) = (x.rows(), x.cols());
        let (source, sigma): (Vec<usize>, Vec<f64>) = match mode {
            LevelSelection::Random => (0..b)
                .map(|i| (i, sigmas.sigmas()[rng.random_range(0..sigmas.levels())]))
                .unzip(),
            LevelSelection::Sequential => sigmas
                .sigmas()
                .iter()
                .flat_map(|&s| (0..b).map(move |i| (i, s)))
                .unzip(),
        };
        let mut noise = Tensor::randn(&[source.len(), d], rng);
        for (r, s) in sigma.iter().enumerate() {
            noise.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= s);
        }
        NoisyBatch {
            source,
            sigma,
            noise,
            batch: b,
        }
    }

    /// `x + n` and the regression target `-n / sigma^2`.
    fn inputs(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = x.cols();
        let m = self.source.len();
        let mut noisy = Vec::with_capacity(m * d);
        let mut target = Vec::with_capacity(m * d);
        for (r, &i) in self.source.iter().enumerate() {
            let s2 = self.sigma[r] * self.sigma[r];
            for (k, &xv) in x.row(i).iter().enumerate() {
                let n = self.noise.data()[r * d + k];
                noisy.push(xv + n);
                target.push(-n / s2);
            }
        }
        Ok((Tensor::new(vec![m, d], noisy)?, Tensor::new(vec![m, d], target)?))
    }

    /// Per-entry weight: `sigma^2` (weighting on) or 1, divided by the batch
    /// size and the dimension.
    fn weights(&self, d: usize, weighting: bool) -> Result<Tensor> {
        let w = self
            .sigma
            .iter()
            .map(|s| if weighting { s * s } else { 1.0 } / (self.batch * d) as f64)
            .collect();
        Tensor::new(vec![self.sigma.len(), 1], w)
    }
}

/// Denoising score-matching loss for any score function of `(x~, sigma)`.
pub fn dsm_loss_with<F>(x: &Tensor, noisy: &NoisyBatch, weighting: bool, mut score: F) -> Result<f64>
where
    F: FnMut(&Tensor, &[f64]) -> Result<Tensor>,
{
    let (xt, target) = noisy.inputs(x)?;
    let pred = score(&xt, &noisy.sigma)?;
    let w = noisy.weights(x.cols(), weighting)?;
    let d = x.cols();
    Ok((0..noisy.sigma.len())
        .map(|r| {
            let sq: f64 = (0..d)
                .map(|k| (pred.data()[r * d + k] - target.data()[r * d + k]).powi(2))
                .sum();
            w.data()[r] * sq
        })
        .sum())
}

/// Anything that returns a score at one noise level.
pub trait ScoreFn {
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Score of a standard normal, ignoring the noise level.
pub struct StandardNormalScore;

impl ScoreFn for StandardNormalScore {
    fn score(&self, x: &Tensor, _: f64) -> Result<Tensor> {
        Ok(x.map(|v| -v))
    }
}

/// Annealed Langevin dynamics from `x ~ N(0, sigma_1^2 I)`: at level `i`,
/// `steps_per_level` updates `x += e_i s(x, sigma_i) + sqrt(2 e_i) z` with
/// `e_i = eps0 sigma_i^2 / sigma_L^2`.
pub fn annealed_langevin<S: ScoreFn + ?Sized>(
    score: &S,
    sigmas: &SigmaSchedule,
    n: usize,
    dim: usize,
    eps0: f64,
    steps_per_level: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let s1 = sigmas.sigmas()[0];
    let x = Tensor::randn(&[n, dim], rng).map(|v| s1 * v);
    langevin_from(score, sigmas, x, eps0, steps_per_level, rng)
}

pub fn langevin_from<S: ScoreFn + ?Sized>(
    score: &S,
    sigmas: &SigmaSchedule,
    mut x: Tensor,
    eps0: f64,
    steps_per_level: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let last = *sigmas.sigmas().last().expect("non-empty");
    for &sigma in sigmas.sigmas() {
        let step = eps0 * sigma * sigma / (last * last);
        let noise_scale = (2.0 * step).sqrt();
        for _ in 0..steps_per_level {
            let s = score.score(&x, sigma)?;
            let z = Tensor::randn(x.shape(), rng);
            x.data_mut()
                .iter_mut()
                .zip(s.data().iter().zip(z.data()))
                .for_each(|(x, (s, z))| *x += step * s + noise_scale * z);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcsnConfig {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
    pub hidden: usize,
    pub weighting: bool,
    pub selection: LevelSelection,
    pub eps0: f64,
    pub steps_per_level: usize,
    pub unit_scale: bool,
}

impl Default for NcsnConfig {
    fn default() -> Self {
        NcsnConfig {
            sigma_max: 1.0,
            sigma_min: 0.01,
            levels: 10,
            hidden: 512,
            weighting: true,
            selection: LevelSelection::Random,
            eps0: 2e-5,
            steps_per_level: 100,
            unit_scale: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NcsnArch {
    pub dim: usize,
    pub net: Mlp,
    pub sigmas: SigmaSchedule,
}

impl NcsnArch {
    pub fn new(dim: usize, hidden: usize, sigmas: SigmaSchedule) -> Self {
        NcsnArch {
            dim,
            net: Mlp::new("ncsn.score", &[dim + 1, hidden, hidden, dim], OutputActivation::Linear),
            sigmas,
        }
    }

    fn input(x: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        let d = x.cols();
        let mut data = Vec::with_capacity(x.rows() * (d + 1));
        for (r, s) in sigma.iter().enumerate() {
            data.extend_from_slice(x.row(r));
            data.push(*s);
        }
        Tensor::new(vec![x.rows(), d + 1], data)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        self.net.eval(store, &Self::input(x, sigma)?)
    }

    pub fn loss_tape(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, noisy: &NoisyBatch, weighting: bool) -> Result<crate::tensor::Var> {
        check_width("dsm_loss", x, self.dim)?;
        let (xt, target) = noisy.inputs(x)?;
        let inp = tape.constant(Self::input(&xt, &noisy.sigma)?);
        let pred = self.net.forward(tape, store, inp, true)?;
        let tv = tape.constant(target);
        let diff = tape.sub(pred, tv)?;
        let sq = tape.square(diff)?;
        let rows = tape.row_sum(sq)?;
        let w = tape.constant(noisy.weights(self.dim, weighting)?);
        let weighted = tape.mul(rows, w)?;
        tape.sum(weighted)
    }
}

struct BoundScore<'a> {
    arch: &'a NcsnArch,
    params: &'a ParamStore,
}

impl ScoreFn for BoundScore<'_> {
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self.arch.eval(self.params, x, &vec![sigma; x.rows()])
    }
}

#[derive(Debug, Clone)]
pub struct Ncsn {
    pub arch: NcsnArch,
    pub params: ParamStore,
    pub cfg: NcsnConfig,
    schema: TabularSchema,
}

impl Ncsn {
    pub fn new(schema: TabularSchema, cfg: &NcsnConfig, seed: u64) -> Result<Self> {
        let sigmas = SigmaSchedule::new(cfg.sigma_max, cfg.sigma_min, cfg.levels)?;
        let arch = NcsnArch::new(schema.len(), cfg.hidden, sigmas);
        let mut params = ParamStore::new();
        arch.net.init(&mut params, &mut substream(seed, stream::INIT))?;
        Ok(Ncsn {
            arch,
            params,
            cfg: *cfg,
            schema,
        })
    }

    /// Network score at `sigma`; levels outside the trained range are refused.
    pub fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        if !self.arch.sigmas.contains(sigma) {
            return Err(Error::InvalidArgument(format!(
                "sigma {sigma} outside trained range [{}, {}]",
                self.arch.sigmas.sigma_min, self.arch.sigmas.sigma_max
            )));
        }
        check_width("score", x, self.arch.dim)?;
        self.arch.eval(&self.params, x, &vec![sigma; x.rows()])
    }

    pub fn score_fn(&self) -> impl ScoreFn + '_ {
        BoundScore {
            arch: &self.arch,
            params: &self.params,
        }
    }

    /// Trace column: `loss`.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<LossTrace> {
        let mut adam = AdamState::new(cfg.adam, &self.params);
        let arch = &self.arch;
        let params = &mut self.params;
        let (mode, weighting) = (self.cfg.selection, self.cfg.weighting);
        fit(data, cfg, seed, &["loss"], |batch, rng, info| {
            adam.config.lr = info.lr;
            let noisy = NoisyBatch::draw(batch, &arch.sigmas, mode, rng);
            let mut tape = Tape::new();
            let loss = arch.loss_tape(&mut tape, params, batch, &noisy, weighting)?;
            let v = tape.value(loss).item()?;
            if v.is_finite() {
                let g = tape.backward(loss, params)?;
                adam_step(params, &g, &mut adam)?;
            }
            Ok(vec![v])
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Ncsn)?;
        let cfg = NcsnConfig {
            sigma_max: ckpt.get("sigma_max")?,
            sigma_min: ckpt.get("sigma_min")?,
            levels: ckpt.get("levels")?,
            hidden: ckpt.get("hidden")?,
            weighting: ckpt.get("weighting")?,
            selection: ckpt.get("selection")?,
            eps0: ckpt.get("eps0")?,
            steps_per_level: ckpt.get("steps_per_level")?,
            unit_scale: ckpt.get("unit_scale")?,
        };
        let sigmas = SigmaSchedule::new(cfg.sigma_max, cfg.sigma_min, cfg.levels)?;
        let arch = NcsnArch::new(ckpt.schema.len(), cfg.hidden, sigmas);
        ckpt.expect_params(&shapes_of(&[&arch.net]))?;
        Ok(Ncsn {
            arch,
            params: ckpt.params.clone(),
            cfg,
            schema: ckpt.schema.clone(),
        })
    }
}

impl Generative for Ncsn {
    fn kind(&self) -> ModelKind {
        ModelKind::Ncsn
    }

    fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    fn unit_scale(&self) -> bool {
        self.cfg.unit_scale
    }

    fn sample_raw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        annealed_langevin(
            &self.score_fn(),
            &self.arch.sigmas,
            n,
            self.arch.dim,
            self.cfg.eps0,
            self.cfg.steps_per_level,
            rng,
        )
    }

    fn to_checkpoint(&self) -> ModelCheckpoint {
        let c = &self.cfg;
        ModelCheckpoint::new(ModelKind::Ncsn, self.schema.clone(), self.params.clone())
            .with("sigma_max", format!("{:e}", c.sigma_max))
            .with("sigma_min", format!("{:e}", c.sigma_min))
            .with("levels", c.levels)
            .with("hidden", c.hidden)
            .with("weighting", c.weighting)
            .with("selection", c.selection)
            .with("eps0", format!("{:e}", c.eps0))
            .with("steps_per_level", c.steps_per_level)
            .with("unit_scale", c.unit_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, random_probes};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn sigma_examples() {
        let s = SigmaSchedule::new(1.0, 0.01, 3).unwrap();
        assert_abs_diff_eq!(s.sigmas()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigmas()[1], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigmas()[2], 0.01, epsilon = 1e-15);
        assert_eq!(SigmaSchedule::new(1.0, 1.0, 1).unwrap().sigmas(), &[1.0]);
        let s = SigmaSchedule::new(2.0, 0.05, 7).unwrap();
        let r0 = s.sigmas()[0] / s.sigmas()[1];
        assert!(s.sigmas().windows(2).all(|w| (w[0] / w[1] - r0).abs() < 1e-12 && w[0] > w[1]));
        assert!(SigmaSchedule::new(0.1, 1.0, 3).is_err());
        assert!(SigmaSchedule::new(1.0, 0.0, 3).is_err());
        assert!(SigmaSchedule::new(1.0, 0.1, 0).is_err());
    }

    #[test]
    fn dsm_loss_stubs() {
        let sig = SigmaSchedule::new(0.5, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[4000, 4], 0.0, 1.0, &mut rng);
        let noisy = NoisyBatch::draw(&x, &sig, LevelSelection::Random, &mut rng);
        let exact = dsm_loss_with(&x, &noisy, false, |_, s| {
            let d = 4;
            let data = (0..noisy.sigma.len() * d)
                .map(|i| -noisy.noise.data()[i] / (s[i / d] * s[i / d]))
                .collect();
            Tensor::new(vec![noisy.sigma.len(), d], data)
        })
        .unwrap();
        assert_eq!(exact, 0.0);
        let zero = |xt: &Tensor, _: &[f64]| Ok(Tensor::zeros(xt.shape()));
        let off = dsm_loss_with(&x, &noisy, false, zero).unwrap();
        // 16000 squared normals / sigma^2 = 4 per entry in expectation
        let sd = 4.0 * (2.0f64 / 16000.0).sqrt();
        assert!((off - 4.0).abs() < 4.0 * sd, "{off}");
        let on = dsm_loss_with(&x, &noisy, true, zero).unwrap();
        assert!((on - 1.0).abs() < 4.0 * sd / 4.0, "{on}");
        let seq = SigmaSchedule::new(1.0, 0.1, 3).unwrap();
        let noisy = NoisyBatch::draw(&x, &seq, LevelSelection::Sequential, &mut rng);
        let on = dsm_loss_with(&x, &noisy, true, zero).unwrap();
        assert!((on - 3.0).abs() < 0.1, "one per level: {on}");
    }

    #[test]
    fn zero_step_and_single_step_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sig = SigmaSchedule::new(1.0, 1.0, 1).unwrap();
        let x = Tensor::randn(&[5, 2], &mut rng);
        assert_eq!(langevin_from(&StandardNormalScore, &sig, x.clone(), 0.0, 10, &mut rng).unwrap(), x);
        let eps = 0.1;
        let mut a = ChaCha8Rng::seed_from_u64(2);
        let mut b = a.clone();
        let out = langevin_from(&StandardNormalScore, &sig, x.clone(), eps, 1, &mut a).unwrap();
        let z = Tensor::randn(&[5, 2], &mut b);
        for i in 0..10 {
            let want = x.data()[i] * (1.0 - eps) + (2.0 * eps).sqrt() * z.data()[i];
            assert_abs_diff_eq!(out.data()[i], want, epsilon = 1e-14);
        }
    }

    struct ZeroScore;
    impl ScoreFn for ZeroScore {
        fn score(&self, x: &Tensor, _: f64) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    #[test]
    fn zero_score_is_a_random_walk() {
        let sig = SigmaSchedule::new(1.0, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let (eps, steps) = (0.01, 25);
        let x = langevin_from(&ZeroScore, &sig, Tensor::zeros(&[n, 1]), eps, steps, &mut rng).unwrap();
        let var = x.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = 2.0 * eps * steps as f64;
        assert!((var - want).abs() < 4.0 * want * (2.0 / n as f64).sqrt(), "{var} vs {want}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = NcsnConfig { hidden: 16, levels: 4, ..NcsnConfig::default() };
        let m = Ncsn::new(TabularSchema::default_hts(), &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[5, 4], 0.0, 1.0, &mut rng);
        for mode in [LevelSelection::Random, LevelSelection::Sequential] {
            let noisy = NoisyBatch::draw(&x, &m.arch.sigmas, mode, &mut rng);
            let probes = random_probes(&m.params, 30, &mut rng);
            let r = grad_check_params(|t, p| m.arch.loss_tape(t, p, &x, &noisy, true), &m.params, &probes, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{mode}: {r:?}");
        }
    }

    #[test]
    fn score_contract() {
        let cfg = NcsnConfig { hidden: 8, ..NcsnConfig::default() };
        let mut m = Ncsn::new(TabularSchema::default_hts(), &cfg, 0).unwrap();
        let x = Tensor::randn(&[3, 4], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.score(&x, 0.5).unwrap(), m.score(&x, 0.5).unwrap());
        assert!(m.score(&x, 2.0).is_err());
        assert!(m.score(&x, 0.001).is_err());
        m.arch.net.zero_last_layer(&mut m.params);
        assert!(m.score(&x, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_and_checkpoint() {
        let cfg = NcsnConfig { hidden: 8, levels: 3, steps_per_level: 5, ..NcsnConfig::default() };
        let m = Ncsn::new(TabularSchema::default_hts(), &cfg, 4).unwrap();
        assert_eq!(m.sample(0, 0).unwrap().n_rows(), 0);
        let s = m.sample(20, 7).unwrap();
        assert_eq!(s, m.sample(20, 7).unwrap());
        let c = m.to_checkpoint();
        let back = Ncsn::from_checkpoint(&c).unwrap();
        assert_eq!(back.sample(20, 7).unwrap(), s);
        assert_eq!(back.to_checkpoint().to_text(), c.to_text());
    }
}
