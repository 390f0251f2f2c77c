//! Generator/discriminator pair trained with alternating binary
//! cross-entropy updates and the non-saturating generator loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vae::shapes_of;
use super::{check_width, fit, stream, substream, to_table, Generative, LossTrace, StepInfo, TrainConfig, TrainData};
use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation};
use crate::tabular::TabularSchema;
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanConfig {
    pub hidden: usize,
    pub noise_dim: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub unit_scale: bool,
    /// Rows drawn at the end of each epoch for the per-attribute entropy
    /// diagnostic (0 disables it).
    pub entropy_rows: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            hidden: 512,
            noise_dim: 64,
            d_steps: 1,
            unit_scale: true,
            entropy_rows: 1000,
        }
    }
}

/// `ln sigmoid(l)` without under/overflow: `-(relu(-l) + ln(1 + e^{-|l|}))`.
pub fn log_sigmoid_tape(tape: &mut Tape, l: Var) -> Result<Var> {
    let neg = tape.scale(l, -1.0)?;
    let pos_part = tape.relu(l)?;
    let neg_part = tape.relu(neg)?;
    let abs = tape.add(pos_part, neg_part)?;
    let m = tape.scale(abs, -1.0)?;
    let e = tape.exp(m)?;
    let one_plus = tape.add_scalar(e, 1.0)?;
    let lg = tape.log(one_plus)?;
    let sp = tape.add(neg_part, lg)?;
    tape.scale(sp, -1.0)
}

/// `(disc_loss, gen_loss)` from discriminator probabilities.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Empty("gan_losses needs non-empty batches".into()));
    }
    if let Some(v) = d_real.iter().chain(d_fake).find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "discriminator output {v} outside (0, 1)"
        )));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    let disc = mean(d_real, &|d| -d.ln()) + mean(d_fake, &|d| -(1.0 - d).ln());
    let gen = mean(d_fake, &|d| -d.ln());
    Ok((disc, gen))
}

#[derive(Debug, Clone)]
pub struct GanArch {
    pub data_dim: usize,
    pub noise_dim: usize,
    pub generator: Mlp,
    /// Outputs logits; [`GanArch::discriminate`] applies the sigmoid.
    pub discriminator: Mlp,
}

impl GanArch {
    pub fn new(data_dim: usize, hidden: usize, noise_dim: usize) -> Self {
        GanArch {
            data_dim,
            noise_dim,
            generator: Mlp::new("gan.gen", &[noise_dim, hidden, hidden, data_dim], OutputActivation::Linear),
            discriminator: Mlp::new("gan.disc", &[data_dim, hidden, hidden, 1], OutputActivation::Linear),
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<(ParamStore, ParamStore)> {
        let mut g = ParamStore::new();
        self.generator.init(&mut g, rng)?;
        let mut d = ParamStore::new();
        self.discriminator.init(&mut d, rng)?;
        Ok((g, d))
    }

    /// `mean(-ln D(real)) + mean(-ln(1 - D(fake)))` with the generator output
    /// `fake` held fixed.
    pub fn disc_loss_tape(&self, tape: &mut Tape, d: &ParamStore, real: &Tensor, fake: &Tensor) -> Result<Var> {
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let lr = self.discriminator.forward(tape, d, r, true)?;
        let lf = self.discriminator.forward(tape, d, f, true)?;
        let a = log_sigmoid_tape(tape, lr)?;
        let neg = tape.scale(lf, -1.0)?;
        let b = log_sigmoid_tape(tape, neg)?;
        let ma = tape.mean(a)?;
        let mb = tape.mean(b)?;
        let s = tape.add(ma, mb)?;
        tape.scale(s, -1.0)
    }

    /// `mean(-ln D(G(z)))` with the discriminator frozen.
    pub fn gen_loss_tape(&self, tape: &mut Tape, g: &ParamStore, d: &ParamStore, z: &Tensor) -> Result<Var> {
        let zv = tape.constant(z.clone());
        let x = self.generator.forward(tape, g, zv, true)?;
        let l = self.discriminator.forward(tape, d, x, false)?;
        let ls = log_sigmoid_tape(tape, l)?;
        let m = tape.mean(ls)?;
        tape.scale(m, -1.0)
    }

    pub fn generate(&self, g: &ParamStore, z: &Tensor) -> Result<Tensor> {
        check_width("generate", z, self.noise_dim)?;
        self.generator.eval(g, z)
    }

    /// Probabilities in (0, 1), shape `[B, 1]`.
    pub fn discriminate(&self, d: &ParamStore, x: &Tensor) -> Result<Tensor> {
        check_width("discriminate", x, self.data_dim)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = self.discriminator.forward(&mut tape, d, xv, false)?;
        let p = tape.sigmoid(l)?;
        Ok(tape.value(p).clone())
    }
}

#[derive(Debug, Clone)]
pub struct Gan {
    pub arch: GanArch,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    schema: TabularSchema,
    unit_scale: bool,
    hidden: usize,
    d_steps: usize,
    entropy_rows: usize,
}

fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

impl Gan {
    pub fn new(schema: TabularSchema, cfg: &GanConfig, seed: u64) -> Result<Self> {
        if cfg.d_steps == 0 {
            return Err(Error::Config("d_steps must be >= 1".into()));
        }
        let arch = GanArch::new(schema.len(), cfg.hidden, cfg.noise_dim);
        let (gen_params, disc_params) = arch.init(&mut substream(seed, stream::INIT))?;
        Ok(Gan {
            arch,
            gen_params,
            disc_params,
            schema,
            unit_scale: cfg.unit_scale,
            hidden: cfg.hidden,
            d_steps: cfg.d_steps,
            entropy_rows: cfg.entropy_rows,
        })
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.arch.generate(&self.gen_params, z)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        self.arch.discriminate(&self.disc_params, x)
    }

    /// Trace columns: `disc_loss, gen_loss, d_real, d_fake`, then one
    /// `entropy.<attr>` column per attribute when the diagnostic is on.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<LossTrace> {
        let mut adam_g = AdamState::new(cfg.adam, &self.gen_params);
        let mut adam_d = AdamState::new(cfg.adam, &self.disc_params);
        let arch = &self.arch;
        let (g, d) = (&mut self.gen_params, &mut self.disc_params);
        let d_steps = self.d_steps;
        let (schema, unit_scale, entropy_rows) = (&self.schema, self.unit_scale, self.entropy_rows);
        let mut entropies: Vec<Vec<f64>> = Vec::new();
        let mut trace = fit(
            data,
            cfg,
            seed,
            &["disc_loss", "gen_loss", "d_real", "d_fake"],
            |real, rng, info: StepInfo| {
                adam_d.config.lr = info.lr;
                adam_g.config.lr = info.lr;
                let b = real.rows();
                let mut disc_loss = 0.0;
                for _ in 0..d_steps {
                    let z = Tensor::randn(&[b, arch.noise_dim], rng);
                    let fake = arch.generate(g, &z)?;
                    let mut tape = Tape::new();
                    let loss = arch.disc_loss_tape(&mut tape, d, real, &fake)?;
                    disc_loss = tape.value(loss).item()?;
                    if !disc_loss.is_finite() {
                        return Ok(vec![disc_loss]);
                    }
                    let grads = tape.backward(loss, d)?;
                    adam_step(d, &grads, &mut adam_d)?;
                }
                let z = Tensor::randn(&[b, arch.noise_dim], rng);
                let mut tape = Tape::new();
                let loss = arch.gen_loss_tape(&mut tape, g, d, &z)?;
                let gen_loss = tape.value(loss).item()?;
                if !gen_loss.is_finite() {
                    return Ok(vec![gen_loss]);
                }
                let grads = tape.backward(loss, g)?;
                adam_step(g, &grads, &mut adam_g)?;

                let fake = arch.generate(g, &z)?;
                let mean = |t: Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
                let d_real = mean(arch.discriminate(d, real)?);
                let d_fake = mean(arch.discriminate(d, &fake)?);

                if info.last_in_epoch && entropy_rows > 0 && data_is_table(data) {
                    let mut erng = ChaCha8Rng::seed_from_u64(info.epoch as u64);
                    let z = Tensor::randn(&[entropy_rows, arch.noise_dim], &mut erng);
                    let t = to_table(schema, unit_scale, &arch.generate(g, &z)?)?;
                    entropies.push(
                        schema
                            .cardinalities()
                            .iter()
                            .enumerate()
                            .map(|(j, &k)| {
                                let mut counts = vec![0usize; k];
                                t.rows().for_each(|r| counts[r[j]] += 1);
                                entropy(&counts)
                            })
                            .collect(),
                    );
                }
                Ok(vec![disc_loss, gen_loss, d_real, d_fake])
            },
        )?;
        if entropies.len() == trace.rows.len() && !entropies.is_empty() {
            for name in self.schema.names() {
                trace.columns.push(format!("entropy.{name}"));
            }
            for (row, e) in trace.rows.iter_mut().zip(entropies) {
                row.extend(e);
            }
        }
        Ok(trace)
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Gan)?;
        let hidden = ckpt.get("hidden")?;
        let arch = GanArch::new(ckpt.schema.len(), hidden, ckpt.get("noise_dim")?);
        ckpt.expect_params(&shapes_of(&[&arch.generator, &arch.discriminator]))?;
        let mut gen_params = ParamStore::new();
        let mut disc_params = ParamStore::new();
        for (name, t) in ckpt.params.iter() {
            let store = if name.starts_with("gan.gen.") {
                &mut gen_params
            } else {
                &mut disc_params
            };
            store.insert(name.clone(), t.clone())?;
        }
        Ok(Gan {
            arch,
            gen_params,
            disc_params,
            schema: ckpt.schema.clone(),
            unit_scale: ckpt.get("unit_scale")?,
            hidden,
            d_steps: ckpt.get("d_steps")?,
            entropy_rows: ckpt.get("entropy_rows")?,
        })
    }
}

fn data_is_table(data: &TrainData) -> bool {
    matches!(data, TrainData::Table(_))
}

impl Generative for Gan {
    fn kind(&self) -> ModelKind {
        ModelKind::Gan
    }

    fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    fn unit_scale(&self) -> bool {
        self.unit_scale
    }

    fn sample_raw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let z = Tensor::randn(&[n, self.arch.noise_dim], rng);
        self.generate(&z)
    }

    fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut params = self.gen_params.clone();
        for (n, t) in self.disc_params.iter() {
            params.insert(n.clone(), t.clone()).expect("disjoint prefixes");
        }
        let mut c = ModelCheckpoint::new(ModelKind::Gan, self.schema.clone(), params)
            .with("hidden", self.hidden)
            .with("noise_dim", self.arch.noise_dim)
            .with("d_steps", self.d_steps)
            .with("entropy_rows", self.entropy_rows);
        super::store_common(&mut c, self.unit_scale);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, random_probes, AdamConfig};
    use approx::assert_abs_diff_eq;

    fn small(hidden: usize) -> GanConfig {
        GanConfig {
            hidden,
            noise_dim: 4,
            ..GanConfig::default()
        }
    }

    #[test]
    fn loss_values() {
        let (d, g) = gan_losses(&[0.5], &[0.5]).unwrap();
        assert_abs_diff_eq!(d, 1.386_294_361_119_890_6, epsilon = 1e-12);
        assert_abs_diff_eq!(g, 0.693_147_180_559_945_3, epsilon = 1e-12);
        let (d, _) = gan_losses(&[1.0 - 1e-12], &[1e-12]).unwrap();
        assert!(d < 1e-11);
        assert!(gan_losses(&[1.0], &[0.5]).is_err());
        assert!(gan_losses(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable_and_exact() {
        for &l in &[-800.0, -30.0, -1.0, 0.3, 5.0, 800.0] {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::scalar(l));
            let y = log_sigmoid_tape(&mut tape, v).unwrap();
            let got = tape.value(y).item().unwrap();
            let want = if l < 0.0 { l - (1.0 + l.exp()).ln() } else { -(1.0 + (-l).exp()).ln() };
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{l}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_init_contracts() {
        let mut gan = Gan::new(TabularSchema::default_hts(), &small(8), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        gan.arch.generator.zero_last_layer(&mut gan.gen_params);
        gan.arch.discriminator.zero_last_layer(&mut gan.disc_params);
        let z = Tensor::randn(&[3, 4], &mut rng);
        let x = gan.generate(&z).unwrap();
        assert_eq!(x.shape(), &[3, 4]);
        assert!(x.data().iter().all(|&v| v == 0.0));
        let p = gan.discriminate(&Tensor::randn(&[3, 4], &mut rng)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn discriminator_outputs_are_probabilities() {
        let gan = Gan::new(TabularSchema::default_hts(), &small(16), 9).unwrap();
        let x = Tensor::randn(&[64, 4], &mut ChaCha8Rng::seed_from_u64(1)).map(|v| 5.0 * v);
        let p = gan.discriminate(&x).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, gan.discriminate(&x).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let gan = Gan::new(TabularSchema::default_hts(), &small(12), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = Tensor::uniform(&[5, 4], 0.0, 1.0, &mut rng);
        let z = Tensor::randn(&[5, 4], &mut rng);
        let fake = gan.generate(&z).unwrap();
        let probes = random_probes(&gan.disc_params, 30, &mut rng);
        let r = grad_check_params(
            |t, d| gan.arch.disc_loss_tape(t, d, &real, &fake),
            &gan.disc_params,
            &probes,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let probes = random_probes(&gan.gen_params, 30, &mut rng);
        let r = grad_check_params(
            |t, g| gan.arch.gen_loss_tape(t, g, &gan.disc_params, &z),
            &gan.gen_params,
            &probes,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut gan = Gan::new(TabularSchema::default_hts(), &small(8), 4).unwrap();
        let before = gan.to_checkpoint();
        let data = TrainData::Fixed(Tensor::uniform(&[20, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        gan.train(&data, &cfg, 1).unwrap();
        assert_eq!(gan.to_checkpoint(), before);
    }

    #[test]
    fn discriminator_reaches_empirical_optimum() {
        // a appears 3x real / 1x fake, b the reverse: D*(a) = 3/4, D*(b) = 1/4
        let arch = GanArch::new(1, 16, 1);
        let (_, mut d) = arch.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let real = Tensor::new(vec![4, 1], vec![0.2, 0.2, 0.2, 0.8]).unwrap();
        let fake = Tensor::new(vec![4, 1], vec![0.2, 0.8, 0.8, 0.8]).unwrap();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            &d,
        );
        for _ in 0..3000 {
            let mut tape = Tape::new();
            let loss = arch.disc_loss_tape(&mut tape, &d, &real, &fake).unwrap();
            let g = tape.backward(loss, &d).unwrap();
            adam_step(&mut d, &g, &mut adam).unwrap();
        }
        let p = arch
            .discriminate(&d, &Tensor::new(vec![2, 1], vec![0.2, 0.8]).unwrap())
            .unwrap();
        assert!((p.data()[0] - 0.75).abs() < 0.01, "{:?}", p.data());
        assert!((p.data()[1] - 0.25).abs() < 0.01, "{:?}", p.data());
    }

    #[test]
    fn collapses_onto_a_point_mass() {
        let point = [0.3, 0.7, 0.5, 0.1];
        let rows: Vec<f64> = point.iter().cycle().take(4 * 64).copied().collect();
        let data = TrainData::Fixed(Tensor::new(vec![64, 4], rows).unwrap());
        let mut gan = Gan::new(TabularSchema::default_hts(), &small(64), 6).unwrap();
        let cfg = TrainConfig {
            epochs: 1500,
            batch_size: 64,
            adam: AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        gan.train(&data, &cfg, 6).unwrap();
        let x = gan.generate(&Tensor::randn(&[200, 4], &mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        let mean_dist = (0..200)
            .map(|i| {
                x.row(i)
                    .iter()
                    .zip(&point)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 200.0;
        assert!(mean_dist < 0.05, "mean distance {mean_dist}");
    }

    #[test]
    fn sampling_and_checkpoint() {
        let gan = Gan::new(TabularSchema::default_hts(), &small(8), 5).unwrap();
        assert_eq!(gan.sample(0, 0).unwrap().n_rows(), 0);
        let s = gan.sample(40, 3).unwrap();
        assert_eq!(s, gan.sample(40, 3).unwrap());
        let back = Gan::from_checkpoint(&gan.to_checkpoint()).unwrap();
        assert_eq!(back.sample(40, 3).unwrap(), s);
        assert_eq!(back.to_checkpoint().to_text(), gan.to_checkpoint().to_text());
    }
}
