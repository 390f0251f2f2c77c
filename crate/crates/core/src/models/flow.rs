//! Affine coupling flow with alternating binary masks and a standard-normal
//! base. `forward` maps base to data and is used for sampling; densities go
//! through the inverses in reverse order.

use rand_chacha::ChaCha8Rng;

use super::vae::shapes_of;
use super::{check_width, fit, stream, substream, Generative, LossTrace, TrainConfig, TrainData};
use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation};
use crate::tabular::TabularSchema;
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    pub unit_scale: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 6,
            hidden: 128,
            unit_scale: true,
        }
    }
}

/// One affine coupling: masked dims pass through, the rest are scaled by
/// `exp(s)` and shifted by `t`, both computed from the masked part.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub mask: Vec<f64>,
    pub s: Mlp,
    pub t: Mlp,
}

impl CouplingLayer {
    pub fn new(index: usize, mask: Vec<f64>, hidden: usize) -> Result<Self> {
        if !mask.iter().all(|&m| m == 0.0 || m == 1.0) || !mask.contains(&0.0) || !mask.contains(&1.0) {
            return Err(Error::InvalidArgument(format!(
                "coupling mask {mask:?} needs both 0 and 1 entries"
            )));
        }
        let d = mask.len();
        Ok(CouplingLayer {
            s: Mlp::new(&format!("flow.{index}.s"), &[d, hidden, hidden, d], OutputActivation::Tanh),
            t: Mlp::new(&format!("flow.{index}.t"), &[d, hidden, hidden, d], OutputActivation::Linear),
            mask,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    fn masks(&self, tape: &mut Tape) -> (Var, Var) {
        let m = Tensor::vector(self.mask.clone()).expect("non-empty mask");
        let inv = m.map(|v| 1.0 - v);
        (tape.constant(m), tape.constant(inv))
    }

    /// `s` and `t` restricted to the unmasked dims.
    fn st(&self, tape: &mut Tape, store: &ParamStore, masked: Var, inv: Var) -> Result<(Var, Var)> {
        let s = self.s.forward(tape, store, masked, true)?;
        let s = tape.mul(s, inv)?;
        let t = self.t.forward(tape, store, masked, true)?;
        let t = tape.mul(t, inv)?;
        Ok((s, t))
    }

    /// `(y, logdet)` with logdet `[B, 1]` equal to the row sum of `s`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let (m, inv) = self.masks(tape);
        let xm = tape.mul(x, m)?;
        let (s, t) = self.st(tape, store, xm, inv)?;
        let es = tape.exp(s)?;
        let scaled = tape.mul(x, es)?;
        let moved = tape.add(scaled, t)?;
        let moved = tape.mul(moved, inv)?;
        let y = tape.add(xm, moved)?;
        let logdet = tape.row_sum(s)?;
        Ok((y, logdet))
    }

    /// `(x, s_sum)` where `s_sum` `[B, 1]` is the forward log-determinant at
    /// the recovered `x`.
    pub fn inverse_tape(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<(Var, Var)> {
        let (m, inv) = self.masks(tape);
        let ym = tape.mul(y, m)?;
        let (s, t) = self.st(tape, store, ym, inv)?;
        let neg = tape.scale(s, -1.0)?;
        let e = tape.exp(neg)?;
        let d = tape.sub(y, t)?;
        let d = tape.mul(d, e)?;
        let d = tape.mul(d, inv)?;
        let x = tape.add(ym, d)?;
        let s_sum = tape.row_sum(s)?;
        Ok((x, s_sum))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        check_width("coupling_forward", x, self.dim())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, ld) = self.forward_tape(&mut tape, store, xv)?;
        Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        check_width("coupling_inverse", y, self.dim())?;
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let (x, _) = self.inverse_tape(&mut tape, store, yv)?;
        Ok(tape.value(x).clone())
    }
}

/// Masks start with the first `ceil(D/2)` dims fixed and alternate.
pub fn alternating_masks(dim: usize, layers: usize) -> Vec<Vec<f64>> {
    let half = dim.div_ceil(2);
    (0..layers)
        .map(|l| {
            (0..dim)
                .map(|j| {
                    let first = j < half;
                    if first == (l % 2 == 0) { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FlowArch {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
}

impl FlowArch {
    pub fn new(dim: usize, layers: usize, hidden: usize) -> Result<Self> {
        if dim < 2 && layers > 0 {
            return Err(Error::InvalidArgument("coupling flows need at least 2 dims".into()));
        }
        let layers = alternating_masks(dim, layers)
            .into_iter()
            .enumerate()
            .map(|(i, m)| CouplingLayer::new(i, m, hidden))
            .collect::<Result<_>>()?;
        Ok(FlowArch { dim, layers })
    }

    fn nets(&self) -> Vec<&Mlp> {
        self.layers.iter().flat_map(|l| [&l.s, &l.t]).collect()
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

    /// Zeroes the output layer of every `s` and `t` net: each layer becomes
    /// the identity.
    pub fn zero_init(&self, store: &mut ParamStore) {
        for net in self.nets() {
            net.zero_last_layer(store);
        }
    }

    /// Per-row `log p(x)` as a `[B, 1]` tape value.
    pub fn log_prob_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut z = x;
        let mut s_total: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (prev, s_sum) = layer.inverse_tape(tape, store, z)?;
            if !tape.value(prev).is_finite() {
                return Err(Error::NonFinite(format!("flow layer {i} inverse")));
            }
            z = prev;
            s_total = Some(match s_total {
                Some(acc) => tape.add(acc, s_sum)?,
                None => s_sum,
            });
        }
        let sq = tape.square(z)?;
        let quad = tape.row_sum(sq)?;
        let base = tape.scale(quad, -0.5)?;
        let base = tape.add_scalar(base, -0.5 * self.dim as f64 * LN_2PI)?;
        match s_total {
            Some(s) => tape.sub(base, s),
            None => Ok(base),
        }
    }

    /// Negative mean log-likelihood of a batch.
    pub fn nll_tape(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Var> {
        check_width("flow_nll", x, self.dim)?;
        let xv = tape.constant(x.clone());
        let lp = self.log_prob_tape(tape, store, xv)?;
        let m = tape.mean(lp)?;
        tape.scale(m, -1.0)
    }

    pub fn log_prob(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        check_width("flow_log_prob", x, self.dim)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let lp = self.log_prob_tape(&mut tape, store, xv)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Base-to-data map through `f_1 .. f_K`; returns total log-determinant.
    pub fn forward(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        check_width("flow_forward", z, self.dim)?;
        let mut x = z.clone();
        let mut total = vec![0.0; z.rows()];
        for layer in &self.layers {
            let (y, ld) = layer.forward(store, &x)?;
            x = y;
            total.iter_mut().zip(ld).for_each(|(a, b)| *a += b);
        }
        Ok((x, total))
    }

    pub fn inverse(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        check_width("flow_inverse", x, self.dim)?;
        let mut z = x.clone();
        for layer in self.layers.iter().rev() {
            z = layer.inverse(store, &z)?;
        }
        Ok(z)
    }
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub arch: FlowArch,
    pub params: ParamStore,
    schema: TabularSchema,
    unit_scale: bool,
    hidden: usize,
}

impl Flow {
    pub fn new(schema: TabularSchema, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        let arch = FlowArch::new(schema.len(), cfg.layers, cfg.hidden)?;
        let params = arch.init(&mut substream(seed, stream::INIT))?;
        Ok(Flow {
            arch,
            params,
            schema,
            unit_scale: cfg.unit_scale,
            hidden: cfg.hidden,
        })
    }

    pub fn zero_init(&mut self) {
        self.arch.zero_init(&mut self.params);
    }

    /// Model-space density, per row.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.arch.log_prob(&self.params, x)
    }

    /// Density of attribute-unit rows: the unit-space density minus the
    /// `sum_j ln K_j` Jacobian of the scaling.
    pub fn log_prob_raw(&self, x_raw: &Tensor) -> Result<Vec<f64>> {
        if !self.unit_scale {
            return self.log_prob(x_raw);
        }
        check_width("flow_log_prob", x_raw, self.arch.dim)?;
        let cards = self.schema.cardinalities();
        let d = cards.len();
        let unit: Vec<f64> = x_raw
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / cards[i % d] as f64)
            .collect();
        let log_k: f64 = cards.iter().map(|&k| (k as f64).ln()).sum();
        Ok(self
            .log_prob(&Tensor::new(x_raw.shape().to_vec(), unit)?)?
            .into_iter()
            .map(|lp| lp - log_k)
            .collect())
    }

    /// Trace column: `nll`.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<LossTrace> {
        let mut adam = AdamState::new(cfg.adam, &self.params);
        let arch = &self.arch;
        let params = &mut self.params;
        fit(data, cfg, seed, &["nll"], |batch, _, info| {
            adam.config.lr = info.lr;
            let mut tape = Tape::new();
            let loss = arch.nll_tape(&mut tape, params, batch)?;
            let v = tape.value(loss).item()?;
            if v.is_finite() {
                let g = tape.backward(loss, params)?;
                adam_step(params, &g, &mut adam)?;
            }
            Ok(vec![v])
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Flow)?;
        let hidden = ckpt.get("hidden")?;
        let arch = FlowArch::new(ckpt.schema.len(), ckpt.get("layers")?, hidden)?;
        ckpt.expect_params(&arch.param_shapes())?;
        Ok(Flow {
            arch,
            params: ckpt.params.clone(),
            schema: ckpt.schema.clone(),
            unit_scale: ckpt.get("unit_scale")?,
            hidden,
        })
    }
}

impl Generative for Flow {
    fn kind(&self) -> ModelKind {
        ModelKind::Flow
    }

    fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    fn unit_scale(&self) -> bool {
        self.unit_scale
    }

    fn sample_raw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let z = Tensor::randn(&[n, self.arch.dim], rng);
        Ok(self.arch.forward(&self.params, &z)?.0)
    }

    fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(ModelKind::Flow, self.schema.clone(), self.params.clone())
            .with("layers", self.arch.layers.len())
            .with("hidden", self.hidden);
        super::store_common(&mut c, self.unit_scale);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, random_probes};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn arch_with_params(dim: usize, layers: usize, hidden: usize, seed: u64) -> (FlowArch, ParamStore) {
        let arch = FlowArch::new(dim, layers, hidden).unwrap();
        let p = arch.init(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (arch, p)
    }

    #[test]
    fn masks_alternate() {
        let m = alternating_masks(4, 3);
        assert_eq!(m[0], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m[1], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(m[2], m[0]);
        assert!(CouplingLayer::new(0, vec![1.0, 1.0], 4).is_err());
        assert!(FlowArch::new(1, 2, 4).is_err());
    }

    #[test]
    fn constant_scale_and_shift_example() {
        let (arch, mut p) = arch_with_params(4, 1, 8, 0);
        let layer = &arch.layers[0];
        arch.zero_init(&mut p);
        let last = |net: &Mlp| format!("{}.bias", net.layer_prefix(net.num_layers() - 1));
        p.get_mut(&last(&layer.s)).unwrap().data_mut().fill(0.5f64.atanh());
        p.get_mut(&last(&layer.t)).unwrap().data_mut().fill(1.0);
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, ld) = layer.forward(&p, &x).unwrap();
        let e = 0.5f64.exp();
        let want = [1.0, 2.0, 3.0 * e + 1.0, 4.0 * e + 1.0];
        for (a, b) in y.data().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(y.data()[2], 5.946_163_812_100_385, epsilon = 1e-12);
        assert_abs_diff_eq!(ld[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_nets_are_identity() {
        let (arch, mut p) = arch_with_params(4, 3, 8, 1);
        arch.zero_init(&mut p);
        let x = Tensor::randn(&[5, 4], &mut ChaCha8Rng::seed_from_u64(2));
        let (y, ld) = arch.forward(&p, &x).unwrap();
        assert_eq!(y, x);
        assert!(ld.iter().all(|&v| v == 0.0));
        assert_eq!(arch.inverse(&p, &x).unwrap(), x);
    }

    #[test]
    fn base_density_values() {
        let (arch, p) = arch_with_params(4, 0, 8, 0);
        let x = Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let lp = arch.log_prob(&p, &x).unwrap();
        assert_abs_diff_eq!(lp[0], -3.675_754_132_818_691, epsilon = 1e-12);
        assert_abs_diff_eq!(lp[1], -4.175_754_132_818_691, epsilon = 1e-12);
    }

    fn det(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut d = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            if p != c {
                a.swap(p, c);
                d = -d;
            }
            d *= a[c][c];
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        d
    }

    #[test]
    fn log_prob_matches_numerical_jacobian() {
        let (arch, p) = arch_with_params(4, 4, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = Tensor::randn(&[1, 4], &mut rng);
            let h = 1e-5;
            let mut jac = vec![vec![0.0; 4]; 4];
            for j in 0..4 {
                let mut xp = x.clone();
                xp.data_mut()[j] += h;
                let mut xm = x.clone();
                xm.data_mut()[j] -= h;
                let (zp, zm) = (arch.inverse(&p, &xp).unwrap(), arch.inverse(&p, &xm).unwrap());
                for i in 0..4 {
                    jac[i][j] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
                }
            }
            let z = arch.inverse(&p, &x).unwrap();
            let base: f64 = z.data().iter().map(|v| -0.5 * v * v).sum::<f64>() - 2.0 * LN_2PI;
            let want = base + det(jac).abs().ln();
            let got = arch.log_prob(&p, &x).unwrap()[0];
            assert!(((got - want) / want.abs()).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn density_integrates_to_one_in_two_dims() {
        let (arch, p) = arch_with_params(2, 4, 8, 3);
        let (lo, hi, step) = (-12.0, 12.0, 0.04);
        let n = ((hi - lo) / step) as usize;
        let mut total = 0.0;
        for i in 0..n {
            let xs: Vec<f64> = (0..n)
                .flat_map(|j| [lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step])
                .collect();
            let lp = arch.log_prob(&p, &Tensor::new(vec![n, 2], xs).unwrap()).unwrap();
            total += lp.iter().map(|v| v.exp()).sum::<f64>() * step * step;
        }
        assert!((total - 1.0).abs() < 0.02, "mass {total}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let (arch, p) = arch_with_params(4, 3, 10, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform(&[6, 4], 0.0, 1.0, &mut rng);
        let probes = random_probes(&p, 40, &mut rng);
        let r = grad_check_params(|t, s| arch.nll_tape(t, s, &x), &p, &probes, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn identity_is_optimal_for_base_samples() {
        let schema = TabularSchema::default_hts();
        let mut flow = Flow::new(schema, &FlowConfig { hidden: 32, ..FlowConfig::default() }, 0).unwrap();
        flow.zero_init();
        let x = Tensor::randn(&[512, 4], &mut ChaCha8Rng::seed_from_u64(1));
        let nll = |f: &Flow| -f.log_prob(&x).unwrap().iter().sum::<f64>() / 512.0;
        let before = nll(&flow);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 128,
            ..TrainConfig::default()
        };
        flow.train(&TrainData::Fixed(x.clone()), &cfg, 0).unwrap();
        let after = nll(&flow);
        assert!(((after - before) / before).abs() < 0.05, "{before} -> {after}");
    }

    #[test]
    fn identity_flow_samples_floor_of_normal_draws() {
        let schema = TabularSchema::default_hts();
        let mut flow = Flow::new(schema.clone(), &FlowConfig { hidden: 8, ..FlowConfig::default() }, 0).unwrap();
        flow.zero_init();
        let s = flow.sample(30, 4).unwrap();
        let z = Tensor::randn(&[30, 4], &mut substream(4, stream::SAMPLE));
        assert_eq!(s, super::super::to_table(&schema, true, &z).unwrap());
        assert_eq!(flow.sample(0, 4).unwrap().n_rows(), 0);
        let back = Flow::from_checkpoint(&flow.to_checkpoint()).unwrap();
        assert_eq!(back.sample(30, 4).unwrap(), s);
    }

    #[test]
    fn raw_density_subtracts_log_cardinalities() {
        let schema = TabularSchema::default_hts();
        let flow = Flow::new(schema, &FlowConfig { hidden: 8, ..FlowConfig::default() }, 2).unwrap();
        let raw = Tensor::new(vec![1, 4], vec![2.5, 4.5, 4.5, 2.5]).unwrap();
        let unit = Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap();
        let diff = flow.log_prob(&unit).unwrap()[0] - flow.log_prob_raw(&raw).unwrap()[0];
        assert_abs_diff_eq!(diff, (5.0f64 * 9.0 * 9.0 * 5.0).ln(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_and_logdet_bound(seed in any::<u64>(), layers in 1usize..=8) {
            let (arch, p) = arch_with_params(4, layers, 12, seed);
            let x = Tensor::randn(&[16, 4], &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).map(|v| 3.0 * v);
            let (y, _) = arch.forward(&p, &x).unwrap();
            prop_assert!(arch.inverse(&p, &y).unwrap().max_abs_diff(&x) < 1e-9);
            prop_assert!(arch.forward(&p, &arch.inverse(&p, &x).unwrap()).unwrap().0.max_abs_diff(&x) < 1e-9);
            for layer in &arch.layers {
                let (_, ld) = layer.forward(&p, &x).unwrap();
                let unmasked = layer.mask.iter().filter(|&&m| m == 0.0).count() as f64;
                prop_assert!(ld.iter().all(|v| v.abs() < unmasked));
            }
        }
    }
}
