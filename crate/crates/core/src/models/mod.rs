//! The five generative model families and their shared training plumbing.

pub mod ddpm;
pub mod flow;
pub mod gan;
pub mod ncsn;
pub mod vae;

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::tabular::{quantize_values, DequantMode, Dequantizer, DiscreteTable, TabularSchema};
use crate::tensor::{AdamConfig, Tensor};

/// Independent generator for one purpose (`stream`) under a user seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const DEQUANT: u64 = 2;
    pub const NOISE: u64 = 4;
    pub const SAMPLE: u64 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dequant: DequantMode,
    pub shuffle: bool,
    /// Learning-rate multiplier reached by the last epoch; the rate decays
    /// geometrically per epoch from `adam.lr`. 1 keeps it constant.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            adam: AdamConfig::default(),
            dequant: DequantMode::Once,
            shuffle: true,
            lr_decay: 1.0,
        }
    }
}

/// Per-epoch means of each loss component.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossTrace {
    pub fn new(columns: &[&str]) -> Self {
        LossTrace {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// First column of the first and last epoch.
    pub fn first_last(&self) -> Option<(f64, f64)> {
        Some((self.rows.first()?[0], self.rows.last()?[0]))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,{}", self.columns.join(","))?;
        for (e, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{},{}", e + 1, vals.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Rows a trainer sees each epoch: a fixed matrix, or a categorical table
/// passed through dequantization (and optionally unit scaling).
#[derive(Debug, Clone)]
pub enum TrainData {
    Fixed(Tensor),
    Table(Dequantizer),
}

impl TrainData {
    pub fn from_table(table: &DiscreteTable, mode: DequantMode, unit_scale: bool, seed: u64) -> Result<Self> {
        if table.n_rows() == 0 {
            return Err(Error::Empty("training table has no rows".into()));
        }
        let mut rng = substream(seed, stream::DEQUANT);
        Ok(TrainData::Table(Dequantizer::new(table.clone(), mode, unit_scale, &mut rng)?))
    }

    pub fn dim(&self, rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(self.epoch(rng)?.cols())
    }

    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Result<Cow<'_, Tensor>> {
        match self {
            TrainData::Fixed(t) => Ok(Cow::Borrowed(t)),
            TrainData::Table(dq) => Ok(Cow::Owned(dq.epoch(rng)?.to_tensor()?)),
        }
    }
}

/// Where a batch sits in the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub last_in_epoch: bool,
    /// Learning rate for this epoch.
    pub lr: f64,
}

/// Shared epoch/batch loop. `step` runs one optimizer update on a batch and
/// returns its loss components; the first component is the training loss.
pub fn fit<F>(data: &TrainData, cfg: &TrainConfig, seed: u64, columns: &[&str], mut step: F) -> Result<LossTrace>
where
    F: FnMut(&Tensor, &mut ChaCha8Rng, StepInfo) -> Result<Vec<f64>>,
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay.is_finite()) {
        return Err(Error::Config(format!("lr_decay must be > 0, got {}", cfg.lr_decay)));
    }
    let mut dq_rng = substream(seed, stream::DEQUANT ^ 0x100);
    let mut noise = substream(seed, stream::NOISE);
    let mut trace = LossTrace::new(columns);
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let rows = data.epoch(&mut dq_rng)?;
        let shuffle_seed = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let blocks = crate::tabular::batch_indices(rows.rows(), cfg.batch_size, cfg.shuffle, shuffle_seed)?;
        let lr = cfg.adam.lr * cfg.lr_decay.powf(epoch as f64 / cfg.epochs.max(2).saturating_sub(1) as f64);
        let mut sums = vec![0.0; columns.len()];
        let mut weight = 0usize;
        for (bi, block) in blocks.iter().enumerate() {
            global += 1;
            let batch = gather_rows(&rows, block)?;
            let info = StepInfo {
                epoch,
                step: global,
                last_in_epoch: bi + 1 == blocks.len(),
                lr,
            };
            let losses = step(&batch, &mut noise, info)?;
            if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: global, loss: *bad });
            }
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l * block.len() as f64;
            }
            weight += block.len();
        }
        trace.rows.push(sums.into_iter().map(|s| s / weight as f64).collect());
    }
    Ok(trace)
}

pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Maps model-space rows back to category indices: unscale when the model
/// was trained in unit scale, then floor and clamp.
pub fn to_table(schema: &TabularSchema, unit_scale: bool, raw: &Tensor) -> Result<DiscreteTable> {
    let cards = schema.cardinalities();
    let d = cards.len();
    if raw.rank() != 2 || raw.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "to_table",
            left: raw.shape().to_vec(),
            right: vec![d],
        });
    }
    let values: Vec<f64> = raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if unit_scale { v * cards[i % d] as f64 } else { v })
        .collect();
    quantize_values(schema, &values)
}

pub(crate) fn check_width(op: &'static str, x: &Tensor, width: usize) -> Result<()> {
    if x.rank() != 2 || x.cols() != width {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![width],
        });
    }
    Ok(())
}

/// Any trained model that can draw rows.
pub trait Generative {
    fn kind(&self) -> ModelKind;
    fn schema(&self) -> &TabularSchema;
    fn unit_scale(&self) -> bool;
    /// `n > 0` model-space rows.
    fn sample_raw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
    fn to_checkpoint(&self) -> ModelCheckpoint;

    fn sample(&self, n: usize, seed: u64) -> Result<DiscreteTable> {
        if n == 0 {
            return Ok(DiscreteTable::empty(self.schema().clone()));
        }
        let raw = self.sample_raw(n, &mut substream(seed, stream::SAMPLE))?;
        to_table(self.schema(), self.unit_scale(), &raw)
    }
}

pub fn load_model(ckpt: &ModelCheckpoint) -> Result<Box<dyn Generative>> {
    Ok(match ckpt.kind {
        ModelKind::Vae => Box::new(vae::Vae::from_checkpoint(ckpt)?),
        ModelKind::Gan => Box::new(gan::Gan::from_checkpoint(ckpt)?),
        ModelKind::Flow => Box::new(flow::Flow::from_checkpoint(ckpt)?),
        ModelKind::Ddpm => Box::new(ddpm::Ddpm::from_checkpoint(ckpt)?),
        ModelKind::Ncsn => Box::new(ncsn::Ncsn::from_checkpoint(ckpt)?),
    })
}

/// Samples `n` rows from any checkpoint.
pub fn sample_checkpoint(ckpt: &ModelCheckpoint, n: usize, seed: u64) -> Result<DiscreteTable> {
    load_model(ckpt)?.sample(n, seed)
}

pub(crate) fn store_common(ckpt: &mut ModelCheckpoint, unit_scale: bool) {
    ckpt.set("unit_scale", unit_scale);
}
