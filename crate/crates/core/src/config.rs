//! Run configuration for the command-line tools: `key = value` files with
//! per-model defaults, strict key checking and a resolved echo.

use std::path::{Path, PathBuf};

use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::kv::{self, parse_value};
use crate::models::ddpm::{Ddpm, DdpmConfig};
use crate::models::flow::{Flow, FlowConfig};
use crate::models::gan::{Gan, GanConfig};
use crate::models::ncsn::{Ncsn, NcsnConfig};
use crate::models::vae::{Vae, VaeConfig};
use crate::models::{Generative, LossTrace, TrainConfig, TrainData};
use crate::tabular::DiscreteTable;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelHyper {
    Vae(VaeConfig),
    Gan(GanConfig),
    Flow(FlowConfig),
    Ddpm(DdpmConfig),
    Ncsn(NcsnConfig),
}

impl ModelHyper {
    pub fn defaults(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Vae => ModelHyper::Vae(VaeConfig::default()),
            ModelKind::Gan => ModelHyper::Gan(GanConfig::default()),
            ModelKind::Flow => ModelHyper::Flow(FlowConfig::default()),
            ModelKind::Ddpm => ModelHyper::Ddpm(DdpmConfig::default()),
            ModelKind::Ncsn => ModelHyper::Ncsn(NcsnConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelHyper::Vae(_) => ModelKind::Vae,
            ModelHyper::Gan(_) => ModelKind::Gan,
            ModelHyper::Flow(_) => ModelKind::Flow,
            ModelHyper::Ddpm(_) => ModelKind::Ddpm,
            ModelHyper::Ncsn(_) => ModelKind::Ncsn,
        }
    }

    /// Sets `key` if this model knows it; `Ok(false)` otherwise.
    fn apply(&mut self, k: &str, v: &str) -> Result<bool> {
        match self {
            ModelHyper::Vae(c) => match k {
                "hidden" => c.hidden = parse_value(k, v)?,
                "latent" => c.latent = parse_value(k, v)?,
                "reduction" => c.reduction = v.parse()?,
                "kl_weight" => c.kl_weight = parse_value(k, v)?,
                "unit_scale" => c.unit_scale = parse_value(k, v)?,
                _ => return Ok(false),
            },
            ModelHyper::Gan(c) => match k {
                "hidden" => c.hidden = parse_value(k, v)?,
                "noise_dim" => c.noise_dim = parse_value(k, v)?,
                "d_steps" => c.d_steps = parse_value(k, v)?,
                "entropy_rows" => c.entropy_rows = parse_value(k, v)?,
                "unit_scale" => c.unit_scale = parse_value(k, v)?,
                _ => return Ok(false),
            },
            ModelHyper::Flow(c) => match k {
                "layers" => c.layers = parse_value(k, v)?,
                "hidden" => c.hidden = parse_value(k, v)?,
                "unit_scale" => c.unit_scale = parse_value(k, v)?,
                _ => return Ok(false),
            },
            ModelHyper::Ddpm(c) => match k {
                "steps" => c.steps = parse_value(k, v)?,
                "beta_start" => c.beta_start = parse_value(k, v)?,
                "beta_end" => c.beta_end = parse_value(k, v)?,
                "hidden" => c.hidden = parse_value(k, v)?,
                "embed_dim" => c.embed_dim = parse_value(k, v)?,
                "variance" => c.variance = v.parse()?,
                "unit_scale" => c.unit_scale = parse_value(k, v)?,
                _ => return Ok(false),
            },
            ModelHyper::Ncsn(c) => match k {
                "sigma_max" => c.sigma_max = parse_value(k, v)?,
                "sigma_min" => c.sigma_min = parse_value(k, v)?,
                "levels" => c.levels = parse_value(k, v)?,
                "hidden" => c.hidden = parse_value(k, v)?,
                "weighting" => c.weighting = parse_value(k, v)?,
                "selection" => c.selection = v.parse()?,
                "eps0" => c.eps0 = parse_value(k, v)?,
                "steps_per_level" => c.steps_per_level = parse_value(k, v)?,
                "unit_scale" => c.unit_scale = parse_value(k, v)?,
                _ => return Ok(false),
            },
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        match self {
            ModelHyper::Vae(c) => vec![
                ("hidden", c.hidden.to_string()),
                ("latent", c.latent.to_string()),
                ("reduction", c.reduction.to_string()),
                ("kl_weight", c.kl_weight.to_string()),
                ("unit_scale", c.unit_scale.to_string()),
            ],
            ModelHyper::Gan(c) => vec![
                ("hidden", c.hidden.to_string()),
                ("noise_dim", c.noise_dim.to_string()),
                ("d_steps", c.d_steps.to_string()),
                ("entropy_rows", c.entropy_rows.to_string()),
                ("unit_scale", c.unit_scale.to_string()),
            ],
            ModelHyper::Flow(c) => vec![
                ("layers", c.layers.to_string()),
                ("hidden", c.hidden.to_string()),
                ("unit_scale", c.unit_scale.to_string()),
            ],
            ModelHyper::Ddpm(c) => vec![
                ("steps", c.steps.to_string()),
                ("beta_start", c.beta_start.to_string()),
                ("beta_end", c.beta_end.to_string()),
                ("hidden", c.hidden.to_string()),
                ("embed_dim", c.embed_dim.to_string()),
                ("variance", c.variance.to_string()),
                ("unit_scale", c.unit_scale.to_string()),
            ],
            ModelHyper::Ncsn(c) => vec![
                ("sigma_max", c.sigma_max.to_string()),
                ("sigma_min", c.sigma_min.to_string()),
                ("levels", c.levels.to_string()),
                ("hidden", c.hidden.to_string()),
                ("weighting", c.weighting.to_string()),
                ("selection", c.selection.to_string()),
                ("eps0", c.eps0.to_string()),
                ("steps_per_level", c.steps_per_level.to_string()),
                ("unit_scale", c.unit_scale.to_string()),
            ],
        }
    }

    fn unit_scale(&self) -> bool {
        match self {
            ModelHyper::Vae(c) => c.unit_scale,
            ModelHyper::Gan(c) => c.unit_scale,
            ModelHyper::Flow(c) => c.unit_scale,
            ModelHyper::Ddpm(c) => c.unit_scale,
            ModelHyper::Ncsn(c) => c.unit_scale,
        }
    }
}

/// Everything a `train` run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelHyper,
}

impl RunConfig {
    pub fn new(kind: ModelKind) -> Self {
        RunConfig {
            data: None,
            schema: None,
            out: None,
            seed: 0,
            train: TrainConfig::default(),
            model: ModelHyper::defaults(kind),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    /// Applies `pairs` over the defaults of `kind`. A `model` key, if
    /// present, must agree with `kind`; unknown keys are errors.
    pub fn from_pairs(kind: ModelKind, pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::new(kind);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match k {
            "model" => {
                let kind: ModelKind = v.parse()?;
                if kind != self.kind() {
                    return Err(Error::Config(format!(
                        "config names model `{kind}` but the run is `{}`",
                        self.kind()
                    )));
                }
            }
            "data" => self.data = Some(PathBuf::from(v)),
            "schema" => self.schema = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "seed" => self.seed = parse_value(k, v)?,
            "epochs" => t.epochs = parse_value(k, v)?,
            "batch_size" => t.batch_size = parse_value(k, v)?,
            "lr" => t.adam.lr = parse_value(k, v)?,
            "beta1" => t.adam.beta1 = parse_value(k, v)?,
            "beta2" => t.adam.beta2 = parse_value(k, v)?,
            "adam_eps" => t.adam.eps = parse_value(k, v)?,
            "dequant" => t.dequant = v.parse()?,
            "shuffle" => t.shuffle = parse_value(k, v)?,
            "lr_decay" => t.lr_decay = parse_value(k, v)?,
            _ => {
                if !self.model.apply(k, v)? {
                    return Err(Error::Config(format!(
                        "unknown key `{k}` for model `{}`",
                        self.kind()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(kind: ModelKind, path: &Path) -> Result<Self> {
        RunConfig::from_pairs(kind, &kv::read_kv(path)?)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let mut out: Vec<(&str, String)> = vec![("model", self.kind().to_string())];
        for (k, p) in [("data", &self.data), ("schema", &self.schema), ("out", &self.out)] {
            if let Some(p) = p {
                out.push((k, p.display().to_string()));
            }
        }
        out.extend([
            ("seed", self.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("dequant", t.dequant.to_string()),
            ("shuffle", t.shuffle.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
        ]);
        out.extend(self.model.pairs());
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn resolved_text(&self) -> String {
        let pairs = self.resolved();
        kv::format_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Builds the model from `seed`, trains it on `table` and returns its
    /// checkpoint with the loss trace.
    pub fn train_on(&self, table: &DiscreteTable) -> Result<(ModelCheckpoint, LossTrace)> {
        let schema = table.schema().clone();
        let data = TrainData::from_table(table, self.train.dequant, self.model.unit_scale(), self.seed)?;
        let (seed, tc) = (self.seed, &self.train);
        Ok(match &self.model {
            ModelHyper::Vae(c) => {
                let mut m = Vae::new(schema, c, seed)?;
                let trace = m.train(&data, tc, seed)?;
                (m.to_checkpoint(), trace)
            }
            ModelHyper::Gan(c) => {
                let mut m = Gan::new(schema, c, seed)?;
                let trace = m.train(&data, tc, seed)?;
                (m.to_checkpoint(), trace)
            }
            ModelHyper::Flow(c) => {
                let mut m = Flow::new(schema, c, seed)?;
                let trace = m.train(&data, tc, seed)?;
                (m.to_checkpoint(), trace)
            }
            ModelHyper::Ddpm(c) => {
                let mut m = Ddpm::new(schema, c, seed)?;
                let trace = m.train(&data, tc, seed)?;
                (m.to_checkpoint(), trace)
            }
            ModelHyper::Ncsn(c) => {
                let mut m = Ncsn::new(schema, c, seed)?;
                let trace = m.train(&data, tc, seed)?;
                (m.to_checkpoint(), trace)
            }
        })
    }
}
