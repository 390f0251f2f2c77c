//! Plain-text model checkpoints.
//!
//! ```text
//! DGM-CHECKPOINT 1
//! kind = flow
//! attr.0.name = origin_type
//! attr.0.cardinality = 5
//! hp.layers = 6
//! tensors = 24
//! ---
//! tensor flow.0.s.0.weight 2 4 128
//! 1.2345678901234567e-1 ...
//! end
//! ```
//!
//! Values are written with 17 significant digits so a load restores every
//! f64 bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::tabular::TabularSchema;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &str = "DGM-CHECKPOINT 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Vae,
    Gan,
    Flow,
    Ddpm,
    Ncsn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Vae,
        ModelKind::Gan,
        ModelKind::Flow,
        ModelKind::Ddpm,
        ModelKind::Ncsn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Gan => "gan",
            ModelKind::Flow => "flow",
            ModelKind::Ddpm => "ddpm",
            ModelKind::Ncsn => "ncsn",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub kind: ModelKind,
    pub schema: TabularSchema,
    /// Hyperparameters and schedule settings, in insertion order.
    pub hyper: Vec<(String, String)>,
    pub params: ParamStore,
}

impl ModelCheckpoint {
    pub fn new(kind: ModelKind, schema: TabularSchema, params: ParamStore) -> Self {
        ModelCheckpoint {
            kind,
            schema,
            hyper: Vec::new(),
            params,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.hyper.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.hyper.push((key.to_string(), value)),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn get_raw(&self, key: &str) -> Result<&str> {
        self.hyper
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing header key `hp.{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_raw(key)?;
        raw.parse()
            .map_err(|_| Error::CheckpointIntegrity(format!("bad value `{raw}` for `hp.{key}`")))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CheckpointIntegrity(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Fails unless every name is present with the given shape.
    pub fn expect_params(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            match self.params.get(name) {
                None => {
                    return Err(Error::CheckpointIntegrity(format!("missing parameter `{name}`")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointIntegrity(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        if self.params.len() != expected.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "{} parameters stored, model defines {}",
                self.params.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        let _ = writeln!(s, "kind = {}", self.kind);
        for (k, v) in self.schema.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in &self.hyper {
            let _ = writeln!(s, "hp.{k} = {v}");
        }
        let _ = writeln!(s, "tensors = {}", self.params.len());
        s.push_str("---\n");
        for (name, t) in self.params.iter() {
            let _ = write!(s, "tensor {name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            let mut first = true;
            for v in t.data() {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l == MAGIC => {}
            Some(l) => return Err(Error::CheckpointFormat(format!("bad magic line `{l}`"))),
            None => return Err(Error::CheckpointFormat("empty file".into())),
        }
        let mut header = String::new();
        loop {
            match lines.next() {
                Some("---") => break,
                Some(l) => {
                    header.push_str(l);
                    header.push('\n');
                }
                None => return Err(Error::CheckpointTruncated("header never terminated".into())),
            }
        }
        let pairs = kv::parse_kv(&header).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        let mut kind = None;
        let mut count = None;
        let mut schema_pairs = Vec::new();
        let mut hyper = Vec::new();
        for (k, v) in pairs {
            if k == "kind" {
                kind = Some(v.parse::<ModelKind>().map_err(|e| Error::CheckpointFormat(e.to_string()))?);
            } else if k == "tensors" {
                count = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::CheckpointFormat(format!("bad tensor count `{v}`")))?,
                );
            } else if let Some(rest) = k.strip_prefix("hp.") {
                hyper.push((rest.to_string(), v));
            } else if k.starts_with("attr.") {
                schema_pairs.push((k, v));
            } else {
                return Err(Error::CheckpointFormat(format!("unknown header key `{k}`")));
            }
        }
        let kind = kind.ok_or_else(|| Error::CheckpointFormat("missing `kind`".into()))?;
        let count = count.ok_or_else(|| Error::CheckpointFormat("missing `tensors`".into()))?;
        let schema = TabularSchema::from_kv(&schema_pairs).map_err(|e| Error::CheckpointFormat(e.to_string()))?;

        let mut params = ParamStore::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| Error::CheckpointTruncated(format!("body ends after {} tensors", params.len())))?;
            if line == "end" {
                break;
            }
            let mut head = line.split_whitespace();
            if head.next() != Some("tensor") {
                return Err(Error::CheckpointFormat(format!("expected tensor record, got `{line}`")));
            }
            let name = head
                .next()
                .ok_or_else(|| Error::CheckpointFormat("tensor record without name".into()))?;
            let nums: Vec<usize> = head
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::CheckpointFormat(format!("bad dims for `{name}`")))?;
            let (&rank, dims) = nums
                .split_first()
                .ok_or_else(|| Error::CheckpointFormat(format!("missing rank for `{name}`")))?;
            if dims.len() != rank {
                return Err(Error::CheckpointIntegrity(format!(
                    "`{name}` declares rank {rank} but lists {} dims",
                    dims.len()
                )));
            }
            let body = lines
                .next()
                .ok_or_else(|| Error::CheckpointTruncated(format!("values of `{name}` missing")))?;
            let values: Vec<f64> = body
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::CheckpointFormat(format!("bad value in `{name}`")))?;
            let expected: usize = dims.iter().product();
            if values.len() != expected {
                return Err(Error::CheckpointIntegrity(format!(
                    "`{name}` has {} values for shape {dims:?}",
                    values.len()
                )));
            }
            let t = Tensor::new(dims.to_vec(), values).map_err(|e| Error::CheckpointIntegrity(e.to_string()))?;
            params
                .insert(name, t)
                .map_err(|e| Error::CheckpointIntegrity(e.to_string()))?;
        }
        if params.len() != count {
            return Err(Error::CheckpointIntegrity(format!(
                "header announces {count} tensors, body holds {}",
                params.len()
            )));
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::CheckpointIntegrity("content after `end`".into()));
        }
        Ok(ModelCheckpoint {
            kind,
            schema,
            hyper,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelCheckpoint::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_ckpt() -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamStore::new();
        params.init_linear("net.0", 4, 3, &mut rng).unwrap();
        params.insert("scalar", Tensor::scalar(-0.1)).unwrap();
        ModelCheckpoint::new(ModelKind::Flow, TabularSchema::default_hts(), params)
            .with("layers", 6)
            .with("unit_scale", true)
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        let c = sample_ckpt();
        let text = c.to_text();
        let back = ModelCheckpoint::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.get::<usize>("layers").unwrap(), 6);
    }

    #[test]
    fn distinct_errors() {
        let text = sample_ckpt().to_text();
        let bad_magic = text.replacen("DGM-CHECKPOINT 1", "NOPE", 1);
        assert!(matches!(ModelCheckpoint::from_text(&bad_magic), Err(Error::CheckpointFormat(_))));

        let cut = &text[..text.len() - "end\n".len()];
        assert!(matches!(ModelCheckpoint::from_text(cut), Err(Error::CheckpointTruncated(_))));

        let miscount = text.replacen("tensors = 3", "tensors = 4", 1);
        assert!(matches!(ModelCheckpoint::from_text(&miscount), Err(Error::CheckpointIntegrity(_))));

        let short = text.replacen("tensor net.0.bias 1 3", "tensor net.0.bias 1 4", 1);
        assert!(matches!(ModelCheckpoint::from_text(&short), Err(Error::CheckpointIntegrity(_))));
    }

    #[test]
    fn expect_params_checks_names_and_shapes() {
        let c = sample_ckpt();
        let ok = vec![
            ("net.0.weight".to_string(), vec![4, 3]),
            ("net.0.bias".to_string(), vec![3]),
            ("scalar".to_string(), vec![]),
        ];
        c.expect_params(&ok).unwrap();
        let mut wrong = ok.clone();
        wrong[0].1 = vec![3, 4];
        assert!(c.expect_params(&wrong).is_err());
        assert!(c.expect_params(&ok[..2]).is_err());
    }

    proptest! {
        #[test]
        fn any_finite_value_survives(vals in prop::collection::vec(-1e300f64..1e300, 1..20)) {
            let mut params = ParamStore::new();
            params.insert("w", Tensor::vector(vals.clone()).unwrap()).unwrap();
            let c = ModelCheckpoint::new(ModelKind::Gan, TabularSchema::default_hts(), params);
            let back = ModelCheckpoint::from_text(&c.to_text()).unwrap();
            let got = back.params.get("w").unwrap().data().to_vec();
            prop_assert!(got.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
