//! Categorical tables: schema, CSV ingestion, dequantization to continuous
//! values, floor requantization, unit scaling and batching.

mod fixture;

pub use fixture::HtsGroundTruth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub cardinality: usize,
}

/// Ordered categorical attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TabularSchema {
    attributes: Vec<Attribute>,
}

impl TabularSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Schema("schema has no attributes".into()));
        }
        for (i, a) in attributes.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(',') || a.name.contains(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid attribute name `{}`", a.name)));
            }
            if a.cardinality < 2 {
                return Err(Error::Schema(format!(
                    "attribute `{}` needs cardinality >= 2, got {}",
                    a.name, a.cardinality
                )));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(TabularSchema { attributes })
    }

    pub fn from_pairs(pairs: &[(&str, usize)]) -> Result<Self> {
        TabularSchema::new(
            pairs
                .iter()
                .map(|&(n, k)| Attribute {
                    name: n.to_string(),
                    cardinality: k,
                })
                .collect(),
        )
    }

    /// Origin, activity, mode and destination types of a travel-survey trip.
    pub fn default_hts() -> Self {
        TabularSchema::from_pairs(&[
            ("origin_type", 5),
            ("activity_type", 9),
            ("mode_type", 9),
            ("destination_type", 5),
        ])
        .expect("valid default schema")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.cardinality).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    /// Reads `attr.<i>.name` / `attr.<i>.cardinality` pairs.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut names: Vec<Option<String>> = Vec::new();
        let mut cards: Vec<Option<usize>> = Vec::new();
        for (k, v) in pairs {
            let parts: Vec<&str> = k.split('.').collect();
            let [ "attr", idx, field ] = parts.as_slice() else {
                return Err(Error::Schema(format!("unknown schema key `{k}`")));
            };
            let i: usize = idx
                .parse()
                .map_err(|_| Error::Schema(format!("bad attribute index in `{k}`")))?;
            if i >= 1024 {
                return Err(Error::Schema(format!("attribute index {i} too large")));
            }
            if names.len() <= i {
                names.resize(i + 1, None);
                cards.resize(i + 1, None);
            }
            match *field {
                "name" => names[i] = Some(v.clone()),
                "cardinality" => {
                    cards[i] = Some(
                        v.parse()
                            .map_err(|_| Error::Schema(format!("bad cardinality `{v}` for `{k}`")))?,
                    )
                }
                _ => return Err(Error::Schema(format!("unknown schema key `{k}`"))),
            }
        }
        let attrs = names
            .into_iter()
            .zip(cards)
            .enumerate()
            .map(|(i, (n, c))| match (n, c) {
                (Some(name), Some(cardinality)) => Ok(Attribute { name, cardinality }),
                _ => Err(Error::Schema(format!("attribute {i} is incomplete"))),
            })
            .collect::<Result<Vec<_>>>()?;
        TabularSchema::new(attrs)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        self.attributes
            .iter()
            .enumerate()
            .flat_map(|(i, a)| {
                [
                    (format!("attr.{i}.name"), a.name.clone()),
                    (format!("attr.{i}.cardinality"), a.cardinality.to_string()),
                ]
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        TabularSchema::from_kv(&kv::read_kv(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs = self.to_kv();
        let text = kv::format_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Integer category indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteTable {
    schema: TabularSchema,
    cells: Vec<usize>,
}

impl DiscreteTable {
    pub fn new(schema: TabularSchema, cells: Vec<usize>) -> Result<Self> {
        let d = schema.len();
        if cells.len() % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} cells do not fill rows of width {d}",
                cells.len()
            )));
        }
        let cards = schema.cardinalities();
        for (i, &c) in cells.iter().enumerate() {
            if c >= cards[i % d] {
                return Err(Error::Cell {
                    row: i / d + 1,
                    col: i % d + 1,
                    msg: format!("value {c} out of range 0..{}", cards[i % d]),
                });
            }
        }
        Ok(DiscreteTable { schema, cells })
    }

    pub fn from_rows(schema: TabularSchema, rows: &[Vec<usize>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != schema.len()) {
            return Err(Error::InvalidArgument("row width differs from schema".into()));
        }
        DiscreteTable::new(schema, rows.iter().flatten().copied().collect())
    }

    pub fn empty(schema: TabularSchema) -> Self {
        DiscreteTable {
            schema,
            cells: Vec::new(),
        }
    }

    pub fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len() / self.schema.len()
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let d = self.n_cols();
        &self.cells[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.cells.chunks(self.n_cols())
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Reads a headered CSV whose header names match the schema in order.
    pub fn load_csv(path: &Path, schema: &TabularSchema) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, schema: &TabularSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != schema.names() {
            return Err(Error::Schema(format!(
                "header {header:?} does not match schema {:?}",
                schema.names()
            )));
        }
        let cards = schema.cardinalities();
        let mut cells = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != cards.len() {
                return Err(Error::Cell {
                    row: r + 1,
                    col: rec.len().min(cards.len()) + 1,
                    msg: format!("expected {} columns, got {}", cards.len(), rec.len()),
                });
            }
            for (c, field) in rec.iter().enumerate() {
                let v: i64 = field.parse().map_err(|_| Error::Cell {
                    row: r + 1,
                    col: c + 1,
                    msg: format!("`{field}` is not an integer"),
                })?;
                if v < 0 || v as usize >= cards[c] {
                    return Err(Error::Cell {
                        row: r + 1,
                        col: c + 1,
                        msg: format!("value {v} out of range 0..{}", cards[c]),
                    });
                }
                cells.push(v as usize);
            }
        }
        if cells.is_empty() {
            return Err(Error::Empty("csv has a header but no rows".into()));
        }
        Ok(DiscreteTable {
            schema: schema.clone(),
            cells,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.schema.names().join(","))?;
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequantMode {
    /// Noise drawn once and frozen for the whole run.
    Once,
    /// Fresh noise for every epoch.
    PerEpoch,
}

impl std::str::FromStr for DequantMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "once" => Ok(DequantMode::Once),
            "per-epoch" | "per_epoch" => Ok(DequantMode::PerEpoch),
            _ => Err(Error::Config(format!("unknown dequantization mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for DequantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DequantMode::Once => "once",
            DequantMode::PerEpoch => "per-epoch",
        })
    }
}

/// Real-valued rows, either in attribute units (`[0, K_j)` after
/// dequantization) or unit-scaled (`[0, 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTable {
    schema: TabularSchema,
    cells: Vec<f64>,
    normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    ToUnit,
    FromUnit,
}

impl ContinuousTable {
    pub fn new(schema: TabularSchema, cells: Vec<f64>, normalized: bool) -> Result<Self> {
        if cells.len() % schema.len() != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} cells do not fill rows of width {}",
                cells.len(),
                schema.len()
            )));
        }
        Ok(ContinuousTable {
            schema,
            cells,
            normalized,
        })
    }

    /// Wraps a `[rows, D]` tensor of model outputs.
    pub fn from_tensor(schema: TabularSchema, t: &Tensor, normalized: bool) -> Result<Self> {
        if t.rank() != 2 || t.cols() != schema.len() {
            return Err(Error::ShapeMismatch {
                op: "from_tensor",
                left: t.shape().to_vec(),
                right: vec![schema.len()],
            });
        }
        ContinuousTable::new(schema, t.data().to_vec(), normalized)
    }

    pub fn schema(&self) -> &TabularSchema {
        &self.schema
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len() / self.schema.len()
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.cells[i * d..(i + 1) * d]
    }

    /// Selected rows as a `[indices.len(), D]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.n_cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.n_rows(), self.n_cols()], self.cells.clone())
    }

    pub fn batches(&self, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Tensor>> {
        batch_indices(self.n_rows(), batch_size, shuffle, seed)?
            .iter()
            .map(|b| self.gather(b))
            .collect()
    }
}

/// Adds `Uniform[0, 1)` noise to every cell.
pub fn dequantize<R: Rng + ?Sized>(table: &DiscreteTable, rng: &mut R) -> ContinuousTable {
    let cells = table
        .cells
        .iter()
        .map(|&c| c as f64 + rng.random::<f64>())
        .collect();
    ContinuousTable {
        schema: table.schema.clone(),
        cells,
        normalized: false,
    }
}

/// Training view of a discrete table: frozen noise or a fresh draw per epoch.
#[derive(Debug, Clone)]
pub struct Dequantizer {
    table: DiscreteTable,
    mode: DequantMode,
    unit_scale: bool,
    frozen: Option<ContinuousTable>,
}

impl Dequantizer {
    pub fn new<R: Rng + ?Sized>(
        table: DiscreteTable,
        mode: DequantMode,
        unit_scale: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dq = Dequantizer {
            table,
            mode,
            unit_scale,
            frozen: None,
        };
        if mode == DequantMode::Once {
            dq.frozen = Some(dq.draw(rng)?);
        }
        Ok(dq)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ContinuousTable> {
        let t = dequantize(&self.table, rng);
        if self.unit_scale {
            scale(&t, ScaleDirection::ToUnit)
        } else {
            Ok(t)
        }
    }

    pub fn mode(&self) -> DequantMode {
        self.mode
    }

    /// Table for the next epoch.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<std::borrow::Cow<'_, ContinuousTable>> {
        match &self.frozen {
            Some(t) => Ok(std::borrow::Cow::Borrowed(t)),
            None => Ok(std::borrow::Cow::Owned(self.draw(rng)?)),
        }
    }
}

/// `clamp(floor(v), 0, K_j - 1)` per cell of an attribute-unit table.
pub fn quantize(table: &ContinuousTable) -> Result<DiscreteTable> {
    if table.normalized {
        return Err(Error::InvalidArgument(
            "quantize expects attribute units; scale from unit first".into(),
        ));
    }
    quantize_values(&table.schema, &table.cells)
}

/// Floors and clamps raw row-major values (e.g. unscaled model outputs).
pub fn quantize_values(schema: &TabularSchema, values: &[f64]) -> Result<DiscreteTable> {
    let d = schema.len();
    if values.len() % d != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not fill rows of width {d}",
            values.len()
        )));
    }
    let cards = schema.cardinalities();
    let cells = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() {
                return Err(Error::Cell {
                    row: i / d + 1,
                    col: i % d + 1,
                    msg: format!("non-finite value {v}"),
                });
            }
            let k = cards[i % d];
            Ok(v.floor().clamp(0.0, (k - 1) as f64) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscreteTable {
        schema: schema.clone(),
        cells,
    })
}

/// Divides (to unit) or multiplies (from unit) column `j` by `K_j`.
pub fn scale(table: &ContinuousTable, direction: ScaleDirection) -> Result<ContinuousTable> {
    let to_unit = direction == ScaleDirection::ToUnit;
    if to_unit == table.normalized {
        return Err(Error::InvalidArgument(format!(
            "table is {} normalized",
            if table.normalized { "already" } else { "not" }
        )));
    }
    let cards = table.schema.cardinalities();
    let d = cards.len();
    let cells = table
        .cells
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = cards[i % d] as f64;
            if to_unit {
                v / k
            } else {
                v * k
            }
        })
        .collect();
    Ok(ContinuousTable {
        schema: table.schema.clone(),
        cells,
        normalized: to_unit,
    })
}

/// Row-index blocks covering `0..n_rows` once; the last block may be short.
pub fn batch_indices(n_rows: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if n_rows == 0 {
        return Err(Error::Empty("cannot batch an empty table".into()));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hts_rows(rows: &[[usize; 4]]) -> DiscreteTable {
        let rows: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
        DiscreteTable::from_rows(TabularSchema::default_hts(), &rows).unwrap()
    }

    const HEADER: &str = "origin_type,activity_type,mode_type,destination_type\n";

    #[test]
    fn csv_accepts_in_range_row() {
        let text = format!("{HEADER}0,1,4,2\n");
        let t = DiscreteTable::read_csv(text.as_bytes(), &TabularSchema::default_hts()).unwrap();
        assert_eq!(t.row(0), &[0, 1, 4, 2]);
    }

    #[test]
    fn csv_range_error_names_row_and_column() {
        let text = format!("{HEADER}7,0,0,0\n");
        let err = DiscreteTable::read_csv(text.as_bytes(), &TabularSchema::default_hts()).unwrap_err();
        assert!(matches!(err, Error::Cell { row: 1, col: 1, .. }), "{err}");
    }

    #[test]
    fn csv_errors() {
        let schema = TabularSchema::default_hts();
        let bad_header = "a,b,c,d\n0,0,0,0\n";
        assert!(matches!(
            DiscreteTable::read_csv(bad_header.as_bytes(), &schema),
            Err(Error::Schema(_))
        ));
        let non_int = format!("{HEADER}0,1.5,0,0\n");
        assert!(matches!(
            DiscreteTable::read_csv(non_int.as_bytes(), &schema),
            Err(Error::Cell { row: 1, col: 2, .. })
        ));
        assert!(matches!(
            DiscreteTable::read_csv(HEADER.as_bytes(), &schema),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let t = hts_rows(&[[0, 1, 2, 3], [4, 8, 8, 4]]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = DiscreteTable::read_csv(buf.as_slice(), t.schema()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn schema_kv_round_trip_and_errors() {
        let s = TabularSchema::default_hts();
        assert_eq!(TabularSchema::from_kv(&s.to_kv()).unwrap(), s);
        let bad = vec![("attr.0.name".to_string(), "a".to_string())];
        assert!(TabularSchema::from_kv(&bad).is_err());
        let unknown = vec![("color".to_string(), "red".to_string())];
        assert!(TabularSchema::from_kv(&unknown).is_err());
        assert!(TabularSchema::from_pairs(&[("a", 1)]).is_err());
        assert!(TabularSchema::from_pairs(&[("a", 2), ("a", 3)]).is_err());
    }

    #[test]
    fn dequantized_cell_stays_in_its_bin() {
        let t = hts_rows(&[[3, 3, 3, 3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let c = dequantize(&t, &mut rng);
            assert!(c.cells().iter().all(|&v| (3.0..4.0).contains(&v)));
        }
    }

    #[test]
    fn dequantize_once_is_seed_deterministic() {
        let t = hts_rows(&[[0, 1, 2, 3], [1, 2, 3, 4]]);
        let a = Dequantizer::new(t.clone(), DequantMode::Once, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Dequantizer::new(t, DequantMode::Once, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(*a.epoch(&mut r).unwrap(), *b.epoch(&mut r).unwrap());
        // frozen noise does not change between epochs
        assert_eq!(*a.epoch(&mut r).unwrap(), *a.epoch(&mut r).unwrap());
    }

    #[test]
    fn per_epoch_redraws() {
        let t = hts_rows(&[[0, 1, 2, 3]]);
        let dq = Dequantizer::new(t, DequantMode::PerEpoch, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let e1 = dq.epoch(&mut r).unwrap().into_owned();
        let e2 = dq.epoch(&mut r).unwrap().into_owned();
        assert_ne!(e1, e2);
        assert!(e1.is_normalized());
    }

    #[test]
    fn dequantized_zero_column_has_mean_one_half() {
        let schema = TabularSchema::from_pairs(&[("a", 2)]).unwrap();
        let n = 100_000;
        let t = DiscreteTable::new(schema, vec![0; n]).unwrap();
        let c = dequantize(&t, &mut ChaCha8Rng::seed_from_u64(9));
        let mean = c.cells().iter().sum::<f64>() / n as f64;
        // Uniform[0,1) has variance 1/12
        let se = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn quantize_floors_and_clamps() {
        let schema = TabularSchema::from_pairs(&[("a", 5), ("b", 9)]).unwrap();
        let q = quantize_values(&schema, &[3.999, 9.5, -0.2, 0.0]).unwrap();
        assert_eq!(q.cells(), &[3, 8, 0, 0]);
        let err = quantize_values(&schema, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Cell { row: 1, col: 2, .. }));
    }

    #[test]
    fn scale_examples() {
        let schema = TabularSchema::from_pairs(&[("a", 9), ("b", 5)]).unwrap();
        let t = ContinuousTable::new(schema, vec![4.5, 4.999], false).unwrap();
        let u = scale(&t, ScaleDirection::ToUnit).unwrap();
        assert_eq!(u.cells()[0], 0.5);
        assert!((u.cells()[1] - 0.9998).abs() < 1e-15);
        assert!(scale(&u, ScaleDirection::ToUnit).is_err());
        assert!(scale(&t, ScaleDirection::FromUnit).is_err());
        let back = scale(&u, ScaleDirection::FromUnit).unwrap();
        assert!(back.cells().iter().zip(t.cells()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(quantize(&u).is_err());
    }

    #[test]
    fn batching_examples() {
        let sizes: Vec<usize> = batch_indices(10, 4, false, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batch_indices(10, 64, true, 3).unwrap().len(), 1);
        assert_eq!(batch_indices(10, 3, true, 7).unwrap(), batch_indices(10, 3, true, 7).unwrap());
        assert!(batch_indices(0, 3, false, 0).is_err());
        assert!(batch_indices(5, 0, false, 0).is_err());
    }

    fn arb_table() -> impl Strategy<Value = DiscreteTable> {
        prop::collection::vec((0usize..5, 0usize..9, 0usize..9, 0usize..5), 1..40).prop_map(|rows| {
            let rows: Vec<Vec<usize>> = rows.into_iter().map(|(a, b, c, d)| vec![a, b, c, d]).collect();
            DiscreteTable::from_rows(TabularSchema::default_hts(), &rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn floor_inverts_dequantization(t in arb_table(), seed in any::<u64>()) {
            let c = dequantize(&t, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(quantize(&c).unwrap(), t.clone());
            let u = scale(&c, ScaleDirection::ToUnit).unwrap();
            prop_assert_eq!(u.n_rows(), t.n_rows());
            prop_assert_eq!(u.n_cols(), t.n_cols());
            prop_assert!(u.cells().iter().all(|&v| (0.0..1.0).contains(&v)));
        }

        #[test]
        fn batches_cover_every_row_once(n in 1usize..200, b in 1usize..50, seed in any::<u64>()) {
            let mut all: Vec<usize> = batch_indices(n, b, true, seed).unwrap().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
