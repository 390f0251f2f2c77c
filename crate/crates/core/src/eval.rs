//! Marginal and pairwise comparison of real and generated tables, plus the
//! closed-form mixture score used as a score-matching oracle.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tabular::{DiscreteTable, TabularSchema};

/// Per-attribute category frequencies.
pub fn marginal_hist(table: &DiscreteTable) -> Result<Vec<Vec<f64>>> {
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::Empty("marginal_hist on an empty table".into()));
    }
    let cards = table.schema().cardinalities();
    let mut counts: Vec<Vec<usize>> = cards.iter().map(|&k| vec![0; k]).collect();
    for row in table.rows() {
        for (j, &c) in row.iter().enumerate() {
            counts[j][c] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / n as f64).collect())
        .collect())
}

/// Joint frequencies of columns `a` and `b`, flattened as `i * K_b + j`.
pub fn pair_hist(table: &DiscreteTable, a: usize, b: usize) -> Result<Vec<f64>> {
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::Empty("pair_hist on an empty table".into()));
    }
    let cards = table.schema().cardinalities();
    if a >= cards.len() || b >= cards.len() {
        return Err(Error::InvalidArgument(format!("column pair ({a}, {b}) out of range")));
    }
    let mut counts = vec![0usize; cards[a] * cards[b]];
    for row in table.rows() {
        counts[row[a] * cards[b] + row[b]] += 1;
    }
    Ok(counts.into_iter().map(|k| k as f64 / n as f64).collect())
}

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{which} has invalid entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{which} sums to {s}, not 1")));
    }
    Ok(())
}

/// `0.5 * sum |p_k - q_k|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixture1d {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::InvalidArgument("mixture needs matching non-empty vectors".into()));
        }
        check_distribution(&weights, "mixture weights")?;
        if stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mixture needs finite means and stds > 0".into()));
        }
        Ok(GaussianMixture1d { weights, means, stds })
    }

    /// Log density of the mixture convolved with `N(0, sigma^2)`.
    pub fn log_density(&self, x: f64, sigma: f64) -> f64 {
        let terms: Vec<f64> = self.components(sigma).map(|(w, m, var)| {
            w.ln() - 0.5 * ((x - m).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
        })
        .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    fn components(&self, sigma: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(move |((&w, &m), &s)| (w, m, s * s + sigma * sigma))
    }

    pub fn std_dev(&self) -> f64 {
        let mean: f64 = self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum();
        let second: f64 = self
            .components(0.0)
            .map(|(w, m, var)| w * (var + m * m))
            .sum();
        (second - mean * mean).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = self.weights.len() - 1;
                for (i, w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                self.means[k] + self.stds[k] * z
            })
            .collect()
    }
}

/// `d/dx log sum_k w_k N(x; mu_k, s_k^2 + sigma^2)`.
pub fn analytic_perturbed_score(x: f64, mixture: &GaussianMixture1d, sigma: f64) -> f64 {
    let parts: Vec<(f64, f64)> = mixture
        .components(sigma)
        .map(|(w, m, var)| {
            let logp = w.ln() - 0.5 * ((x - m).powi(2) / var + var.ln());
            (logp, -(x - m) / var)
        })
        .collect();
    let top = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (logp, grad) in parts {
        let r = (logp - top).exp();
        num += r * grad;
        den += r;
    }
    num / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    pub name: String,
    pub real: Vec<f64>,
    pub synth: Vec<f64>,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalReport {
    pub n_real: usize,
    pub n_synth: usize,
    pub attributes: Vec<AttributeReport>,
    /// `(a, b, joint tv)` over all attribute pairs `a < b`.
    pub pairs: Vec<(String, String, f64)>,
}

impl MarginalReport {
    pub fn max_tv(&self) -> f64 {
        self.attributes.iter().map(|a| a.tv).fold(0.0, f64::max)
    }

    pub fn tv(&self, name: &str) -> Option<f64> {
        self.attributes.iter().find(|a| a.name == name).map(|a| a.tv)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_real = {}", self.n_real);
        let _ = writeln!(s, "n_synth = {}", self.n_synth);
        for a in &self.attributes {
            let _ = writeln!(s, "tv.{} = {:.16e}", a.name, a.tv);
        }
        for (a, b, tv) in &self.pairs {
            let _ = writeln!(s, "tvpair.{a}.{b} = {tv:.16e}");
        }
        s
    }

    pub fn hist_csv(&self, attr: &AttributeReport) -> String {
        let mut s = String::from("category,real_freq,synth_freq\n");
        for (k, (r, q)) in attr.real.iter().zip(&attr.synth).enumerate() {
            let _ = writeln!(s, "{k},{r:.16e},{q:.16e}");
        }
        s
    }

    /// Writes `report.txt` and one `hist_<attr>.csv` per attribute.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.txt");
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))?;
        for a in &self.attributes {
            let p = dir.join(format!("hist_{}.csv", a.name));
            std::fs::write(&p, self.hist_csv(a)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn evaluate(real: &DiscreteTable, synth: &DiscreteTable) -> Result<MarginalReport> {
    if real.schema() != synth.schema() {
        return Err(Error::Schema("real and synthetic tables have different schemas".into()));
    }
    let schema: &TabularSchema = real.schema();
    let hr = marginal_hist(real)?;
    let hs = marginal_hist(synth)?;
    let mut attributes = Vec::with_capacity(hr.len());
    for ((name, r), s) in schema.names().into_iter().zip(hr).zip(hs) {
        let tv = tv_distance(&r, &s)?;
        attributes.push(AttributeReport {
            name: name.to_string(),
            real: r,
            synth: s,
            tv,
        });
    }
    let names = schema.names();
    let mut pairs = Vec::new();
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            let tv = tv_distance(&pair_hist(real, a, b)?, &pair_hist(synth, a, b)?)?;
            pairs.push((names[a].to_string(), names[b].to_string(), tv));
        }
    }
    Ok(MarginalReport {
        n_real: real.n_rows(),
        n_synth: synth.n_rows(),
        attributes,
        pairs,
    })
}
