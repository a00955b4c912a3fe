//! Synthetic click data with planted feature interactions, and its CSV file form.
//!
//! Every field carries a scalar "value" per sample: categorical fields map each
//! category to a fixed N(0, 1) draw, dense fields use their first component.
//! The click logit is `bias + Σ coef · Π value(field)` over the planted terms.
//!
//! # File format
//!
//! Comma-separated, one header row, one sample per line:
//!
//! ```text
//! group,c0:50,c1:20,d0.0,d0.1,prob,label
//! 3,17,4,0.25,-1.5,0.71,1
//! ```
//!
//! Categorical columns are named `c<field>:<cardinality>` and hold indices.
//! Dense columns are named `d<field>.<component>`. Cells are plain numbers, so
//! no quoting or escaping is ever needed. Floats are written in the shortest
//! form that parses back to the same `f64`, which makes the round trip exact.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, DomainFeatures, FieldSpec};
use crate::tensor::{sigmoid, Matrix};

/// One planted interaction: `coef · Π value(f)` for `f` in `fields`.
/// Field indices run over categorical fields first, then dense fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTerm {
    pub fields: Vec<usize>,
    pub coef: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub groups: usize,
    pub cardinalities: Vec<usize>,
    pub dense_dims: Vec<usize>,
    pub terms: Vec<PlantedTerm>,
    pub bias: f64,
    /// Probability of flipping each drawn label.
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn field_count(&self) -> usize {
        self.cardinalities.len() + self.dense_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.samples == 0 || self.groups == 0 {
            return cfg("samples and groups must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return cfg(format!("label noise {} must lie in [0, 0.5)", self.label_noise));
        }
        if self.cardinalities.contains(&0) || self.dense_dims.contains(&0) {
            return cfg("field cardinalities and dense dims must be positive".into());
        }
        for (k, t) in self.terms.iter().enumerate() {
            if t.fields.is_empty() {
                return cfg(format!("planted term {k} references no fields"));
            }
            if let Some(f) = t.fields.iter().find(|&&f| f >= self.field_count()) {
                return cfg(format!("planted term {k} references field {f}, only {} exist", self.field_count()));
            }
        }
        Ok(())
    }
}

/// Draws `pairs` pairwise and `triples` three-way terms over distinct random
/// fields with coefficients `±scale`.
pub fn random_terms(fields: usize, pairs: usize, triples: usize, scale: f64, seed: u64) -> Vec<PlantedTerm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_7e57);
    let all: Vec<usize> = (0..fields).collect();
    let mut out = Vec::new();
    for (count, arity) in [(pairs, 2), (triples, 3)] {
        if fields < arity {
            continue;
        }
        for _ in 0..count {
            let mut f: Vec<usize> = all.choose_multiple(&mut rng, arity).copied().collect();
            f.sort_unstable();
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            out.push(PlantedTerm { fields: f, coef: sign * scale });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cardinalities: Vec<usize>,
    pub dense_dims: Vec<usize>,
    pub groups: Vec<u32>,
    /// `categorical[s][f]`.
    pub categorical: Vec<Vec<usize>>,
    /// All dense fields of sample `s`, concatenated.
    pub dense: Vec<Vec<f64>>,
    /// Noise-free click probability of each sample.
    pub probs: Vec<f64>,
    pub labels: Vec<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values: Vec<Vec<f64>> = spec
        .cardinalities
        .iter()
        .map(|&c| (0..c).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let dense_total: usize = spec.dense_dims.iter().sum();
    let n_cat = spec.cardinalities.len();

    let mut data = Dataset {
        cardinalities: spec.cardinalities.clone(),
        dense_dims: spec.dense_dims.clone(),
        groups: Vec::with_capacity(spec.samples),
        categorical: Vec::with_capacity(spec.samples),
        dense: Vec::with_capacity(spec.samples),
        probs: Vec::with_capacity(spec.samples),
        labels: Vec::with_capacity(spec.samples),
    };
    let mut field_value = vec![0.0; spec.field_count()];
    for _ in 0..spec.samples {
        let group = rng.gen_range(0..spec.groups) as u32;
        let cats: Vec<usize> = spec.cardinalities.iter().map(|&c| rng.gen_range(0..c)).collect();
        let dense: Vec<f64> = (0..dense_total).map(|_| rng.sample(StandardNormal)).collect();
        for (f, &c) in cats.iter().enumerate() {
            field_value[f] = values[f][c];
        }
        let mut offset = 0;
        for (k, &d) in spec.dense_dims.iter().enumerate() {
            field_value[n_cat + k] = dense[offset];
            offset += d;
        }
        let logit = spec.bias
            + spec
                .terms
                .iter()
                .map(|t| t.coef * t.fields.iter().map(|&f| field_value[f]).product::<f64>())
                .sum::<f64>();
        let p = sigmoid(logit);
        let mut label = rng.gen_bool(p);
        if spec.label_noise > 0.0 && rng.gen_bool(spec.label_noise) {
            label = !label;
        }
        data.groups.push(group);
        data.categorical.push(cats);
        data.dense.push(dense);
        data.probs.push(p);
        data.labels.push(if label { 1.0 } else { 0.0 });
    }
    Ok(data)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_dims.iter().sum()
    }

    /// Model input fields: categorical (each with `embed_dim`) then dense.
    pub fn field_specs(&self, embed_dim: usize) -> Vec<FieldSpec> {
        let cats = self.cardinalities.iter().enumerate().map(|(f, &c)| FieldSpec::Categorical {
            name: format!("c{f}"),
            cardinality: c,
            embed_dim,
        });
        let dense = self
            .dense_dims
            .iter()
            .enumerate()
            .map(|(f, &d)| FieldSpec::Dense { name: format!("d{f}"), dim: d });
        cats.chain(dense).collect()
    }

    pub fn features(&self, i: usize) -> DomainFeatures {
        DomainFeatures { categorical: self.categorical[i].clone(), dense: self.dense[i].clone() }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let fields = self.cardinalities.len();
        let categorical = (0..fields).map(|f| idx.iter().map(|&i| self.categorical[i][f]).collect()).collect();
        let d = self.dense_dim();
        let mut dense = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            dense.extend_from_slice(&self.dense[i]);
        }
        Batch { categorical, dense: Matrix::new(idx.len(), d, dense).expect("dense rows share one width") }
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Splits sample indices into (train, held-out), holding out
    /// `round(frac · size)` samples of every group. Deterministic in `seed`.
    pub fn split_by_group(&self, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = self.groups.iter().copied().max().map_or(0, |g| g as usize + 1);
        let mut members = vec![Vec::new(); groups];
        for (i, &g) in self.groups.iter().enumerate() {
            members[g as usize].push(i);
        }
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for mut m in members {
            m.shuffle(&mut rng);
            let k = (m.len() as f64 * frac).round() as usize;
            held.extend_from_slice(&m[..k]);
            train.extend_from_slice(&m[k..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (train, held)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["group".to_string()];
        header.extend(self.cardinalities.iter().enumerate().map(|(f, c)| format!("c{f}:{c}")));
        for (f, &d) in self.dense_dims.iter().enumerate() {
            header.extend((0..d).map(|j| format!("d{f}.{j}")));
        }
        header.extend(["prob".to_string(), "label".to_string()]);
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = vec![self.groups[i].to_string()];
            row.extend(self.categorical[i].iter().map(usize::to_string));
            row.extend(self.dense[i].iter().map(f64::to_string));
            row.push(self.probs[i].to_string());
            row.push(self.labels[i].to_string());
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let header = input.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"group") || cols.len() < 3 || cols[cols.len() - 2..] != ["prob", "label"] {
            return Err(Error::Parse("header must start with 'group' and end with 'prob,label'".into()));
        }
        let mut cardinalities = Vec::new();
        let mut dense_dims: Vec<usize> = Vec::new();
        for name in &cols[1..cols.len() - 2] {
            if let Some(rest) = name.strip_prefix('c') {
                let (f, c) = rest.split_once(':').ok_or_else(|| Error::Parse(format!("bad column '{name}'")))?;
                if !dense_dims.is_empty() || parse_num::<usize>(f)? != cardinalities.len() {
                    return Err(Error::Parse(format!("categorical column '{name}' out of order")));
                }
                cardinalities.push(parse_num(c)?);
            } else if let Some(rest) = name.strip_prefix('d') {
                let (f, j) = rest.split_once('.').ok_or_else(|| Error::Parse(format!("bad column '{name}'")))?;
                let (f, j): (usize, usize) = (parse_num(f)?, parse_num(j)?);
                match (f.cmp(&dense_dims.len()), j) {
                    (std::cmp::Ordering::Equal, 0) => dense_dims.push(1),
                    (std::cmp::Ordering::Less, _) if f + 1 == dense_dims.len() && j == dense_dims[f] => dense_dims[f] += 1,
                    _ => return Err(Error::Parse(format!("dense column '{name}' out of order"))),
                }
            } else {
                return Err(Error::Parse(format!("unknown column '{name}'")));
            }
        }
        let n_cat = cardinalities.len();
        let mut data = Dataset {
            cardinalities,
            dense_dims,
            groups: Vec::new(),
            categorical: Vec::new(),
            dense: Vec::new(),
            probs: Vec::new(),
            labels: Vec::new(),
        };
        for (line, rec) in input.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let cells: Vec<&str> = rec.iter().collect();
            if cells.len() != cols.len() {
                return Err(Error::Parse(format!("row {} has {} cells, expected {}", line + 1, cells.len(), cols.len())));
            }
            data.groups.push(parse_num(cells[0])?);
            let cats: Vec<usize> = cells[1..1 + n_cat].iter().map(|c| parse_num(c)).collect::<Result<_>>()?;
            if let Some((f, v)) = cats.iter().enumerate().find(|(f, &v)| v >= data.cardinalities[*f]) {
                return Err(Error::Parse(format!("row {}: index {v} exceeds cardinality of c{f}", line + 1)));
            }
            data.categorical.push(cats);
            data.dense
                .push(cells[1 + n_cat..cells.len() - 2].iter().map(|c| parse_num(c)).collect::<Result<_>>()?);
            data.probs.push(parse_num(cells[cells.len() - 2])?);
            let label: f64 = parse_num(cells[cells.len() - 1])?;
            if label != 0.0 && label != 1.0 {
                return Err(Error::Parse(format!("row {}: label must be 0 or 1", line + 1)));
            }
            data.labels.push(label);
        }
        Ok(data)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("cannot parse '{s}' as a number")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
