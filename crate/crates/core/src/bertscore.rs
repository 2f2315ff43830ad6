//! Precision, recall and F1 by greedy maximum cosine matching of token
//! embeddings.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use ndarray::{Array1, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::encode_document;
use crate::params::{ModelConfig, Parameters};
use crate::tokenizer::{Encoding, TokenizerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    ModelEncoder,
    ExternalFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreReport {
    pub fn new(precision: f64, recall: f64) -> Self {
        ScoreReport { precision, recall, f1: f1(precision, recall) }
    }
}

/// Unit-normalized vectors per token id, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    source: EmbeddingSource,
    vectors: HashMap<u32, Array1<f64>>,
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

impl EmbeddingTable {
    /// Builds a table from raw vectors, normalizing each. Zero vectors are
    /// rejected.
    pub fn new(dim: usize, source: EmbeddingSource, raw: impl IntoIterator<Item = (u32, Array1<f64>)>) -> Result<Self> {
        let mut vectors = HashMap::new();
        for (id, v) in raw {
            if v.len() != dim {
                return Err(Error::Shape(format!("token {id}: vector of length {}, table dimension {dim}", v.len())));
            }
            let n = norm(v.view());
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::ZeroNorm);
            }
            vectors.insert(id, v / n);
        }
        Ok(EmbeddingTable { dim, source, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: u32) -> Result<ArrayView1<'_, f64>> {
        self.vectors.get(&id).map(|v| v.view()).ok_or(Error::MissingEmbedding(id))
    }

    /// Mean final-layer encoder state of every token id occurring in `docs`.
    pub fn from_encoder<'a>(
        params: &Parameters,
        config: &ModelConfig,
        docs: impl IntoParallelIterator<Item = &'a Encoding>,
    ) -> Result<Self> {
        let per_doc: Vec<HashMap<u32, (Array1<f64>, usize)>> = docs
            .into_par_iter()
            .map(|enc| {
                let out = encode_document(params, config, enc)?;
                let mut sums: HashMap<u32, (Array1<f64>, usize)> = HashMap::new();
                for (row, &id) in out.states.axis_iter(Axis(0)).zip(enc.real_ids()) {
                    let entry = sums.entry(id).or_insert_with(|| (Array1::zeros(config.d_model), 0));
                    entry.0 += &row;
                    entry.1 += 1;
                }
                Ok(sums)
            })
            .collect::<Result<_>>()?;
        let mut totals: HashMap<u32, (Array1<f64>, usize)> = HashMap::new();
        for sums in per_doc {
            for (id, (v, c)) in sums {
                let entry = totals.entry(id).or_insert_with(|| (Array1::zeros(config.d_model), 0));
                entry.0 += &v;
                entry.1 += c;
            }
        }
        let mut ids: Vec<u32> = totals.keys().copied().collect();
        ids.sort_unstable();
        let raw = ids.into_iter().map(|id| {
            let (v, c) = totals.remove(&id).expect("id taken from keys");
            (id, v / c as f64)
        });
        EmbeddingTable::new(config.d_model, EmbeddingSource::ModelEncoder, raw)
    }

    /// Reads `dim` on the first line, then `token<TAB>floats` per line.
    /// Tokens missing from `tokenizer` are skipped.
    pub fn from_reader<R: BufRead>(reader: R, tokenizer: &TokenizerModel) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let dim = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::parse(1, e.to_string()))?;
                line.trim().parse::<usize>().map_err(|_| Error::parse(1, format!("expected a dimension, found `{line}`")))?
            }
            None => return Err(Error::Empty("embedding file")),
        };
        let mut raw = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (token, values) = line.split_once('\t').ok_or_else(|| Error::parse(lineno, "missing tab after token"))?;
            let values: Vec<f64> = values
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| Error::parse(lineno, format!("bad number `{x}`"))))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::parse(lineno, format!("{} values, expected {dim}", values.len())));
            }
            if let Some(id) = tokenizer.token_id(token) {
                raw.push((id, Array1::from(values)));
            }
        }
        EmbeddingTable::new(dim, EmbeddingSource::ExternalFile, raw)
    }

    pub fn load(path: &Path, tokenizer: &TokenizerModel) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        EmbeddingTable::from_reader(std::io::BufReader::new(file), tokenizer)
    }
}

pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(u.dot(&v) / (nu * nv))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Ids that carry text; special tokens are dropped before matching.
fn content(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&id| id > crate::tokenizer::UNK_ID).collect()
}

fn mean_best(from: &[ArrayView1<f64>], to: &[ArrayView1<f64>]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| a.dot(b)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / from.len() as f64
}

pub fn score_pair(candidate: &[u32], reference: &[u32], emb: &EmbeddingTable) -> Result<ScoreReport> {
    let cand = content(candidate);
    let refs = content(reference);
    if cand.is_empty() {
        return Err(Error::Empty("candidate"));
    }
    if refs.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let cv: Vec<_> = cand.iter().map(|&id| emb.get(id)).collect::<Result<_>>()?;
    let rv: Vec<_> = refs.iter().map(|&id| emb.get(id)).collect::<Result<_>>()?;
    Ok(ScoreReport::new(mean_best(&cv, &rv), mean_best(&rv, &cv)))
}

/// Mean precision and mean recall over pairs; F1 is their harmonic mean.
pub fn score_corpus(pairs: &[(Vec<u32>, Vec<u32>)], emb: &EmbeddingTable) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair list"));
    }
    let reports: Vec<ScoreReport> = pairs.par_iter().map(|(c, r)| score_pair(c, r, emb)).collect::<Result<_>>()?;
    aggregate(&reports)
}

pub fn aggregate(reports: &[ScoreReport]) -> Result<ScoreReport> {
    if reports.is_empty() {
        return Err(Error::Empty("pair list"));
    }
    let n = reports.len() as f64;
    let p = reports.iter().map(|r| r.precision).sum::<f64>() / n;
    let r = reports.iter().map(|r| r.recall).sum::<f64>() / n;
    Ok(ScoreReport::new(p, r))
}
