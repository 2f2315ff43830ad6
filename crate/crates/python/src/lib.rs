//! Python module `persum`: text cleaning, tokenization, attention, the
//! summarization model and the embedding-matching score.

use std::path::PathBuf;

use ndarray::Array2;
use persum_core::attention::{sliding_window_attention, AttentionSpec};
use persum_core::bertscore::{self, EmbeddingSource, EmbeddingTable};
use persum_core::checkpoint::{load_parameters, save_parameters};
use persum_core::corpus::{assign_split as core_assign_split, SplitRatios};
use persum_core::generate::{beam_search_with, greedy_search, ModelScorer};
use persum_core::model::{encode_document, example_nll, Example};
use persum_core::normalize::{self as norm, NormalizationRules, RawDocument};
use persum_core::params::{ModelConfig, Parameters};
use persum_core::tokenizer::{train_bpe, EncodeOptions, Encoding, TokenizerModel, EOS_ID, SOS_ID};
use persum_core::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Character mapping plus whitespace and blank-line cleanup.
#[pyfunction]
fn normalize_text(text: &str) -> String {
    norm::normalize_lines(&norm::normalize_characters(text, &NormalizationRules::default()))
}

#[pyfunction]
fn persian_ratio(text: &str) -> f64 {
    norm::persian_ratio(text)
}

/// Full document cleaning. Returns the cleaned fields, or raises
/// `ValueError` naming the rejection reason.
#[pyfunction]
#[pyo3(signature = (id, body, summary, title=None, min_line_tokens=None))]
fn normalize_document<'py>(
    py: Python<'py>,
    id: String,
    body: String,
    summary: String,
    title: Option<String>,
    min_line_tokens: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut rules = NormalizationRules::default();
    if let Some(m) = min_line_tokens {
        rules.min_line_tokens = m;
    }
    let doc = RawDocument { id, title, body, summary, category: None };
    let n = norm::normalize_document(&doc, &rules).map_err(|r| PyValueError::new_err(r.reason.to_string()))?;
    let out = PyDict::new(py);
    out.set_item("id", n.document.id)?;
    out.set_item("title", n.document.title)?;
    out.set_item("body", n.document.body)?;
    out.set_item("summary", n.document.summary)?;
    out.set_item("front_matter_removed", n.front_matter.removed_lines)?;
    Ok(out)
}

/// Split name ("train", "validation" or "test") for a document id.
#[pyfunction]
#[pyo3(signature = (id, seed=0, ratios=(0.9, 0.05, 0.05)))]
fn assign_split(id: &str, seed: u64, ratios: (f64, f64, f64)) -> PyResult<&'static str> {
    let ratios = SplitRatios::new(ratios.0, ratios.1, ratios.2).map_err(py_err)?;
    Ok(core_assign_split(id, seed, &ratios).name())
}

#[pyclass(name = "Tokenizer", module = "persum")]
struct PyTokenizer {
    inner: TokenizerModel,
}

#[pymethods]
impl PyTokenizer {
    #[staticmethod]
    fn train(texts: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        let inner = train_bpe(texts.iter().map(String::as_str), vocab_size).map_err(py_err)?;
        Ok(PyTokenizer { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyTokenizer { inner: TokenizerModel::load(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_owned)
    }

    /// `SOS ... EOS` ids, truncated to `max_len` when given.
    #[pyo3(signature = (text, max_len=None))]
    fn encode(&self, text: &str, max_len: Option<usize>) -> Vec<u32> {
        self.inner.encode(text, &EncodeOptions::new(max_len.unwrap_or(usize::MAX))).ids
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }
}

/// Windowed self-attention over row-major `q`, `k`, `v` (lists of rows).
#[pyfunction(name = "sliding_window_attention")]
#[pyo3(signature = (q, k, v, window, global_positions=Vec::new()))]
fn sliding_window_attention_py(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    window: usize,
    global_positions: Vec<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let (q, k, v) = (to_array(q)?, to_array(k)?, to_array(v)?);
    let spec = AttentionSpec::new(q.nrows(), window).with_globals(&global_positions);
    let out = sliding_window_attention(q.view(), k.view(), v.view(), &spec).map_err(py_err)?;
    Ok(to_rows(&out))
}

#[pyfunction]
fn f1(precision: f64, recall: f64) -> f64 {
    bertscore::f1(precision, recall)
}

/// Precision, recall and F1 of two id sequences under `embeddings`
/// (token id to vector).
#[pyfunction]
fn score_pair(candidate: Vec<u32>, reference: Vec<u32>, embeddings: Vec<(u32, Vec<f64>)>) -> PyResult<(f64, f64, f64)> {
    let dim = embeddings.first().map_or(0, |(_, v)| v.len());
    let table = EmbeddingTable::new(dim, EmbeddingSource::ExternalFile, embeddings.into_iter().map(|(id, v)| (id, v.into())))
        .map_err(py_err)?;
    let r = bertscore::score_pair(&candidate, &reference, &table).map_err(py_err)?;
    Ok((r.precision, r.recall, r.f1))
}

#[pyclass(name = "Model", module = "persum")]
struct PyModel {
    config: ModelConfig,
    params: Parameters,
}

fn source_encoding(ids: Vec<u32>) -> Encoding {
    Encoding::from_ids(ids, &[0])
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        vocab_size, d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=256, window=64,
        max_enc_len=8192, max_dec_len=512, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_enc_layers: usize,
        n_dec_layers: usize,
        d_ff: usize,
        window: usize,
        max_enc_len: usize,
        max_dec_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_enc_layers,
            n_dec_layers,
            d_ff,
            window,
            max_enc_len,
            max_dec_len,
            dropout: 0.0,
        };
        config.validate().map_err(py_err)?;
        let params = Parameters::init(&config, seed);
        Ok(PyModel { config, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, params) = load_parameters(&path).map_err(py_err)?;
        Ok(PyModel { config, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_parameters(&path, &self.config, &self.params).map_err(py_err)
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Final encoder states, one row per source position.
    fn encode(&self, source: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let out = encode_document(&self.params, &self.config, &source_encoding(source)).map_err(py_err)?;
        Ok(to_rows(&out.states))
    }

    /// Mean next-token negative log-likelihood of `target` (which must
    /// start with SOS and end with EOS) given `source`.
    fn loss(&self, source: Vec<u32>, target: Vec<u32>) -> PyResult<f64> {
        if target.first() != Some(&SOS_ID) || target.last() != Some(&EOS_ID) || target.len() < 2 {
            return Err(PyValueError::new_err("target must be SOS ... EOS"));
        }
        let example = Example { source: source_encoding(source), target: Encoding::from_ids(target, &[]) };
        let (nll, n) = example_nll(&self.params, &self.config, &example).map_err(py_err)?;
        Ok(nll / n as f64)
    }

    /// Generated ids (SOS excluded) and their cumulative log-probability.
    #[pyo3(signature = (source, beam_size=2, max_len=512, length_penalty=0.0))]
    fn generate(&self, py: Python<'_>, source: Vec<u32>, beam_size: usize, max_len: usize, length_penalty: f64) -> PyResult<(Vec<u32>, f64)> {
        if beam_size == 0 || max_len == 0 {
            return Err(PyValueError::new_err("beam_size and max_len must be at least 1"));
        }
        let max_len = max_len.min(self.config.max_dec_len);
        py.detach(|| {
            let scorer = ModelScorer::new(&self.params, &self.config, &source_encoding(source))?;
            let hyp = if beam_size == 1 && length_penalty == 0.0 {
                greedy_search(&scorer, max_len)?
            } else {
                beam_search_with(&scorer, beam_size, max_len, length_penalty)?
            };
            Ok((hyp.tokens, hyp.score))
        })
        .map_err(py_err)
    }
}

#[pymodule]
fn persum(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_document, m)?)?;
    m.add_function(wrap_pyfunction!(persian_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(assign_split, m)?)?;
    m.add_function(wrap_pyfunction!(sliding_window_attention_py, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(score_pair, m)?)?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyModel>()?;
    m.add("PAD_ID", persum_core::tokenizer::PAD_ID)?;
    m.add("SOS_ID", SOS_ID)?;
    m.add("EOS_ID", EOS_ID)?;
    Ok(())
}
