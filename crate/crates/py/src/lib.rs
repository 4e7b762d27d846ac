//! Python bindings for the matched-embeddings cascade: metrics, CTC
//! utilities, the synthetic-data rule, and a small inference session
//! over a checkpoint or a fresh seeded initialization.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mecc_core::config::RunConfig;
use mecc_core::data::TranslationRule;
use mecc_core::graph::Graph;
use mecc_core::model::{Cascade, CascadeMode, Models};
use mecc_core::params::ParamStore;
use mecc_core::tensor::{Dtype, Tensor};

fn to_py_err(e: mecc_core::Error) -> PyErr {
    match e {
        mecc_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, dtype: Dtype) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(r * c);
    for row in &rows {
        if row.len() != c {
            return Err(PyValueError::new_err("ragged matrix"));
        }
        data.extend_from_slice(row);
    }
    Ok(Tensor::new(vec![r, c], data, dtype))
}

/// CTC negative log-likelihood of `labels` under per-frame `log_probs`
/// (T x (V+1), blank = column 0). Returns (loss, admissible).
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, bool)> {
    let t = matrix(log_probs, Dtype::F64)?;
    let g = Graph::inference(Dtype::F64);
    let lp = g.constant(t);
    let out = mecc_core::ctc::ctc_loss(&lp, &labels);
    Ok((out.loss.item(), out.admissible))
}

/// Greedy CTC reduction of per-frame labels (0 = blank). Returns
/// (tokens, last_frame_indices).
#[pyfunction]
fn ctc_reduce(frame_labels: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let r = mecc_core::ctc::ctc_reduce(&frame_labels);
    (r.tokens, r.frames)
}

/// Word error rate; None for an empty reference.
#[pyfunction]
fn wer(ref_tokens: Vec<usize>, hyp_tokens: Vec<usize>) -> Option<f64> {
    mecc_core::metrics::wer(&ref_tokens, &hyp_tokens)
}

/// Corpus-level token BLEU (percentage), single reference.
#[pyfunction]
fn corpus_bleu(refs: Vec<Vec<usize>>, hyps: Vec<Vec<usize>>) -> PyResult<f64> {
    mecc_core::metrics::corpus_bleu(&refs, &hyps).map_err(to_py_err)
}

/// The deterministic synthetic translation rule.
#[pyfunction]
fn translation_rule(src_tokens: Vec<usize>, rule: &str, offset: usize) -> PyResult<Vec<usize>> {
    let rule = match rule {
        "map_reverse" => TranslationRule::MapReverse,
        "map_shift" => TranslationRule::MapShift,
        other => return Err(PyValueError::new_err(format!("unknown rule {other:?}"))),
    };
    Ok(mecc_core::data::translation_rule(&src_tokens, rule, offset))
}

/// The builtin default run configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    mecc_core::config::DEFAULT_CONFIG_TOML.to_string()
}

/// Parameter table of a checkpoint: list of (name, shape, dtype,
/// frozen, sha256).
#[pyfunction]
fn inspect_checkpoint(path: &str) -> PyResult<Vec<(String, Vec<usize>, String, bool, String)>> {
    let ckpt = mecc_core::checkpoint::load(std::path::Path::new(path)).map_err(to_py_err)?;
    Ok(mecc_core::checkpoint::inspect(&ckpt)
        .into_iter()
        .map(|p| (p.name, p.shape, format!("{:?}", p.dtype), p.frozen, p.hash))
        .collect())
}

/// Inference session over the full cascade.
#[pyclass]
struct Session {
    store: ParamStore,
    models: Models,
    dtype: Dtype,
    beam: usize,
}

#[pymethods]
impl Session {
    /// Build from the default (or given) config TOML with randomly
    /// initialized parameters.
    #[staticmethod]
    #[pyo3(signature = (seed, config_toml=None))]
    fn fresh(seed: u64, config_toml: Option<&str>) -> PyResult<Session> {
        let run = match config_toml {
            Some(t) => RunConfig::from_toml(t).map_err(to_py_err)?,
            None => RunConfig::default_config(),
        };
        let dtype = run.model.dtype().map_err(to_py_err)?;
        let (store, models) = Models::init(&run.model, &run.data.synth, seed, dtype);
        Ok(Session { store, models, dtype, beam: run.model.beam_size })
    }

    /// Build from a combined checkpoint (asr.* + mt.* + exporter.*).
    #[staticmethod]
    #[pyo3(signature = (path, config_toml=None))]
    fn from_checkpoint(path: &str, config_toml: Option<&str>) -> PyResult<Session> {
        let mut s = Session::fresh(0, config_toml)?;
        let ckpt = mecc_core::checkpoint::load(std::path::Path::new(path)).map_err(to_py_err)?;
        for (name, param) in ckpt.params.iter() {
            if !s.store.contains(name) {
                return Err(PyValueError::new_err(format!("unknown parameter {name}")));
            }
            s.store.set_tensor(name, param.tensor.clone());
        }
        Ok(s)
    }

    /// Translate explicit source tokens through the MT model.
    fn translate_tokens(&self, src_tokens: Vec<usize>) -> Vec<usize> {
        let cascade = Cascade::new(&self.models, &self.store, self.beam, self.dtype);
        cascade.translate_tokens(&src_tokens)
    }

    /// Run the cascade on a frame matrix (T x frame_dim). Returns
    /// (reduced_tokens, frame_indices, translation).
    #[pyo3(signature = (frames, mode="matched", identity_exporter=false))]
    fn translate_frames(
        &self,
        frames: Vec<Vec<f64>>,
        mode: &str,
        identity_exporter: bool,
    ) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let mode = match mode {
            "one_best" => CascadeMode::OneBest,
            "matched" => CascadeMode::Matched,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let frames = matrix(frames, self.dtype)?;
        let mut cascade = Cascade::new(&self.models, &self.store, self.beam, self.dtype);
        cascade.identity_exporter = identity_exporter;
        let out = cascade.translate(&frames, mode);
        Ok((out.reduced.tokens, out.reduced.frames, out.translation))
    }

    /// Greedy ASR transcription of a frame matrix.
    fn transcribe(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let frames = matrix(frames, self.dtype)?;
        let (reduced, _) = self.models.asr.decode(&self.store, &frames, self.dtype);
        Ok(reduced.tokens)
    }
}

/// Generate one synthetic example under the default config. Returns
/// (frames, src_tokens, tgt_tokens); frames is empty when
/// with_frames=False.
#[pyfunction]
#[pyo3(signature = (seed, profile="uniform", with_frames=true, config_toml=None))]
fn generate_example(
    seed: u64,
    profile: &str,
    with_frames: bool,
    config_toml: Option<&str>,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
    use mecc_core::data::TokenProfile;
    let run = match config_toml {
        Some(t) => RunConfig::from_toml(t).map_err(to_py_err)?,
        None => RunConfig::default_config(),
    };
    let profile = match profile {
        "uniform" => TokenProfile::Uniform,
        "zipf_low" => TokenProfile::ZipfLow,
        "zipf_high" => TokenProfile::ZipfHigh,
        other => return Err(PyValueError::new_err(format!("unknown profile {other:?}"))),
    };
    let ex = mecc_core::data::generate_example(seed, &run.data.synth, profile, with_frames);
    let t = ex.frames.shape[0];
    let frames = (0..t).map(|i| ex.frames.row(i).to_vec()).collect();
    Ok((frames, ex.src_tokens, ex.tgt_tokens))
}

#[pymodule]
fn mecc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_reduce, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(translation_rule, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(generate_example, m)?)?;
    m.add_class::<Session>()?;
    Ok(())
}
