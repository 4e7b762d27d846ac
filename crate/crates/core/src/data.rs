//! Deterministic synthetic speech-translation corpus.
//!
//! Each source token id has a fixed prototype frame vector; an utterance
//! emits a jittered number of noisy prototype copies per token with
//! optional silence frames in between. Targets are a deterministic
//! function of the source (mapped ids, optionally reversed, wrapped in
//! BOS/EOS), so translation quality is measurable without real bitext.
//!
//! Two token-frequency profiles ("base" vs "task") stand in for the
//! generic-vs-task-domain text split: same vocabulary and rule, shifted
//! unigram distribution.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Dtype, Tensor};
use crate::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First target id produced by the token mapping (PAD/BOS/EOS precede it).
pub const TGT_OFFSET: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationRule {
    /// Map each id by +offset, then reverse, then wrap in BOS/EOS.
    MapReverse,
    /// Mapping without reversal (easier control task).
    MapShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenProfile {
    Uniform,
    /// Zipf weights favoring low token ids.
    ZipfLow,
    /// Zipf weights favoring high token ids.
    ZipfHigh,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Source token ids are 1..=src_vocab; 0 is the CTC blank.
    pub src_vocab: usize,
    /// Target vocabulary size including PAD/BOS/EOS.
    pub tgt_vocab: usize,
    pub frame_dim: usize,
    pub frames_per_token: usize,
    pub frame_jitter: usize,
    pub noise_sigma: f64,
    pub blank_frame_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: TranslationRule,
    pub base_profile: TokenProfile,
    pub task_profile: TokenProfile,
    /// Zipf exponent for the zipf_low/zipf_high profiles; higher values
    /// make the base-vs-task frequency shift more extreme.
    pub zipf_alpha: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            src_vocab: 20,
            tgt_vocab: 24,
            frame_dim: 16,
            frames_per_token: 3,
            frame_jitter: 1,
            noise_sigma: 0.3,
            blank_frame_prob: 0.2,
            min_len: 3,
            max_len: 12,
            rule: TranslationRule::MapReverse,
            base_profile: TokenProfile::ZipfLow,
            task_profile: TokenProfile::ZipfHigh,
            zipf_alpha: 1.0,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), Error> {
        // highest mapped target id is src_vocab + TGT_OFFSET; must fit
        if self.src_vocab + TGT_OFFSET >= self.tgt_vocab {
            return Err(Error::Config(format!(
                "tgt_vocab {} too small for src_vocab {} with offset {}",
                self.tgt_vocab, self.src_vocab, TGT_OFFSET
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("invalid sequence length range".into()));
        }
        if !(0.0..=1.0).contains(&self.blank_frame_prob) {
            return Err(Error::Config("blank_frame_prob outside [0,1]".into()));
        }
        if !self.zipf_alpha.is_finite() || self.zipf_alpha < 0.0 {
            return Err(Error::Config("zipf_alpha must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One utterance: frame matrix plus both token sides. Text-only examples
/// carry a `[0, frame_dim]` frame matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub frames: Tensor,
    pub src_tokens: Vec<usize>,
    pub tgt_tokens: Vec<usize>,
}

impl Example {
    pub fn has_frames(&self) -> bool {
        self.frames.shape[0] > 0
    }

    pub fn content_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.src_tokens.hash(&mut h);
        self.tgt_tokens.hash(&mut h);
        for &v in &self.frames.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Apply the deterministic translation rule; wraps in BOS/EOS.
pub fn translation_rule(src_tokens: &[usize], rule: TranslationRule, offset: usize) -> Vec<usize> {
    let mapped = src_tokens.iter().map(|&i| i + offset);
    let body: Vec<usize> = match rule {
        TranslationRule::MapReverse => mapped.rev().collect(),
        TranslationRule::MapShift => mapped.collect(),
    };
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(BOS);
    out.extend(body);
    out.push(EOS);
    out
}

/// Prototype frame vectors, one per source id (row 0, the blank, is
/// zero). Pairwise distinct: offending rows are resampled until the
/// minimum pairwise distance holds.
pub fn prototypes(cfg: &SynthConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xB10B));
    let d = cfg.frame_dim;
    let n = cfg.src_vocab + 1;
    let min_dist = 1.5;
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; d]];
    for _ in 1..n {
        loop {
            let cand: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ok = rows.iter().all(|r| {
                let dist: f64 = r.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                dist >= min_dist
            });
            if ok {
                rows.push(cand);
                break;
            }
        }
    }
    Tensor::new(vec![n, d], rows.concat(), Dtype::F64)
}

fn profile_weights(profile: TokenProfile, vocab: usize, alpha: f64) -> Vec<f64> {
    match profile {
        TokenProfile::Uniform => vec![1.0; vocab],
        TokenProfile::ZipfLow => (0..vocab).map(|i| ((i + 1) as f64).powf(-alpha)).collect(),
        TokenProfile::ZipfHigh => (0..vocab).map(|i| ((vocab - i) as f64).powf(-alpha)).collect(),
    }
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate one utterance from an explicit per-example seed.
pub fn generate_example(seed: u64, cfg: &SynthConfig, profile: TokenProfile, with_frames: bool) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(cfg);
    let weights = profile_weights(profile, cfg.src_vocab, cfg.zipf_alpha);
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let src_tokens: Vec<usize> = (0..len).map(|_| sample_weighted(&mut rng, &weights) + 1).collect();
    let tgt_tokens = translation_rule(&src_tokens, cfg.rule, TGT_OFFSET);
    let frames = if with_frames {
        let d = cfg.frame_dim;
        let mut data: Vec<f64> = Vec::new();
        let mut t = 0;
        let emit = |proto: &[f64], rng: &mut ChaCha8Rng, data: &mut Vec<f64>, t: &mut usize| {
            for j in 0..d {
                data.push(proto[j] + cfg.noise_sigma * gaussian(rng));
            }
            *t += 1;
        };
        for &tok in &src_tokens {
            if rng.gen_range(0.0..1.0) < cfg.blank_frame_prob {
                emit(protos.row(0), &mut rng, &mut data, &mut t);
            }
            let jitter = if cfg.frame_jitter == 0 {
                0isize
            } else {
                rng.gen_range(-(cfg.frame_jitter as isize)..=(cfg.frame_jitter as isize))
            };
            let k = ((cfg.frames_per_token as isize + jitter).max(1)) as usize;
            for _ in 0..k {
                emit(protos.row(tok), &mut rng, &mut data, &mut t);
            }
        }
        if rng.gen_range(0.0..1.0) < cfg.blank_frame_prob {
            emit(protos.row(0), &mut rng, &mut data, &mut t);
        }
        Tensor::new(vec![t, d], data, Dtype::F64)
    } else {
        Tensor::zeros(vec![0, cfg.frame_dim], Dtype::F64)
    };
    Example { frames, src_tokens, tgt_tokens }
}

fn example_seed(split_seed: u64, index: u64) -> u64 {
    split_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// All six splits: base (text-only, base profile) and task (speech,
/// task profile), each train/dev/test.
pub struct Corpus {
    pub splits: Vec<(String, Vec<Example>)>,
}

impl Corpus {
    pub fn get(&self, name: &str) -> Option<&Vec<Example>> {
        self.splits.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

pub fn make_corpus(cfg: &SynthConfig, base_sizes: SplitSizes, task_sizes: SplitSizes) -> Result<Corpus, Error> {
    cfg.validate()?;
    // disjoint split seeds derived from the corpus seed
    let names = ["base.train", "base.dev", "base.test", "task.train", "task.dev", "task.test"];
    let seeds: Vec<u64> = (0..6).map(|i| cfg.seed.wrapping_add(1 + i as u64 * 0x1000_0001)).collect();
    {
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("overlapping split seeds".into()));
        }
    }
    let mut splits = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let is_task = name.starts_with("task.");
        let profile = if is_task { cfg.task_profile } else { cfg.base_profile };
        let size = match *name {
            "base.train" => base_sizes.train,
            "base.dev" => base_sizes.dev,
            "base.test" => base_sizes.test,
            "task.train" => task_sizes.train,
            "task.dev" => task_sizes.dev,
            _ => task_sizes.test,
        };
        let examples = (0..size as u64)
            .map(|j| generate_example(example_seed(seeds[i], j), cfg, profile, is_task))
            .collect();
        splits.push((name.to_string(), examples));
    }
    Ok(Corpus { splits })
}

// ---------------------------------------------------------------------
// record stream file format
// ---------------------------------------------------------------------

const CORPUS_MAGIC: &[u8; 4] = b"MECD";
const CORPUS_VERSION: u32 = 1;

/// Write one split as a length-prefixed record stream.
pub fn write_split(w: &mut impl Write, examples: &[Example]) -> Result<(), Error> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&CORPUS_VERSION.to_le_bytes())?;
    w.write_all(&(examples.len() as u64).to_le_bytes())?;
    for ex in examples {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(ex.frames.shape[0] as u32).to_le_bytes());
        payload.extend_from_slice(&(ex.frames.shape[1] as u32).to_le_bytes());
        for &v in &ex.frames.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(&(ex.src_tokens.len() as u32).to_le_bytes());
        for &t in &ex.src_tokens {
            payload.extend_from_slice(&(t as u32).to_le_bytes());
        }
        payload.extend_from_slice(&(ex.tgt_tokens.len() as u32).to_le_bytes());
        for &t in &ex.tgt_tokens {
            payload.extend_from_slice(&(t as u32).to_le_bytes());
        }
        w.write_all(&(payload.len() as u32).to_le_bytes())?;
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], Error> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data("truncated corpus file".into()))?;
    Ok(buf)
}

pub fn read_split(r: &mut impl Read) -> Result<Vec<Example>, Error> {
    let magic = read_exact::<4>(r)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Data("bad corpus magic".into()));
    }
    let version = u32::from_le_bytes(read_exact::<4>(r)?);
    if version != CORPUS_VERSION {
        return Err(Error::Data(format!("unsupported corpus version {version}")));
    }
    let count = u64::from_le_bytes(read_exact::<8>(r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let plen = u32::from_le_bytes(read_exact::<4>(r)?) as usize;
        let mut payload = vec![0u8; plen];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Data("truncated corpus record".into()))?;
        let mut p = payload.as_slice();
        let t = u32::from_le_bytes(read_exact::<4>(&mut p)?) as usize;
        let d = u32::from_le_bytes(read_exact::<4>(&mut p)?) as usize;
        let mut frames = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            frames.push(f64::from_le_bytes(read_exact::<8>(&mut p)?));
        }
        let sl = u32::from_le_bytes(read_exact::<4>(&mut p)?) as usize;
        let mut src = Vec::with_capacity(sl);
        for _ in 0..sl {
            src.push(u32::from_le_bytes(read_exact::<4>(&mut p)?) as usize);
        }
        let tl = u32::from_le_bytes(read_exact::<4>(&mut p)?) as usize;
        let mut tgt = Vec::with_capacity(tl);
        for _ in 0..tl {
            tgt.push(u32::from_le_bytes(read_exact::<4>(&mut p)?) as usize);
        }
        out.push(Example {
            frames: Tensor::new(vec![t, d], frames, Dtype::F64),
            src_tokens: src,
            tgt_tokens: tgt,
        });
    }
    Ok(out)
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    crate::params::hex(&h.finalize())
}

pub fn file_sha256(path: &std::path::Path) -> Result<String, Error> {
    Ok(bytes_sha256(&std::fs::read(path)?))
}
