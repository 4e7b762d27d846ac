//! The three networks and the cascade that couples them.
//!
//! * ASR: input projection + conformer stack + CTC head.
//! * MT: source embeddings + transformer encoder, target embeddings +
//!   causal decoder + output projection. The encoder has a single entry
//!   point over embedding matrices; token input is exactly the lookup of
//!   those rows, so feeding exact lookups through the embedding entry
//!   point is bitwise identical to token input (the bypass contract).
//! * Exporter: a small conformer stack plus a linear projection that
//!   re-embeds ASR encodings at the reduced (1-best aligned) positions
//!   into the MT embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::ctc::{ctc_reduce, greedy_frame_labels, ReducedAlignment};
use crate::data::{SynthConfig, BOS, EOS};
use crate::graph::{Graph, Tx};
use crate::nn::{
    ConformerBlock, ConformerConfig, DecoderLayer, EmbeddingTable, EncoderLayer, Linear, LN_EPS,
};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Dtype, Tensor};

pub struct AsrModel {
    input_proj: Linear,
    blocks: Vec<ConformerBlock>,
    ctc_head: Linear,
    pub model_dim: usize,
    pub vocab_with_blank: usize,
}

impl AsrModel {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        frame_dim: usize,
        src_vocab: usize,
        dtype: Dtype,
    ) -> AsrModel {
        let d = cfg.model_dim;
        let conf = ConformerConfig {
            model_dim: d,
            num_heads: cfg.num_heads,
            conv_kernel: cfg.conv_kernel,
            ff_expansion: cfg.ff_expansion,
            rotary_base: cfg.rotary_base,
        };
        AsrModel {
            input_proj: Linear::init(store, rng, "asr.input_proj", frame_dim, d, dtype),
            blocks: (0..cfg.asr_layers)
                .map(|i| ConformerBlock::init(store, rng, &format!("asr.enc.{i}"), conf, dtype))
                .collect(),
            ctc_head: Linear::init(store, rng, "asr.ctc_head", d, src_vocab + 1, dtype),
            model_dim: d,
            vocab_with_blank: src_vocab + 1,
        }
    }

    /// Frame-synchronous encodings plus per-frame CTC log-probs.
    pub fn forward(&self, ctx: &Ctx, frames: &Tensor) -> (Tx, Tx) {
        assert!(frames.shape[0] > 0, "asr_forward on empty frames");
        let mut x = self.input_proj.forward(ctx, &ctx.g.constant(frames.clone()));
        for b in &self.blocks {
            x = b.forward(ctx, &x);
        }
        let log_probs = self.ctc_head.forward(ctx, &x).log_softmax();
        (x, log_probs)
    }

    /// Greedy 1-best reduction plus the encoder rows aligned with the
    /// last frame of each surviving token run. Inference only (no tape).
    pub fn decode(&self, store: &ParamStore, frames: &Tensor, dtype: Dtype) -> (ReducedAlignment, Tensor) {
        let g = Graph::inference(dtype);
        let ctx = Ctx::new(g, store);
        let (enc, lp) = self.forward(&ctx, frames);
        let reduced = ctc_reduce(&greedy_frame_labels(&lp.value()));
        let selected = enc.gather_rows(&reduced.frames).value();
        (reduced, selected)
    }
}

pub struct MtModel {
    pub src_emb: EmbeddingTable,
    enc_layers: Vec<EncoderLayer>,
    tgt_emb: EmbeddingTable,
    dec_layers: Vec<DecoderLayer>,
    out_proj: Linear,
    pub model_dim: usize,
    pub tgt_vocab: usize,
}

impl MtModel {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        src_vocab: usize,
        tgt_vocab: usize,
        dtype: Dtype,
    ) -> MtModel {
        let d = cfg.model_dim;
        MtModel {
            src_emb: EmbeddingTable::init(store, rng, "mt.src_emb", src_vocab + 1, d, cfg.emb_scale, dtype),
            enc_layers: (0..cfg.mt_enc_layers)
                .map(|i| {
                    EncoderLayer::init(store, rng, &format!("mt.enc.{i}"), d, cfg.num_heads, cfg.ff_expansion, cfg.rotary_base, dtype)
                })
                .collect(),
            tgt_emb: EmbeddingTable::init(store, rng, "mt.tgt_emb", tgt_vocab, d, cfg.emb_scale, dtype),
            dec_layers: (0..cfg.mt_dec_layers)
                .map(|i| {
                    DecoderLayer::init(store, rng, &format!("mt.dec.{i}"), d, cfg.num_heads, cfg.ff_expansion, cfg.rotary_base, dtype)
                })
                .collect(),
            out_proj: Linear::init(store, rng, "mt.out_proj", d, tgt_vocab, dtype),
            model_dim: d,
            tgt_vocab,
        }
    }

    /// Encoder over an explicit embedding matrix (the bypass entry
    /// point). Shares every parameter with token input.
    pub fn encode_embeddings(&self, ctx: &Ctx, embeddings: &Tx) -> Tx {
        assert_eq!(
            embeddings.shape()[1],
            self.model_dim,
            "embedding dim {} != encoder model_dim {}",
            embeddings.shape()[1],
            self.model_dim
        );
        let mut x = embeddings.clone();
        for l in &self.enc_layers {
            x = l.forward(ctx, &x);
        }
        x.layer_norm(LN_EPS)
    }

    /// Token input: embedding lookup (post-scale) then the shared
    /// encoder stack.
    pub fn encode_tokens(&self, ctx: &Ctx, tokens: &[usize]) -> Tx {
        let emb = self.src_emb.lookup(ctx, tokens);
        self.encode_embeddings(ctx, &emb)
    }

    /// Teacher-forcing decoder: logits over the target vocabulary for
    /// each input position.
    pub fn decode_logits(&self, ctx: &Ctx, enc_out: &Tx, tgt_in: &[usize]) -> Tx {
        let mut x = self.tgt_emb.lookup(ctx, tgt_in);
        for l in &self.dec_layers {
            x = l.forward(ctx, &x, enc_out);
        }
        self.out_proj.forward(ctx, &x.layer_norm(LN_EPS))
    }
}

pub struct Exporter {
    blocks: Vec<ConformerBlock>,
    proj: Linear,
    pub out_dim: usize,
}

impl Exporter {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        dtype: Dtype,
    ) -> Exporter {
        let d = cfg.model_dim;
        let conf = ConformerConfig {
            model_dim: d,
            num_heads: cfg.num_heads,
            conv_kernel: cfg.conv_kernel,
            ff_expansion: cfg.ff_expansion,
            rotary_base: cfg.rotary_base,
        };
        Exporter {
            blocks: (0..cfg.exporter_layers)
                .map(|i| ConformerBlock::init(store, rng, &format!("exporter.conf.{i}"), conf, dtype))
                .collect(),
            proj: Linear::init(store, rng, "exporter.proj", d, d, dtype),
            out_dim: d,
        }
    }

    /// Re-embed the selected (reduced-length) encoder rows. A zero-length
    /// input yields a zero-length output without failure.
    pub fn forward(&self, ctx: &Ctx, selected: &Tx) -> Tx {
        if selected.shape()[0] == 0 {
            return ctx.g.constant(Tensor::zeros(vec![0, self.out_dim], ctx.g.dtype()));
        }
        let mut x = selected.clone();
        for b in &self.blocks {
            x = b.forward(ctx, &x);
        }
        self.proj.forward(ctx, &x)
    }
}

/// All three networks over one parameter store.
pub struct Models {
    pub asr: AsrModel,
    pub mt: MtModel,
    pub exporter: Exporter,
}

impl Models {
    /// Deterministic construction: same config and seed give bitwise
    /// identical initial parameters.
    pub fn init(cfg: &ModelConfig, synth: &SynthConfig, seed: u64, dtype: Dtype) -> (ParamStore, Models) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let asr = AsrModel::init(&mut store, &mut rng, cfg, synth.frame_dim, synth.src_vocab, dtype);
        let mt = MtModel::init(&mut store, &mut rng, cfg, synth.src_vocab, synth.tgt_vocab, dtype);
        let exporter = Exporter::init(&mut store, &mut rng, cfg, dtype);
        (store, Models { asr, mt, exporter })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CascadeMode {
    OneBest,
    Matched,
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub reduced: ReducedAlignment,
    /// Translated content tokens (BOS/EOS stripped).
    pub translation: Vec<usize>,
    /// True when the ASR reduction was empty and no translation was
    /// attempted.
    pub empty_input: bool,
}

/// Length-normalized beam search with BOS start and EOS termination.
/// Ties break by (score, then lexicographic token sequence). The
/// returned sequence excludes BOS and EOS; hitting `max_len` emits the
/// sequence without EOS.
pub fn beam_search(
    mt: &MtModel,
    store: &ParamStore,
    enc_out: &Tensor,
    beam_size: usize,
    max_len: usize,
    dtype: Dtype,
) -> Vec<usize> {
    assert!(beam_size >= 1, "beam_size must be >= 1");
    #[derive(Clone)]
    struct Beam {
        tokens: Vec<usize>, // emitted tokens, no BOS
        score: f64,         // cumulative log prob
    }
    let norm = |b: &Beam| b.score / b.tokens.len().max(1) as f64;
    let mut live = vec![Beam { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Beam> = Vec::new(); // tokens end with EOS
    for _ in 0..max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &live {
            let g = Graph::inference(dtype);
            let ctx = Ctx::new(g.clone(), store);
            let enc = ctx.g.constant(enc_out.clone());
            let enc_tx = mt_identity(&enc);
            let mut tgt_in = vec![BOS];
            tgt_in.extend(&beam.tokens);
            let logits = mt.decode_logits(&ctx, &enc_tx, &tgt_in);
            let last = logits.gather_rows(&[tgt_in.len() - 1]).log_softmax().value();
            for tok in 0..mt.tgt_vocab {
                candidates.push(Beam {
                    tokens: beam.tokens.iter().cloned().chain([tok]).collect(),
                    score: beam.score + last.data[tok],
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        live = Vec::new();
        for c in candidates {
            if *c.tokens.last().unwrap() == EOS {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live); // unfinished beams compete at max_len
    finished.sort_by(|a, b| {
        norm(b)
            .partial_cmp(&norm(a))
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let mut best = finished.into_iter().next().expect("beam search produced no hypothesis").tokens;
    if best.last() == Some(&EOS) {
        best.pop();
    }
    best
}

// The encoder output is already a plain tensor here; this just names the
// pass-through at the decoder boundary.
fn mt_identity(enc: &Tx) -> Tx {
    enc.clone()
}

pub struct Cascade<'a> {
    pub models: &'a Models,
    pub store: &'a ParamStore,
    pub beam_size: usize,
    pub dtype: Dtype,
    /// Diagnostic mode: the exporter is replaced by the exact embedding
    /// lookup of the reduced tokens, making matched mode bitwise equal
    /// to one-best mode.
    pub identity_exporter: bool,
}

impl<'a> Cascade<'a> {
    pub fn new(models: &'a Models, store: &'a ParamStore, beam_size: usize, dtype: Dtype) -> Cascade<'a> {
        Cascade { models, store, beam_size, dtype, identity_exporter: false }
    }

    pub fn max_len(src_len: usize) -> usize {
        2 * src_len + 5
    }

    /// Matched-mode encoder input for an already-decoded utterance.
    pub fn matched_embeddings(&self, reduced: &ReducedAlignment, selected: &Tensor) -> Tensor {
        let g = Graph::inference(self.dtype);
        let ctx = Ctx::new(g.clone(), self.store);
        if self.identity_exporter {
            self.models.mt.src_emb.lookup(&ctx, &reduced.tokens).value()
        } else {
            let sel = ctx.g.constant(selected.clone());
            self.models.exporter.forward(&ctx, &sel).value()
        }
    }

    pub fn translate(&self, frames: &Tensor, mode: CascadeMode) -> CascadeOutput {
        let (reduced, selected) = self.models.asr.decode(self.store, frames, self.dtype);
        if reduced.is_empty() {
            return CascadeOutput { reduced, translation: Vec::new(), empty_input: true };
        }
        let enc_out = {
            let g = Graph::inference(self.dtype);
            let ctx = Ctx::new(g.clone(), self.store);
            match mode {
                CascadeMode::OneBest => self.models.mt.encode_tokens(&ctx, &reduced.tokens).value(),
                CascadeMode::Matched => {
                    let emb = self.matched_embeddings(&reduced, &selected);
                    self.models.mt.encode_embeddings(&ctx, &ctx.g.constant(emb)).value()
                }
            }
        };
        let translation = beam_search(
            &self.models.mt,
            self.store,
            &enc_out,
            self.beam_size,
            Self::max_len(reduced.len()),
            self.dtype,
        );
        CascadeOutput { reduced, translation, empty_input: false }
    }

    /// Translate reference source tokens directly (the "transcript" row).
    pub fn translate_tokens(&self, src_tokens: &[usize]) -> Vec<usize> {
        let enc_out = {
            let g = Graph::inference(self.dtype);
            let ctx = Ctx::new(g.clone(), self.store);
            self.models.mt.encode_tokens(&ctx, src_tokens).value()
        };
        beam_search(
            &self.models.mt,
            self.store,
            &enc_out,
            self.beam_size,
            Self::max_len(src_tokens.len()),
            self.dtype,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn toy() -> (ParamStore, Models, SynthConfig) {
        let run = RunConfig::default_config();
        let mut synth = run.data.synth.clone();
        synth.seed = 5;
        let mut model = run.model.clone();
        model.asr_layers = 1;
        model.exporter_layers = 1;
        model.mt_enc_layers = 1;
        model.mt_dec_layers = 1;
        let (store, models) = Models::init(&model, &synth, 9, Dtype::F64);
        (store, models, synth)
    }

    fn frames(synth: &SynthConfig, seed: u64) -> crate::data::Example {
        crate::data::generate_example(seed, synth, crate::data::TokenProfile::Uniform, true)
    }

    #[test]
    fn asr_forward_shapes_and_normalization() {
        let (store, models, synth) = toy();
        let ex = frames(&synth, 1);
        let g = Graph::inference(Dtype::F64);
        let ctx = Ctx::new(g, &store);
        let (enc, lp) = models.asr.forward(&ctx, &ex.frames);
        let t = ex.frames.shape[0];
        assert_eq!(enc.shape(), vec![t, 32]);
        assert_eq!(lp.shape(), vec![t, synth.src_vocab + 1]);
        let lpv = lp.value();
        for i in 0..t {
            let s: f64 = lpv.row(i).iter().map(|&x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        // determinism
        let (enc2, _) = models.asr.forward(&ctx, &ex.frames);
        assert_eq!(enc.value(), enc2.value());
    }

    #[test]
    fn asr_decode_selection_consistency() {
        let (store, models, synth) = toy();
        let ex = frames(&synth, 2);
        let (reduced, selected) = models.asr.decode(&store, &ex.frames, Dtype::F64);
        assert_eq!(selected.shape[0], reduced.len());
        if !reduced.is_empty() {
            let g = Graph::inference(Dtype::F64);
            let ctx = Ctx::new(g, &store);
            let (enc, _) = models.asr.forward(&ctx, &ex.frames);
            let encv = enc.value();
            for (i, &f) in reduced.frames.iter().enumerate() {
                assert_eq!(selected.row(i), encv.row(f));
            }
        }
    }

    #[test]
    fn bypass_equivalence_is_bitwise() {
        let (store, models, _) = toy();
        let tokens = [3usize, 1, 4, 1];
        let g = Graph::inference(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let via_tokens = models.mt.encode_tokens(&ctx, &tokens).value();
        let lookup = models.mt.src_emb.lookup(&ctx, &tokens).value();
        let via_emb = models.mt.encode_embeddings(&ctx, &ctx.g.constant(lookup)).value();
        assert_eq!(via_tokens, via_emb);
    }

    #[test]
    fn empty_encoder_input_yields_empty_output() {
        let (store, models, _) = toy();
        let g = Graph::inference(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let empty = ctx.g.constant(Tensor::zeros(vec![0, 32], Dtype::F64));
        assert_eq!(models.mt.encode_embeddings(&ctx, &empty).shape(), vec![0, 32]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (store, models, _) = toy();
        let g = Graph::inference(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let enc = models.mt.encode_tokens(&ctx, &[2, 7, 4]).value();
        let beam1 = beam_search(&models.mt, &store, &enc, 1, 11, Dtype::F64);
        // greedy reference
        let mut tokens: Vec<usize> = Vec::new();
        for _ in 0..11 {
            let g = Graph::inference(Dtype::F64);
            let ctx = Ctx::new(g.clone(), &store);
            let enc_tx = ctx.g.constant(enc.clone());
            let mut tgt_in = vec![BOS];
            tgt_in.extend(&tokens);
            let logits = models.mt.decode_logits(&ctx, &enc_tx, &tgt_in);
            let last = logits.gather_rows(&[tgt_in.len() - 1]).log_softmax().value();
            let mut best = 0;
            for k in 0..last.numel() {
                if last.data[k] > last.data[best] {
                    best = k;
                }
            }
            if best == EOS {
                break;
            }
            tokens.push(best);
        }
        assert_eq!(beam1, tokens);
    }

    #[test]
    fn beam_search_on_empty_encoder_output_terminates() {
        let (store, models, _) = toy();
        let enc = Tensor::zeros(vec![0, 32], Dtype::F64);
        let out = beam_search(&models.mt, &store, &enc, 2, 5, Dtype::F64);
        assert!(out.len() <= 5);
    }

    #[test]
    fn identity_exporter_matches_one_best_exactly() {
        let (store, models, synth) = toy();
        let mut cascade = Cascade::new(&models, &store, 2, Dtype::F64);
        cascade.identity_exporter = true;
        for seed in 0..5 {
            let ex = frames(&synth, 100 + seed);
            let a = cascade.translate(&ex.frames, CascadeMode::OneBest);
            let b = cascade.translate(&ex.frames, CascadeMode::Matched);
            assert_eq!(a.translation, b.translation);
            assert_eq!(a.empty_input, b.empty_input);
        }
    }

    #[test]
    fn one_best_mode_ignores_exporter_weights() {
        let (mut store, models, synth) = toy();
        let ex = frames(&synth, 3);
        let cascade = Cascade::new(&models, &store, 2, Dtype::F64);
        let before = cascade.translate(&ex.frames, CascadeMode::OneBest);
        // perturb every exporter weight
        let names: Vec<String> = store.names().into_iter().filter(|n| n.starts_with("exporter.")).collect();
        for n in &names {
            let mut t = store.get(n).tensor.clone();
            for v in t.data.iter_mut() {
                *v += 1.0;
            }
            store.set_tensor(n, t);
        }
        let cascade = Cascade::new(&models, &store, 2, Dtype::F64);
        let after = cascade.translate(&ex.frames, CascadeMode::OneBest);
        assert_eq!(before.translation, after.translation);
    }

    #[test]
    fn exporter_gradient_reaches_its_input() {
        let (store, models, _) = toy();
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let sel = g.leaf(Tensor::new(vec![2, 32], (0..64).map(|i| (i as f64 * 0.13).sin()).collect(), Dtype::F64));
        let out = models.exporter.forward(&ctx, &sel);
        assert_eq!(out.shape(), vec![2, 32]);
        let loss = out.sum();
        let grads = g.backward(&loss);
        let gsel = grads[sel.id].as_ref().unwrap();
        assert!(gsel.data.iter().any(|&x| x != 0.0));
        // single-token input also works
        let one = g.leaf(Tensor::zeros(vec![1, 32], Dtype::F64));
        assert_eq!(models.exporter.forward(&ctx, &one).shape(), vec![1, 32]);
    }
}
