//! The five training stages and shared evaluation helpers.
//!
//! Every stage runs per-utterance graphs, averages gradients over the
//! batch, clips by global norm, and applies Adam with a warmup/decay
//! schedule. Stages are deterministic given their StageConfig seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MatcherConfig, ModelConfig, StageConfig};
use crate::data::{Example, BOS, EOS};
use crate::graph::{Graph, Tx};
use crate::metrics::{corpus_bleu, corpus_wer, EvalReport};
use crate::model::{beam_search, Cascade, CascadeMode, Models};
use crate::nn::{cross_entropy_label_smoothed, l2_per_token};
use crate::optim::{clip_global_norm, AdamState, Ema, LrSchedule};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Dtype, Tensor};
use crate::Error;

pub const CLIP_NORM: f64 = 5.0;
pub const EMA_DECAY: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct StageStats {
    pub stage: String,
    pub steps: u64,
    pub skipped: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub reports: Vec<EvalReport>,
}

/// Strip BOS/EOS from a wrapped target sequence.
pub fn content(tgt: &[usize]) -> Vec<usize> {
    tgt.iter().cloned().filter(|&t| t != BOS && t != EOS).collect()
}

fn trainable_only(store: &ParamStore, grads: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    grads.into_iter().filter(|(n, _)| !store.get(n).frozen).collect()
}

/// Shared stage loop. `loss_fn` returns None to skip an utterance
/// (inadmissible CTC, empty reduction); a batch where every utterance is
/// skipped counts toward `skip_tolerance` consecutive failures.
fn run_stage<FL, FE>(
    store: &mut ParamStore,
    cfg: &StageConfig,
    dtype: Dtype,
    train_len: usize,
    use_ema: bool,
    stage: &str,
    mut loss_fn: FL,
    mut eval_fn: FE,
) -> Result<StageStats, Error>
where
    FL: FnMut(&Ctx, usize) -> Option<Tx>,
    FE: FnMut(&ParamStore, u64, &mut Vec<EvalReport>),
{
    assert!(train_len > 0, "empty training split");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = LrSchedule { peak_lr: cfg.peak_lr, warmup_steps: cfg.warmup_steps };
    let mut adam = AdamState::new(schedule);
    let mut ema = if use_ema { Some(Ema::new(store, EMA_DECAY)) } else { None };
    let mut stats = StageStats {
        stage: stage.to_string(),
        steps: 0,
        skipped: 0,
        first_loss: f64::NAN,
        final_loss: f64::NAN,
        reports: Vec::new(),
    };
    eval_fn(store, 0u64, &mut stats.reports);
    let mut empty_batches = 0usize;
    for step in 1..=cfg.steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut batch_loss = 0.0;
        let mut contributed = 0usize;
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..train_len);
            let g = Graph::new(dtype);
            let ctx = Ctx::new(g.clone(), store);
            let loss = match loss_fn(&ctx, idx) {
                Some(l) => l,
                None => {
                    stats.skipped += 1;
                    continue;
                }
            };
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "{stage}: non-finite loss {lv} at step {step}"
                )));
            }
            batch_loss += lv;
            for (name, grad) in trainable_only(store, ctx.grads(&loss)) {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, g) in acc.data.iter_mut().zip(grad.data.iter()) {
                            *a = dtype.quantize(*a + g);
                        }
                    }
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
            contributed += 1;
        }
        if contributed == 0 {
            empty_batches += 1;
            if (empty_batches as u64) > cfg.skip_tolerance {
                return Err(Error::Data(format!(
                    "{stage}: {empty_batches} consecutive batches with every utterance skipped"
                )));
            }
            continue;
        }
        empty_batches = 0;
        let inv = 1.0 / contributed as f64;
        for g in grads.values_mut() {
            for v in g.data.iter_mut() {
                *v = dtype.quantize(*v * inv);
            }
        }
        clip_global_norm(&mut grads, CLIP_NORM);
        adam.step(store, &grads);
        if let Some(e) = ema.as_mut() {
            e.update(store);
        }
        let mean_loss = batch_loss * inv;
        if stats.first_loss.is_nan() {
            stats.first_loss = mean_loss;
        }
        stats.final_loss = mean_loss;
        stats.steps = step;
        if (cfg.eval_every != 0 && step % cfg.eval_every == 0) || step == cfg.steps {
            stats.reports.push(EvalReport {
                step: step as u64,
                stage: stage.to_string(),
                split: "train".to_string(),
                metric: "loss".to_string(),
                value: mean_loss,
                utterances: contributed as u64,
                skipped: stats.skipped as u64,
            });
            eval_fn(store, step as u64, &mut stats.reports);
        }
    }
    if let Some(e) = ema.as_ref() {
        e.apply(store);
    }
    Ok(stats)
}

fn asr_utterance_loss(models: &Models, ctx: &Ctx, ex: &Example) -> Option<Tx> {
    let (_, lp) = models.asr.forward(ctx, &ex.frames);
    let out = crate::ctc::ctc_loss(&lp, &ex.src_tokens);
    if !out.admissible {
        return None;
    }
    Some(out.loss)
}

pub fn train_asr(
    models: &Models,
    store: &mut ParamStore,
    train: &[Example],
    dev: &[Example],
    cfg: &StageConfig,
    smoothing_unused: f64,
    dtype: Dtype,
) -> Result<StageStats, Error> {
    let _ = smoothing_unused;
    run_stage(
        store,
        cfg,
        dtype,
        train.len(),
        true,
        "asr",
        |ctx, idx| asr_utterance_loss(models, ctx, &train[idx]),
        |store, step, reports| {
            let n = dev.len().min(100);
            let wer = dev_wer(models, store, &dev[..n], dtype);
            reports.push(EvalReport {
                step,
                stage: "asr".into(),
                split: "dev".into(),
                metric: "wer".into(),
                value: wer,
                utterances: n as u64,
                skipped: 0,
            });
        },
    )
}

fn mt_utterance_loss(models: &Models, ctx: &Ctx, ex: &Example, smoothing: f64) -> Tx {
    let enc = models.mt.encode_tokens(ctx, &ex.src_tokens);
    let n = ex.tgt_tokens.len();
    let logits = models.mt.decode_logits(ctx, &enc, &ex.tgt_tokens[..n - 1]);
    cross_entropy_label_smoothed(&logits, &ex.tgt_tokens[1..], smoothing)
}

/// Base MT training and task adaptation share this loop; they differ
/// only in data and starting parameters.
pub fn train_mt(
    models: &Models,
    store: &mut ParamStore,
    train: &[Example],
    dev: &[Example],
    cfg: &StageConfig,
    smoothing: f64,
    stage: &str,
    dtype: Dtype,
) -> Result<StageStats, Error> {
    run_stage(
        store,
        cfg,
        dtype,
        train.len(),
        true,
        stage,
        |ctx, idx| Some(mt_utterance_loss(models, ctx, &train[idx], smoothing)),
        |store, step, reports| {
            let n = dev.len().min(50);
            let bleu = transcript_bleu(models, store, &dev[..n], 1, dtype).unwrap_or(0.0);
            reports.push(EvalReport {
                step,
                stage: stage.into(),
                split: "dev".into(),
                metric: "bleu".into(),
                value: bleu,
                utterances: n as u64,
                skipped: 0,
            });
        },
    )
}

/// Matcher targets for one utterance: reduced tokens and the post-scale
/// source-embedding rows the encoder would receive for them. Computed on
/// an inference graph so the training tape never touches MT parameters.
fn matcher_targets(
    models: &Models,
    store: &ParamStore,
    ex: &Example,
    cfg: &MatcherConfig,
    dtype: Dtype,
) -> Option<(Tensor, Tensor)> {
    let (reduced, selected) = models.asr.decode(store, &ex.frames, dtype);
    if reduced.is_empty() {
        return None;
    }
    let target_tokens: &[usize] = if cfg.reference_targets {
        if reduced.len() != ex.src_tokens.len() {
            return None;
        }
        &ex.src_tokens
    } else {
        &reduced.tokens
    };
    let g = Graph::inference(dtype);
    let ictx = Ctx::new(g, store);
    let targets = models.mt.src_emb.lookup(&ictx, target_tokens).value();
    Some((selected, targets))
}

pub fn train_matcher(
    models: &Models,
    store: &mut ParamStore,
    train: &[Example],
    dev: &[Example],
    cfg: &MatcherConfig,
    dtype: Dtype,
) -> Result<StageStats, Error> {
    store.freeze_prefixes(&["asr.", "mt."]);
    run_stage(
        store,
        &cfg.stage,
        dtype,
        train.len(),
        false,
        "matcher",
        |ctx, idx| {
            let (selected, targets) = matcher_targets(models, ctx.store, &train[idx], cfg, dtype)?;
            let out = if cfg.identity_exporter {
                // fixed-point oracle: output is the exact lookup, loss 0
                ctx.g.constant(targets.clone())
            } else {
                let sel = ctx.g.constant(selected);
                models.exporter.forward(ctx, &sel)
            };
            Some(l2_per_token(&out, &ctx.g.constant(targets)))
        },
        |store, step, reports| {
            let n = dev.len().min(200);
            if let Some(l2) = dev_l2_per_token(models, store, &dev[..n], cfg, dtype) {
                reports.push(EvalReport {
                    step,
                    stage: "matcher".into(),
                    split: "dev".into(),
                    metric: "l2_per_token".into(),
                    value: l2,
                    utterances: n as u64,
                    skipped: 0,
                });
            }
        },
    )
}

pub fn finetune_exporter(
    models: &Models,
    store: &mut ParamStore,
    train: &[Example],
    dev: &[Example],
    cfg: &StageConfig,
    smoothing: f64,
    dtype: Dtype,
) -> Result<StageStats, Error> {
    store.freeze_prefixes(&["asr.", "mt."]);
    let _ = dev;
    run_stage(
        store,
        cfg,
        dtype,
        train.len(),
        false,
        "exporter_ast",
        |ctx, idx| {
            let ex = &train[idx];
            let (reduced, selected) = models.asr.decode(ctx.store, &ex.frames, dtype);
            if reduced.is_empty() {
                return None;
            }
            let sel = ctx.g.constant(selected);
            let exported = models.exporter.forward(ctx, &sel);
            let enc = models.mt.encode_embeddings(ctx, &exported);
            let n = ex.tgt_tokens.len();
            let logits = models.mt.decode_logits(ctx, &enc, &ex.tgt_tokens[..n - 1]);
            Some(cross_entropy_label_smoothed(&logits, &ex.tgt_tokens[1..], smoothing))
        },
        |_, _, _| {},
    )
}

/// Greedy-decode WER of the ASR stage against reference transcripts.
pub fn dev_wer(models: &Models, store: &ParamStore, dev: &[Example], dtype: Dtype) -> f64 {
    let mut refs = Vec::with_capacity(dev.len());
    let mut hyps = Vec::with_capacity(dev.len());
    for ex in dev {
        let (reduced, _) = models.asr.decode(store, &ex.frames, dtype);
        refs.push(ex.src_tokens.clone());
        hyps.push(reduced.tokens);
    }
    corpus_wer(&refs, &hyps)
}

/// Mean dev L2 per token under the matcher's target policy. None when
/// every utterance is skipped.
pub fn dev_l2_per_token(
    models: &Models,
    store: &ParamStore,
    dev: &[Example],
    cfg: &MatcherConfig,
    dtype: Dtype,
) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in dev {
        let Some((selected, targets)) = matcher_targets(models, store, ex, cfg, dtype) else {
            continue;
        };
        let g = Graph::inference(dtype);
        let ctx = Ctx::new(g.clone(), store);
        let out = if cfg.identity_exporter {
            ctx.g.constant(targets.clone())
        } else {
            models.exporter.forward(&ctx, &ctx.g.constant(selected))
        };
        total += l2_per_token(&out, &ctx.g.constant(targets)).value().item();
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// BLEU of translating reference transcripts directly through MT.
pub fn transcript_bleu(
    models: &Models,
    store: &ParamStore,
    dev: &[Example],
    beam: usize,
    dtype: Dtype,
) -> Result<f64, Error> {
    let cascade = Cascade::new(models, store, beam, dtype);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for ex in dev {
        refs.push(content(&ex.tgt_tokens));
        hyps.push(cascade.translate_tokens(&ex.src_tokens));
    }
    bleu_of(&refs, &hyps)
}

/// Cascade BLEU (one-best or matched). Empty reductions score as empty
/// hypotheses; the count of them is returned alongside.
pub fn cascade_bleu(
    models: &Models,
    store: &ParamStore,
    dev: &[Example],
    mode: CascadeMode,
    beam: usize,
    identity_exporter: bool,
    dtype: Dtype,
) -> Result<(f64, usize), Error> {
    let mut cascade = Cascade::new(models, store, beam, dtype);
    cascade.identity_exporter = identity_exporter;
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut empty = 0usize;
    for ex in dev {
        let out = cascade.translate(&ex.frames, mode);
        if out.empty_input {
            empty += 1;
        }
        refs.push(content(&ex.tgt_tokens));
        hyps.push(out.translation);
    }
    Ok((bleu_of(&refs, &hyps)?, empty))
}

fn bleu_of(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64, Error> {
    corpus_bleu(refs, hyps)
}

/// Fraction of utterances where two cascade modes produce identical
/// translations (both empty counts as agreement).
pub fn mode_agreement(
    models: &Models,
    store: &ParamStore,
    dev: &[Example],
    beam: usize,
    identity_exporter: bool,
    dtype: Dtype,
) -> f64 {
    let mut cascade = Cascade::new(models, store, beam, dtype);
    cascade.identity_exporter = identity_exporter;
    let mut agree = 0usize;
    for ex in dev {
        let a = cascade.translate(&ex.frames, CascadeMode::OneBest);
        let b = cascade.translate(&ex.frames, CascadeMode::Matched);
        if a.translation == b.translation {
            agree += 1;
        }
    }
    agree as f64 / dev.len().max(1) as f64
}

/// Greedy translation of explicit source tokens; used by tests that need
/// a cheap decoder reference.
pub fn translate_tokens_greedy(
    models: &Models,
    store: &ParamStore,
    src: &[usize],
    dtype: Dtype,
) -> Vec<usize> {
    let g = Graph::inference(dtype);
    let ctx = Ctx::new(g, store);
    let enc = models.mt.encode_tokens(&ctx, src).value();
    beam_search(&models.mt, store, &enc, 1, 2 * src.len() + 5, dtype)
}

/// Convenience wrapper used by CLI evaluate and by tests: returns
/// (metric name, value) rows for a split.
pub fn evaluate_split(
    models: &Models,
    store: &ParamStore,
    dev: &[Example],
    beam: usize,
    identity_exporter: bool,
    dtype: Dtype,
) -> Result<Vec<(String, f64)>, Error> {
    let wer = dev_wer(models, store, dev, dtype);
    let transcript = transcript_bleu(models, store, dev, beam, dtype)?;
    let (one_best, _) = cascade_bleu(models, store, dev, CascadeMode::OneBest, beam, false, dtype)?;
    let (matched, empty) =
        cascade_bleu(models, store, dev, CascadeMode::Matched, beam, identity_exporter, dtype)?;
    Ok(vec![
        ("wer".into(), wer),
        ("bleu_transcript".into(), transcript),
        ("bleu_one_best".into(), one_best),
        ("bleu_matched".into(), matched),
        ("empty_reductions".into(), empty as f64),
    ])
}

pub fn apply_model_defaults(cfg: &ModelConfig) -> f64 {
    cfg.label_smoothing
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_example, SynthConfig, TokenProfile};

    fn tiny_setup() -> (ParamStore, Models, SynthConfig, Vec<Example>) {
        let run = RunConfig::default_config();
        let mut synth = run.data.synth.clone();
        synth.seed = 11;
        synth.max_len = 6;
        let mut model = run.model.clone();
        model.asr_layers = 1;
        model.exporter_layers = 1;
        model.mt_enc_layers = 1;
        model.mt_dec_layers = 1;
        let (store, models) = Models::init(&model, &synth, 21, Dtype::F64);
        let exs: Vec<Example> = (0..12)
            .map(|i| generate_example(1000 + i, &synth, TokenProfile::Uniform, true))
            .collect();
        (store, models, synth, exs)
    }

    fn tiny_stage(steps: u64, seed: u64) -> StageConfig {
        StageConfig {
            steps,
            batch_size: 2,
            peak_lr: 1e-3,
            warmup_steps: 4,
            seed,
            eval_every: 1000,
            skip_tolerance: 10,
        }
    }

    #[test]
    fn asr_stage_runs_and_is_deterministic() {
        let (store0, models, _, exs) = tiny_setup();
        let cfg = tiny_stage(3, 7);
        let mut a = store0.clone();
        let mut b = store0.clone();
        let sa = train_asr(&models, &mut a, &exs, &exs, &cfg, 0.0, Dtype::F64).unwrap();
        let sb = train_asr(&models, &mut b, &exs, &exs, &cfg, 0.0, Dtype::F64).unwrap();
        assert_eq!(sa.final_loss, sb.final_loss);
        for name in a.names() {
            assert_eq!(a.get(&name).tensor.data, b.get(&name).tensor.data, "{name}");
        }
        assert!(sa.final_loss.is_finite());
    }

    #[test]
    fn mt_zero_steps_leaves_params_bitwise_unchanged() {
        let (store0, models, _, exs) = tiny_setup();
        let mut store = store0.clone();
        let cfg = tiny_stage(0, 7);
        train_mt(&models, &mut store, &exs, &exs, &cfg, 0.1, "mt", Dtype::F64).unwrap();
        for name in store0.names() {
            assert_eq!(store0.get(&name).tensor.data, store.get(&name).tensor.data, "{name}");
        }
    }

    #[test]
    fn matcher_freezes_asr_and_mt() {
        let (store0, models, _, exs) = tiny_setup();
        let mut store = store0.clone();
        let cfg = MatcherConfig {
            stage: tiny_stage(3, 9),
            tau: 0.5,
            reference_targets: false,
            identity_exporter: false,
        };
        let before_asr = store0.hashes("asr.");
        let before_mt = store0.hashes("mt.");
        let before_exp = store0.hashes("exporter.");
        train_matcher(&models, &mut store, &exs, &exs, &cfg, Dtype::F64).unwrap();
        assert_eq!(store.hashes("asr."), before_asr);
        assert_eq!(store.hashes("mt."), before_mt);
        assert_ne!(store.hashes("exporter."), before_exp);
    }

    #[test]
    fn matcher_identity_oracle_stays_at_zero() {
        let (store0, models, _, exs) = tiny_setup();
        let mut store = store0.clone();
        let cfg = MatcherConfig {
            stage: tiny_stage(3, 9),
            tau: 0.5,
            reference_targets: false,
            identity_exporter: true,
        };
        let before = store0.hashes("exporter.");
        let stats = train_matcher(&models, &mut store, &exs, &exs, &cfg, Dtype::F64).unwrap();
        assert_eq!(stats.first_loss, 0.0);
        assert_eq!(stats.final_loss, 0.0);
        // zero gradients: exporter weights untouched by Adam's zero updates?
        // Adam with zero grads still has zero moments -> zero update.
        assert_eq!(store.hashes("exporter."), before);
    }

    #[test]
    fn finetune_updates_exactly_the_exporter_set() {
        let (store0, models, _, exs) = tiny_setup();
        let mut store = store0.clone();
        let cfg = tiny_stage(3, 13);
        finetune_exporter(&models, &mut store, &exs, &exs, &cfg, 0.1, Dtype::F64).unwrap();
        assert_eq!(store.hashes("asr."), store0.hashes("asr."));
        assert_eq!(store.hashes("mt."), store0.hashes("mt."));
        assert_ne!(store.hashes("exporter."), store0.hashes("exporter."));
    }

    #[test]
    fn mode_agreement_is_total_with_identity_exporter() {
        let (store, models, _, exs) = tiny_setup();
        let frac = mode_agreement(&models, &store, &exs[..4], 2, true, Dtype::F64);
        assert_eq!(frac, 1.0);
    }
}
