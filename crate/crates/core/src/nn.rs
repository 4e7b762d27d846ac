//! Neural building blocks: linear / embedding layers, rotary multi-head
//! attention, macaron conformer blocks, transformer encoder / decoder
//! layers, and the training losses.
//!
//! All layers follow the pre-layernorm residual convention. Rotary
//! position embedding is applied to queries and keys of self-attention
//! only; cross-attention does no positional mixing, so an MT encoder
//! input is exactly the (post-scale) embedding row.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Tx;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Dtype, Tensor};

pub const LN_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e30;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub causal: bool,
    pub rotary: bool,
    pub rotary_base: f64,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        assert_eq!(
            self.model_dim % self.num_heads,
            0,
            "model_dim {} not divisible by num_heads {}",
            self.model_dim,
            self.num_heads
        );
        let hd = self.model_dim / self.num_heads;
        if self.rotary {
            assert_eq!(hd % 2, 0, "rotary attention needs an even head_dim, got {hd}");
        }
        hd
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub rotary_base: f64,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>, dtype: Dtype) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..crate::tensor::numel(&shape))
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(shape, data, dtype)
}

/// Dense layer with bias.
pub struct Linear {
    w: String,
    b: String,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        dtype: Dtype,
    ) -> Linear {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, xavier(rng, din, dout, vec![din, dout], dtype));
        store.insert(&b, Tensor::zeros(vec![dout], dtype));
        Linear { w, b }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tx) -> Tx {
        x.matmul(&ctx.param(&self.w)).add(&ctx.param(&self.b))
    }
}

/// Token embedding table. Lookup of id i returns exactly
/// `scale_factor * weight[i]`.
pub struct EmbeddingTable {
    pub weight: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub scale_factor: f64,
}

impl EmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab_size: usize,
        embed_dim: usize,
        scale_factor: f64,
        dtype: Dtype,
    ) -> EmbeddingTable {
        let weight = format!("{name}.weight");
        let data = (0..vocab_size * embed_dim)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        store.insert(&weight, Tensor::new(vec![vocab_size, embed_dim], data, dtype));
        EmbeddingTable { weight, vocab_size, embed_dim, scale_factor }
    }

    pub fn lookup(&self, ctx: &Ctx, ids: &[usize]) -> Tx {
        for &id in ids {
            assert!(id < self.vocab_size, "token id {id} out of vocab {}", self.vocab_size);
        }
        let rows = ctx.param(&self.weight).gather_rows(ids);
        if self.scale_factor == 1.0 {
            rows
        } else {
            rows.scale(self.scale_factor)
        }
    }
}

/// Lower-triangular-allowed causal mask: nonzero marks a disallowed key.
pub fn causal_mask(tq: usize, tk: usize, dtype: Dtype) -> Tensor {
    let mut m = vec![0.0; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            if j > i {
                m[i * tk + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![tq, tk], m, dtype)
}

/// Scaled dot-product multi-head attention with optional rotary q/k
/// treatment and an optional disallowed-position mask.
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        dtype: Dtype,
    ) -> MultiHeadAttention {
        cfg.head_dim();
        let d = cfg.model_dim;
        MultiHeadAttention {
            wq: Linear::init(store, rng, &format!("{name}.wq"), d, d, dtype),
            wk: Linear::init(store, rng, &format!("{name}.wk"), d, d, dtype),
            wv: Linear::init(store, rng, &format!("{name}.wv"), d, d, dtype),
            wo: Linear::init(store, rng, &format!("{name}.wo"), d, d, dtype),
            cfg,
        }
    }

    pub fn forward(&self, ctx: &Ctx, q_in: &Tx, k_in: &Tx, v_in: &Tx, mask: Option<&Tensor>) -> Tx {
        let d = self.cfg.model_dim;
        let hd = self.cfg.head_dim();
        let tq = q_in.shape()[0];
        let tk = k_in.shape()[0];
        assert_eq!(q_in.shape()[1], d, "query dim {} != model_dim {}", q_in.shape()[1], d);
        assert_eq!(k_in.shape()[1], d, "key dim {} != model_dim {}", k_in.shape()[1], d);
        if tk == 0 {
            // nothing to attend over: defined as a zero context
            return ctx.g.constant(Tensor::zeros(vec![tq, d], ctx.g.dtype()));
        }
        let q = self.wq.forward(ctx, q_in);
        let k = self.wk.forward(ctx, k_in);
        let v = self.wv.forward(ctx, v_in);
        let mask_full = match mask {
            Some(m) => {
                assert_eq!(m.shape, vec![tq, tk], "attention mask shape {:?}", m.shape);
                Some(m.clone())
            }
            None if self.cfg.causal => Some(causal_mask(tq, tk, ctx.g.dtype())),
            None => None,
        };
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let mut qh = q.slice_cols(h * hd, hd);
            let mut kh = k.slice_cols(h * hd, hd);
            if self.cfg.rotary {
                qh = qh.rotary(self.cfg.rotary_base, 0);
                kh = kh.rotary(self.cfg.rotary_base, 0);
            }
            let vh = v.slice_cols(h * hd, hd);
            let mut scores = qh.matmul(&kh.transpose()).scale(scale);
            if let Some(m) = &mask_full {
                scores = scores.masked_fill(m, MASK_NEG);
            }
            heads.push(scores.softmax().matmul(&vh));
        }
        let cat = Tx::concat_cols(&heads);
        self.wo.forward(ctx, &cat)
    }
}

/// Two-layer feed-forward with swish, used half-stepped in the conformer
/// and full-step in transformer layers.
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        expansion: usize,
        dtype: Dtype,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::init(store, rng, &format!("{name}.lin1"), dim, dim * expansion, dtype),
            lin2: Linear::init(store, rng, &format!("{name}.lin2"), dim * expansion, dim, dtype),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tx) -> Tx {
        self.lin2.forward(ctx, &self.lin1.forward(ctx, x).silu())
    }
}

/// Conformer convolution module: pointwise expansion with GLU gate,
/// depthwise conv, layernorm, swish, pointwise projection.
pub struct ConvModule {
    pw1: Linear,
    kernel: String,
    pw2: Linear,
    dim: usize,
}

impl ConvModule {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        kernel_size: usize,
        dtype: Dtype,
    ) -> ConvModule {
        assert!(kernel_size % 2 == 1, "conv kernel must be odd, got {kernel_size}");
        let kernel = format!("{name}.depthwise");
        store.insert(&kernel, xavier(rng, kernel_size, 1, vec![kernel_size, dim], dtype));
        ConvModule {
            pw1: Linear::init(store, rng, &format!("{name}.pw1"), dim, 2 * dim, dtype),
            kernel,
            pw2: Linear::init(store, rng, &format!("{name}.pw2"), dim, dim, dtype),
            dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tx) -> Tx {
        let expanded = self.pw1.forward(ctx, x);
        let a = expanded.slice_cols(0, self.dim);
        let gate = expanded.slice_cols(self.dim, self.dim).sigmoid();
        let gated = a.mul(&gate);
        let conv = gated.depthwise_conv1d(&ctx.param(&self.kernel));
        self.pw2.forward(ctx, &conv.layer_norm(LN_EPS).silu())
    }
}

/// Macaron conformer block:
/// half FF, rotary self-attention, conv module, half FF, final layernorm,
/// residual throughout. Shape-preserving on `[T, model_dim]`.
pub struct ConformerBlock {
    ff1: FeedForward,
    mhsa: MultiHeadAttention,
    conv: ConvModule,
    ff2: FeedForward,
}

impl ConformerBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: ConformerConfig,
        dtype: Dtype,
    ) -> ConformerBlock {
        let att = AttentionConfig {
            model_dim: cfg.model_dim,
            num_heads: cfg.num_heads,
            causal: false,
            rotary: true,
            rotary_base: cfg.rotary_base,
        };
        ConformerBlock {
            ff1: FeedForward::init(store, rng, &format!("{name}.ff1"), cfg.model_dim, cfg.ff_expansion, dtype),
            mhsa: MultiHeadAttention::init(store, rng, &format!("{name}.mhsa"), att, dtype),
            conv: ConvModule::init(store, rng, &format!("{name}.conv"), cfg.model_dim, cfg.conv_kernel, dtype),
            ff2: FeedForward::init(store, rng, &format!("{name}.ff2"), cfg.model_dim, cfg.ff_expansion, dtype),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tx) -> Tx {
        let x = x.add(&self.ff1.forward(ctx, &x.layer_norm(LN_EPS)).scale(0.5));
        let n = x.layer_norm(LN_EPS);
        let x = x.add(&self.mhsa.forward(ctx, &n, &n, &n, None));
        let x = x.add(&self.conv.forward(ctx, &x.layer_norm(LN_EPS)));
        let x = x.add(&self.ff2.forward(ctx, &x.layer_norm(LN_EPS)).scale(0.5));
        x.layer_norm(LN_EPS)
    }
}

/// Pre-layernorm transformer encoder layer (rotary self-attention + FF).
pub struct EncoderLayer {
    mhsa: MultiHeadAttention,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_expansion: usize,
        rotary_base: f64,
        dtype: Dtype,
    ) -> EncoderLayer {
        let att = AttentionConfig {
            model_dim: dim,
            num_heads: heads,
            causal: false,
            rotary: true,
            rotary_base,
        };
        EncoderLayer {
            mhsa: MultiHeadAttention::init(store, rng, &format!("{name}.mhsa"), att, dtype),
            ff: FeedForward::init(store, rng, &format!("{name}.ff"), dim, ff_expansion, dtype),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tx) -> Tx {
        let n = x.layer_norm(LN_EPS);
        let x = x.add(&self.mhsa.forward(ctx, &n, &n, &n, None));
        x.add(&self.ff.forward(ctx, &x.layer_norm(LN_EPS)))
    }
}

/// Pre-layernorm transformer decoder layer: causal rotary self-attention,
/// cross-attention over the encoder output (no rotary), feed-forward.
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_expansion: usize,
        rotary_base: f64,
        dtype: Dtype,
    ) -> DecoderLayer {
        let self_att = AttentionConfig {
            model_dim: dim,
            num_heads: heads,
            causal: true,
            rotary: true,
            rotary_base,
        };
        let cross_att = AttentionConfig {
            model_dim: dim,
            num_heads: heads,
            causal: false,
            rotary: false,
            rotary_base,
        };
        DecoderLayer {
            self_attn: MultiHeadAttention::init(store, rng, &format!("{name}.self_attn"), self_att, dtype),
            cross_attn: MultiHeadAttention::init(store, rng, &format!("{name}.cross_attn"), cross_att, dtype),
            ff: FeedForward::init(store, rng, &format!("{name}.ff"), dim, ff_expansion, dtype),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tx, enc_out: &Tx) -> Tx {
        let n = x.layer_norm(LN_EPS);
        let x = x.add(&self.self_attn.forward(ctx, &n, &n, &n, None));
        let n = x.layer_norm(LN_EPS);
        let x = x.add(&self.cross_attn.forward(ctx, &n, enc_out, enc_out, None));
        x.add(&self.ff.forward(ctx, &x.layer_norm(LN_EPS)))
    }
}

/// Label-smoothed cross entropy, mean over positions. The smoothed target
/// distribution is `(1 - s) * onehot + s / V`. With smoothing 0 this is
/// standard cross entropy.
pub fn cross_entropy_label_smoothed(logits: &Tx, targets: &[usize], smoothing: f64) -> Tx {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2);
    let (n, v) = (shape[0], shape[1]);
    assert_eq!(n, targets.len(), "logit rows {} vs targets {}", n, targets.len());
    assert!(n > 0, "cross entropy over zero positions");
    for &t in targets {
        assert!(t < v, "target id {t} out of vocab {v}");
    }
    let mut q = vec![0.0; n * v];
    for (i, &t) in targets.iter().enumerate() {
        for j in 0..v {
            q[i * v + j] = smoothing / v as f64;
        }
        q[i * v + t] += 1.0 - smoothing;
    }
    let qt = logits.graph().constant(Tensor::new(vec![n, v], q, logits.graph().dtype()));
    logits.log_softmax().mul(&qt).sum().scale(-1.0 / n as f64)
}

/// Mean over tokens of the per-token sum over dimensions of squared
/// differences ("L2 loss per token"). Undefined for zero tokens.
pub fn l2_per_token(exported: &Tx, targets: &Tx) -> Tx {
    let s = exported.shape();
    assert_eq!(s, targets.shape(), "l2_per_token shape mismatch");
    assert!(s[0] > 0, "l2_per_token on zero tokens is undefined");
    exported.sub(targets).square().sum().scale(1.0 / s[0] as f64)
}

/// Inverted-dropout. Rate 0 (the acceptance-test setting) is an exact
/// pass-through.
pub fn dropout(x: &Tx, rate: f64, rng: &mut ChaCha8Rng) -> Tx {
    if rate == 0.0 {
        return x.clone();
    }
    let shape = x.shape();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..crate::tensor::numel(&shape))
        .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = x.graph().constant(Tensor::new(shape, mask, x.graph().dtype()));
    x.mul(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, d], data, Dtype::F64)
    }

    #[test]
    fn attention_single_key_with_identity_projections() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = AttentionConfig { model_dim: 4, num_heads: 1, causal: false, rotary: false, rotary_base: 10000.0 };
        let mha = MultiHeadAttention::init(&mut store, &mut r, "att", cfg, Dtype::F64);
        // overwrite projections with identity so output == value row
        let eye = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(), Dtype::F64);
        for w in ["att.wq.w", "att.wk.w", "att.wv.w", "att.wo.w"] {
            store.set_tensor(w, eye.clone());
        }
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let q = g.leaf(rand_input(&mut r, 3, 4));
        let kv = g.leaf(Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, -0.4], Dtype::F64));
        let out = mha.forward(&ctx, &q, &kv, &kv, None).value();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.at2(i, j) - kv.value().data[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_uniform_logits_average_values() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = AttentionConfig { model_dim: 2, num_heads: 1, causal: false, rotary: false, rotary_base: 10000.0 };
        let mha = MultiHeadAttention::init(&mut store, &mut r, "att", cfg, Dtype::F64);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], Dtype::F64);
        store.set_tensor("att.wv.w", eye.clone());
        store.set_tensor("att.wo.w", eye.clone());
        store.set_tensor("att.wq.w", Tensor::zeros(vec![2, 2], Dtype::F64)); // all logits 0
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let q = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0], Dtype::F64));
        let kv = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0], Dtype::F64));
        let out = mha.forward(&ctx, &q, &kv, &kv, None).value();
        assert!((out.data[0] - 3.0).abs() < 1e-12);
        assert!((out.data[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn causal_position_zero_attends_only_to_itself() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = AttentionConfig { model_dim: 4, num_heads: 2, causal: true, rotary: true, rotary_base: 10000.0 };
        let mha = MultiHeadAttention::init(&mut store, &mut r, "att", cfg, Dtype::F64);
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let a = rand_input(&mut r, 3, 4);
        let mut b = a.clone();
        for j in 4..12 {
            b.data[j] += 10.0; // perturb positions 1 and 2 only
        }
        let xa = g.leaf(a);
        let xb = g.leaf(b);
        let oa = mha.forward(&ctx, &xa, &xa, &xa, None).value();
        let ob = mha.forward(&ctx, &xb, &xb, &xb, None).value();
        for j in 0..4 {
            assert!((oa.at2(0, j) - ob.at2(0, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn conformer_block_preserves_shape_and_is_deterministic() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = ConformerConfig { model_dim: 32, num_heads: 4, conv_kernel: 5, ff_expansion: 2, rotary_base: 10000.0 };
        let block = ConformerBlock::init(&mut store, &mut r, "blk", cfg, Dtype::F64);
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let x = g.leaf(rand_input(&mut r, 7, 32));
        let y1 = block.forward(&ctx, &x).value();
        assert_eq!(y1.shape, vec![7, 32]);
        let y2 = block.forward(&ctx, &x).value();
        assert_eq!(y1, y2);
        assert!(y1.is_finite());
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = EncoderLayer::init(&mut store, &mut r, "enc", 32, 4, 2, 10000.0, Dtype::F64);
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let x = g.leaf(rand_input(&mut r, 5, 32));
        assert_eq!(layer.forward(&ctx, &x).shape(), vec![5, 32]);
    }

    #[test]
    fn decoder_causal_property_under_future_perturbation() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = DecoderLayer::init(&mut store, &mut r, "dec", 8, 2, 2, 10000.0, Dtype::F64);
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let enc = g.leaf(rand_input(&mut r, 4, 8));
        let a = rand_input(&mut r, 5, 8);
        let mut b = a.clone();
        for j in 3 * 8..5 * 8 {
            b.data[j] += 5.0; // perturb positions 3 and 4
        }
        let oa = layer.forward(&ctx, &g.leaf(a), &enc).value();
        let ob = layer.forward(&ctx, &g.leaf(b), &enc).value();
        for t in 0..3 {
            for j in 0..8 {
                assert!((oa.at2(t, j) - ob.at2(t, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_attention_single_frame_encoder() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = AttentionConfig { model_dim: 2, num_heads: 1, causal: false, rotary: false, rotary_base: 10000.0 };
        let mha = MultiHeadAttention::init(&mut store, &mut r, "att", cfg, Dtype::F64);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], Dtype::F64);
        for w in ["att.wq.w", "att.wk.w", "att.wv.w", "att.wo.w"] {
            store.set_tensor(w, eye.clone());
        }
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g.clone(), &store);
        let q = g.leaf(rand_input(&mut r, 4, 2));
        let enc = g.leaf(Tensor::new(vec![1, 2], vec![0.4, -0.9], Dtype::F64));
        let out = mha.forward(&ctx, &q, &enc, &enc, None).value();
        for t in 0..4 {
            assert!((out.at2(t, 0) - 0.4).abs() < 1e-12);
            assert!((out.at2(t, 1) + 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn rotary_relative_position_property() {
        // <rot(q,m), rot(k,n)> depends only on m-n
        let g = Graph::new(Dtype::F64);
        let mut r = rng();
        let d = 8;
        let q = rand_input(&mut r, 1, d);
        let k = rand_input(&mut r, 1, d);
        let dot = |m: usize, n: usize| -> f64 {
            let qr = g.leaf(q.clone()).rotary(10000.0, m).value();
            let kr = g.leaf(k.clone()).rotary(10000.0, n).value();
            qr.data.iter().zip(&kr.data).map(|(&a, &b)| a * b).sum()
        };
        for s in [1usize, 3, 9] {
            assert!((dot(5, 2) - dot(5 + s, 2 + s)).abs() < 1e-5);
        }
    }

    #[test]
    fn embedding_lookup_is_exact_scaled_row() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let emb = EmbeddingTable::init(&mut store, &mut r, "emb", 10, 4, 2.0, Dtype::F64);
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g, &store);
        let out = emb.lookup(&ctx, &[3]).value();
        let w = &store.get("emb.weight").tensor;
        for j in 0..4 {
            assert_eq!(out.data[j], 2.0 * w.at2(3, j));
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_vocab() {
        let g = Graph::new(Dtype::F64);
        let logits = g.leaf(Tensor::zeros(vec![1, 4], Dtype::F64));
        let loss = cross_entropy_label_smoothed(&logits, &[2], 0.0).item();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_infinite_margin_tends_to_zero() {
        let g = Graph::new(Dtype::F64);
        let logits = g.leaf(Tensor::new(vec![1, 3], vec![60.0, 0.0, 0.0], Dtype::F64));
        let loss = cross_entropy_label_smoothed(&logits, &[0], 0.0).item();
        assert!(loss < 1e-12);
    }

    #[test]
    fn ce_smoothed_uniform_prediction_is_ln_vocab() {
        let g = Graph::new(Dtype::F64);
        let logits = g.leaf(Tensor::zeros(vec![1, 2], Dtype::F64));
        let loss = cross_entropy_label_smoothed(&logits, &[0], 0.2).item();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "out of vocab")]
    fn ce_target_out_of_vocab_is_hard_error() {
        let g = Graph::new(Dtype::F64);
        let logits = g.leaf(Tensor::zeros(vec![1, 2], Dtype::F64));
        cross_entropy_label_smoothed(&logits, &[5], 0.0);
    }

    #[test]
    fn l2_per_token_examples() {
        let g = Graph::new(Dtype::F64);
        let a = g.leaf(Tensor::full(vec![1, 100], 0.1, Dtype::F64));
        let b = g.leaf(Tensor::zeros(vec![1, 100], Dtype::F64));
        assert!((l2_per_token(&a, &b).item() - 1.0).abs() < 1e-10);

        let x = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0f64.sqrt()], Dtype::F64));
        let z = g.leaf(Tensor::zeros(vec![2, 1], Dtype::F64));
        assert!((l2_per_token(&x, &z).item() - 2.0).abs() < 1e-10);

        assert_eq!(l2_per_token(&x, &x).item(), 0.0);
    }
}
