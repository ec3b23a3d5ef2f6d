//! Desk-scale reference transformer with hand-written forward and backward
//! passes, generic over the scalar type. It exists to check packing-level
//! claims numerically: shared-prefix forward identity and, with the
//! per-token gradient scale factors, exact equality of parameter gradients
//! between tree-packed and sequence-packed training.

pub mod attention;
pub mod ops;
pub mod run;
pub mod scalar;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchError, PackedBatch};

use attention::{
    attention_backward, attention_forward, rope_apply, rope_backward, rope_tables, RopeTables,
};
use ops::{rmsnorm_backward, rmsnorm_forward, silu, silu_backward, weighted_ce};
use scalar::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 97,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} outside vocab {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("supervised token {index} has no label")]
    MissingLabel { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("plan references leaf `{0}` missing from the tree")]
    UnknownLeaf(String),
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn_norm: Array1<T>,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub mlp_norm: Array1<T>,
    pub w_in: Array2<T>,
    pub w_out: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Array1<T>,
    pub unembed: Array2<T>,
}

/// Gradients, shaped exactly like the parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Array1<T>,
    pub unembed: Array2<T>,
}

/// Deterministic init: every parameter uniform in [-0.05, 0.05], drawn in a
/// fixed order from a counter-based generator, so one seed gives bitwise
/// identical parameters.
pub fn init_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw1 = |n: usize, rng: &mut ChaCha8Rng| -> Array1<T> {
        Array1::from_iter((0..n).map(|_| T::from_f64_lossy(rng.gen_range(-0.05..0.05))))
    };
    let draw2 = |r: usize, c: usize, rng: &mut ChaCha8Rng| -> Array2<T> {
        let data: Vec<T> = (0..r * c)
            .map(|_| T::from_f64_lossy(rng.gen_range(-0.05..0.05)))
            .collect();
        Array2::from_shape_vec((r, c), data).expect("shape matches data length")
    };
    let d = config.d_model;
    let embed = draw2(config.vocab, d, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            attn_norm: draw1(d, &mut rng),
            w_q: draw2(d, d, &mut rng),
            w_k: draw2(d, d, &mut rng),
            w_v: draw2(d, d, &mut rng),
            w_o: draw2(d, d, &mut rng),
            mlp_norm: draw1(d, &mut rng),
            w_in: draw2(d, config.d_ff, &mut rng),
            w_out: draw2(config.d_ff, d, &mut rng),
        });
    }
    let final_norm = draw1(d, &mut rng);
    let unembed = draw2(d, config.vocab, &mut rng);
    Ok(ModelParams {
        config,
        embed,
        layers,
        final_norm,
        unembed,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Named tensors in a fixed order shared with [`ParamGrads`].
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![("embed".to_string(), self.embed.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), l.attn_norm.view().into_dyn()));
            out.push((format!("layer{i}.w_q"), l.w_q.view().into_dyn()));
            out.push((format!("layer{i}.w_k"), l.w_k.view().into_dyn()));
            out.push((format!("layer{i}.w_v"), l.w_v.view().into_dyn()));
            out.push((format!("layer{i}.w_o"), l.w_o.view().into_dyn()));
            out.push((format!("layer{i}.mlp_norm"), l.mlp_norm.view().into_dyn()));
            out.push((format!("layer{i}.w_in"), l.w_in.view().into_dyn()));
            out.push((format!("layer{i}.w_out"), l.w_out.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view().into_dyn()));
        out
    }

    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![("embed".to_string(), self.embed.view_mut().into_dyn())];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_norm"), l.attn_norm.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_q"), l.w_q.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_k"), l.w_k.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_v"), l.w_v.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_o"), l.w_o.view_mut().into_dyn()));
            out.push((format!("layer{i}.mlp_norm"), l.mlp_norm.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_in"), l.w_in.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_out"), l.w_out.view_mut().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view_mut().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_views().iter().map(|(_, v)| v.len()).sum()
    }

    /// Add `delta` to the parameter at a global flat index (tensors in
    /// `named_views` order, row-major within each).
    pub fn nudge_flat(&mut self, mut index: usize, delta: T) {
        for (_, mut view) in self.named_views_mut() {
            if index < view.len() {
                let slice = view.as_slice_mut().expect("standard layout");
                slice[index] += delta;
                return;
            }
            index -= view.len();
        }
        panic!("flat index out of range");
    }
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        ParamGrads {
            embed: Array2::zeros(params.embed.dim()),
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: Array1::zeros(l.attn_norm.dim()),
                    w_q: Array2::zeros(l.w_q.dim()),
                    w_k: Array2::zeros(l.w_k.dim()),
                    w_v: Array2::zeros(l.w_v.dim()),
                    w_o: Array2::zeros(l.w_o.dim()),
                    mlp_norm: Array1::zeros(l.mlp_norm.dim()),
                    w_in: Array2::zeros(l.w_in.dim()),
                    w_out: Array2::zeros(l.w_out.dim()),
                })
                .collect(),
            final_norm: Array1::zeros(params.final_norm.dim()),
            unembed: Array2::zeros(params.unembed.dim()),
        }
    }

    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![("embed".to_string(), self.embed.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), l.attn_norm.view().into_dyn()));
            out.push((format!("layer{i}.w_q"), l.w_q.view().into_dyn()));
            out.push((format!("layer{i}.w_k"), l.w_k.view().into_dyn()));
            out.push((format!("layer{i}.w_v"), l.w_v.view().into_dyn()));
            out.push((format!("layer{i}.w_o"), l.w_o.view().into_dyn()));
            out.push((format!("layer{i}.mlp_norm"), l.mlp_norm.view().into_dyn()));
            out.push((format!("layer{i}.w_in"), l.w_in.view().into_dyn()));
            out.push((format!("layer{i}.w_out"), l.w_out.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view().into_dyn()));
        out
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.embed.zip_mut_with(&other.embed, |a, &b| *a += b);
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.attn_norm.zip_mut_with(&o.attn_norm, |a, &b| *a += b);
            l.w_q.zip_mut_with(&o.w_q, |a, &b| *a += b);
            l.w_k.zip_mut_with(&o.w_k, |a, &b| *a += b);
            l.w_v.zip_mut_with(&o.w_v, |a, &b| *a += b);
            l.w_o.zip_mut_with(&o.w_o, |a, &b| *a += b);
            l.mlp_norm.zip_mut_with(&o.mlp_norm, |a, &b| *a += b);
            l.w_in.zip_mut_with(&o.w_in, |a, &b| *a += b);
            l.w_out.zip_mut_with(&o.w_out, |a, &b| *a += b);
        }
        self.final_norm
            .zip_mut_with(&other.final_norm, |a, &b| *a += b);
        self.unembed.zip_mut_with(&other.unembed, |a, &b| *a += b);
    }

    pub fn value_flat(&self, mut index: usize) -> T {
        for (_, view) in self.named_views() {
            if index < view.len() {
                return *view
                    .as_slice()
                    .expect("standard layout")
                    .get(index)
                    .expect("bounds checked");
            }
            index -= view.len();
        }
        panic!("flat index out of range");
    }
}

/// How the per-token gradient scale enters the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalerMode {
    /// Scale folded into the per-token loss weight at the loss boundary.
    Folded,
    /// Unit-weight loss gradient computed first, then rows multiplied by
    /// their scale, mirroring a standalone gradient-scaling step before
    /// backpropagation. Numerically identical to `Folded`.
    PostScale,
    /// Scales forced to one; the negative control that breaks equivalence on
    /// any batch with a reused prefix.
    Disabled,
}

/// A batch lowered to model inputs with ids bounds-checked.
pub struct ModelBatch<T> {
    pub tokens: Vec<usize>,
    pub position_ids: Vec<u64>,
    pub mask: Array2<bool>,
    pub scales: Vec<T>,
    pub labels: Vec<Option<usize>>,
    pub supervised: Vec<bool>,
}

impl<T: Scalar> ModelBatch<T> {
    pub fn new(
        batch: &PackedBatch,
        config: &ModelConfig,
        plain_causal_mask: bool,
        dense_mask_cap: usize,
    ) -> Result<Self, ModelError> {
        let n = batch.len();
        let mut tokens = Vec::with_capacity(n);
        for &t in &batch.tokens {
            if t as usize >= config.vocab {
                return Err(ModelError::TokenOutOfVocab {
                    token: t,
                    vocab: config.vocab,
                });
            }
            tokens.push(t as usize);
        }
        let mut labels = Vec::with_capacity(n);
        for (i, l) in batch.labels.iter().enumerate() {
            match l {
                Some(t) if *t as usize >= config.vocab => {
                    return Err(ModelError::TokenOutOfVocab {
                        token: *t,
                        vocab: config.vocab,
                    })
                }
                Some(t) => labels.push(Some(*t as usize)),
                None if batch.supervised_mask[i] => {
                    return Err(ModelError::MissingLabel { index: i })
                }
                None => labels.push(None),
            }
        }
        let mask = if plain_causal_mask {
            Array2::from_shape_fn((n, n), |(i, j)| j <= i)
        } else {
            batch.dense_mask_with_cap(dense_mask_cap)?
        };
        Ok(ModelBatch {
            tokens,
            position_ids: batch.position_ids.clone(),
            mask,
            scales: batch.tree_scale.iter().map(|&s| T::from_f64_lossy(s)).collect(),
            labels,
            supervised: batch.supervised_mask.clone(),
        })
    }
}

pub struct LayerCache<T> {
    x_in: Array2<T>,
    normed_attn: Array2<T>,
    inv_rms_attn: Array1<T>,
    q_rot: Vec<Array2<T>>,
    k_rot: Vec<Array2<T>>,
    v_heads: Vec<Array2<T>>,
    p_heads: Vec<Array2<T>>,
    o_concat: Array2<T>,
    x_mid: Array2<T>,
    normed_mlp: Array2<T>,
    inv_rms_mlp: Array1<T>,
    ff_pre: Array2<T>,
    ff_act: Array2<T>,
}

pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Array2<T>,
    normed_final: Array2<T>,
    inv_rms_final: Array1<T>,
    pub logits: Array2<T>,
    probs: Array2<T>,
    pub loss: T,
}

/// Full forward pass: embedding, n_layers of (RMS-norm, rotary masked
/// attention, residual, RMS-norm, MLP, residual), final norm, logits, and
/// the scale-weighted cross-entropy over supervised tokens.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &ModelBatch<T>,
) -> Result<ForwardCache<T>, ModelError> {
    let cfg = &params.config;
    let n = batch.tokens.len();
    if n == 0 {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    }
    if batch.mask.dim() != (n, n) {
        return Err(ModelError::ShapeMismatch(format!(
            "mask {:?} for {n} tokens",
            batch.mask.dim()
        )));
    }
    let (d, h, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let rope: RopeTables<T> = rope_tables(&batch.position_ids, hd, cfg.rope_base);

    let mut x = Array2::zeros((n, d));
    for (t, &tok) in batch.tokens.iter().enumerate() {
        x.row_mut(t).assign(&params.embed.row(tok));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let x_in = x.clone();
        let (normed_attn, inv_rms_attn) = rmsnorm_forward(&x_in, &lp.attn_norm);
        let q = normed_attn.dot(&lp.w_q);
        let k = normed_attn.dot(&lp.w_k);
        let v = normed_attn.dot(&lp.w_v);
        let mut q_rot = Vec::with_capacity(h);
        let mut k_rot = Vec::with_capacity(h);
        let mut v_heads = Vec::with_capacity(h);
        let mut p_heads = Vec::with_capacity(h);
        let mut o_concat = Array2::zeros((n, d));
        for head in 0..h {
            let cols = s![.., head * hd..(head + 1) * hd];
            let qh = rope_apply(&q.slice(cols).to_owned(), &rope);
            let kh = rope_apply(&k.slice(cols).to_owned(), &rope);
            let vh = v.slice(cols).to_owned();
            let (oh, ph) = attention_forward(&qh, &kh, &vh, &batch.mask);
            o_concat.slice_mut(cols).assign(&oh);
            q_rot.push(qh);
            k_rot.push(kh);
            v_heads.push(vh);
            p_heads.push(ph);
        }
        let attn_out = o_concat.dot(&lp.w_o);
        let x_mid = &x_in + &attn_out;
        let (normed_mlp, inv_rms_mlp) = rmsnorm_forward(&x_mid, &lp.mlp_norm);
        let ff_pre = normed_mlp.dot(&lp.w_in);
        let ff_act = silu(&ff_pre);
        let mlp_out = ff_act.dot(&lp.w_out);
        x = &x_mid + &mlp_out;
        layers.push(LayerCache {
            x_in,
            normed_attn,
            inv_rms_attn,
            q_rot,
            k_rot,
            v_heads,
            p_heads,
            o_concat,
            x_mid,
            normed_mlp,
            inv_rms_mlp,
            ff_pre,
            ff_act,
        });
    }

    let x_final = x;
    let (normed_final, inv_rms_final) = rmsnorm_forward(&x_final, &params.final_norm);
    let logits = normed_final.dot(&params.unembed);
    let (loss, probs) = weighted_ce(&logits, &batch.labels, &batch.supervised, &batch.scales);
    Ok(ForwardCache {
        layers,
        x_final,
        normed_final,
        inv_rms_final,
        logits,
        probs,
        loss,
    })
}

/// Hand-written reverse pass. The gradient scale enters at the loss/logits
/// boundary per `scaler`; everything downstream of that boundary is the
/// plain chain rule.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    batch: &ModelBatch<T>,
    scaler: ScalerMode,
) -> ParamGrads<T> {
    let cfg = &params.config;
    let n = batch.tokens.len();
    let (d, h, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let rope: RopeTables<T> = rope_tables(&batch.position_ids, hd, cfg.rope_base);
    let mut grads = ParamGrads::zeros_like(params);

    // loss boundary: dlogits rows for supervised tokens
    let mut dlogits: Array2<T> = Array2::zeros(cache.logits.dim());
    for t in 0..n {
        if !batch.supervised[t] {
            continue;
        }
        let y = batch.labels[t].expect("supervised implies labeled");
        match scaler {
            ScalerMode::Folded => {
                let w = batch.scales[t];
                for j in 0..cfg.vocab {
                    let indicator = if j == y { T::one() } else { T::zero() };
                    dlogits[(t, j)] = w * (cache.probs[(t, j)] - indicator);
                }
            }
            ScalerMode::PostScale | ScalerMode::Disabled => {
                for j in 0..cfg.vocab {
                    let indicator = if j == y { T::one() } else { T::zero() };
                    dlogits[(t, j)] = cache.probs[(t, j)] - indicator;
                }
            }
        }
    }
    if scaler == ScalerMode::PostScale {
        // the standalone gradient-scaling step: multiply the first gradient
        // of the flattened batch by the per-token reuse factors
        for t in 0..n {
            let w = batch.scales[t];
            for j in 0..cfg.vocab {
                dlogits[(t, j)] = w * dlogits[(t, j)];
            }
        }
    }

    grads.unembed = cache.normed_final.t().dot(&dlogits);
    let d_normed_final = dlogits.dot(&params.unembed.t());
    let (mut dx, dg_final) = rmsnorm_backward(
        &cache.x_final,
        &params.final_norm,
        &cache.inv_rms_final,
        &d_normed_final,
    );
    grads.final_norm = dg_final;

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP block
        let d_mlp_out = dx.clone();
        lg.w_out = lc.ff_act.t().dot(&d_mlp_out);
        let d_ff_act = d_mlp_out.dot(&lp.w_out.t());
        let d_ff_pre = silu_backward(&lc.ff_pre, &d_ff_act);
        lg.w_in = lc.normed_mlp.t().dot(&d_ff_pre);
        let d_normed_mlp = d_ff_pre.dot(&lp.w_in.t());
        let (dx_norm_mlp, dg_mlp) =
            rmsnorm_backward(&lc.x_mid, &lp.mlp_norm, &lc.inv_rms_mlp, &d_normed_mlp);
        lg.mlp_norm = dg_mlp;
        let dx_mid = &dx + &dx_norm_mlp;

        // attention block
        let d_attn_out = dx_mid.clone();
        lg.w_o = lc.o_concat.t().dot(&d_attn_out);
        let d_o_concat = d_attn_out.dot(&lp.w_o.t());
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for head in 0..h {
            let cols = s![.., head * hd..(head + 1) * hd];
            let d_oh = d_o_concat.slice(cols).to_owned();
            let (dqh_rot, dkh_rot, dvh) = attention_backward(
                &lc.q_rot[head],
                &lc.k_rot[head],
                &lc.v_heads[head],
                &lc.p_heads[head],
                &d_oh,
                &batch.mask,
            );
            dq.slice_mut(cols).assign(&rope_backward(&dqh_rot, &rope));
            dk.slice_mut(cols).assign(&rope_backward(&dkh_rot, &rope));
            dv.slice_mut(cols).assign(&dvh);
        }
        lg.w_q = lc.normed_attn.t().dot(&dq);
        lg.w_k = lc.normed_attn.t().dot(&dk);
        lg.w_v = lc.normed_attn.t().dot(&dv);
        let d_normed_attn = dq.dot(&lp.w_q.t()) + dk.dot(&lp.w_k.t()) + dv.dot(&lp.w_v.t());
        let (dx_norm_attn, dg_attn) =
            rmsnorm_backward(&lc.x_in, &lp.attn_norm, &lc.inv_rms_attn, &d_normed_attn);
        lg.attn_norm = dg_attn;
        dx = &dx_mid + &dx_norm_attn;
    }

    for (t, &tok) in batch.tokens.iter().enumerate() {
        let mut row = grads.embed.row_mut(tok);
        row.zip_mut_with(&dx.row(t), |a, &b| *a += b);
    }
    grads
}
