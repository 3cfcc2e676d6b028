//! Embedder blocks: the selective-SSM block and the causal-transformer
//! baseline used for architecture ablations. Both are pre-norm residual
//! blocks over the same [T, d_emb] interface.

use rand_chacha::ChaCha8Rng;

use super::scan;
use super::EmbedderConfig;
use crate::error::Result;
use crate::numerics::{Init, ParamStore, Scalar, Tape, Tensor, ValueId};

/// in-projection with expansion, depthwise causal conv, SiLU, selective
/// scan, SiLU-gated branch, out-projection, residual + RMS-normalization.
pub struct SsmBlock {
    pub prefix: String,
    pub cfg: EmbedderConfig,
}

impl SsmBlock {
    pub fn new(prefix: String, cfg: EmbedderConfig) -> Self {
        SsmBlock { prefix, cfg }
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_emb;
        let di = self.cfg.d_inner();
        let n = self.cfg.d_state;
        let dtr = self.cfg.dt_rank();
        store.insert(&self.p("norm.g"), Init::ones(&[d]));
        store.insert(&self.p("in_proj.w"), Init::linear(rng, d, 2 * di));
        store.insert(&self.p("conv.w"), Init::normal(rng, &[self.cfg.conv_kernel, di], 1.0 / (self.cfg.conv_kernel as f64).sqrt()));
        store.insert(&self.p("conv.b"), Init::zeros(&[di]));
        store.insert(&self.p("x_proj.w"), Init::linear(rng, di, dtr + 2 * n));
        store.insert(&self.p("dt_proj.w"), Init::normal(rng, &[dtr, di], (dtr as f64).powf(-0.5)));
        // bias placed so softplus(bias) lands log-uniformly in [1e-3, 1e-1]
        let dt_bias: Vec<F> = Init::uniform::<F>(rng, &[di], (1e-3f64).ln(), (1e-1f64).ln())
            .data()
            .iter()
            .map(|v| {
                let target = v.to_f64().exp();
                F::from_f64((target.exp() - 1.0).ln())
            })
            .collect();
        store.insert(&self.p("dt_proj.b"), Tensor::new(vec![di], dt_bias).unwrap());
        // A_log = log(1..=d_state) per channel
        let a_log: Vec<F> = (0..di)
            .flat_map(|_| (1..=n).map(|s| F::from_f64((s as f64).ln())))
            .collect();
        store.insert(&self.p("a_log"), Tensor::new(vec![di, n], a_log).unwrap());
        store.insert(&self.p("d"), Init::ones(&[di]));
        store.insert(&self.p("out_proj.w"), Init::normal(rng, &[di, d], 0.5 / (di as f64).sqrt()));
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        x: ValueId,
    ) -> Result<ValueId> {
        let di = self.cfg.d_inner();
        let n = self.cfg.d_state;
        let dtr = self.cfg.dt_rank();

        let norm_g = tape.param(store, &self.p("norm.g"));
        let w_in = tape.param(store, &self.p("in_proj.w"));
        let conv_w = tape.param(store, &self.p("conv.w"));
        let conv_b = tape.param(store, &self.p("conv.b"));
        let w_x = tape.param(store, &self.p("x_proj.w"));
        let w_dt = tape.param(store, &self.p("dt_proj.w"));
        let b_dt = tape.param(store, &self.p("dt_proj.b"));
        let a_log = tape.param(store, &self.p("a_log"));
        let d_skip = tape.param(store, &self.p("d"));
        let w_out = tape.param(store, &self.p("out_proj.w"));

        let normed = tape.rms_norm(x, norm_g)?;
        let xz = tape.matmul(normed, w_in)?;
        let xs = tape.slice_cols(xz, 0, di)?;
        let gate = tape.slice_cols(xz, di, 2 * di)?;

        let xs = tape.conv1d_causal(xs, conv_w)?;
        let xs = tape.add_bias(xs, conv_b)?;
        let xs = tape.silu(xs);

        let proj = tape.matmul(xs, w_x)?;
        let dt_low = tape.slice_cols(proj, 0, dtr)?;
        let b_t = tape.slice_cols(proj, dtr, dtr + n)?;
        let c_t = tape.slice_cols(proj, dtr + n, dtr + 2 * n)?;
        let dt = tape.matmul(dt_low, w_dt)?;
        let dt = tape.add_bias(dt, b_dt)?;
        let dt = tape.softplus(dt);

        let y = scan::selective_scan(tape, xs, a_log, b_t, c_t, dt, d_skip)?;
        let gate = tape.silu(gate);
        let y = tape.mul(y, gate)?;
        let out = tape.matmul(y, w_out)?;
        tape.add(x, out)
    }
}

/// Pre-norm causal attention + GELU MLP block with the same interface.
pub struct TransformerBlock {
    pub prefix: String,
    pub cfg: EmbedderConfig,
}

pub const EMBEDDER_HEADS: usize = 4;

impl TransformerBlock {
    pub fn new(prefix: String, cfg: EmbedderConfig) -> Self {
        TransformerBlock { prefix, cfg }
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_emb;
        store.insert(&self.p("attn_norm.g"), Init::ones(&[d]));
        for nm in ["wq", "wk", "wv", "wo"] {
            store.insert(&self.p(&format!("attn.{nm}")), Init::linear(rng, d, d));
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            store.insert(&self.p(&format!("attn.{nm}")), Init::zeros(&[d]));
        }
        store.insert(&self.p("mlp_norm.g"), Init::ones(&[d]));
        store.insert(&self.p("mlp.fc1.w"), Init::linear(rng, d, 4 * d));
        store.insert(&self.p("mlp.fc1.b"), Init::zeros(&[4 * d]));
        store.insert(&self.p("mlp.fc2.w"), Init::linear(rng, 4 * d, d));
        store.insert(&self.p("mlp.fc2.b"), Init::zeros(&[d]));
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        x: ValueId,
    ) -> Result<ValueId> {
        let d = self.cfg.d_emb;
        let attn_norm = tape.param(store, &self.p("attn_norm.g"));
        let normed = tape.rms_norm(x, attn_norm)?;
        let attn = causal_attention(
            store,
            tape,
            normed,
            d,
            EMBEDDER_HEADS,
            &self.p("attn"),
        )?;
        let x = tape.add(x, attn)?;

        let mlp_norm = tape.param(store, &self.p("mlp_norm.g"));
        let normed = tape.rms_norm(x, mlp_norm)?;
        let w1 = tape.param(store, &self.p("mlp.fc1.w"));
        let b1 = tape.param(store, &self.p("mlp.fc1.b"));
        let w2 = tape.param(store, &self.p("mlp.fc2.w"));
        let b2 = tape.param(store, &self.p("mlp.fc2.b"));
        let h = tape.matmul(normed, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_bias(o, b2)?;
        tape.add(x, o)
    }
}

/// Multi-head strictly causal self-attention, shared by the transformer
/// embedder baseline and the backbone.
pub fn causal_attention<F: Scalar>(
    store: &ParamStore<F>,
    tape: &mut Tape<F>,
    x: ValueId,
    d_model: usize,
    n_heads: usize,
    prefix: &str,
) -> Result<ValueId> {
    let t_len = tape.shape(x)[0];
    let dh = d_model / n_heads;

    let wq = tape.param(store, &format!("{prefix}.wq"));
    let bq = tape.param(store, &format!("{prefix}.bq"));
    let wk = tape.param(store, &format!("{prefix}.wk"));
    let bk = tape.param(store, &format!("{prefix}.bk"));
    let wv = tape.param(store, &format!("{prefix}.wv"));
    let bv = tape.param(store, &format!("{prefix}.bv"));
    let wo = tape.param(store, &format!("{prefix}.wo"));
    let bo = tape.param(store, &format!("{prefix}.bo"));

    let q = tape.matmul(x, wq)?;
    let q = tape.add_bias(q, bq)?;
    let k = tape.matmul(x, wk)?;
    let k = tape.add_bias(k, bk)?;
    let v = tape.matmul(x, wv)?;
    let v = tape.add_bias(v, bv)?;

    let mask = tape.constant(causal_mask::<F>(t_len));
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, wo)?;
    tape.add_bias(out, bo)
}

/// Additive mask: 0 on and below the diagonal, a large negative constant
/// above it. Finite so softmax gradients stay NaN-free.
fn causal_mask<F: Scalar>(t_len: usize) -> Tensor<F> {
    let neg = F::from_f64(-1e9);
    let mut data = vec![F::ZERO; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            data[i * t_len + j] = neg;
        }
    }
    Tensor::new(vec![t_len, t_len], data).unwrap()
}
