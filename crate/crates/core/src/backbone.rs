//! The backbone multimodal language model: a small causal transformer
//! decoder consuming projected vision tokens, text tokens, and injected
//! `<tor>` features, with masked autoregressive loss and deterministic
//! greedy/beam generation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::block::causal_attention;
use crate::embedder::TorFeatures;
use crate::error::{Error, Result};
use crate::numerics::{Init, ParamStore, Scalar, Tape, Tensor, ValueId};
use crate::tokenizer::{PlantedRationale, TokenId, BOS, EOR, EOS, TOR, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_mlm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d_mlm: 128, n_layers: 4, n_heads: 4, max_len: 512 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_mlm == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.d_mlm % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_mlm {} not divisible by n_heads {}",
                self.d_mlm, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Where each assembled row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowTag {
    Image,
    Question,
    TorFeature,
    Rationale,
    Answer,
    Special,
}

/// Mixed-modality input rows with shifted-by-one target alignment:
/// row t predicts the token at t+1, and only mask-true rows carry loss.
#[derive(Debug)]
pub struct AssembledSequence {
    pub rows: ValueId,
    pub target_ids: Vec<Option<TokenId>>,
    pub loss_mask: Vec<bool>,
    pub provenance: Vec<RowTag>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }
}

/// One planned element before embedding: either a token or an injected row.
enum Element {
    Token { id: TokenId, tag: RowTag, is_target: bool },
    TorRow { index: usize },
    ImageRows,
}

/// Embed the element plan into a single on-tape row matrix.
fn realize<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    elements: &[Element],
    img_proj: Option<ValueId>,
    tor: Option<&TorFeatures>,
) -> Result<AssembledSequence> {
    let token_ids: Vec<TokenId> = elements
        .iter()
        .filter_map(|e| match e {
            Element::Token { id, .. } => Some(*id),
            _ => None,
        })
        .collect();
    let table = tape.param(store, TOK_EMB);
    let tok_rows = tape.embedding(table, &token_ids)?;

    let mut pieces: Vec<ValueId> = Vec::new();
    let mut provenance = Vec::new();
    let mut row_token: Vec<Option<TokenId>> = Vec::new();
    let mut row_is_target: Vec<bool> = Vec::new();

    let mut tok_cursor = 0usize;
    let mut run_start = 0usize;
    let flush_run = |tape: &mut Tape<F>, pieces: &mut Vec<ValueId>, start: usize, end: usize| -> Result<()> {
        if end > start {
            pieces.push(tape.slice_rows(tok_rows, start, end)?);
        }
        Ok(())
    };

    for e in elements {
        match e {
            Element::Token { id, tag, is_target } => {
                tok_cursor += 1;
                provenance.push(*tag);
                row_token.push(Some(*id));
                row_is_target.push(*is_target);
            }
            Element::TorRow { index } => {
                flush_run(tape, &mut pieces, run_start, tok_cursor)?;
                run_start = tok_cursor;
                let tor = tor.ok_or_else(|| Error::Assembly("tor row planned without tor features".into()))?;
                pieces.push(tape.slice_rows(tor.projected, *index, index + 1)?);
                provenance.push(RowTag::TorFeature);
                row_token.push(None);
                row_is_target.push(false);
            }
            Element::ImageRows => {
                flush_run(tape, &mut pieces, run_start, tok_cursor)?;
                run_start = tok_cursor;
                let img = img_proj.ok_or_else(|| Error::Assembly("image rows planned without image".into()))?;
                let p = tape.shape(img)[0];
                pieces.push(img);
                for _ in 0..p {
                    provenance.push(RowTag::Image);
                    row_token.push(None);
                    row_is_target.push(false);
                }
            }
        }
    }
    flush_run(tape, &mut pieces, run_start, tok_cursor)?;

    let rows = tape.concat_rows(&pieces)?;
    let t_len = provenance.len();
    debug_assert_eq!(tape.shape(rows)[0], t_len);

    let mut target_ids = vec![None; t_len];
    let mut loss_mask = vec![false; t_len];
    for t in 0..t_len.saturating_sub(1) {
        if row_is_target[t + 1] {
            target_ids[t] = row_token[t + 1];
            loss_mask[t] = true;
        }
    }
    Ok(AssembledSequence { rows, target_ids, loss_mask, provenance })
}

/// Stage-1 layout: `[img][<bos>][q][tor_1][seg_1][tor_2][seg_2]...[<eor>]`,
/// supervising exactly the rationale segment tokens and the trailing <eor>.
/// `<tor>` features are input rows, never targets.
pub fn assemble_stage1<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    img_proj: Option<ValueId>,
    question: &[TokenId],
    planted: &PlantedRationale,
    tor: &TorFeatures,
) -> Result<AssembledSequence> {
    if tor.k != planted.tor_positions.len() {
        return Err(Error::Assembly(format!(
            "planted rationale has {} <tor> tokens but {} feature rows were provided",
            planted.tor_positions.len(),
            tor.k
        )));
    }
    let mut elements = Vec::new();
    if img_proj.is_some() {
        elements.push(Element::ImageRows);
    }
    elements.push(Element::Token { id: BOS, tag: RowTag::Special, is_target: false });
    for &id in question {
        elements.push(Element::Token { id, tag: RowTag::Question, is_target: false });
    }
    let mut tor_index = 0usize;
    for &tok in &planted.tokens {
        if tok == TOR {
            elements.push(Element::TorRow { index: tor_index });
            tor_index += 1;
        } else {
            elements.push(Element::Token { id: tok, tag: RowTag::Rationale, is_target: true });
        }
    }
    elements.push(Element::Token { id: EOR, tag: RowTag::Special, is_target: true });
    realize(tape, store, &elements, img_proj, Some(tor))
}

fn stage2_elements(question: &[TokenId], k: usize, with_image: bool) -> Vec<Element> {
    let mut elements = Vec::new();
    if with_image {
        elements.push(Element::ImageRows);
    }
    elements.push(Element::Token { id: BOS, tag: RowTag::Special, is_target: false });
    for &id in question {
        elements.push(Element::Token { id, tag: RowTag::Question, is_target: false });
    }
    for index in 0..k {
        elements.push(Element::TorRow { index });
    }
    elements
}

/// Stage-2 layout: `[img][<bos>][q][tor_1..k][answer][<eos>]`, supervising
/// exactly the answer tokens and the trailing <eos>.
pub fn assemble_stage2<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    img_proj: Option<ValueId>,
    question: &[TokenId],
    tor: &TorFeatures,
    answer: &[TokenId],
) -> Result<AssembledSequence> {
    if answer.is_empty() {
        return Err(Error::Assembly("empty answer in training mode".into()));
    }
    let mut elements = stage2_elements(question, tor.k, img_proj.is_some());
    for &id in answer {
        elements.push(Element::Token { id, tag: RowTag::Answer, is_target: true });
    }
    elements.push(Element::Token { id: EOS, tag: RowTag::Special, is_target: true });
    realize(tape, store, &elements, img_proj, Some(tor))
}

/// Embedder-free layout for ablation baselines:
/// `[img][<bos>][q][body][terminator]`, supervising body and terminator.
/// With `supervised` false (generation prefix) body must be empty and the
/// terminator is omitted.
#[allow(clippy::too_many_arguments)]
pub fn assemble_plain<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    img_proj: Option<ValueId>,
    question: &[TokenId],
    body: &[TokenId],
    body_tag: RowTag,
    terminator: TokenId,
    supervised: bool,
) -> Result<AssembledSequence> {
    let mut elements = Vec::new();
    if img_proj.is_some() {
        elements.push(Element::ImageRows);
    }
    elements.push(Element::Token { id: BOS, tag: RowTag::Special, is_target: false });
    for &id in question {
        elements.push(Element::Token { id, tag: RowTag::Question, is_target: false });
    }
    if supervised {
        for &id in body {
            elements.push(Element::Token { id, tag: body_tag, is_target: true });
        }
        elements.push(Element::Token { id: terminator, tag: RowTag::Special, is_target: true });
    }
    realize(tape, store, &elements, img_proj, None)
}

/// The generation prefix: stage-2 layout without answer or `<eos>`.
pub fn assemble_stage2_prefix<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    img_proj: Option<ValueId>,
    question: &[TokenId],
    tor: &TorFeatures,
) -> Result<AssembledSequence> {
    let elements = stage2_elements(question, tor.k, img_proj.is_some());
    realize(tape, store, &elements, img_proj, Some(tor))
}

pub const TOK_EMB: &str = "backbone.tok_emb";
pub const POS_EMB: &str = "backbone.pos_emb";
pub const NORM_F: &str = "backbone.norm_f.g";
pub const LM_HEAD: &str = "backbone.lm_head.w";

pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Self {
        Backbone { cfg }
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_mlm;
        store.insert(TOK_EMB, Init::normal(rng, &[VOCAB_SIZE, d], 0.02));
        store.insert(POS_EMB, Init::normal(rng, &[self.cfg.max_len, d], 0.02));
        for i in 0..self.cfg.n_layers {
            let p = format!("backbone.layers.{i}");
            store.insert(&format!("{p}.attn_norm.g"), Init::ones(&[d]));
            for nm in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("{p}.attn.{nm}"), Init::linear(rng, d, d));
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                store.insert(&format!("{p}.attn.{nm}"), Init::zeros(&[d]));
            }
            store.insert(&format!("{p}.mlp_norm.g"), Init::ones(&[d]));
            store.insert(&format!("{p}.mlp.fc1.w"), Init::linear(rng, d, 4 * d));
            store.insert(&format!("{p}.mlp.fc1.b"), Init::zeros(&[4 * d]));
            store.insert(&format!("{p}.mlp.fc2.w"), Init::linear(rng, 4 * d, d));
            store.insert(&format!("{p}.mlp.fc2.b"), Init::zeros(&[d]));
        }
        store.insert(NORM_F, Init::ones(&[d]));
        // fan-in scale keeps logits strong enough that stage 1 can steer the
        // frozen decoder through injected rows alone
        store.insert(LM_HEAD, Init::linear(rng, d, VOCAB_SIZE));
    }

    /// Run the decoder over assembled rows and return [T, vocab] logits.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        rows: ValueId,
    ) -> Result<ValueId> {
        let t_len = tape.shape(rows)[0];
        if t_len > self.cfg.max_len {
            return Err(Error::contract(
                "backbone_forward",
                format!("sequence length {t_len} exceeds max_len {}", self.cfg.max_len),
            ));
        }
        let pos_table = tape.param(store, POS_EMB);
        let pos = tape.slice_rows(pos_table, 0, t_len)?;
        let mut h = tape.add(rows, pos)?;
        for i in 0..self.cfg.n_layers {
            let p = format!("backbone.layers.{i}");
            let ng = tape.param(store, &format!("{p}.attn_norm.g"));
            let normed = tape.rms_norm(h, ng)?;
            let attn = causal_attention(store, tape, normed, self.cfg.d_mlm, self.cfg.n_heads, &format!("{p}.attn"))?;
            h = tape.add(h, attn)?;
            let ng = tape.param(store, &format!("{p}.mlp_norm.g"));
            let normed = tape.rms_norm(h, ng)?;
            let w1 = tape.param(store, &format!("{p}.mlp.fc1.w"));
            let b1 = tape.param(store, &format!("{p}.mlp.fc1.b"));
            let w2 = tape.param(store, &format!("{p}.mlp.fc2.w"));
            let b2 = tape.param(store, &format!("{p}.mlp.fc2.b"));
            let m = tape.matmul(normed, w1)?;
            let m = tape.add_bias(m, b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, w2)?;
            let m = tape.add_bias(m, b2)?;
            h = tape.add(h, m)?;
        }
        let ng = tape.param(store, NORM_F);
        let h = tape.rms_norm(h, ng)?;
        let head = tape.param(store, LM_HEAD);
        tape.matmul(h, head)
    }

    /// Mean token cross-entropy over loss-mask-true positions.
    pub fn forward_loss<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        seq: &AssembledSequence,
    ) -> Result<ValueId> {
        let logits = self.forward(store, tape, seq.rows)?;
        let targets: Vec<TokenId> =
            seq.target_ids.iter().map(|t| t.unwrap_or(0)).collect();
        tape.masked_cross_entropy(logits, &targets, &seq.loss_mask)
    }

    /// Decode continuation tokens after an assembled prefix. The returned
    /// sequence excludes the terminating `<eos>`.
    pub fn generate<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        prefix_rows: Tensor<F>,
        mode: DecodeMode,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        let mut scorer = BackboneScorer { backbone: self, store, prefix: prefix_rows };
        match mode {
            DecodeMode::Greedy => decode::greedy(&mut scorer, EOS, max_new),
            DecodeMode::Beam { n } => decode::beam(&mut scorer, VOCAB_SIZE, EOS, n, max_new),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam { n: usize },
}

struct BackboneScorer<'a, F: Scalar> {
    backbone: &'a Backbone,
    store: &'a ParamStore<F>,
    prefix: Tensor<F>,
}

impl<F: Scalar> decode::Scorer for BackboneScorer<'_, F> {
    fn log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let prefix = tape.constant(self.prefix.clone());
        let rows = if generated.is_empty() {
            prefix
        } else {
            let table = tape.param(self.store, TOK_EMB);
            let gen_rows = tape.embedding(table, generated)?;
            tape.concat_rows(&[prefix, gen_rows])?
        };
        let logits = self.backbone.forward(self.store, &mut tape, rows)?;
        let t_len = tape.shape(logits)[0];
        let last = tape.value(logits).row(t_len - 1);
        // stable log-softmax in f64 for score accumulation
        let mx = last.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.to_f64()));
        let lse = mx + last.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln();
        Ok(last.iter().map(|v| v.to_f64() - lse).collect())
    }
}

/// Deterministic decoding over an abstract next-token scorer, so tests can
/// drive it with crafted logits and compare against exhaustive enumeration.
pub mod decode {
    use super::{Error, Result, TokenId};

    pub trait Scorer {
        /// Full next-token log-probability vector given the generated suffix.
        fn log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>>;
    }

    pub fn greedy<S: Scorer>(scorer: &mut S, eos: TokenId, max_new: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for _ in 0..max_new {
            let lp = scorer.log_probs(&out)?;
            let mut best = 0usize;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            if best as TokenId == eos {
                break;
            }
            out.push(best as TokenId);
        }
        Ok(out)
    }

    #[derive(Clone, Debug)]
    struct Beam {
        seq: Vec<TokenId>,
        score: f64,
        finished: bool,
    }

    /// Beam search ranked by total log-probability with a deterministic
    /// tie-break by token id (lexicographically smaller sequence wins).
    pub fn beam<S: Scorer>(
        scorer: &mut S,
        vocab: usize,
        eos: TokenId,
        beam_n: usize,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        if beam_n < 1 {
            return Err(Error::contract("beam_search", format!("beam_n must be >= 1, got {beam_n}")));
        }
        let mut beams = vec![Beam { seq: vec![], score: 0.0, finished: false }];
        for _ in 0..max_new {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Beam> = Vec::new();
            for b in &beams {
                if b.finished {
                    candidates.push(b.clone());
                    continue;
                }
                let lp = scorer.log_probs(&b.seq)?;
                debug_assert_eq!(lp.len(), vocab);
                for (tok, &l) in lp.iter().enumerate() {
                    let tok = tok as TokenId;
                    let mut seq = b.seq.clone();
                    let finished = tok == eos;
                    if !finished {
                        seq.push(tok);
                    }
                    candidates.push(Beam { seq, score: b.score + l, finished });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.seq.cmp(&b.seq))
            });
            candidates.truncate(beam_n);
            beams = candidates;
        }
        beams.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.seq.cmp(&b.seq))
        });
        Ok(beams.into_iter().next().map(|b| b.seq).unwrap_or_default())
    }
}
