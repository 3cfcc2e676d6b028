//! The rationale embedder: a stack of selective state-space blocks that
//! consumes `[image][question][rationale-with-<tor>]` during stage 1 or
//! `[image][question][<tor> x k]` at stage 2 / inference, records the
//! `<tor>` positions, and projects the features at those positions into
//! backbone width. A causal-transformer baseline sits behind the same
//! interface for architecture ablations.

pub mod block;
pub mod scan;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamStore, Scalar, Tape, Tensor, ValueId};
use crate::tokenizer::{TokenId, TOR, VOCAB_SIZE};

pub use scan::{reference_scan, selective_scan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Ssm,
    Transformer,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm" => Ok(Architecture::Ssm),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub d_emb: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub architecture: Architecture,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            d_emb: 64,
            n_layers: 4,
            d_state: 16,
            expansion: 2,
            conv_kernel: 4,
            architecture: Architecture::Ssm,
        }
    }
}

impl EmbedderConfig {
    pub fn d_inner(&self) -> usize {
        self.expansion * self.d_emb
    }

    pub fn dt_rank(&self) -> usize {
        self.d_emb.div_ceil(16).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_emb", self.d_emb),
            ("n_layers", self.n_layers),
            ("d_state", self.d_state),
            ("expansion", self.expansion),
            ("conv_kernel", self.conv_kernel),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("embedder.{name} must be positive")));
            }
        }
        if self.architecture == Architecture::Transformer && self.d_emb % block::EMBEDDER_HEADS != 0 {
            return Err(Error::Config(format!(
                "transformer embedder needs d_emb divisible by {} heads",
                block::EMBEDDER_HEADS
            )));
        }
        Ok(())
    }
}

/// Full-sequence features plus the recorded `<tor>` positions.
#[derive(Debug)]
pub struct EmbedderOutput {
    pub features: ValueId,
    pub tor_positions: Vec<usize>,
    pub seq_len: usize,
}

/// Rows of the feature matrix at `<tor>` positions, raw (embedder width)
/// and projected (backbone width).
pub struct TorFeatures {
    pub raw: ValueId,
    pub projected: ValueId,
    pub k: usize,
}

pub const TOK_EMB: &str = "embedder.tok_emb";
pub const NORM_F: &str = "embedder.norm_f.g";
pub const TORPROJ_FC1_W: &str = "tor_proj.fc1.w";
pub const TORPROJ_FC1_B: &str = "tor_proj.fc1.b";
pub const TORPROJ_FC2_W: &str = "tor_proj.fc2.w";
pub const TORPROJ_FC2_B: &str = "tor_proj.fc2.b";

pub struct Embedder {
    pub cfg: EmbedderConfig,
    ssm_blocks: Vec<block::SsmBlock>,
    tr_blocks: Vec<block::TransformerBlock>,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Self {
        let ssm_blocks = (0..cfg.n_layers)
            .map(|i| block::SsmBlock::new(format!("embedder.layers.{i}"), cfg))
            .collect();
        let tr_blocks = (0..cfg.n_layers)
            .map(|i| block::TransformerBlock::new(format!("embedder.layers.{i}"), cfg))
            .collect();
        Embedder { cfg, ssm_blocks, tr_blocks }
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        store.insert(TOK_EMB, Init::normal(rng, &[VOCAB_SIZE, self.cfg.d_emb], 0.02));
        match self.cfg.architecture {
            Architecture::Ssm => {
                for b in &self.ssm_blocks {
                    b.init_params(store, rng);
                }
            }
            Architecture::Transformer => {
                for b in &self.tr_blocks {
                    b.init_params(store, rng);
                }
            }
        }
        store.insert(NORM_F, Init::ones(&[self.cfg.d_emb]));
    }

    /// Embed `[adapted image rows] ++ [token embedding rows]` through the
    /// block stack, recording the absolute position of every `<tor>` id.
    pub fn embed_sequence<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        tokens: &[TokenId],
        image_rows: Option<ValueId>,
    ) -> Result<EmbedderOutput> {
        let img_len = image_rows.map_or(0, |id| tape.shape(id)[0]);
        if img_len + tokens.len() == 0 {
            return Err(Error::contract("embed_sequence", "empty input"));
        }
        if let Some(id) = image_rows {
            if tape.shape(id)[1] != self.cfg.d_emb {
                return Err(Error::shape(
                    "embed_sequence",
                    format!("image rows width {} vs d_emb {}", tape.shape(id)[1], self.cfg.d_emb),
                ));
            }
        }

        let table = tape.param(store, TOK_EMB);
        let tok_rows = tape.embedding(table, tokens)?;
        let mut input = match image_rows {
            Some(img) if tokens.is_empty() => img,
            Some(img) => tape.concat_rows(&[img, tok_rows])?,
            None => tok_rows,
        };
        let seq_len = img_len + tokens.len();

        if self.cfg.architecture == Architecture::Transformer {
            let pos = tape.constant(sinusoidal::<F>(seq_len, self.cfg.d_emb));
            input = tape.add(input, pos)?;
        }

        let mut h = input;
        match self.cfg.architecture {
            Architecture::Ssm => {
                for b in &self.ssm_blocks {
                    h = b.forward(store, tape, h)?;
                }
            }
            Architecture::Transformer => {
                for b in &self.tr_blocks {
                    h = b.forward(store, tape, h)?;
                }
            }
        }
        let norm_g = tape.param(store, NORM_F);
        let features = tape.rms_norm(h, norm_g)?;

        let tor_positions = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == TOR).then_some(img_len + i))
            .collect();

        Ok(EmbedderOutput { features, tor_positions, seq_len })
    }
}

/// Two-layer GELU MLP carrying `<tor>` features into backbone width.
pub struct TorProjector {
    pub d_emb: usize,
    pub d_mlm: usize,
}

impl TorProjector {
    pub fn new(d_emb: usize, d_mlm: usize) -> Self {
        TorProjector { d_emb, d_mlm }
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        store.insert(TORPROJ_FC1_W, Init::linear(rng, self.d_emb, self.d_mlm));
        store.insert(TORPROJ_FC1_B, Init::zeros(&[self.d_mlm]));
        store.insert(TORPROJ_FC2_W, Init::linear(rng, self.d_mlm, self.d_mlm));
        store.insert(TORPROJ_FC2_B, Init::zeros(&[self.d_mlm]));
    }

    /// Select the rows at `tor_positions` and project them rowwise.
    pub fn extract_and_project<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        out: &EmbedderOutput,
    ) -> Result<TorFeatures> {
        if out.tor_positions.is_empty() {
            return Err(Error::Extraction("no <tor> positions recorded in embedder output".into()));
        }
        let raw = tape.gather_rows(out.features, &out.tor_positions)?;
        let w1 = tape.param(store, TORPROJ_FC1_W);
        let b1 = tape.param(store, TORPROJ_FC1_B);
        let w2 = tape.param(store, TORPROJ_FC2_W);
        let b2 = tape.param(store, TORPROJ_FC2_B);
        let h = tape.matmul(raw, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let projected = tape.add_bias(o, b2)?;
        Ok(TorFeatures { raw, projected, k: out.tor_positions.len() })
    }
}

/// Fixed sinusoidal position encodings for the transformer baseline.
fn sinusoidal<F: Scalar>(rows: usize, width: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(rows * width);
    for pos in 0..rows {
        for i in 0..width {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * rate;
            data.push(F::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![rows, width], data).unwrap()
}

#[cfg(test)]
mod tests;
