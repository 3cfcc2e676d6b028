//! Composition of the full model: vision stack, rationale embedder, tor
//! projector, and backbone, plus the per-sample forward plans shared by
//! training, evaluation, and analysis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    assemble_stage1, assemble_stage2, assemble_stage2_prefix, AssembledSequence, Backbone,
    BackboneConfig, DecodeMode, RowTag,
};
use crate::datapipe::QRATriple;
use crate::embedder::{Embedder, EmbedderConfig, TorProjector};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, ValueId};
use crate::tokenizer::{encode, plant_tor, PlantedRationale, TokenId, TorStrategy, EOR, EOS, TOR};
use crate::vision::{SyntheticImage, VisionConfig, VisionStack};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub k_tor: usize,
    pub strategy: TorStrategy,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { k_tor: 10, strategy: TorStrategy::Even }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub vision: VisionConfig,
    pub embedder: EmbedderConfig,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokenizer.k_tor < 1 {
            return Err(Error::Config("k_tor must be >= 1".into()));
        }
        self.embedder.validate()?;
        self.backbone.validate()
    }
}

/// Parameter stores for every component with per-group freeze flags.
pub struct ModelBundle<F: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub vision: VisionStack,
    pub embedder: Embedder,
    pub tor_proj: TorProjector,
    pub backbone: Backbone,
}

impl<F: Scalar> ModelBundle<F> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vision = VisionStack::new(cfg.vision, cfg.backbone.d_mlm, cfg.embedder.d_emb);
        let embedder = Embedder::new(cfg.embedder);
        let tor_proj = TorProjector::new(cfg.embedder.d_emb, cfg.backbone.d_mlm);
        let backbone = Backbone::new(cfg.backbone);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vision.init_params(&mut store, &mut rng);
        embedder.init_params(&mut store, &mut rng);
        tor_proj.init_params(&mut store, &mut rng);
        backbone.init_params(&mut store, &mut rng);
        Ok(ModelBundle { cfg, store, vision, embedder, tor_proj, backbone })
    }

    /// Rebuild the component views after loading parameters from disk.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let vision = VisionStack::new(cfg.vision, cfg.backbone.d_mlm, cfg.embedder.d_emb);
        let embedder = Embedder::new(cfg.embedder);
        let tor_proj = TorProjector::new(cfg.embedder.d_emb, cfg.backbone.d_mlm);
        let backbone = Backbone::new(cfg.backbone);
        Ok(ModelBundle { cfg, store, vision, embedder, tor_proj, backbone })
    }
}

/// A triple tokenized for training, with the planting seed pinned per
/// sample so reruns and epochs agree.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub question: Vec<TokenId>,
    pub rationale: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub image: Option<SyntheticImage>,
    pub plant_seed: u64,
}

pub fn prepare(triple: &QRATriple, run_seed: u64) -> PreparedSample {
    let plant_seed = crate::datapipe::fnv1a(triple.id.as_bytes()) ^ run_seed;
    PreparedSample {
        id: triple.id.clone(),
        question: encode(&triple.question),
        rationale: encode(&triple.rationale),
        answer: encode(&triple.answer),
        image: triple.image.clone(),
        plant_seed,
    }
}

/// What the embedder is trained to regenerate in stage 1: the curated
/// rationale (the real recipe) or the bare answer (ablation baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Source {
    Rationale,
    Answer,
}

pub struct Stage1Forward {
    pub seq: AssembledSequence,
    pub planted: PlantedRationale,
}

impl<F: Scalar> ModelBundle<F> {
    fn image_rows(
        &self,
        tape: &mut Tape<F>,
        image: Option<&SyntheticImage>,
    ) -> Result<(Option<ValueId>, Option<ValueId>)> {
        match image {
            None => Ok((None, None)),
            Some(img) => {
                let features = self.vision.encode_image(&self.store, img)?;
                let emb_rows = self.vision.adapt(&self.store, tape, &features)?;
                let mlm_rows = self.vision.project(&self.store, tape, &features)?;
                Ok((Some(emb_rows), Some(mlm_rows)))
            }
        }
    }

    fn plant(&self, sample: &PreparedSample, source: Stage1Source) -> Result<PlantedRationale> {
        let body = match source {
            Stage1Source::Rationale => &sample.rationale,
            Stage1Source::Answer => &sample.answer,
        };
        // the answer ablation clamps k to the body length; answers can run
        // shorter than the configured <tor> budget
        let k = match source {
            Stage1Source::Rationale => self.cfg.tokenizer.k_tor,
            Stage1Source::Answer => self.cfg.tokenizer.k_tor.min(body.len().max(1)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample.plant_seed);
        plant_tor(body, k, self.cfg.tokenizer.strategy, &mut rng)
    }

    /// Row count of the stage-1 assembly without building it.
    pub fn stage1_len(&self, sample: &PreparedSample, source: Stage1Source) -> usize {
        let body_len = match source {
            Stage1Source::Rationale => sample.rationale.len(),
            Stage1Source::Answer => sample.answer.len(),
        };
        let k = match source {
            Stage1Source::Rationale => self.cfg.tokenizer.k_tor,
            Stage1Source::Answer => self.cfg.tokenizer.k_tor.min(body_len.max(1)),
        };
        let img = if sample.image.is_some() { self.cfg.vision.patches() } else { 0 };
        img + 1 + sample.question.len() + body_len + k + 1
    }

    pub fn stage2_len(&self, sample: &PreparedSample) -> usize {
        let img = if sample.image.is_some() { self.cfg.vision.patches() } else { 0 };
        img + 1 + sample.question.len() + self.cfg.tokenizer.k_tor + sample.answer.len() + 1
    }

    /// Stage-1 forward: plant, embed, extract-and-project, assemble,
    /// masked loss over rationale segments.
    pub fn stage1_loss(
        &self,
        tape: &mut Tape<F>,
        sample: &PreparedSample,
        source: Stage1Source,
    ) -> Result<ValueId> {
        let planted = self.plant(sample, source)?;
        let (emb_img, mlm_img) = self.image_rows(tape, sample.image.as_ref())?;
        let mut emb_tokens = sample.question.clone();
        emb_tokens.extend_from_slice(&planted.tokens);
        let emb_out = self.embedder.embed_sequence(&self.store, tape, &emb_tokens, emb_img)?;
        let tor = self.tor_proj.extract_and_project(&self.store, tape, &emb_out)?;
        let seq = assemble_stage1(tape, &self.store, mlm_img, &sample.question, &planted, &tor)?;
        self.backbone.forward_loss(&self.store, tape, &seq)
    }

    /// Stage-2 forward: the embedder sees `[img][q][<tor> x k]` with no
    /// rationale; answer tokens carry the loss.
    pub fn stage2_loss(&self, tape: &mut Tape<F>, sample: &PreparedSample) -> Result<ValueId> {
        let seq = self.stage2_assembled(tape, sample, true)?;
        self.backbone.forward_loss(&self.store, tape, &seq)
    }

    fn stage2_assembled(
        &self,
        tape: &mut Tape<F>,
        sample: &PreparedSample,
        with_answer: bool,
    ) -> Result<AssembledSequence> {
        let k = self.cfg.tokenizer.k_tor;
        let (emb_img, mlm_img) = self.image_rows(tape, sample.image.as_ref())?;
        let mut emb_tokens = sample.question.clone();
        emb_tokens.extend(std::iter::repeat_n(TOR, k));
        let emb_out = self.embedder.embed_sequence(&self.store, tape, &emb_tokens, emb_img)?;
        let tor = self.tor_proj.extract_and_project(&self.store, tape, &emb_out)?;
        if with_answer {
            assemble_stage2(tape, &self.store, mlm_img, &sample.question, &tor, &sample.answer)
        } else {
            assemble_stage2_prefix(tape, &self.store, mlm_img, &sample.question, &tor)
        }
    }

    /// Raw (pre-projection) `<tor>` features for the retrieval analysis.
    /// `with_rationale` selects the stage-1-style planted input; otherwise
    /// the stage-2-style `[img][q][<tor> x k]` input is used.
    pub fn tor_features_raw(
        &self,
        sample: &PreparedSample,
        with_rationale: bool,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let (emb_img, _) = self.image_rows(&mut tape, sample.image.as_ref())?;
        let mut emb_tokens = sample.question.clone();
        if with_rationale {
            let planted = self.plant(sample, Stage1Source::Rationale)?;
            emb_tokens.extend_from_slice(&planted.tokens);
        } else {
            emb_tokens.extend(std::iter::repeat_n(TOR, self.cfg.tokenizer.k_tor));
        }
        let emb_out = self.embedder.embed_sequence(&self.store, &mut tape, &emb_tokens, emb_img)?;
        if emb_out.tor_positions.is_empty() {
            return Err(Error::Extraction("no <tor> positions in analysis input".into()));
        }
        let raw = tape.gather_rows(emb_out.features, &emb_out.tor_positions)?;
        Ok(tape.detach(raw))
    }

    /// Decode an answer for a sample, embedder path.
    pub fn generate_answer(
        &self,
        sample: &PreparedSample,
        mode: DecodeMode,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        let mut tape = Tape::new();
        let seq = self.stage2_assembled(&mut tape, sample, false)?;
        let prefix = tape.detach(seq.rows);
        self.backbone.generate(&self.store, prefix, mode, max_new)
    }

    /// Plain backbone path used by the no-embedder ablations: rows are
    /// `[img][<bos>][q][body][terminator]` with no `<tor>` features at all.
    pub fn plain_loss(
        &self,
        tape: &mut Tape<F>,
        sample: &PreparedSample,
        target: PlainTarget,
    ) -> Result<ValueId> {
        let seq = self.plain_assembled(tape, sample, Some(target))?;
        self.backbone.forward_loss(&self.store, tape, &seq)
    }

    fn plain_assembled(
        &self,
        tape: &mut Tape<F>,
        sample: &PreparedSample,
        target: Option<PlainTarget>,
    ) -> Result<AssembledSequence> {
        let (_, mlm_img) = self.image_rows(tape, sample.image.as_ref())?;
        let (body, tag, terminator): (&[TokenId], RowTag, TokenId) = match target {
            Some(PlainTarget::Rationale) => (&sample.rationale, RowTag::Rationale, EOR),
            Some(PlainTarget::Answer) => (&sample.answer, RowTag::Answer, EOS),
            None => (&[], RowTag::Answer, EOS),
        };
        if target.is_some() && body.is_empty() {
            return Err(Error::Assembly(format!("{}: empty target body", sample.id)));
        }
        crate::backbone::assemble_plain(
            tape,
            &self.store,
            mlm_img,
            &sample.question,
            body,
            tag,
            terminator,
            target.is_some(),
        )
    }

    pub fn plain_len(&self, sample: &PreparedSample, target: PlainTarget) -> usize {
        let body_len = match target {
            PlainTarget::Rationale => sample.rationale.len(),
            PlainTarget::Answer => sample.answer.len(),
        };
        let img = if sample.image.is_some() { self.cfg.vision.patches() } else { 0 };
        img + 1 + sample.question.len() + body_len + 1
    }

    pub fn generate_answer_plain(
        &self,
        sample: &PreparedSample,
        mode: DecodeMode,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        let mut tape = Tape::new();
        let seq = self.plain_assembled(&mut tape, sample, None)?;
        let prefix = tape.detach(seq.rows);
        self.backbone.generate(&self.store, prefix, mode, max_new)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlainTarget {
    Rationale,
    Answer,
}

