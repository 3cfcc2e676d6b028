//! Toy frozen image encoder standing in for a pretrained vision tower, plus
//! the trainable projector into the backbone and the adapter into the
//! embedder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamStore, Scalar, Tape, Tensor, ValueId};

pub const PATCH: usize = 4;

/// Procedurally generated H x W x C image with values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SyntheticImage {
    pub pixels: Vec<Vec<Vec<f32>>>,
}

impl SyntheticImage {
    pub fn new(pixels: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        let img = SyntheticImage { pixels };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.pixels.len();
        let w = self.pixels.first().map_or(0, |r| r.len());
        if h == 0 || w == 0 {
            return Err(Error::shape("synthetic_image", "empty image"));
        }
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::shape(
                "synthetic_image",
                format!("{h}x{w} not divisible by patch size {PATCH}"),
            ));
        }
        for row in &self.pixels {
            if row.len() != w {
                return Err(Error::shape("synthetic_image", "ragged rows"));
            }
            for px in row {
                if px.len() != self.channels() {
                    return Err(Error::shape("synthetic_image", "ragged channels"));
                }
                if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::shape("synthetic_image", "pixel outside [0,1]"));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.len()
    }

    pub fn width(&self) -> usize {
        self.pixels[0].len()
    }

    pub fn channels(&self) -> usize {
        self.pixels[0][0].len()
    }

    pub fn num_patches(&self) -> usize {
        (self.height() / PATCH) * (self.width() / PATCH)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub channels: usize,
    pub d_vis: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { image_size: 16, channels: 3, d_vis: 32 }
    }
}

impl VisionConfig {
    pub fn patches(&self) -> usize {
        (self.image_size / PATCH) * (self.image_size / PATCH)
    }

    pub fn patch_dim(&self) -> usize {
        PATCH * PATCH * self.channels
    }
}

/// Patch features produced by the frozen encoder; deterministic per image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatures<F: Scalar> {
    pub matrix: Tensor<F>,
}

/// Parameter names. The encoder weight is always frozen; the projector and
/// adapter train in both stages.
pub const ENCODER_WEIGHT: &str = "vision.encoder.weight";
pub const PROJ_FC1_W: &str = "vision.projector.fc1.w";
pub const PROJ_FC1_B: &str = "vision.projector.fc1.b";
pub const PROJ_FC2_W: &str = "vision.projector.fc2.w";
pub const PROJ_FC2_B: &str = "vision.projector.fc2.b";
pub const ADAPT_W: &str = "vision.adapter.w";
pub const ADAPT_B: &str = "vision.adapter.b";

#[derive(Clone, Debug)]
pub struct VisionStack {
    pub cfg: VisionConfig,
    pub d_mlm: usize,
    pub d_emb: usize,
}

impl VisionStack {
    pub fn new(cfg: VisionConfig, d_mlm: usize, d_emb: usize) -> Self {
        VisionStack { cfg, d_mlm, d_emb }
    }

    /// Register parameters. The encoder projection is drawn from a seed of
    /// its own so every run configuration shares the same frozen tower.
    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let mut enc_rng = ChaCha8Rng::seed_from_u64(ENCODER_TOWER_SEED);
        store.insert_frozen(
            ENCODER_WEIGHT,
            Init::linear(&mut enc_rng, self.cfg.patch_dim(), self.cfg.d_vis),
        );
        store.insert(PROJ_FC1_W, Init::linear(rng, self.cfg.d_vis, self.d_mlm));
        store.insert(PROJ_FC1_B, Init::zeros(&[self.d_mlm]));
        store.insert(PROJ_FC2_W, Init::linear(rng, self.d_mlm, self.d_mlm));
        store.insert(PROJ_FC2_B, Init::zeros(&[self.d_mlm]));
        store.insert(ADAPT_W, Init::linear(rng, self.cfg.d_vis, self.d_emb));
        store.insert(ADAPT_B, Init::zeros(&[self.d_emb]));
    }

    /// Frozen patch encoder: patchify, flatten, project with the frozen
    /// random matrix, add fixed sinusoidal position encodings.
    pub fn encode_image<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        img: &SyntheticImage,
    ) -> Result<VisionFeatures<F>> {
        img.validate()?;
        if img.channels() != self.cfg.channels {
            return Err(Error::shape(
                "encode_image",
                format!("expected {} channels, got {}", self.cfg.channels, img.channels()),
            ));
        }
        let (ph, pw) = (img.height() / PATCH, img.width() / PATCH);
        let p = ph * pw;
        let pd = self.cfg.patch_dim();
        let mut patches = Vec::with_capacity(p * pd);
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let pixel = &img.pixels[py * PATCH + dy][px * PATCH + dx];
                        for c in pixel {
                            patches.push(F::from_f64(*c as f64));
                        }
                    }
                }
            }
        }
        let patches = Tensor::new(vec![p, pd], patches)?;
        let weight = store.tensor(ENCODER_WEIGHT);
        let mut out = vec![F::ZERO; p * self.cfg.d_vis];
        crate::numerics::kernels::matmul(
            patches.data(),
            weight.data(),
            p,
            pd,
            self.cfg.d_vis,
            &mut out,
        );
        let pos = sinusoidal_rows::<F>(p, self.cfg.d_vis);
        for (o, &pe) in out.iter_mut().zip(pos.data()) {
            *o += pe;
        }
        Ok(VisionFeatures { matrix: Tensor::new(vec![p, self.cfg.d_vis], out)? })
    }

    /// Two-layer GELU MLP into backbone width; trainable in both stages.
    pub fn project<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        features: &VisionFeatures<F>,
    ) -> Result<ValueId> {
        if features.matrix.cols() != self.cfg.d_vis {
            return Err(Error::shape(
                "vision_project",
                format!("features width {} vs d_vis {}", features.matrix.cols(), self.cfg.d_vis),
            ));
        }
        let x = tape.constant(features.matrix.clone());
        let w1 = tape.param(store, PROJ_FC1_W);
        let b1 = tape.param(store, PROJ_FC1_B);
        let w2 = tape.param(store, PROJ_FC2_W);
        let b2 = tape.param(store, PROJ_FC2_B);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_bias(o, b2)
    }

    /// Single linear map into embedder width.
    pub fn adapt<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        features: &VisionFeatures<F>,
    ) -> Result<ValueId> {
        if features.matrix.cols() != self.cfg.d_vis {
            return Err(Error::shape(
                "vision_adapt",
                format!("features width {} vs d_vis {}", features.matrix.cols(), self.cfg.d_vis),
            ));
        }
        let x = tape.constant(features.matrix.clone());
        let w = tape.param(store, ADAPT_W);
        let b = tape.param(store, ADAPT_B);
        let o = tape.matmul(x, w)?;
        tape.add_bias(o, b)
    }
}

/// Fixed sinusoidal position encodings, one row per patch.
fn sinusoidal_rows<F: Scalar>(rows: usize, width: usize) -> Tensor<F> {
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

/// Tower seed, independent of the run seed.
const ENCODER_TOWER_SEED: u64 = 0x4d45_5445_4f52;
