//! Visual encoder, language encoder and the shared semantic embedding.
//!
//! The image passes through a small conv stack to a `H'×W'×D` feature grid.
//! The grid is average-pooled and projected by a two-layer perceptron plus
//! per-feature normalization into the visual code; the *same* projection is
//! applied at every grid cell to score cells against a phrase code. Phrases
//! are encoded by two stacked gated recurrent layers whose last hidden state
//! is the language code.

mod config;
mod forward;
mod io;
mod vocab;

pub use config::{EmbedActivation, ModelConfig};
pub use forward::{Bound, Normalizer};
pub use vocab::{Vocabulary, UNKNOWN_TOKEN};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Visual,
    Language,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Output grid of the visual encoder, `[H', W', D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatures(pub Tensor);

impl SpatialFeatures {
    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Per-cell relevance of a phrase, values in (0,1) stored with their logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    values: Tensor,
    logits: Tensor,
}

impl AttentionMask {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.rank() != 2 || logits.is_empty() {
            return Err(Error::shape("attention_mask", &[logits.shape()]));
        }
        Ok(AttentionMask { values: logits.map(sigmoid), logits })
    }

    /// Build from raw values; logits are recovered so ordering is preserved.
    pub fn from_values(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.is_empty() {
            return Err(Error::shape("attention_mask", &[values.shape()]));
        }
        let logits = values.map(|v| (v / (1.0 - v)).ln());
        Ok(AttentionMask { values, logits })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Row-major index of the maximum; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, usize) {
        let d = self.logits.data();
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        (best / self.width(), best % self.width())
    }
}

/// A complete model: configuration, learnable parameters, normalization
/// running statistics and the token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    running_mean: Tensor,
    running_var: Tensor,
    vocab: Vocabulary,
}

impl Model {
    /// Uniform `±1/sqrt(fan_in)` initialization from a fixed seed.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut add = |name: String, group: ParamGroup, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(Param { name, group, value: Tensor::uniform(shape, -bound, bound, rng) });
        };

        let mut c_in = config.channels;
        for (i, &w) in config.conv_widths.iter().enumerate() {
            let fan = 9 * c_in;
            // no bias: a zero background stays zero through every layer, so
            // the zero padding never looks like an edge
            add(format!("visual.conv{i}.weight"), ParamGroup::Visual, &[3, 3, c_in, w], fan, &mut rng);
            c_in = w;
        }

        // one-hot lookup: fan-in 1
        add("language.embedding".into(), ParamGroup::Language, &[vocab.len(), config.word_dim], 1, &mut rng);
        let h = config.embed_width;
        for layer in 0..2 {
            let input = if layer == 0 { config.word_dim } else { h };
            let fan = input + h;
            let p = |s: &str| format!("language.gru{layer}.{s}");
            add(p("update.weight"), ParamGroup::Language, &[input + h, h], fan, &mut rng);
            add(p("update.bias"), ParamGroup::Language, &[h], fan, &mut rng);
            add(p("reset.weight"), ParamGroup::Language, &[input + h, h], fan, &mut rng);
            add(p("reset.bias"), ParamGroup::Language, &[h], fan, &mut rng);
            add(p("cand_input.weight"), ParamGroup::Language, &[input, h], fan, &mut rng);
            add(p("cand_hidden.weight"), ParamGroup::Language, &[h, h], fan, &mut rng);
            add(p("cand.bias"), ParamGroup::Language, &[h], fan, &mut rng);
        }

        let d = config.feature_depth();
        let hid = config.embed_hidden;
        add("embed.fc1.weight".into(), ParamGroup::Embedding, &[d, hid], d, &mut rng);
        add("embed.fc1.bias".into(), ParamGroup::Embedding, &[hid], d, &mut rng);
        add("embed.fc2.weight".into(), ParamGroup::Embedding, &[hid, h], hid, &mut rng);
        add("embed.fc2.bias".into(), ParamGroup::Embedding, &[h], hid, &mut rng);
        params.push(Param { name: "embed.norm.scale".into(), group: ParamGroup::Embedding, value: Tensor::ones(&[h]) });
        params.push(Param { name: "embed.norm.shift".into(), group: ParamGroup::Embedding, value: Tensor::zeros(&[h]) });

        Ok(Model {
            config,
            params,
            running_mean: Tensor::zeros(&[h]),
            running_var: Tensor::ones(&[h]),
            vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn running_stats(&self) -> (&Tensor, &Tensor) {
        (&self.running_mean, &self.running_var)
    }

    /// Exponential moving update of the normalization statistics.
    pub fn update_running_stats(&mut self, mean: &Tensor, var: &Tensor) {
        let m = self.config.norm_momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Put every parameter on `tape`, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::new(self, tape, trainable)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s, self.config.channels] {
            return Err(Error::shape("encode_image", &[image.shape(), &[s, s, self.config.channels]]));
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<SpatialFeatures> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = b.encode_image(&mut tape, x)?;
        Ok(SpatialFeatures(tape.value(f).clone()))
    }

    /// Visual code of a feature grid using the running normalization statistics.
    pub fn pool_and_embed(&self, features: &SpatialFeatures) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        self.check_depth(features)?;
        let f = tape.constant(features.0.clone());
        let norm = Normalizer::running(self, &mut tape);
        let pooled = b.pool_and_project(&mut tape, f, None)?;
        let v = norm.apply(&mut tape, &b, pooled)?;
        Ok(tape.value(v).clone())
    }

    fn check_depth(&self, features: &SpatialFeatures) -> Result<()> {
        if features.0.rank() != 3 || features.depth() != self.config.feature_depth() {
            return Err(Error::shape("features", &[features.0.shape(), &[self.config.feature_depth()]]));
        }
        Ok(())
    }

    pub fn encode_phrase<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let ids = self.vocab.encode(tokens)?;
        let code = b.encode_phrase(&mut tape, &ids, None)?;
        Ok(tape.value(code).clone())
    }

    pub fn attention_mask(&self, features: &SpatialFeatures, code: &Tensor) -> Result<AttentionMask> {
        self.check_depth(features)?;
        if code.shape() != [self.config.embed_width] {
            return Err(Error::shape("attention_mask", &[code.shape(), &[self.config.embed_width]]));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let f = tape.constant(features.0.clone());
        let c = tape.constant(code.clone());
        let norm = Normalizer::running(self, &mut tape);
        let cells = b.project_cells(&mut tape, f, None)?;
        let cells = norm.apply(&mut tape, &b, cells)?;
        let logits = b.mask_logits(&mut tape, cells, c, features.height(), features.width())?;
        AttentionMask::from_logits(tape.value(logits).clone())
    }

    /// Attention mask of a phrase on an image, end to end.
    pub fn ground(&self, image: &Tensor, tokens: &[impl AsRef<str>]) -> Result<AttentionMask> {
        let f = self.encode_image(image)?;
        let code = self.encode_phrase(tokens)?;
        self.attention_mask(&f, &code)
    }

    /// Visual code, per-cell embeddings and mask grid size for an image; shared by
    /// several phrases during evaluation.
    pub fn prepare_image(&self, image: &Tensor) -> Result<PreparedImage> {
        let f = self.encode_image(image)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let fv = tape.constant(f.0.clone());
        let norm = Normalizer::running(self, &mut tape);
        let cells = b.project_cells(&mut tape, fv, None)?;
        let cells = norm.apply(&mut tape, &b, cells)?;
        let pooled = b.pool_and_project(&mut tape, fv, None)?;
        let visual = norm.apply(&mut tape, &b, pooled)?;
        Ok(PreparedImage {
            cells: tape.value(cells).clone(),
            visual_code: tape.value(visual).clone(),
            height: f.height(),
            width: f.width(),
        })
    }

    /// Random perturbation helper for tests and experiments.
    pub fn perturb<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
}

/// Image-side quantities computed once and reused for many phrases.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub cells: Tensor,
    pub visual_code: Tensor,
    pub height: usize,
    pub width: usize,
}

impl PreparedImage {
    pub fn mask(&self, code: &Tensor) -> Result<AttentionMask> {
        let logits = crate::autodiff::Primitive::MatMul.forward(&[&self.cells, code])?;
        AttentionMask::from_logits(logits.reshape(&[self.height, self.width])?)
    }

    pub fn score(&self, code: &Tensor) -> Result<f64> {
        match_score(&self.visual_code, code)
    }
}

/// `sigmoid(visual · language)`.
pub fn match_score(visual: &Tensor, language: &Tensor) -> Result<f64> {
    let d = crate::autodiff::Primitive::Dot.forward(&[visual, language])?;
    Ok(sigmoid(d.item()))
}

#[cfg(test)]
mod tests;
