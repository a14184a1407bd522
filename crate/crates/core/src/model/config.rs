use std::fmt::Write;

use crate::config::Entry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedActivation {
    Tanh,
    /// Linear perceptron; pooling then commutes with projection.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Total spatial downsampling of the conv stack: 1, 2 or 4.
    pub delta: usize,
    pub conv_widths: Vec<usize>,
    pub word_dim: usize,
    /// Width of the semantic space and of the recurrent hidden state.
    pub embed_width: usize,
    pub embed_hidden: usize,
    pub embed_activation: EmbedActivation,
    pub dropout: f64,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    /// Subtracted from every pixel before the conv stack, so that zero
    /// padding looks like background rather than a dark frame.
    pub input_mean: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 80,
            channels: 3,
            delta: 4,
            conv_widths: vec![8, 16, 32],
            word_dim: 32,
            embed_width: 32,
            embed_hidden: 32,
            embed_activation: EmbedActivation::Tanh,
            dropout: 0.0,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            input_mean: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn feature_depth(&self) -> usize {
        *self.conv_widths.last().unwrap()
    }

    /// Stride of each conv layer; downsampling happens in the first layers.
    pub fn strides(&self) -> Vec<usize> {
        let halvings = self.delta.trailing_zeros() as usize;
        (0..self.conv_widths.len()).map(|i| if i < halvings { 2 } else { 1 }).collect()
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.delta
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return bad(format!("conv widths {:?}", self.conv_widths));
        }
        if !self.delta.is_power_of_two() || self.delta.trailing_zeros() as usize > self.conv_widths.len() {
            return bad(format!("delta {} needs log2(delta) <= conv layers", self.delta));
        }
        if self.image_size == 0 || self.image_size % self.delta != 0 {
            return bad(format!("image size {} not divisible by delta {}", self.image_size, self.delta));
        }
        if self.word_dim == 0 || self.embed_width == 0 || self.embed_hidden == 0 || self.channels == 0 {
            return bad("zero width".into());
        }
        if !self.input_mean.is_finite() {
            return bad(format!("input mean {}", self.input_mean));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }

    /// Returns `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "image-size" => self.image_size = e.parse()?,
            "channels" => self.channels = e.parse()?,
            "delta" => self.delta = e.parse()?,
            "widths" => self.conv_widths = e.parse_list()?,
            "word-dim" => self.word_dim = e.parse()?,
            "embed-width" => self.embed_width = e.parse()?,
            "embed-hidden" => self.embed_hidden = e.parse()?,
            "embed-activation" => {
                self.embed_activation = match e.value.as_str() {
                    "tanh" => EmbedActivation::Tanh,
                    "identity" => EmbedActivation::Identity,
                    v => return Err(e.error(format!("embed-activation: unknown {v:?}"))),
                }
            }
            "dropout" => self.dropout = e.parse()?,
            "norm-eps" => self.norm_eps = e.parse()?,
            "norm-momentum" => self.norm_momentum = e.parse()?,
            "input-mean" => self.input_mean = e.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let widths: Vec<String> = self.conv_widths.iter().map(|w| w.to_string()).collect();
        let act = match self.embed_activation {
            EmbedActivation::Tanh => "tanh",
            EmbedActivation::Identity => "identity",
        };
        writeln!(s, "image-size = {}", self.image_size).unwrap();
        writeln!(s, "channels = {}", self.channels).unwrap();
        writeln!(s, "delta = {}", self.delta).unwrap();
        writeln!(s, "widths = {}", widths.join(",")).unwrap();
        writeln!(s, "word-dim = {}", self.word_dim).unwrap();
        writeln!(s, "embed-width = {}", self.embed_width).unwrap();
        writeln!(s, "embed-hidden = {}", self.embed_hidden).unwrap();
        writeln!(s, "embed-activation = {act}").unwrap();
        writeln!(s, "dropout = {:?}", self.dropout).unwrap();
        writeln!(s, "norm-eps = {:?}", self.norm_eps).unwrap();
        writeln!(s, "norm-momentum = {:?}", self.norm_momentum).unwrap();
        writeln!(s, "input-mean = {:?}", self.input_mean).unwrap();
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for e in crate::config::parse_kv(text)? {
            if !c.apply(&e)? {
                return Err(e.unknown());
            }
        }
        c.validate()?;
        Ok(c)
    }
}
