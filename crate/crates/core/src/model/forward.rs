use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{EmbedActivation, Model};
use crate::tensor::Tensor;

struct GruVars {
    update_w: Var,
    update_b: Var,
    reset_w: Var,
    reset_b: Var,
    cand_x: Var,
    cand_h: Var,
    cand_b: Var,
}

/// Model parameters placed on a tape, in the order of [`Model::params`].
pub struct Bound {
    pub vars: Vec<Var>,
    conv: Vec<Var>,
    strides: Vec<usize>,
    embedding: Var,
    gru: Vec<GruVars>,
    fc1: (Var, Var),
    fc2: (Var, Var),
    pub(crate) scale: Var,
    pub(crate) shift: Var,
    activation: EmbedActivation,
    dropout: f64,
    hidden: usize,
    input_mean: f64,
}

impl Bound {
    pub(crate) fn new(model: &Model, tape: &mut Tape, trainable: bool) -> Self {
        let vars: Vec<Var> = model
            .params()
            .iter()
            .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Self::from_vars(model, vars)
    }

    /// Use caller-provided nodes, one per parameter in [`Model::params`] order.
    pub fn from_vars(model: &Model, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), model.params().len(), "one var per parameter");
        let find = |name: &str| {
            let i = model.params().iter().position(|p| p.name == name).unwrap_or_else(|| panic!("missing {name}"));
            vars[i]
        };
        let conv = (0..model.config().conv_widths.len())
            .map(|i| find(&format!("visual.conv{i}.weight")))
            .collect();
        let gru = (0..2)
            .map(|l| {
                let p = |s: &str| find(&format!("language.gru{l}.{s}"));
                GruVars {
                    update_w: p("update.weight"),
                    update_b: p("update.bias"),
                    reset_w: p("reset.weight"),
                    reset_b: p("reset.bias"),
                    cand_x: p("cand_input.weight"),
                    cand_h: p("cand_hidden.weight"),
                    cand_b: p("cand.bias"),
                }
            })
            .collect();
        Bound {
            conv,
            strides: model.config().strides(),
            embedding: find("language.embedding"),
            gru,
            fc1: (find("embed.fc1.weight"), find("embed.fc1.bias")),
            fc2: (find("embed.fc2.weight"), find("embed.fc2.bias")),
            scale: find("embed.norm.scale"),
            shift: find("embed.norm.shift"),
            activation: model.config().embed_activation,
            dropout: model.config().dropout,
            hidden: model.config().embed_width,
            input_mean: model.config().input_mean,
            vars,
        }
    }

    /// `[H,W,C]` image → `[H',W',D]` features.
    pub fn encode_image(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let mut x = tape.add_scalar(image, -self.input_mean)?;
        for (&w, &stride) in self.conv.iter().zip(&self.strides) {
            let y = tape.conv2d(x, w, stride, 1)?;
            x = tape.tanh(y)?;
        }
        Ok(x)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if self.dropout == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    /// Two-layer perceptron applied to `[D]` or `[P,D]`.
    fn project(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = tape.matmul(x, self.fc1.0)?;
        let h = tape.add(h, self.fc1.1)?;
        let h = match self.activation {
            EmbedActivation::Tanh => tape.tanh(h)?,
            EmbedActivation::Identity => h,
        };
        let h = self.dropout(tape, h, rng)?;
        let y = tape.matmul(h, self.fc2.0)?;
        tape.add(y, self.fc2.1)
    }

    /// Average-pool the grid and project: `[E]`, before normalization.
    pub fn pool_and_project(&self, tape: &mut Tape, features: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let pooled = tape.mean_pool(features)?;
        self.project(tape, pooled, rng)
    }

    /// Project every cell: `[H'W', E]`, before normalization.
    pub fn project_cells(&self, tape: &mut Tape, features: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let s = tape.value(features).shape().to_vec();
        let flat = tape.reshape(features, &[s[0] * s[1], s[2]])?;
        self.project(tape, flat, rng)
    }

    /// `[H'W', E]` cells against an `[E]` code → `[H', W']` logits.
    pub fn mask_logits(&self, tape: &mut Tape, cells: Var, code: Var, h: usize, w: usize) -> Result<Var> {
        let l = tape.matmul(cells, code)?;
        tape.reshape(l, &[h, w])
    }

    /// Final hidden state of the two-layer recurrent encoder.
    pub fn encode_phrase(&self, tape: &mut Tape, ids: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let zero = tape.constant(Tensor::zeros(&[self.hidden]));
        let mut state = [zero, zero];
        for &id in ids {
            let row = tape.gather_rows(self.embedding, &[id])?;
            let mut x = tape.reshape(row, &[tape.value(row).shape()[1]])?;
            for (layer, g) in self.gru.iter().enumerate() {
                if layer > 0 {
                    x = self.dropout(tape, x, rng.as_deref_mut())?;
                }
                state[layer] = gru_step(tape, g, x, state[layer])?;
                x = state[layer];
            }
        }
        Ok(state[1])
    }
}

fn gru_step(tape: &mut Tape, g: &GruVars, x: Var, h: Var) -> Result<Var> {
    let xh = tape.concat(&[x, h])?;
    let z = tape.matmul(xh, g.update_w)?;
    let z = tape.add(z, g.update_b)?;
    let z = tape.sigmoid(z)?;
    let r = tape.matmul(xh, g.reset_w)?;
    let r = tape.add(r, g.reset_b)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let nx = tape.matmul(x, g.cand_x)?;
    let nh = tape.matmul(rh, g.cand_h)?;
    let n = tape.add(nx, nh)?;
    let n = tape.add(n, g.cand_b)?;
    let n = tape.tanh(n)?;
    // h' = h + z * (n - h)
    let d = tape.sub(n, h)?;
    let zd = tape.mul(z, d)?;
    tape.add(h, zd)
}

/// Per-feature standardization followed by learnable scale and shift.
pub struct Normalizer {
    mean: Var,
    inv_std: Var,
    /// Batch variance, present when built from batch statistics.
    pub variance: Option<Var>,
}

impl Normalizer {
    /// Fixed statistics from the model's running averages.
    pub fn running(model: &Model, tape: &mut Tape) -> Self {
        let (mean, var) = model.running_stats();
        let eps = model.config().norm_eps;
        let inv = var.map(|v| 1.0 / (v + eps).sqrt());
        Normalizer { mean: tape.constant(mean.clone()), inv_std: tape.constant(inv), variance: None }
    }

    /// Statistics of a batch of `[E]` vectors, differentiable.
    pub fn from_batch(tape: &mut Tape, vectors: &[Var], eps: f64) -> Result<Self> {
        let rows = vectors
            .iter()
            .map(|&v| {
                let e = tape.value(v).len();
                tape.reshape(v, &[1, e])
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&rows)?;
        let mean = tape.mean_pool(stacked)?;
        let centered = tape.sub(stacked, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_pool(sq)?;
        let shifted = tape.add_scalar(var, eps)?;
        let inv_std = tape.powf(shifted, -0.5)?;
        Ok(Normalizer { mean, inv_std, variance: Some(var) })
    }

    pub fn mean(&self) -> Var {
        self.mean
    }

    /// Normalize `[E]` or `[P,E]`.
    pub fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let c = tape.sub(x, self.mean)?;
        let n = tape.mul(c, self.inv_std)?;
        let s = tape.mul(n, b.scale)?;
        tape.add(s, b.shift)
    }
}
