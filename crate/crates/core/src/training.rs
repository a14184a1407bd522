//! Mini-batch SGD over synthetic scenes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::losses::{loss_disc_on, loss_pc_on, loss_sib_on, total_loss, DiscLoss, Hyperparams, LossBreakdown};
use crate::model::{Bound, Model, ModelConfig, Normalizer, ParamGroup, Vocabulary};
use crate::parse::{build_grounding_tree, parse_sexpr, GroundingOptions};
use crate::scenes::SceneSample;
use crate::tensor::Tensor;

/// Training variants: which phrases are positives and which losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Ablation {
    /// Noun leaves only, discriminative loss only.
    Token,
    Disc,
    Pc,
    Sib,
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Token, Ablation::Disc, Ablation::Pc, Ablation::Sib, Ablation::Full];

    /// Loss weights in effect under this variant.
    pub fn weights(self, h: &Hyperparams) -> (f64, f64) {
        match self {
            Ablation::Token | Ablation::Disc => (0.0, 0.0),
            Ablation::Pc => (h.lambda_pc, 0.0),
            Ablation::Sib => (0.0, h.lambda_sib),
            Ablation::Full => (h.lambda_pc, h.lambda_sib),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Token => "token",
            Ablation::Disc => "disc",
            Ablation::Pc => "pc",
            Ablation::Sib => "sib",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation {s:?} (token, disc, pc, sib, full)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    pub epochs: usize,
    pub ablation: Ablation,
    pub disc_loss: DiscLoss,
    pub freeze_language_encoder: bool,
    pub clip_norm: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            hyper: Hyperparams::default(),
            epochs: 30,
            ablation: Ablation::Full,
            disc_loss: DiscLoss::Literal,
            freeze_language_encoder: false,
            clip_norm: 5.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Parse `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for e in parse_kv(text)? {
            if c.model.apply(&e)? {
                continue;
            }
            match e.key.as_str() {
                "lambda-pc" => c.hyper.lambda_pc = e.parse()?,
                "lambda-sib" => c.hyper.lambda_sib = e.parse()?,
                "lr" => c.hyper.lr = e.parse()?,
                "batch-size" => c.hyper.batch_size = e.parse()?,
                "negatives-per-image" => {
                    c.hyper.negatives_per_image = match e.value.as_str() {
                        "auto" => None,
                        _ => Some(e.parse()?),
                    }
                }
                "seed" => c.hyper.seed = e.parse()?,
                "epochs" => c.epochs = e.parse()?,
                "ablation" => c.ablation = e.value.parse().map_err(|err: Error| e.error(err.to_string()))?,
                "disc-loss" => {
                    c.disc_loss = match e.value.as_str() {
                        "literal" => DiscLoss::Literal,
                        "log-sigmoid" => DiscLoss::LogSigmoid,
                        v => return Err(e.error(format!("disc-loss: unknown {v:?}"))),
                    }
                }
                "freeze-language-encoder" => c.freeze_language_encoder = e.parse_bool()?,
                "clip-norm" => c.clip_norm = e.parse()?,
                "checkpoint-every" => c.checkpoint_every = e.parse()?,
                _ => return Err(e.unknown()),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid(format!("clip-norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// One grounding target: the phrase of a valid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub text: String,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    /// Nodes whose masks enter the structural losses.
    pub nodes: Vec<Node>,
    /// Distinct positive phrases (text).
    pub positives: Vec<String>,
    /// `(parent, children)` as indices into `nodes`.
    pub pc_pairs: Vec<(usize, Vec<usize>)>,
    pub sibling_sets: Vec<Vec<usize>>,
}

/// Scenes prepared for training under one ablation.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
    /// Every distinct positive phrase of the set, sorted.
    pub phrase_pool: Vec<String>,
    phrase_ids: HashMap<String, Vec<usize>>,
}

impl TrainingSet {
    pub fn from_scenes(scenes: &[SceneSample], ablation: Ablation, opts: &GroundingOptions) -> Result<Self> {
        let vocab = Vocabulary::build(scenes.iter().flat_map(|s| s.caption.iter()));
        Self::with_vocab(scenes, ablation, opts, vocab)
    }

    pub fn with_vocab(
        scenes: &[SceneSample],
        ablation: Ablation,
        opts: &GroundingOptions,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let mut examples = Vec::with_capacity(scenes.len());
        let mut phrase_ids = HashMap::new();
        for s in scenes {
            let g = build_grounding_tree(parse_sexpr(&s.parse)?, opts);
            let mut nodes = Vec::new();
            let mut pc_pairs = Vec::new();
            let mut sibling_sets = Vec::new();
            if ablation == Ablation::Token {
                for text in g.noun_leaf_phrases() {
                    let ids = vocab.encode(&[text.as_str()])?;
                    nodes.push(Node { text, ids });
                }
            } else {
                let mut index = BTreeMap::new();
                for &v in g.valid_nodes() {
                    let words = g.node_phrase(v)?;
                    index.insert(v, nodes.len());
                    nodes.push(Node { text: words.join(" "), ids: vocab.encode(&words)? });
                }
                for pc in g.pc_pairs() {
                    pc_pairs.push((index[&pc.parent], pc.children.iter().map(|c| index[c]).collect()));
                }
                for set in g.sibling_sets() {
                    sibling_sets.push(set.members.iter().map(|m| index[m]).collect());
                }
            }
            let positives: BTreeSet<String> = nodes.iter().map(|n| n.text.clone()).collect();
            for n in &nodes {
                phrase_ids.entry(n.text.clone()).or_insert_with(|| n.ids.clone());
            }
            examples.push(Example {
                image: s.image.clone(),
                nodes,
                positives: positives.into_iter().collect(),
                pc_pairs,
                sibling_sets,
            });
        }
        let mut phrase_pool: Vec<String> = phrase_ids.keys().cloned().collect();
        phrase_pool.sort();
        Ok(TrainingSet { examples, vocab, phrase_pool, phrase_ids })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn phrase_ids(&self, text: &str) -> Result<Vec<usize>> {
        match self.phrase_ids.get(text) {
            Some(ids) => Ok(ids.clone()),
            None => self.vocab.encode(&text.split_whitespace().collect::<Vec<_>>()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub example: usize,
    /// `(phrase, label)` pairs, positives first.
    pub phrases: Vec<(String, i8)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Negatives for one image: distinct pool phrases that are not its positives.
fn sample_negatives(set: &TrainingSet, ex: &Example, wanted: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let own: BTreeSet<&str> = ex.positives.iter().map(String::as_str).collect();
    let available = set.phrase_pool.iter().filter(|p| !own.contains(p.as_str())).count();
    let wanted = wanted.min(available);
    let mut chosen = BTreeSet::new();
    let mut out = Vec::with_capacity(wanted);
    while out.len() < wanted {
        let i = rng.gen_range(0..set.phrase_pool.len());
        let p = &set.phrase_pool[i];
        if own.contains(p.as_str()) || !chosen.insert(i) {
            continue;
        }
        out.push(p.clone());
    }
    out
}

/// Attach labelled phrases to the given images.
pub fn make_batch(set: &TrainingSet, images: &[usize], h: &Hyperparams, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if set.len() < 2 {
        return Err(Error::Invalid("negative sampling needs at least two images".into()));
    }
    let items = images
        .iter()
        .map(|&i| {
            let ex = &set.examples[i];
            let wanted = h.negatives_per_image.unwrap_or(ex.positives.len());
            let mut phrases: Vec<(String, i8)> = ex.positives.iter().map(|p| (p.clone(), 1)).collect();
            phrases.extend(sample_negatives(set, ex, wanted, rng).into_iter().map(|p| (p, -1)));
            BatchItem { example: i, phrases }
        })
        .collect();
    Ok(Batch { items })
}

/// `batch_size` distinct images drawn at random, with their phrases.
pub fn sample_batch(set: &TrainingSet, rng: &mut ChaCha8Rng, h: &Hyperparams) -> Result<Batch> {
    if set.len() < 2 {
        return Err(Error::Invalid("negative sampling needs at least two images".into()));
    }
    let k = h.batch_size.min(set.len());
    let images = rand::seq::index::sample(rng, set.len(), k).into_vec();
    make_batch(set, &images, h, rng)
}

/// Deterministic rng for `(seed, purpose, index)`.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((purpose << 48) ^ index);
    r
}

const EPOCH_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// Image order of one epoch, chunked into batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, EPOCH_STREAM, epoch as u64));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Nodes of the loss graph for one batch.
pub struct LossGraph {
    pub total: Var,
    pub l_pc: Var,
    pub l_sib: Var,
    pub l_disc: Var,
    pub normalizer: Normalizer,
    /// Language codes keyed by phrase text.
    pub codes: BTreeMap<String, Var>,
}

/// Build the training loss for `batch` on `tape`, with batch normalization statistics.
pub fn build_loss(
    tape: &mut Tape,
    model: &Model,
    b: &Bound,
    set: &TrainingSet,
    batch: &Batch,
    config: &TrainConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossGraph> {
    let (lambda_pc, lambda_sib) = config.ablation.weights(&config.hyper);

    let mut pooled = Vec::new();
    let mut cells = Vec::new();
    let mut grids = Vec::new();
    for item in &batch.items {
        let image = &set.examples[item.example].image;
        let s = model.config().image_size;
        if image.shape() != [s, s, model.config().channels] {
            return Err(Error::shape("training image", &[image.shape(), &[s, s, model.config().channels]]));
        }
        let x = tape.constant(image.clone());
        let f = b.encode_image(tape, x)?;
        let shape = tape.value(f).shape().to_vec();
        grids.push((shape[0], shape[1]));
        pooled.push(b.pool_and_project(tape, f, rng.as_deref_mut())?);
        cells.push(b.project_cells(tape, f, rng.as_deref_mut())?);
    }
    let norm = Normalizer::from_batch(tape, &pooled, model.config().norm_eps)?;

    let mut codes = BTreeMap::new();
    for item in &batch.items {
        for (text, _) in &item.phrases {
            if !codes.contains_key(text) {
                let ids = set.phrase_ids(text)?;
                let c = b.encode_phrase(tape, &ids, rng.as_deref_mut())?;
                codes.insert(text.clone(), c);
            }
        }
    }

    let mut disc_terms = Vec::new();
    let mut pc_terms = Vec::new();
    let mut sib_terms = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        let visual = norm.apply(tape, b, pooled[i])?;
        for (text, label) in &item.phrases {
            let d = tape.dot(visual, codes[text])?;
            disc_terms.push(loss_disc_on(tape, d, *label, config.disc_loss)?);
        }

        let ex = &set.examples[item.example];
        if ex.pc_pairs.is_empty() && ex.sibling_sets.is_empty() {
            continue;
        }
        let c = norm.apply(tape, b, cells[i])?;
        let (h, w) = grids[i];
        let mut masks: HashMap<usize, Var> = HashMap::new();
        let mut mask_of = |tape: &mut Tape, node: usize| -> Result<Var> {
            if let Some(&m) = masks.get(&node) {
                return Ok(m);
            }
            let logits = b.mask_logits(tape, c, codes[&ex.nodes[node].text], h, w)?;
            let m = tape.sigmoid(logits)?;
            masks.insert(node, m);
            Ok(m)
        };
        for (parent, children) in &ex.pc_pairs {
            let p = mask_of(tape, *parent)?;
            let kids = children.iter().map(|&k| mask_of(tape, k)).collect::<Result<Vec<_>>>()?;
            pc_terms.push(loss_pc_on(tape, p, &kids, ex.pc_pairs.len())?);
        }
        if !ex.sibling_sets.is_empty() {
            let sets = ex
                .sibling_sets
                .iter()
                .map(|s| s.iter().map(|&k| mask_of(tape, k)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            sib_terms.push(loss_sib_on(tape, &sets, sets.len())?);
        }
    }

    let images = batch.items.len() as f64;
    let mean_of = |tape: &mut Tape, terms: &[Var], n: f64| -> Result<Var> {
        if terms.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let s = tape.add_all(terms)?;
        tape.scale(s, 1.0 / n)
    };
    let l_disc = mean_of(tape, &disc_terms, disc_terms.len() as f64)?;
    let l_pc = mean_of(tape, &pc_terms, images)?;
    let l_sib = mean_of(tape, &sib_terms, images)?;
    let wpc = tape.scale(l_pc, lambda_pc)?;
    let wsib = tape.scale(l_sib, lambda_sib)?;
    let total = tape.add_all(&[wpc, wsib, l_disc])?;
    Ok(LossGraph { total, l_pc, l_sib, l_disc, normalizer: norm, codes })
}

/// Put parameters on the tape; frozen groups become constants.
pub fn bind_for_training(model: &Model, tape: &mut Tape, config: &TrainConfig) -> Bound {
    let vars = model
        .params()
        .iter()
        .map(|p| {
            let frozen = config.freeze_language_encoder && p.group == ParamGroup::Language;
            if frozen {
                tape.constant(p.value.clone())
            } else {
                tape.leaf(p.value.clone())
            }
        })
        .collect();
    Bound::from_vars(model, vars)
}

/// Mean pairwise cosine distance between phrase codes.
pub fn code_spread(codes: &[&Tensor]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let (a, b) = (codes[i].data(), codes[j].data());
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 { 1.0 } else { dot / (na * nb) };
            total += 1.0 - cos;
            pairs += 1;
        }
    }
    if pairs == 0 {
        f64::INFINITY
    } else {
        total / pairs as f64
    }
}

pub const COLLAPSE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub code_spread: f64,
}

impl StepReport {
    pub fn collapsed(&self) -> bool {
        self.code_spread < COLLAPSE_THRESHOLD
    }
}

/// Forward, backward and one SGD update.
pub fn train_step(
    model: &mut Model,
    set: &TrainingSet,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let b = bind_for_training(model, &mut tape, config);
    let dropout_rng = (model.config().dropout > 0.0).then_some(rng);
    let g = build_loss(&mut tape, model, &b, set, batch, config, dropout_rng)?;
    let (lambda_pc, lambda_sib) = config.ablation.weights(&config.hyper);
    let h = Hyperparams { lambda_pc, lambda_sib, ..config.hyper.clone() };
    let loss = total_loss(
        tape.value(g.l_pc).item(),
        tape.value(g.l_sib).item(),
        tape.value(g.l_disc).item(),
        &h,
    )?;
    let code_values: Vec<&Tensor> = g.codes.values().map(|&v| tape.value(v)).collect();
    let spread = code_spread(&code_values);
    if spread < COLLAPSE_THRESHOLD {
        log::warn!("phrase codes collapsing: mean pairwise cosine distance {spread:.5}");
    }

    let grads = tape.backward(g.total)?;
    let mut updates: Vec<(usize, Tensor)> = Vec::new();
    let mut sq = 0.0;
    for (i, &v) in b.vars.iter().enumerate() {
        if !tape.requires_grad(v) {
            continue;
        }
        let gr = grads.wrt(&tape, v);
        if !gr.all_finite() {
            return Err(Error::NonFinite { component: "gradient" });
        }
        sq += gr.data().iter().map(|x| x * x).sum::<f64>();
        updates.push((i, gr));
    }
    let norm = sq.sqrt();
    let scale = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
    let lr = config.hyper.lr;
    if lr != 0.0 {
        for (i, gr) in &updates {
            model.params_mut()[*i].value.axpy(-lr * scale, gr)?;
        }
    }
    let var = g.normalizer.variance.expect("batch statistics");
    let (mean, var) = (tape.value(g.normalizer.mean()).clone(), tape.value(var).clone());
    model.update_running_stats(&mean, &var);
    Ok(StepReport { loss, grad_norm: norm, code_spread: spread })
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub model: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepReport>,
    pub collapse_warnings: usize,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.grnd"))
}

/// Step number encoded in a checkpoint file name.
pub fn checkpoint_step(path: &Path) -> Result<usize> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("checkpoint-"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Invalid(format!("{} is not a checkpoint file", path.display())))
}

/// Run all epochs, optionally resuming from a checkpoint file.
pub fn train(
    config: &TrainConfig,
    set: &TrainingSet,
    outputs: &TrainOutputs,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if set.len() < 2 {
        return Err(Error::Invalid("training needs at least two images".into()));
    }
    let (mut model, start) = match resume {
        Some(p) => {
            let m = Model::load(p)?;
            if m.config() != &config.model || m.vocab() != &set.vocab {
                return Err(Error::Invalid(format!("{}: checkpoint does not match the config", p.display())));
            }
            (m, checkpoint_step(p)?)
        }
        None => (Model::new(config.model.clone(), set.vocab.clone(), config.hyper.seed)?, 0),
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &outputs.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
            writeln!(w, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(p, e))?;
            Some((p.clone(), w))
        }
        None => None,
    };

    let mut steps = Vec::new();
    let mut warnings = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for images in epoch_batches(set.len(), config.hyper.batch_size, config.hyper.seed, epoch) {
            if step < start {
                step += 1;
                continue;
            }
            let mut rng = derived_rng(config.hyper.seed, STEP_STREAM, step as u64);
            let batch = make_batch(set, &images, &config.hyper, &mut rng)?;
            let report = train_step(&mut model, set, &batch, config, &mut rng)?;
            warnings += report.collapsed() as usize;
            if let Some((p, w)) = log.as_mut() {
                writeln!(w, "{}", report.loss.csv_row(step)).map_err(|e| Error::io(&*p, e))?;
            }
            steps.push(report);
            step += 1;
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                if let Some(dir) = &outputs.checkpoint_dir {
                    model.save(&checkpoint_path(dir, step))?;
                }
            }
        }
        if let Some(last) = steps.last() {
            log::info!("epoch {} done: L = {:.5}", epoch + 1, last.loss.l);
        }
    }
    if let Some((p, mut w)) = log {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    if let Some(p) = &outputs.model {
        model.save(p)?;
    }
    Ok(TrainOutcome { model, steps, collapse_warnings: warnings })
}
