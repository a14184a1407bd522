//! Command-line front end over the library.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::{export_masks, pointing_game, segmentation_map, Threshold, TieBreak, IOU_THRESHOLDS};
use crate::gradsuite::{format_table, full_suite};
use crate::model::Model;
use crate::parse::{build_grounding_tree, parse_lines, GroundingOptions};
use crate::scenes::{generate_scenes, read_dataset, read_image, write_dataset, SceneSample, SceneSpec};
use crate::training::{train, Ablation, TrainConfig, TrainOutputs, TrainingSet};

#[derive(Debug, Parser)]
#[command(name = "grounding", version, about = "Phrase grounding from captions with parse-tree constraints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/ and test/ scene datasets under --out.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of training scenes.
        #[arg(long, default_value_t = 500)]
        count: u64,
        /// Number of test scenes, drawn after the training ones.
        #[arg(long, default_value_t = 100)]
        test_count: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        image_size: usize,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Train a model on a dataset directory.
    Train {
        /// `key = value` config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (uses its train/ subdirectory when present) or a scene directory.
        #[arg(long)]
        data: PathBuf,
        /// Overrides the ablation named in the config.
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Resume from a checkpoint file written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pointing-game accuracy as JSON.
    EvalPointing {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `lowest` or `random:SEED`.
        #[arg(long, default_value = "lowest")]
        tie: TieArg,
    },
    /// Segmentation mAP per shape category as JSON.
    EvalSeg {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `midpoint` or `half-range`.
        #[arg(long, default_value = "midpoint")]
        threshold: ThresholdArg,
    },
    /// Write one grayscale PGM attention mask per phrase.
    ExportMasks {
        #[arg(long)]
        model: PathBuf,
        /// Image tensor file, as written by gen-data.
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "phrase", required = true)]
        phrases: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List valid nodes, pc-pairs and sibling sets of bracketed parses.
    DumpConstraints {
        /// One tree per line; `-` reads stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Do not treat single noun leaves as groundable nodes.
        #[arg(long)]
        no_noun_leaves: bool,
    },
    /// Finite-difference check of every primitive, loss and the full pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct TieArg(pub TieBreak);

impl FromStr for TieArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "lowest" => Ok(TieArg(TieBreak::Lowest)),
            Some(("random", seed)) => seed.parse().map(|v| TieArg(TieBreak::Random(v))).map_err(|e| format!("seed: {e}")),
            _ => Err(format!("expected lowest or random:SEED, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ThresholdArg(pub Threshold);

impl FromStr for ThresholdArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "midpoint" => Ok(ThresholdArg(Threshold::Midpoint)),
            "half-range" => Ok(ThresholdArg(Threshold::HalfRange)),
            _ => Err(format!("expected midpoint or half-range, got {s:?}")),
        }
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{} is not a directory", p.display())))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{} does not exist", p.display())))
    }
}

/// A dataset root resolves to its `sub` split when present.
fn load_scenes(dir: &Path, sub: &str) -> Result<Vec<SceneSample>> {
    require_dir(dir)?;
    let split = dir.join(sub);
    let scenes = read_dataset(if split.is_dir() { &split } else { dir })?;
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("{}: no scenes", dir.display())));
    }
    Ok(scenes)
}

fn check_image_size(scenes: &[SceneSample], size: usize) -> Result<()> {
    match scenes.iter().find(|s| s.image.shape()[..2] != [size, size]) {
        Some(s) => Err(Error::Invalid(format!(
            "scene {} is {:?}, the model expects {size}x{size}",
            s.id,
            &s.image.shape()[..2]
        ))),
        None => Ok(()),
    }
}

fn print_json(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v)?).map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let emit = |out: &mut dyn Write, s: &str| write!(out, "{s}").map_err(|e| Error::io("<stdout>", e));
    match cli.command {
        Command::GenData { seed, count, test_count, out: dir, image_size, objects, noise } => {
            let spec = SceneSpec { image_size, objects, noise, ..Default::default() };
            spec.validate()?;
            if count == 0 || test_count == 0 {
                return Err(Error::Invalid("--count and --test-count must be positive".into()));
            }
            let train_set = generate_scenes(seed, 0..count, &spec)?;
            let test_set = generate_scenes(seed, count..count + test_count, &spec)?;
            let a = write_dataset(&train_set, &dir.join("train"))?;
            let b = write_dataset(&test_set, &dir.join("test"))?;
            emit(out, &format!("{}\n{}\n", a.display(), b.display()))
        }
        Command::Train { config, data, ablation, out: model_path, log, checkpoint_dir, resume } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            if let Some(a) = ablation {
                cfg.ablation = a;
            }
            cfg.validate()?;
            if let Some(r) = &resume {
                require_file(r)?;
            }
            let scenes = load_scenes(&data, "train")?;
            check_image_size(&scenes, cfg.model.image_size)?;
            let set = TrainingSet::from_scenes(&scenes, cfg.ablation, &GroundingOptions::default())?;
            let outputs = TrainOutputs { model: Some(model_path.clone()), log, checkpoint_dir };
            let outcome = train(&cfg, &set, &outputs, resume.as_deref())?;
            let last = outcome.steps.last().map_or(f64::NAN, |s| s.loss.l);
            emit(
                out,
                &format!(
                    "trained {} ({} steps, final L {last:.6}, {} collapse warnings) -> {}\n",
                    cfg.ablation,
                    outcome.steps.len(),
                    outcome.collapse_warnings,
                    model_path.display()
                ),
            )
        }
        Command::EvalPointing { model, data, tie } => {
            require_file(&model)?;
            let model = Model::load(&model)?;
            let scenes = load_scenes(&data, "test")?;
            check_image_size(&scenes, model.config().image_size)?;
            print_json(out, &pointing_game(&model, &scenes, tie.0)?.to_json())
        }
        Command::EvalSeg { model, data, threshold } => {
            require_file(&model)?;
            let model = Model::load(&model)?;
            let scenes = load_scenes(&data, "test")?;
            check_image_size(&scenes, model.config().image_size)?;
            print_json(out, &segmentation_map(&model, &scenes, &IOU_THRESHOLDS, threshold.0)?.to_json())
        }
        Command::ExportMasks { model, image, phrases, out: dir } => {
            require_file(&model)?;
            let model = Model::load(&model)?;
            let image = read_image(&image)?;
            if let Some(p) = phrases.iter().find(|p| p.split_whitespace().next().is_none()) {
                return Err(Error::Invalid(format!("empty phrase {p:?}")));
            }
            for path in export_masks(&model, &image, &phrases, &dir)? {
                emit(out, &format!("{}\n", path.display()))?;
            }
            Ok(())
        }
        Command::DumpConstraints { input, no_noun_leaves } => {
            let text = if input == Path::new("-") {
                let mut s = String::new();
                io::stdin().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", e))?;
                s
            } else {
                fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?
            };
            let opts = GroundingOptions { include_noun_leaves: !no_noun_leaves, ..Default::default() };
            for tree in parse_lines(&text)? {
                emit(out, &build_grounding_tree(tree, &opts).dump())?;
            }
            Ok(())
        }
        Command::Gradcheck { trials, seed } => {
            if trials == 0 {
                return Err(Error::Invalid("--trials must be positive".into()));
            }
            let rows = full_suite(trials, seed)?;
            emit(out, &format_table(&rows))?;
            match rows.iter().filter(|r| !r.passed()).count() {
                0 => Ok(()),
                n => Err(Error::Invalid(format!("{n} gradient checks above tolerance"))),
            }
        }
    }
}

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    let stdout = io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
