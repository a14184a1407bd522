//! Train a small model on 32x32 scenes, save it, reload it and run the pointing game.
//!
//! cargo run --release --example train_and_point -- [epochs]

use grounding::evaluation::{pointing_game, random_baseline, TieBreak};
use grounding::model::Model;
use grounding::parse::GroundingOptions;
use grounding::scenes::{generate_scenes, SceneSpec};
use grounding::training::{train, Ablation, TrainConfig, TrainOutputs, TrainingSet};

fn main() -> grounding::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epochs"));
    let spec = SceneSpec { image_size: 32, ..Default::default() };
    let train_scenes = generate_scenes(11, 0..200, &spec)?;
    let test_scenes = generate_scenes(11, 200..250, &spec)?;

    let mut config = TrainConfig { epochs, ablation: Ablation::Full, ..Default::default() };
    config.model.image_size = 32;
    let set = TrainingSet::from_scenes(&train_scenes, config.ablation, &GroundingOptions::default())?;

    let dir = std::env::temp_dir().join("grounding-train");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let outputs = TrainOutputs { model: Some(dir.join("model.grnd")), log: Some(dir.join("loss.csv")), checkpoint_dir: None };
    let outcome = train(&config, &set, &outputs, None)?;
    println!("{} steps, log at {}", outcome.steps.len(), dir.join("loss.csv").display());

    let model = Model::load(&dir.join("model.grnd"))?;
    let result = pointing_game(&model, &test_scenes, TieBreak::Lowest)?;
    println!("pointing accuracy {:.3} (random {:.3})", result.accuracy(), random_baseline(&test_scenes));
    println!("{}", result.to_json());
    Ok(())
}
