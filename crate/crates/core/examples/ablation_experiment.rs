//! Train two ablations on generated two-object scenes and compare pointing accuracy.
//!
//! cargo run --release --example ablation_experiment -- [epochs] [train-count] [ablation...]

use std::time::Instant;

use grounding::evaluation::{pointing_game, random_baseline, TieBreak};
use grounding::parse::GroundingOptions;
use grounding::scenes::{generate_scenes, SceneSpec};
use grounding::training::{train, Ablation, TrainConfig, TrainOutputs, TrainingSet};

fn main() -> grounding::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(30, |s| s.parse().expect("epochs"));
    let count: u64 = args.get(1).map_or(500, |s| s.parse().expect("count"));
    let ablations: Vec<Ablation> = if args.len() > 2 {
        args[2..].iter().map(|s| s.parse()).collect::<grounding::Result<_>>()?
    } else {
        vec![Ablation::Full, Ablation::Disc]
    };

    let spec = SceneSpec::default();
    let train_scenes = generate_scenes(7, 0..count, &spec)?;
    let test_scenes = generate_scenes(7, count..count + 100, &spec)?;
    println!("random baseline: {:.3}", random_baseline(&test_scenes));

    for ablation in ablations {
        let config = TrainConfig { epochs, ablation, ..Default::default() };
        let set = TrainingSet::from_scenes(&train_scenes, ablation, &GroundingOptions::default())?;
        let start = Instant::now();
        let outcome = train(&config, &set, &TrainOutputs::default(), None)?;
        let result = pointing_game(&outcome.model, &test_scenes, TieBreak::Lowest)?;
        println!(
            "{ablation}: pointing accuracy {:.3} ({} steps, final L {:.4}, {:.1}s)",
            result.accuracy(),
            outcome.steps.len(),
            outcome.steps.last().map_or(f64::NAN, |s| s.loss.l),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
