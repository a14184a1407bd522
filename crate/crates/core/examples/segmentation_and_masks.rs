//! Segmentation mAP of a model, and PGM attention masks for one scene's phrases.
//!
//! cargo run --release --example segmentation_and_masks -- MODEL [out-dir]
//!
//! MODEL must have been trained on 80x80 scenes, e.g. by `grounding train`.

use std::path::PathBuf;

use grounding::evaluation::{export_masks, segmentation_map, Threshold, IOU_THRESHOLDS};
use grounding::model::Model;
use grounding::scenes::{generate_scenes, SceneSpec};

fn main() -> grounding::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = Model::load(&PathBuf::from(args.next().expect("usage: segmentation_and_masks MODEL [out-dir]")))?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("grounding-masks"), PathBuf::from);

    let spec = SceneSpec { image_size: model.config().image_size, ..Default::default() };
    let scenes = generate_scenes(7, 500..600, &spec)?;
    for rule in [Threshold::Midpoint, Threshold::HalfRange] {
        let r = segmentation_map(&model, &scenes, &IOU_THRESHOLDS, rule)?;
        println!("{rule:?}: {}", r.to_json());
    }

    let scene = &scenes[0];
    let phrases: Vec<String> = scene.objects.iter().map(|o| o.phrase().join(" ")).collect();
    println!("{}: {}", scene.id, scene.caption.join(" "));
    for p in export_masks(&model, &scene.image, &phrases, &out)? {
        println!("  {}", p.display());
    }
    Ok(())
}
