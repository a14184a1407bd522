//! Generate a small scene dataset and describe what was written.
//!
//! cargo run --release --example generate_scenes -- [out-dir] [count]

use std::path::PathBuf;

use grounding::scenes::{generate_scenes, read_dataset, write_dataset, SceneSpec};

fn main() -> grounding::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map_or_else(|| std::env::temp_dir().join("grounding-scenes"), PathBuf::from);
    let count: u64 = args.next().map_or(10, |s| s.parse().expect("count"));

    let scenes = generate_scenes(7, 0..count, &SceneSpec::default())?;
    let manifest = write_dataset(&scenes, &dir)?;
    println!("wrote {} scenes, manifest {}", scenes.len(), manifest.display());

    for s in read_dataset(&dir)?.iter().take(5) {
        println!("{}: {:?}", s.id, s.caption.join(" "));
        println!("    parse {}", s.parse);
        for o in &s.objects {
            println!("    {} {} box {:?} ({} px)", o.color, o.shape, o.bbox, o.mask.count());
        }
    }
    Ok(())
}
