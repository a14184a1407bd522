//! Extract groundable nodes, parent-child pairs and sibling sets from a bracketed parse.
//!
//! cargo run --example parse_constraints -- "(S (NP (DT a) (NN cat)) (VP (VBZ sits)))"

use grounding::parse::{build_grounding_tree, parse_sexpr, GroundingOptions};

const DEFAULT: &str = "(S (NP (NP (DT A) (JJ grey) (NN cat)) (VP (VBG staring) (PP (IN at) \
    (NP (NP (DT a) (NN hand)) (PP (IN with) (NP (DT a) (NN donut)))))) (PP (IN on) (NP (PRP it)))))";

fn main() -> grounding::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| DEFAULT.to_string());
    let tree = build_grounding_tree(parse_sexpr(&text)?, &GroundingOptions::default());
    print!("{}", tree.dump());
    Ok(())
}
