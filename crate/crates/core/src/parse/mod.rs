//! Bracketed constituency trees and the structural constraints derived from them.

mod grounding;
mod tree;

pub use grounding::{build_grounding_tree, GroundingOptions, GroundingTree, PcConstraint, SiblingSet};
pub use tree::{parse_lines, parse_sexpr, ParseTree, TreeNode};
