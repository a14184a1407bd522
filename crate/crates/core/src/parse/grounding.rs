//! Noun filtering and structural-constraint extraction.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::parse::tree::ParseTree;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundingOptions {
    pub noun_tags: BTreeSet<String>,
    /// Treat noun leaves (e.g. `(NN cat)`) as groundable nodes.
    pub include_noun_leaves: bool,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        GroundingOptions {
            noun_tags: ["NN", "NNS", "NNP", "NNPS"].iter().map(|s| s.to_string()).collect(),
            include_noun_leaves: true,
        }
    }
}

/// A parent mask should equal the union of its children's masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcConstraint {
    pub parent: usize,
    pub children: Vec<usize>,
}

/// Masks of the members should be spatially exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiblingSet {
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GroundingTree {
    source: ParseTree,
    valid: Vec<usize>,
    is_valid: Vec<bool>,
    spans: Vec<(usize, usize)>,
    noun_counts: Vec<usize>,
    pc_pairs: Vec<PcConstraint>,
    sibling_sets: Vec<SiblingSet>,
}

impl GroundingTree {
    pub fn build(tree: ParseTree, opts: &GroundingOptions) -> Self {
        let spans = tree.spans();
        let leaves = tree.leaves();
        let noun_leaf: Vec<bool> = leaves
            .iter()
            .map(|&l| opts.noun_tags.contains(&tree.nodes()[l].label))
            .collect();
        let noun_counts: Vec<usize> =
            spans.iter().map(|&(s, e)| noun_leaf[s..e].iter().filter(|&&b| b).count()).collect();
        let is_valid: Vec<bool> = tree
            .nodes()
            .iter()
            .map(|n| noun_counts[n.id] > 0 && (!n.is_leaf() || opts.include_noun_leaves))
            .collect();
        let valid: Vec<usize> = (0..tree.nodes().len()).filter(|&i| is_valid[i]).collect();

        let mut g = GroundingTree {
            source: tree,
            valid,
            is_valid,
            spans,
            noun_counts,
            pc_pairs: vec![],
            sibling_sets: vec![],
        };
        for &k in &g.valid {
            let children = g.nearest_valid_descendants(k);
            let reduces_to_self =
                children.len() == 1 && g.noun_counts[children[0]] == g.noun_counts[k];
            if !children.is_empty() && !reduces_to_self {
                g.pc_pairs.push(PcConstraint { parent: k, children: children.clone() });
            }
            if children.len() >= 2 {
                g.sibling_sets.push(SiblingSet { members: children });
            }
        }
        g
    }

    /// Valid nodes reachable from `k` without passing through another valid node.
    pub fn nearest_valid_descendants(&self, k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.source.nodes()[k].children.iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            if self.is_valid[n] {
                out.push(n);
            } else {
                stack.extend(self.source.nodes()[n].children.iter().rev());
            }
        }
        out
    }

    pub fn source(&self) -> &ParseTree {
        &self.source
    }

    pub fn valid_nodes(&self) -> &[usize] {
        &self.valid
    }

    pub fn is_valid(&self, id: usize) -> bool {
        self.is_valid.get(id).copied().unwrap_or(false)
    }

    pub fn pc_pairs(&self) -> &[PcConstraint] {
        &self.pc_pairs
    }

    pub fn sibling_sets(&self) -> &[SiblingSet] {
        &self.sibling_sets
    }

    pub fn span(&self, id: usize) -> (usize, usize) {
        self.spans[id]
    }

    /// Lowercased tokens under a valid node.
    pub fn node_phrase(&self, id: usize) -> Result<Vec<String>> {
        if !self.is_valid(id) {
            return Err(Error::UnknownNode(id));
        }
        let (s, e) = self.spans[id];
        Ok(self.source.tokens()[s..e].iter().map(|t| t.to_lowercase()).collect())
    }

    pub fn phrase_text(&self, id: usize) -> Result<String> {
        Ok(self.node_phrase(id)?.join(" "))
    }

    /// Phrases of all valid noun leaves, in sentence order.
    pub fn noun_leaf_phrases(&self) -> Vec<String> {
        self.valid
            .iter()
            .filter(|&&v| self.source.nodes()[v].is_leaf())
            .map(|&v| self.phrase_text(v).unwrap())
            .collect()
    }

    /// Human-readable listing of valid nodes and constraints.
    pub fn dump(&self) -> String {
        let text = |id: usize| self.phrase_text(id).unwrap_or_default();
        let mut s = String::new();
        writeln!(s, "tree: {}", self.source).unwrap();
        writeln!(s, "valid nodes: {}", self.valid.len()).unwrap();
        for &v in &self.valid {
            writeln!(s, "  [{v}] {} \"{}\"", self.source.nodes()[v].label, text(v)).unwrap();
        }
        writeln!(s, "pc-pairs: {}", self.pc_pairs.len()).unwrap();
        for pc in &self.pc_pairs {
            let kids: Vec<String> = pc.children.iter().map(|&c| format!("\"{}\"", text(c))).collect();
            writeln!(s, "  \"{}\" -> {}", text(pc.parent), kids.join(", ")).unwrap();
        }
        writeln!(s, "sibling-sets: {}", self.sibling_sets.len()).unwrap();
        for set in &self.sibling_sets {
            let m: Vec<String> = set.members.iter().map(|&c| format!("\"{}\"", text(c))).collect();
            writeln!(s, "  {{{}}}", m.join(", ")).unwrap();
        }
        s
    }
}

pub fn build_grounding_tree(tree: ParseTree, opts: &GroundingOptions) -> GroundingTree {
    GroundingTree::build(tree, opts)
}
