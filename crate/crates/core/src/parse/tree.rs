use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: usize,
    /// Constituent label, or the POS tag for leaves. May be empty for a
    /// wrapper bracket such as `( (S ...) )`.
    pub label: String,
    /// Present exactly on leaves.
    pub token: Option<String>,
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.token.is_some()
    }
}

/// A constituency tree; node ids are assigned in pre-order, so the root is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    nodes: Vec<TreeNode>,
}

impl ParseTree {
    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    /// Leaf ids in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(self.root(), &mut out);
        out
    }

    fn collect_leaves(&self, id: usize, out: &mut Vec<usize>) {
        let node = &self.nodes[id];
        if node.is_leaf() {
            out.push(id);
        }
        for &c in &node.children {
            self.collect_leaves(c, out);
        }
    }

    /// Half-open span of leaf positions covered by each node.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut spans = vec![(0, 0); self.nodes.len()];
        let mut next = 0;
        self.fill_spans(self.root(), &mut next, &mut spans);
        spans
    }

    fn fill_spans(&self, id: usize, next: &mut usize, spans: &mut [(usize, usize)]) {
        let start = *next;
        let node = &self.nodes[id];
        if node.is_leaf() {
            *next += 1;
        }
        for &c in &node.children {
            self.fill_spans(c, next, spans);
        }
        spans[id] = (start, *next);
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.leaves().into_iter().map(|l| self.nodes[l].token.as_deref().unwrap()).collect()
    }

    fn write_node(&self, id: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let node = &self.nodes[id];
        write!(f, "({}", node.label)?;
        if let Some(tok) = &node.token {
            write!(f, " {tok}")?;
        }
        for &c in &node.children {
            f.write_str(" ")?;
            self.write_node(c, f)?;
        }
        f.write_str(")")
    }
}

/// Normalized single-line bracketing.
impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_node(self.root(), f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn peek(&mut self) -> Option<(usize, Tok<'a>)> {
        let save = self.pos;
        let t = self.next();
        self.pos = save;
        t
    }

    fn next(&mut self) -> Option<(usize, Tok<'a>)> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        match bytes.get(start)? {
            b'(' => {
                self.pos += 1;
                Some((start, Tok::Open))
            }
            b')' => {
                self.pos += 1;
                Some((start, Tok::Close))
            }
            _ => {
                while self.pos < bytes.len()
                    && !bytes[self.pos].is_ascii_whitespace()
                    && bytes[self.pos] != b'('
                    && bytes[self.pos] != b')'
                {
                    self.pos += 1;
                }
                Some((start, Tok::Atom(&self.src[start..self.pos])))
            }
        }
    }
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Parse one Penn-Treebank-style bracketing.
pub fn parse_sexpr(text: &str) -> Result<ParseTree> {
    let mut lex = Lexer { src: text, pos: 0 };
    let mut nodes = Vec::new();
    match lex.next() {
        Some((at, Tok::Open)) => parse_node(&mut lex, at, &mut nodes)?,
        Some((at, _)) => return Err(err(at, "expected '('")),
        None => return Err(err(0, "empty input")),
    };
    if let Some((at, t)) = lex.next() {
        let what = if t == Tok::Close { "unmatched ')'" } else { "trailing content after tree" };
        return Err(err(at, what));
    }
    Ok(ParseTree { nodes })
}

/// Parse one tree per non-blank line.
pub fn parse_lines(text: &str) -> Result<Vec<ParseTree>> {
    let mut base = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(parse_sexpr(line).map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse { offset: base + offset, message },
                e => e,
            })?);
        }
        base += line.len();
    }
    Ok(out)
}

/// `open_at` is the byte offset of this node's '(' which has been consumed.
fn parse_node(lex: &mut Lexer<'_>, open_at: usize, nodes: &mut Vec<TreeNode>) -> Result<usize> {
    let id = nodes.len();
    nodes.push(TreeNode { id, label: String::new(), token: None, children: vec![] });
    let unclosed = || err(open_at, "unbalanced brackets: '(' is never closed");

    if let Some((_, Tok::Atom(label))) = lex.peek() {
        lex.next();
        nodes[id].label = label.to_string();
    }
    match lex.next() {
        None => return Err(unclosed()),
        Some((_, Tok::Close)) => return Err(err(open_at, "empty constituent")),
        Some((_, Tok::Atom(token))) => {
            match lex.next() {
                Some((_, Tok::Close)) => {}
                Some((at2, _)) => return Err(err(at2, "leaf with children")),
                None => return Err(unclosed()),
            }
            nodes[id].token = Some(token.to_string());
            return Ok(id);
        }
        Some((at, Tok::Open)) => {
            let child = parse_node(lex, at, nodes)?;
            nodes[id].children.push(child);
        }
    }
    loop {
        match lex.next() {
            None => return Err(unclosed()),
            Some((_, Tok::Close)) => return Ok(id),
            Some((at, Tok::Open)) => {
                let child = parse_node(lex, at, nodes)?;
                nodes[id].children.push(child);
            }
            Some((at, Tok::Atom(_))) => {
                return Err(err(at, "bare token inside a constituent with children"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noun_phrase_with_three_leaves() {
        let t = parse_sexpr("(NP (DT a) (JJ grey) (NN cat))").unwrap();
        let root = t.node(0).unwrap();
        assert_eq!(root.label, "NP");
        assert_eq!(root.children.len(), 3);
        assert_eq!(t.tokens(), vec!["a", "grey", "cat"]);
        assert!(t.nodes()[1..].iter().all(TreeNode::is_leaf));
    }

    #[test]
    fn sentence_root_with_two_children() {
        let t = parse_sexpr("(S (NP (NN cat)) (VP (VBZ sits)))").unwrap();
        assert_eq!(t.node(t.root()).unwrap().label, "S");
        let kids: Vec<&str> =
            t.node(0).unwrap().children.iter().map(|&c| t.nodes()[c].label.as_str()).collect();
        assert_eq!(kids, vec!["NP", "VP"]);
    }

    #[test]
    fn unmatched_open_reports_its_offset() {
        match parse_sexpr("((NP (NN cat))") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        // the innermost bracket still open at end of input is reported
        match parse_sexpr("(S (NP (NN cat)) (VP (VBZ sits)") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 17),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        let offset = |s: &str| match parse_sexpr(s) {
            Err(Error::Parse { offset, message }) => (offset, message),
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(offset("(NP ())").0, 4);
        assert_eq!(offset("(NP)").1, "empty constituent");
        assert_eq!(offset("(NN cat (DT a))").0, 8);
        assert_eq!(offset("(NN cat dog)").0, 8);
        assert_eq!(offset("(S (NN cat)))").0, 12);
        assert_eq!(offset("").0, 0);
        assert_eq!(offset("cat").0, 0);
    }

    #[test]
    fn whitespace_insensitive_and_wrapper_bracket() {
        let a = parse_sexpr("(S\n  (NP  (NN cat))\t(VP (VBZ sits)))").unwrap();
        let b = parse_sexpr("(S (NP (NN cat)) (VP (VBZ sits)))").unwrap();
        assert_eq!(a, b);
        let w = parse_sexpr("( (S (NN cat)) )").unwrap();
        assert_eq!(w.node(0).unwrap().label, "");
        assert_eq!(w.to_string(), "( (S (NN cat)))");
        assert_eq!(parse_sexpr(&w.to_string()).unwrap(), w);
    }

    #[test]
    fn lines_offsets_are_global() {
        let trees = parse_lines("(NN a)\n\n(NN b)\n").unwrap();
        assert_eq!(trees.len(), 2);
        match parse_lines("(NN a)\n(NN b\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
    }

    fn arb_tree() -> impl Strategy<Value = String> {
        let leaf = ("[A-Z]{1,3}", "[a-z]{1,5}").prop_map(|(t, w)| format!("({t} {w})"));
        leaf.prop_recursive(4, 32, 4, |inner| {
            ("[A-Z]{1,3}", prop::collection::vec(inner, 1..4))
                .prop_map(|(l, kids)| format!("({l}  {} )", kids.join("\n")))
        })
    }

    proptest! {
        #[test]
        fn print_parse_is_a_fixed_point(src in arb_tree()) {
            let t = parse_sexpr(&src).unwrap();
            let printed = t.to_string();
            let again = parse_sexpr(&printed).unwrap();
            prop_assert_eq!(&again, &t);
            prop_assert_eq!(again.to_string(), printed);
        }
    }
}
