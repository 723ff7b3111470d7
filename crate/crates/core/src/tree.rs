//! Rooted phylogenies with branch lengths.
//!
//! Trees are parsed from a plain Newick dialect (alphanumeric, `_` and `.`
//! labels; no quoting, no bracket comments) and are immutable once built.
//! Every covariance in this crate is a function of two per-pair times:
//!
//! * the *shared time* `t_a`: root to the most recent common ancestor,
//! * the *divergence time* `d_ij`: MRCA to tip `i` plus MRCA to tip `j`.
//!
//! Both are computed once into dense `n x n` tables and cached.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

/// Default relative tolerance on root-to-tip distances.
pub const DEFAULT_ULTRAMETRIC_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("missing branch length for node `{node}` (byte {pos})")]
    MissingBranchLength { pos: usize, node: String },
    #[error("invalid branch length `{text}` at byte {pos}: must be finite and non-negative")]
    InvalidBranchLength { pos: usize, text: String },
    #[error("duplicate tip label `{0}`")]
    DuplicateLabel(String),
    #[error("unknown tip `{0}`")]
    UnknownTip(String),
    #[error(
        "tree is not ultrametric: tip `{tip}` has depth {depth} vs mean {mean} \
         (relative deviation {deviation:.3e} > {tol:.1e})"
    )]
    NotUltrametric {
        tip: String,
        depth: f64,
        mean: f64,
        deviation: f64,
        tol: f64,
    },
    #[error("cannot normalize depths: terminal branch of `{0}` would become negative")]
    NegativeAfterNormalize(String),
    #[error("invalid tree structure: {0}")]
    Structure(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    parent: Option<usize>,
    children: Vec<usize>,
    /// Length of the edge above this node. Zero for the root.
    length: f64,
    label: Option<String>,
}

/// Time quantities for one pair of tips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTimes {
    /// Root to most recent common ancestor.
    pub shared_time: f64,
    /// MRCA to `i` plus MRCA to `j`.
    pub divergence_time: f64,
    /// Mean root-to-tip distance of the two tips.
    pub depth: f64,
}

/// Dense pairwise times for every pair of tips, in tip order.
///
/// Pairs with bit-identical `(shared, divergence)` are grouped into classes so
/// kernels that depend only on the two times can be evaluated once per class.
#[derive(Debug, Clone)]
pub struct PairTimeTable {
    shared: DMatrix<f64>,
    divergence: DMatrix<f64>,
    classes: Vec<(f64, f64)>,
    class_of: Vec<u32>,
}

impl PairTimeTable {
    pub fn len(&self) -> usize {
        self.shared.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shared(&self) -> &DMatrix<f64> {
        &self.shared
    }

    pub fn divergence(&self) -> &DMatrix<f64> {
        &self.divergence
    }

    /// Distinct `(shared, divergence)` pairs.
    pub fn classes(&self) -> &[(f64, f64)] {
        &self.classes
    }

    /// Builds a symmetric matrix from a kernel of `(shared, divergence)`.
    pub fn assemble<F>(&self, mut kernel: F) -> DMatrix<f64>
    where
        F: FnMut(f64, f64) -> f64,
    {
        let values: Vec<f64> = self.classes.iter().map(|&(s, d)| kernel(s, d)).collect();
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| values[self.class_of[i * n + j] as usize])
    }
}

/// An immutable rooted tree. Node 0 is the root; parents precede children.
#[derive(Debug)]
pub struct PhyloTree {
    nodes: Vec<Node>,
    root_length: Option<f64>,
    tips: Vec<usize>,
    tip_index: HashMap<String, usize>,
    node_depth: Vec<f64>,
    times: OnceLock<PairTimeTable>,
}

impl Clone for PhyloTree {
    fn clone(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            root_length: self.root_length,
            tips: self.tips.clone(),
            tip_index: self.tip_index.clone(),
            node_depth: self.node_depth.clone(),
            times: OnceLock::new(),
        }
    }
}

impl PartialEq for PhyloTree {
    /// Topology, labels, child order and branch lengths.
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.root_length == other.root_length
    }
}

impl PhyloTree {
    fn from_nodes(nodes: Vec<Node>, root_length: Option<f64>) -> Result<Self, TreeError> {
        if nodes.is_empty() {
            return Err(TreeError::Structure("empty tree".into()));
        }
        if nodes[0].parent.is_some() {
            return Err(TreeError::Structure("node 0 must be the root".into()));
        }
        let mut node_depth = vec![0.0; nodes.len()];
        let mut tips = Vec::new();
        let mut tip_index = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if id > 0 {
                let parent = node
                    .parent
                    .ok_or_else(|| TreeError::Structure(format!("node {id} has no parent")))?;
                if parent >= id {
                    return Err(TreeError::Structure(format!(
                        "node {id} appears before its parent"
                    )));
                }
                if !(node.length.is_finite() && node.length >= 0.0) {
                    return Err(TreeError::Structure(format!(
                        "node {id} has branch length {}",
                        node.length
                    )));
                }
                node_depth[id] = node_depth[parent] + node.length;
            }
            if node.children.is_empty() {
                let label = node
                    .label
                    .clone()
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| TreeError::Structure(format!("tip node {id} has no label")))?;
                if tip_index.insert(label.clone(), tips.len()).is_some() {
                    return Err(TreeError::DuplicateLabel(label));
                }
                tips.push(id);
            }
        }
        Ok(Self {
            nodes,
            root_length,
            tips,
            tip_index,
            node_depth,
            times: OnceLock::new(),
        })
    }

    pub fn num_tips(&self) -> usize {
        self.tips.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Tip labels in parse order.
    pub fn tip_labels(&self) -> Vec<&str> {
        self.tips
            .iter()
            .map(|&id| self.nodes[id].label.as_deref().unwrap_or(""))
            .collect()
    }

    pub fn tip_position(&self, label: &str) -> Option<usize> {
        self.tip_index.get(label).copied()
    }

    /// Root-to-tip distances in tip order.
    pub fn tip_depths(&self) -> Vec<f64> {
        self.tips.iter().map(|&id| self.node_depth[id]).collect()
    }

    /// Shortest non-root branch, ignoring zero-length edges. `None` when the
    /// tree has no positive branch.
    pub fn min_branch_length(&self) -> Option<f64> {
        self.nodes[1..]
            .iter()
            .map(|n| n.length)
            .filter(|&l| l > 0.0)
            .min_by(f64::total_cmp)
    }

    pub(crate) fn parent_of(&self, node: usize) -> Option<usize> {
        self.nodes[node].parent
    }

    pub(crate) fn branch_length(&self, node: usize) -> f64 {
        self.nodes[node].length
    }

    pub(crate) fn tip_nodes(&self) -> &[usize] {
        &self.tips
    }

    fn mrca(&self, mut a: usize, mut b: usize) -> usize {
        let level = |mut n: usize| {
            let mut k = 0usize;
            while let Some(p) = self.nodes[n].parent {
                n = p;
                k += 1;
            }
            k
        };
        let (mut la, mut lb) = (level(a), level(b));
        while la > lb {
            a = self.nodes[a].parent.unwrap();
            la -= 1;
        }
        while lb > la {
            b = self.nodes[b].parent.unwrap();
            lb -= 1;
        }
        while a != b {
            a = self.nodes[a].parent.unwrap();
            b = self.nodes[b].parent.unwrap();
        }
        a
    }

    fn times_for_nodes(&self, a: usize, b: usize) -> PairTimes {
        let m = self.mrca(a, b);
        let shared = self.node_depth[m];
        let (da, db) = (self.node_depth[a], self.node_depth[b]);
        PairTimes {
            shared_time: shared,
            divergence_time: (da - shared) + (db - shared),
            depth: 0.5 * (da + db),
        }
    }

    pub fn pair_times(&self, i: &str, j: &str) -> Result<PairTimes, TreeError> {
        let lookup = |l: &str| {
            self.tip_position(l)
                .ok_or_else(|| TreeError::UnknownTip(l.to_string()))
        };
        let (i, j) = (lookup(i)?, lookup(j)?);
        Ok(self.times_for_nodes(self.tips[i], self.tips[j]))
    }

    /// Cached dense pairwise times.
    pub fn pair_time_table(&self) -> &PairTimeTable {
        self.times.get_or_init(|| self.build_pair_times())
    }

    fn build_pair_times(&self) -> PairTimeTable {
        let n = self.tips.len();
        // Root-to-tip node paths; the MRCA is the last common prefix entry.
        let paths: Vec<Vec<usize>> = self
            .tips
            .iter()
            .map(|&t| {
                let mut path = vec![t];
                let mut cur = t;
                while let Some(p) = self.nodes[cur].parent {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                path
            })
            .collect();
        let mut shared = DMatrix::zeros(n, n);
        let mut divergence = DMatrix::zeros(n, n);
        let mut class_ids: HashMap<(u64, u64), u32> = HashMap::new();
        let mut classes = Vec::new();
        let mut class_of = vec![0u32; n * n];
        for i in 0..n {
            for j in i..n {
                let common = paths[i]
                    .iter()
                    .zip(&paths[j])
                    .take_while(|(a, b)| a == b)
                    .count();
                let m = paths[i][common - 1];
                let s = self.node_depth[m];
                let d = (self.node_depth[self.tips[i]] - s) + (self.node_depth[self.tips[j]] - s);
                shared[(i, j)] = s;
                shared[(j, i)] = s;
                divergence[(i, j)] = d;
                divergence[(j, i)] = d;
                let id = *class_ids.entry((s.to_bits(), d.to_bits())).or_insert_with(|| {
                    classes.push((s, d));
                    (classes.len() - 1) as u32
                });
                class_of[i * n + j] = id;
                class_of[j * n + i] = id;
            }
        }
        PairTimeTable {
            shared,
            divergence,
            classes,
            class_of,
        }
    }

    /// Checks that all root-to-tip distances agree with their mean within
    /// `rel_tol` and returns the mean depth.
    pub fn validate_ultrametric(&self, rel_tol: f64) -> Result<f64, TreeError> {
        let depths = self.tip_depths();
        let mean = depths.iter().sum::<f64>() / depths.len() as f64;
        let mut worst: Option<(usize, f64)> = None;
        for (k, &d) in depths.iter().enumerate() {
            let dev = if mean > 0.0 { (d - mean).abs() / mean } else { d.abs() };
            if worst.map_or(true, |(_, w)| dev >= w) {
                worst = Some((k, dev));
            }
        }
        match worst {
            Some((k, dev)) if dev > rel_tol => Err(TreeError::NotUltrametric {
                tip: self.tip_labels()[k].to_string(),
                depth: depths[k],
                mean,
                deviation: dev,
                tol: rel_tol,
            }),
            _ => Ok(mean),
        }
    }

    /// Stretches or shrinks terminal branches so every tip sits at the mean
    /// depth.
    pub fn normalize_tip_depths(&self) -> Result<PhyloTree, TreeError> {
        let depths = self.tip_depths();
        let mean = depths.iter().sum::<f64>() / depths.len() as f64;
        let mut nodes = self.nodes.clone();
        for (k, &id) in self.tips.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let len = nodes[id].length + (mean - depths[k]);
            if len < 0.0 {
                return Err(TreeError::NegativeAfterNormalize(
                    self.tip_labels()[k].to_string(),
                ));
            }
            nodes[id].length = len;
        }
        PhyloTree::from_nodes(nodes, self.root_length)
    }

    /// Fully balanced binary tree with `2^levels` tips labelled `t1..tN` and
    /// every branch of length `branch_length`.
    pub fn balanced(levels: u32, branch_length: f64) -> PhyloTree {
        let mut nodes = vec![Node {
            parent: None,
            children: Vec::new(),
            length: 0.0,
            label: None,
        }];
        let mut frontier = vec![0usize];
        for _ in 0..levels {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for &p in &frontier {
                for _ in 0..2 {
                    let id = nodes.len();
                    nodes.push(Node {
                        parent: Some(p),
                        children: Vec::new(),
                        length: branch_length,
                        label: None,
                    });
                    nodes[p].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        // Renumber into depth-first order so parse(serialize(t)) == t.
        let tree = relabel_tips_preorder(nodes);
        PhyloTree::from_nodes(tree, None).expect("balanced tree is valid")
    }

    /// Random ultrametric binary tree of depth `depth`: lineages are merged
    /// pairwise at uniformly random ordered times, as in a coalescent.
    pub fn random_ultrametric<R: Rng + ?Sized>(n_tips: usize, depth: f64, rng: &mut R) -> PhyloTree {
        assert!(n_tips >= 1, "need at least one tip");
        // Heights above the present; the final merge sits at `depth`.
        let mut heights: Vec<f64> = (0..n_tips.saturating_sub(2))
            .map(|_| rng.gen::<f64>() * depth)
            .collect();
        heights.sort_by(f64::total_cmp);
        if n_tips >= 2 {
            heights.push(depth);
        }
        // Build bottom-up with arena indices, then convert.
        struct Tmp {
            children: Vec<usize>,
            height: f64,
            label: Option<String>,
        }
        let mut arena: Vec<Tmp> = (0..n_tips)
            .map(|k| Tmp {
                children: Vec::new(),
                height: 0.0,
                label: Some(format!("s{}", k + 1)),
            })
            .collect();
        let mut active: Vec<usize> = (0..n_tips).collect();
        for &h in &heights {
            let a = active.swap_remove(rng.gen_range(0..active.len()));
            let b = active.swap_remove(rng.gen_range(0..active.len()));
            arena.push(Tmp {
                children: vec![a, b],
                height: h,
                label: None,
            });
            active.push(arena.len() - 1);
        }
        let root = active[0];
        let mut nodes = Vec::with_capacity(arena.len());
        let mut stack = vec![(root, None::<usize>)];
        while let Some((a, parent)) = stack.pop() {
            let id = nodes.len();
            let length = match parent {
                Some(p) => arena[a_of(&nodes, p)].height - arena[a].height,
                None => 0.0,
            };
            nodes.push((
                a,
                Node {
                    parent,
                    children: Vec::new(),
                    length,
                    label: arena[a].label.clone(),
                },
            ));
            if let Some(p) = parent {
                nodes[p].1.children.push(id);
            }
            for &c in arena[a].children.iter().rev() {
                stack.push((c, Some(id)));
            }
        }
        fn a_of(nodes: &[(usize, Node)], id: usize) -> usize {
            nodes[id].0
        }
        let nodes = nodes.into_iter().map(|(_, n)| n).collect();
        PhyloTree::from_nodes(nodes, None).expect("generated tree is valid")
    }

    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        // Iterative pre/post walk: (node, next child index).
        let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
        while let Some((id, k)) = stack.pop() {
            let node = &self.nodes[id];
            if k == 0 && !node.children.is_empty() {
                out.push('(');
            }
            if k < node.children.len() {
                if k > 0 {
                    out.push(',');
                }
                stack.push((id, k + 1));
                stack.push((node.children[k], 0));
                continue;
            }
            if !node.children.is_empty() {
                out.push(')');
            }
            if let Some(label) = &node.label {
                out.push_str(label);
            }
            if id == 0 {
                if let Some(l) = self.root_length {
                    let _ = write!(out, ":{l}");
                }
            } else {
                let _ = write!(out, ":{}", node.length);
            }
        }
        out.push(';');
        out
    }

    pub fn parse_newick(text: &str) -> Result<PhyloTree, TreeError> {
        Parser::new(text.as_bytes()).parse()
    }
}

impl std::str::FromStr for PhyloTree {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PhyloTree::parse_newick(s)
    }
}

/// Reorders an arena built breadth-first into depth-first preorder and
/// labels tips `t1..tN` in that order.
fn relabel_tips_preorder(nodes: Vec<Node>) -> Vec<Node> {
    let mut out: Vec<Node> = Vec::with_capacity(nodes.len());
    let mut stack = vec![(0usize, None::<usize>)];
    let mut tip_count = 0;
    while let Some((old, parent)) = stack.pop() {
        let id = out.len();
        let mut node = Node {
            parent,
            children: Vec::new(),
            length: nodes[old].length,
            label: nodes[old].label.clone(),
        };
        if nodes[old].children.is_empty() {
            tip_count += 1;
            node.label = Some(format!("t{tip_count}"));
        }
        out.push(node);
        if let Some(p) = parent {
            out[p].children.push(id);
        }
        for &c in nodes[old].children.iter().rev() {
            stack.push((c, Some(id)));
        }
    }
    out
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn syntax<T>(&self, msg: impl Into<String>) -> Result<T, TreeError> {
        Err(TreeError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b) if b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn describe(b: Option<u8>) -> String {
        match b {
            None => "end of input".into(),
            Some(b) if b.is_ascii_graphic() => format!("`{}`", b as char),
            Some(b) => format!("byte 0x{b:02x}"),
        }
    }

    fn label(&mut self) -> Result<Option<String>, TreeError> {
        self.skip_ws();
        match self.peek() {
            Some(b'\'') | Some(b'"') => return self.syntax("quoted labels are not supported"),
            Some(b'[') => return self.syntax("bracket comments are not supported"),
            _ => {}
        }
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Ok(None);
        }
        // The accepted bytes are ASCII, hence valid UTF-8.
        Ok(Some(
            String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned(),
        ))
    }

    /// Parses `:<number>` if present.
    fn length(&mut self) -> Result<Option<f64>, TreeError> {
        self.skip_ws();
        if self.peek() != Some(b':') {
            return Ok(None);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'))
        {
            self.pos += 1;
        }
        let text = String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned();
        if text.is_empty() {
            self.pos = start;
            return self.syntax(format!(
                "expected branch length, found {}",
                Self::describe(self.peek())
            ));
        }
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v)),
            _ => Err(TreeError::InvalidBranchLength { pos: start, text }),
        }
    }

    fn finish_node(&mut self, nodes: &mut [Node], id: usize) -> Result<(), TreeError> {
        let at = self.pos;
        let len = self.length()?;
        if id == 0 {
            return Ok(());
        }
        match len {
            Some(l) => {
                nodes[id].length = l;
                Ok(())
            }
            None => Err(TreeError::MissingBranchLength {
                pos: at,
                node: nodes[id].label.clone().unwrap_or_else(|| "<internal>".into()),
            }),
        }
    }

    fn parse(mut self) -> Result<PhyloTree, TreeError> {
        let mut nodes: Vec<Node> = Vec::new();
        let mut open: Vec<usize> = Vec::new();
        let mut root_length = None;
        'subtree: loop {
            self.skip_ws();
            let id = nodes.len();
            let parent = open.last().copied();
            nodes.push(Node {
                parent,
                children: Vec::new(),
                length: 0.0,
                label: None,
            });
            if let Some(p) = parent {
                nodes[p].children.push(id);
            }
            if self.peek() == Some(b'(') {
                self.pos += 1;
                open.push(id);
                continue 'subtree;
            }
            match self.label()? {
                Some(l) => nodes[id].label = Some(l),
                None => {
                    return self.syntax(format!(
                        "expected tip label or `(`, found {}",
                        Self::describe(self.peek())
                    ))
                }
            }
            if id == 0 {
                root_length = self.length()?;
            } else {
                self.finish_node(&mut nodes, id)?;
            }
            loop {
                self.skip_ws();
                match (self.peek(), open.is_empty()) {
                    (Some(b','), false) => {
                        self.pos += 1;
                        continue 'subtree;
                    }
                    (Some(b')'), false) => {
                        self.pos += 1;
                        let closed = open.pop().unwrap();
                        nodes[closed].label = self.label()?;
                        if closed == 0 {
                            root_length = self.length()?;
                        } else {
                            self.finish_node(&mut nodes, closed)?;
                        }
                    }
                    (Some(b';'), true) => {
                        self.pos += 1;
                        self.skip_ws();
                        if self.peek().is_some() {
                            return self.syntax("trailing characters after `;`");
                        }
                        break 'subtree;
                    }
                    (other, true) => {
                        return self.syntax(format!("expected `;`, found {}", Self::describe(other)))
                    }
                    (other, false) => {
                        return self.syntax(format!(
                            "expected `,` or `)`, found {}",
                            Self::describe(other)
                        ))
                    }
                }
            }
        }
        PhyloTree::from_nodes(nodes, root_length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    const THREE: &str = "((A:1,B:1):1,C:2);";

    #[test]
    fn parses_two_tip_tree() {
        let t = PhyloTree::parse_newick("(A:1,B:1);").unwrap();
        assert_eq!(t.tip_labels(), vec!["A", "B"]);
        assert_eq!(t.tip_depths(), vec![1.0, 1.0]);
        let p = t.pair_times("A", "B").unwrap();
        assert_eq!(p.shared_time, 0.0);
        assert_eq!(p.divergence_time, 2.0);
    }

    #[test]
    fn three_tip_pair_times() {
        let t = PhyloTree::parse_newick(THREE).unwrap();
        assert_eq!(t.tip_depths(), vec![2.0, 2.0, 2.0]);
        let ab = t.pair_times("A", "B").unwrap();
        assert_eq!((ab.shared_time, ab.divergence_time, ab.depth), (1.0, 2.0, 2.0));
        let ac = t.pair_times("A", "C").unwrap();
        assert_eq!((ac.shared_time, ac.divergence_time, ac.depth), (0.0, 4.0, 2.0));
        let aa = t.pair_times("A", "A").unwrap();
        assert_eq!((aa.shared_time, aa.divergence_time), (2.0, 0.0));
        assert_eq!(t.pair_times("A", "Z"), Err(TreeError::UnknownTip("Z".into())));
    }

    #[test]
    fn unbalanced_paren_reports_end_of_input() {
        match PhyloTree::parse_newick("(A:1") {
            Err(TreeError::Syntax { pos, msg }) => {
                assert_eq!(pos, 4);
                assert!(msg.contains("end of input"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            PhyloTree::parse_newick("(A,B:1);"),
            Err(TreeError::MissingBranchLength { .. })
        ));
        assert!(matches!(
            PhyloTree::parse_newick("(A:1,A:1);"),
            Err(TreeError::DuplicateLabel(l)) if l == "A"
        ));
        assert!(matches!(
            PhyloTree::parse_newick("(A:-1,B:1);"),
            Err(TreeError::InvalidBranchLength { .. })
        ));
        assert!(matches!(
            PhyloTree::parse_newick("('A':1,B:1);"),
            Err(TreeError::Syntax { msg, .. }) if msg.contains("quoted")
        ));
        assert!(matches!(
            PhyloTree::parse_newick("(A:1[x],B:1);"),
            Err(TreeError::Syntax { .. })
        ));
        assert!(PhyloTree::parse_newick("(A:1,B:1)").is_err());
        assert!(PhyloTree::parse_newick("(A:1,B:1);x").is_err());
        assert!(PhyloTree::parse_newick("(,B:1);").is_err());
        assert!(PhyloTree::parse_newick("").is_err());
    }

    #[test]
    fn root_length_parsed_and_ignored() {
        let t = PhyloTree::parse_newick("(A:1,B:1):5;").unwrap();
        assert_eq!(t.tip_depths(), vec![1.0, 1.0]);
        assert_eq!(t.to_newick(), "(A:1,B:1):5;");
    }

    #[test]
    fn serialization_examples() {
        for s in ["(A:1,B:1);", THREE, "A:0;", "((a_1:0.5,b.2:0.25)n1:0.75,c:1e-3);"] {
            let t = PhyloTree::parse_newick(s).unwrap();
            let again = PhyloTree::parse_newick(&t.to_newick()).unwrap();
            assert_eq!(t, again, "{s}");
        }
        assert_eq!(PhyloTree::parse_newick(THREE).unwrap().to_newick(), THREE);
        assert_eq!(PhyloTree::parse_newick("A:0;").unwrap().to_newick(), "A:0;");
    }

    #[test]
    fn ultrametric_checks() {
        let t = PhyloTree::parse_newick(THREE).unwrap();
        assert_eq!(t.validate_ultrametric(DEFAULT_ULTRAMETRIC_TOL).unwrap(), 2.0);
        let bad = PhyloTree::parse_newick("(A:1,B:2);").unwrap();
        match bad.validate_ultrametric(DEFAULT_ULTRAMETRIC_TOL) {
            Err(TreeError::NotUltrametric { tip, .. }) => assert_eq!(tip, "B"),
            other => panic!("unexpected {other:?}"),
        }
        let loose = PhyloTree::parse_newick("(A:1,B:1.2);").unwrap();
        let depth = loose.validate_ultrametric(0.5).unwrap();
        assert!((depth - 1.1).abs() < 1e-12);
    }

    #[test]
    fn normalize_depths_makes_ultrametric() {
        let t = PhyloTree::parse_newick("((A:1,B:2):1,C:2);").unwrap();
        let n = t.normalize_tip_depths().unwrap();
        let d = n.validate_ultrametric(1e-12).unwrap();
        assert!((d - 7.0 / 3.0).abs() < 1e-12);
        let t = PhyloTree::parse_newick("((A:0.1,B:0.1):10,C:1);").unwrap();
        assert!(t.normalize_tip_depths().is_err());
    }

    #[test]
    fn balanced_tree_shape() {
        let t = PhyloTree::balanced(7, 1.0);
        assert_eq!(t.num_tips(), 128);
        assert_eq!(t.validate_ultrametric(1e-12).unwrap(), 7.0);
        // sisters t1, t2; opposite halves t1, t128
        let p = t.pair_times("t1", "t2").unwrap();
        assert_eq!((p.shared_time, p.divergence_time), (6.0, 2.0));
        let p = t.pair_times("t1", "t128").unwrap();
        assert_eq!((p.shared_time, p.divergence_time), (0.0, 14.0));
        assert_eq!(t.pair_time_table().classes().len(), 8);
        let again = PhyloTree::parse_newick(&t.to_newick()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn pair_table_matches_pairwise_queries() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let t = PhyloTree::random_ultrametric(12, 3.0, &mut rng);
        let labels = t.tip_labels();
        let table = t.pair_time_table();
        for (i, a) in labels.iter().enumerate() {
            for (j, b) in labels.iter().enumerate() {
                let p = t.pair_times(a, b).unwrap();
                assert_eq!(table.shared()[(i, j)], p.shared_time);
                assert_eq!(table.divergence()[(i, j)], p.divergence_time);
            }
        }
        let m = table.assemble(|s, d| s + 10.0 * d);
        assert_eq!(m[(0, 1)], table.shared()[(0, 1)] + 10.0 * table.divergence()[(0, 1)]);
    }

    #[test]
    fn deep_nesting_does_not_overflow() {
        let depth = 100_000;
        let mut s = "(".repeat(depth);
        s.push_str("A:1");
        for _ in 0..depth {
            s.push_str("):1");
        }
        s.push(';');
        let t = PhyloTree::parse_newick(&s).unwrap();
        assert_eq!(t.num_tips(), 1);
        assert_eq!(t.to_newick(), s);
    }

    fn newick_strategy() -> impl Strategy<Value = String> {
        let leaf = (0u32..1000, 0u32..400).prop_map(|(k, l)| format!("L{k}:{}", l as f64 / 8.0));
        leaf.prop_recursive(5, 40, 4, |inner| {
            (prop::collection::vec(inner, 1..4), 0u32..100)
                .prop_map(|(kids, l)| format!("({}):{}", kids.join(","), l as f64 / 4.0))
        })
        .prop_map(|s| format!("{s};"))
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(s in newick_strategy()) {
            if let Ok(t) = PhyloTree::parse_newick(&s) {
                let again = PhyloTree::parse_newick(&t.to_newick()).unwrap();
                prop_assert_eq!(&t, &again);
                prop_assert_eq!(t.to_newick(), again.to_newick());
            }
        }

        #[test]
        fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = PhyloTree::parse_newick(&text);
        }

        #[test]
        fn parser_never_panics_on_newick_alphabet(s in "[()A-C0-9:,;. ]{0,40}") {
            let _ = PhyloTree::parse_newick(&s);
        }

        #[test]
        fn ultrametric_pair_identity(n in 1usize..40, seed in any::<u64>(), depth in 0.1f64..50.0) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let t = PhyloTree::random_ultrametric(n, depth, &mut rng);
            let big_t = t.validate_ultrametric(1e-9).unwrap();
            let tab = t.pair_time_table();
            for i in 0..n {
                for j in 0..n {
                    let lhs = tab.shared()[(i, j)] + 0.5 * tab.divergence()[(i, j)];
                    prop_assert!((lhs - big_t).abs() <= 1e-12 * big_t);
                    prop_assert_eq!(tab.shared()[(i, j)], tab.shared()[(j, i)]);
                    prop_assert_eq!(tab.divergence()[(i, j)], tab.divergence()[(j, i)]);
                }
            }
        }
    }
}
