//! Weighted label trees and their path metrics.
//!
//! Vertex 0 is always the root. Leaves are numbered as fine classes in
//! vertex order, which for parsed documents is document order; that class
//! order is used everywhere downstream (pair enumeration, block matrices).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub name: String,
    pub parent: Option<usize>,
    /// Weight of the edge to the parent; 0 for the root.
    pub weight: f64,
    pub children: Vec<usize>,
    pub depth: usize,
}

/// A rooted tree with positive edge weights whose leaves are the fine classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTree {
    vertices: Vec<Vertex>,
    leaves: Vec<usize>,
    class_of: Vec<Option<usize>>,
}

impl LabelTree {
    /// Build from a parent array. Exactly one entry must be `None` (the
    /// root); it is moved to index 0 if necessary, otherwise vertex order
    /// is preserved.
    pub fn from_parents(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::Validation("tree has no vertices".into()));
        }
        if parents.len() != n || weights.len() != n {
            return Err(Error::Validation(
                "names, parents and weights differ in length".into(),
            ));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
        match roots.len() {
            0 => return Err(Error::Validation("no root (every vertex has a parent)".into())),
            1 => {}
            _ => {
                return Err(Error::Validation(format!(
                    "multiple roots: {:?}",
                    roots.iter().map(|&r| &names[r]).collect::<Vec<_>>()
                )))
            }
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate vertex name {name:?}")));
            }
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(Error::Validation(format!(
                        "orphan: vertex {:?} refers to missing parent {p}",
                        names[i]
                    )));
                }
                let w = weights[i];
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::Validation(format!(
                        "edge to {:?} has nonpositive weight {w}",
                        names[i]
                    )));
                }
            }
        }
        // Reorder so the root is vertex 0; everything else keeps its order.
        let root = roots[0];
        let order: Vec<usize> = std::iter::once(root).chain((0..n).filter(|&i| i != root)).collect();
        let mut new_index = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let mut vertices: Vec<Vertex> = order
            .iter()
            .map(|&old| Vertex {
                name: names[old].clone(),
                parent: parents[old].map(|p| new_index[p]),
                weight: if parents[old].is_some() { weights[old] } else { 0.0 },
                children: Vec::new(),
                depth: 0,
            })
            .collect();
        for i in 0..n {
            if let Some(p) = vertices[i].parent {
                vertices[p].children.push(i);
            }
        }
        // Depths by walking from the root; anything unreached sits on a cycle.
        let mut visited = vec![false; n];
        let mut stack = vec![0usize];
        visited[0] = true;
        while let Some(v) = stack.pop() {
            let children = vertices[v].children.clone();
            for c in children {
                if visited[c] {
                    return Err(Error::Validation("cycle detected".into()));
                }
                visited[c] = true;
                vertices[c].depth = vertices[v].depth + 1;
                stack.push(c);
            }
        }
        if let Some(bad) = visited.iter().position(|v| !v) {
            return Err(Error::Validation(format!(
                "cycle detected: vertex {:?} is not reachable from the root",
                vertices[bad].name
            )));
        }
        let leaves: Vec<usize> = (0..n).filter(|&i| vertices[i].children.is_empty()).collect();
        let mut class_of = vec![None; n];
        for (k, &v) in leaves.iter().enumerate() {
            class_of[v] = Some(k);
        }
        Ok(LabelTree {
            vertices,
            leaves,
            class_of,
        })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn vertex(&self, v: usize) -> &Vertex {
        &self.vertices[v]
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn name(&self, v: usize) -> &str {
        &self.vertices[v].name
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.vertices[v].parent
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.vertices[v].children
    }

    pub fn depth(&self, v: usize) -> usize {
        self.vertices[v].depth
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.vertices[v].children.is_empty()
    }

    /// Leaf vertex of each fine class, in class order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn num_classes(&self) -> usize {
        self.leaves.len()
    }

    /// Fine-class index of a leaf vertex.
    pub fn class_of(&self, v: usize) -> Option<usize> {
        self.class_of.get(v).copied().flatten()
    }

    pub fn vertex_by_name(&self, name: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v.name == name)
    }

    /// Class index for a leaf name.
    pub fn class_by_name(&self, name: &str) -> Option<usize> {
        self.vertex_by_name(name).and_then(|v| self.class_of(v))
    }

    pub fn max_depth(&self) -> usize {
        self.vertices.iter().map(|v| v.depth).max().unwrap_or(0)
    }

    /// Parent vertex of each fine class (the class itself for a root-only tree).
    pub fn coarse_of_class(&self, class: usize) -> usize {
        let leaf = self.leaves[class];
        self.parent(leaf).unwrap_or(leaf)
    }

    /// For every vertex, the fine classes below it (a leaf covers itself).
    pub fn descendant_classes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (k, &leaf) in self.leaves.iter().enumerate() {
            let mut v = Some(leaf);
            while let Some(u) = v {
                out[u].push(k);
                v = self.parent(u);
            }
        }
        out
    }

    /// Vertices in depth-first preorder from the root.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![self.root()];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.children(v).iter().rev());
        }
        out
    }

    pub fn lca(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.depth(a) > self.depth(b) {
            a = self.parent(a).unwrap();
        }
        while self.depth(b) > self.depth(a) {
            b = self.parent(b).unwrap();
        }
        while a != b {
            a = self.parent(a).unwrap();
            b = self.parent(b).unwrap();
        }
        a
    }
}

/// All-pairs weighted path lengths over the vertices of a tree.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeMetric {
    n: usize,
    dist: Vec<f64>,
}

impl TreeMetric {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    /// Row-major `n x n` matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.dist
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.dist.chunks(self.n).map(|r| r.to_vec()).collect()
    }
}

/// Weighted shortest-path distances between all vertex pairs, one
/// traversal per source vertex.
pub fn tree_metric(tree: &LabelTree) -> TreeMetric {
    let n = tree.len();
    let mut dist = vec![0.0; n * n];
    let mut stack = Vec::with_capacity(n);
    for src in 0..n {
        let row = &mut dist[src * n..(src + 1) * n];
        stack.clear();
        stack.push((src, usize::MAX, 0.0));
        while let Some((v, from, d)) = stack.pop() {
            row[v] = d;
            let vert = tree.vertex(v);
            if let Some(p) = vert.parent {
                if p != from {
                    stack.push((p, v, d + vert.weight));
                }
            }
            for &c in &vert.children {
                if c != from {
                    stack.push((c, v, d + tree.vertex(c).weight));
                }
            }
        }
    }
    TreeMetric { n, dist }
}

/// Height of the lowest common ancestor of two leaves, in levels above the
/// deeper of the two (0 for a leaf with itself, 1 for siblings).
pub fn lca_height(tree: &LabelTree, leaf_i: usize, leaf_j: usize) -> Result<usize> {
    for v in [leaf_i, leaf_j] {
        if v >= tree.len() || !tree.is_leaf(v) {
            return Err(Error::NotALeaf(v));
        }
    }
    let l = tree.lca(leaf_i, leaf_j);
    Ok(tree.depth(leaf_i).max(tree.depth(leaf_j)) - tree.depth(l))
}

/// Balanced tree from per-level node counts listed root first
/// (`C_H, ..., C_0`, with `C_H = 1`). Unit edge weights.
pub fn balanced_tree(level_counts: &[usize]) -> Result<LabelTree> {
    let Some(&top) = level_counts.first() else {
        return Err(Error::InvalidLevelCounts("no levels".into()));
    };
    if top != 1 {
        return Err(Error::InvalidLevelCounts(format!(
            "top level must have exactly one node, got {top}"
        )));
    }
    for w in level_counts.windows(2) {
        if w[1] == 0 || w[1] % w[0] != 0 {
            return Err(Error::InvalidLevelCounts(format!(
                "level count {} is not a positive multiple of {}",
                w[1], w[0]
            )));
        }
    }
    let height = level_counts.len() - 1;
    let mut names = vec!["root".to_string()];
    let mut parents = vec![None];
    let mut prev: Vec<usize> = vec![0];
    for (depth, w) in level_counts.windows(2).enumerate() {
        let fanout = w[1] / w[0];
        let h = height - depth - 1;
        let mut level = Vec::with_capacity(w[1]);
        for k in 0..w[1] {
            let idx = names.len();
            names.push(if h == 0 {
                format!("leaf{k}")
            } else {
                format!("h{h}_{k}")
            });
            parents.push(Some(prev[k / fanout]));
            level.push(idx);
        }
        prev = level;
    }
    let weights = vec![1.0; names.len()];
    LabelTree::from_parents(names, parents, weights)
}

/// The 13-vertex CIFAR10 hierarchy: two coarse groups over ten classes.
/// Vertices are numbered in preorder, matching a parsed document.
pub fn builtin_cifar10_tree() -> LabelTree {
    let groups: [(&str, &[&str]); 2] = [
        ("transportation", &["airplane", "automobile", "ship", "truck"]),
        ("animal", &["bird", "cat", "deer", "dog", "frog", "horse"]),
    ];
    let node = |name: &str, children| TreeDocument {
        name: name.to_string(),
        weight: Some(1.0),
        children,
    };
    let doc = TreeDocument {
        name: "root".to_string(),
        weight: None,
        children: groups
            .iter()
            .map(|(g, leaves)| node(g, leaves.iter().map(|l| node(l, Vec::new())).collect()))
            .collect(),
    };
    tree_from_document(&doc).expect("builtin tree is valid")
}

/// One node of the JSON hierarchy document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeDocument>,
}

/// Parse a JSON hierarchy document. Edge weights default to 1 when absent
/// on a non-root node; the root must not carry one.
pub fn parse_tree(text: &str) -> Result<LabelTree> {
    let doc: TreeDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    tree_from_document(&doc)
}

pub fn tree_from_document(doc: &TreeDocument) -> Result<LabelTree> {
    if doc.weight.is_some() {
        return Err(Error::Validation(format!(
            "root {:?} must not carry an edge weight",
            doc.name
        )));
    }
    let mut names = Vec::new();
    let mut parents = Vec::new();
    let mut weights = Vec::new();
    let mut stack: Vec<(&TreeDocument, Option<usize>)> = vec![(doc, None)];
    while let Some((node, parent)) = stack.pop() {
        let idx = names.len();
        names.push(node.name.clone());
        parents.push(parent);
        weights.push(match parent {
            None => 0.0,
            Some(_) => node.weight.unwrap_or(1.0),
        });
        for child in node.children.iter().rev() {
            stack.push((child, Some(idx)));
        }
    }
    LabelTree::from_parents(names, parents, weights)
}

pub fn tree_to_document(tree: &LabelTree) -> TreeDocument {
    fn build(tree: &LabelTree, v: usize) -> TreeDocument {
        TreeDocument {
            name: tree.name(v).to_string(),
            weight: tree.parent(v).map(|_| tree.vertex(v).weight),
            children: tree.children(v).iter().map(|&c| build(tree, c)).collect(),
        }
    }
    build(tree, tree.root())
}

/// Serialize to the JSON hierarchy format.
pub fn serialize_tree(tree: &LabelTree) -> String {
    serde_json::to_string_pretty(&tree_to_document(tree)).expect("tree document serializes")
}

/// Equalize leaf depths by inserting unit-weight dummy parents above every
/// shallow leaf. The leaf keeps its own edge weight and its class index.
pub fn normalize_depths(tree: &LabelTree) -> Result<LabelTree> {
    let target = tree
        .leaves()
        .iter()
        .map(|&l| tree.depth(l))
        .max()
        .unwrap_or(0);
    let mut names = Vec::new();
    let mut parents = Vec::new();
    let mut weights = Vec::new();
    let mut map: HashMap<usize, usize> = HashMap::new();
    for v in tree.preorder() {
        let vert = tree.vertex(v);
        let mut parent = vert.parent.map(|p| map[&p]);
        if tree.is_leaf(v) && vert.depth < target && parent.is_some() {
            for k in 0..(target - vert.depth) {
                names.push(format!("{}#dummy{k}", vert.name));
                parents.push(parent);
                weights.push(1.0);
                parent = Some(names.len() - 1);
            }
        }
        map.insert(v, names.len());
        names.push(vert.name.clone());
        parents.push(parent);
        weights.push(vert.weight);
    }
    LabelTree::from_parents(names, parents, weights)
}
