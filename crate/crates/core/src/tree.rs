//! Structural encoding trees and greedy structural-entropy minimization.
//!
//! Tree node ids `0..n` are the leaves and coincide with graph node ids; the
//! root is id `n`. Internal nodes created later get fresh ids. Deleted nodes
//! leave a tombstone so ids are never reused.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub community: NodeSet,
    /// Total degree of the community.
    pub vol: u64,
    /// Number of graph edges leaving the community.
    pub cut: u64,
}

/// Entropy contribution of one tree node: `-(cut / 2m) * log2(vol / parent_vol)`,
/// taken as zero when the cut or the volume is zero.
pub fn entropy_term(cut: u64, vol: u64, parent_vol: u64, two_m: u64) -> f64 {
    if cut == 0 || vol == 0 || two_m == 0 {
        return 0.0;
    }
    -(cut as f64 / two_m as f64) * (vol as f64 / parent_vol as f64).log2()
}

#[derive(Debug, Clone)]
pub struct EncodingTree {
    nodes: Vec<Option<TreeNode>>,
    root: usize,
    leaves: usize,
    two_m: u64,
    /// Entropy maintained through combine/lift deltas.
    tracked: f64,
}

#[derive(Debug, Clone, Serialize)]
struct NodeDump<'a> {
    id: usize,
    parent: Option<usize>,
    children: &'a [usize],
    community: &'a NodeSet,
    g: u64,
    vol: u64,
    entropy_term: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct TreeDump<'a> {
    root: usize,
    height: usize,
    entropy: f64,
    nodes: Vec<NodeDump<'a>>,
}

impl EncodingTree {
    /// Height-1 tree: every graph node is a leaf directly under the root.
    pub fn flat(g: &Graph) -> EncodingTree {
        let n = g.n();
        let mut nodes: Vec<Option<TreeNode>> = (0..n)
            .map(|v| {
                Some(TreeNode {
                    id: v,
                    parent: Some(n),
                    children: Vec::new(),
                    community: NodeSet::singleton(v),
                    vol: g.degree(v) as u64,
                    cut: g.degree(v) as u64,
                })
            })
            .collect();
        nodes.push(Some(TreeNode {
            id: n,
            parent: None,
            children: (0..n).collect(),
            community: NodeSet::full(n),
            vol: g.total_volume(),
            cut: 0,
        }));
        let mut t = EncodingTree {
            nodes,
            root: n,
            leaves: n,
            two_m: g.total_volume(),
            tracked: 0.0,
        };
        t.tracked = t.tree_entropy();
        t
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    /// Tree node holding graph node `v`.
    pub fn leaf_of(&self, v: usize) -> usize {
        v
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        id < self.leaves
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode> {
        self.nodes.get(id).and_then(Option::as_ref)
    }

    pub fn get(&self, id: usize) -> Result<&TreeNode> {
        self.node(id)
            .ok_or_else(|| Error::Domain(format!("tree node {id} does not exist")))
    }

    fn get_mut(&mut self, id: usize) -> &mut TreeNode {
        self.nodes[id].as_mut().expect("live tree node")
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.node(id).and_then(|n| n.parent)
    }

    pub fn children(&self, id: usize) -> &[usize] {
        self.node(id).map_or(&[], |n| n.children.as_slice())
    }

    /// Ids of all live tree nodes in increasing order.
    pub fn node_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|_| i))
    }

    pub fn two_m(&self) -> u64 {
        self.two_m
    }

    /// Depth of every live node, indexed by id (`usize::MAX` for tombstones).
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![usize::MAX; self.nodes.len()];
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, d)) = stack.pop() {
            depth[id] = d;
            for &c in self.children(id) {
                stack.push((c, d + 1));
            }
        }
        depth
    }

    /// Maximum number of edges on a root-to-leaf path.
    pub fn height(&self) -> usize {
        self.depths()
            .into_iter()
            .filter(|&d| d != usize::MAX)
            .max()
            .unwrap_or(0)
    }

    fn term_of(&self, node: &TreeNode) -> f64 {
        match node.parent {
            None => 0.0,
            Some(p) => entropy_term(
                node.cut,
                node.vol,
                self.get(p).map_or(0, |p| p.vol),
                self.two_m,
            ),
        }
    }

    /// Entropy contribution of a non-root tree node.
    pub fn node_entropy(&self, id: usize) -> Result<f64> {
        let node = self.get(id)?;
        if node.parent.is_none() {
            return Err(Error::Domain("the root has no entropy term".into()));
        }
        Ok(self.term_of(node))
    }

    /// Structural entropy recomputed from scratch over all non-root nodes.
    pub fn tree_entropy(&self) -> f64 {
        self.nodes.iter().flatten().map(|n| self.term_of(n)).sum()
    }

    /// Entropy maintained incrementally through the applied move deltas.
    pub fn tracked_entropy(&self) -> f64 {
        self.tracked
    }

    fn siblings_check(&self, a: usize, b: usize) -> Result<usize> {
        if a == b {
            return Err(Error::Domain(format!(
                "cannot combine node {a} with itself"
            )));
        }
        let pa = self.get(a)?.parent;
        let pb = self.get(b)?.parent;
        match (pa, pb) {
            (Some(x), Some(y)) if x == y => Ok(x),
            _ => Err(Error::Domain(format!(
                "nodes {a} and {b} do not share a parent"
            ))),
        }
    }

    /// Entropy before minus entropy after combining `a` and `b` under a new
    /// parent. Positive values are improvements.
    pub fn delta_combine(&self, g: &Graph, a: usize, b: usize) -> Result<f64> {
        let parent = self.siblings_check(a, b)?;
        let (na, nb) = (self.get(a)?, self.get(b)?);
        let e = g.edges_between(&na.community, &nb.community);
        Ok(self.combine_delta_with(na, nb, self.get(parent)?.vol, e))
    }

    fn combine_delta_with(&self, na: &TreeNode, nb: &TreeNode, parent_vol: u64, e: u64) -> f64 {
        let vol = na.vol + nb.vol;
        let cut = na.cut + nb.cut - 2 * e;
        let two_m = self.two_m;
        let before = entropy_term(na.cut, na.vol, parent_vol, two_m)
            + entropy_term(nb.cut, nb.vol, parent_vol, two_m);
        let after = entropy_term(cut, vol, parent_vol, two_m)
            + entropy_term(na.cut, na.vol, vol, two_m)
            + entropy_term(nb.cut, nb.vol, vol, two_m);
        before - after
    }

    /// Inserts a new node as the parent of siblings `a` and `b` and returns its id.
    pub fn combine(&mut self, g: &Graph, a: usize, b: usize) -> Result<usize> {
        self.siblings_check(a, b)?;
        let e = g.edges_between(&self.get(a)?.community, &self.get(b)?.community);
        self.combine_known(a, b, e)
    }

    fn combine_known(&mut self, a: usize, b: usize, e: u64) -> Result<usize> {
        let parent = self.siblings_check(a, b)?;
        let delta = self.combine_delta_with(self.get(a)?, self.get(b)?, self.get(parent)?.vol, e);
        let id = self.nodes.len();
        let (na, nb) = (self.get(a)?, self.get(b)?);
        let node = TreeNode {
            id,
            parent: Some(parent),
            children: vec![a, b],
            community: na.community.union(&nb.community),
            vol: na.vol + nb.vol,
            cut: na.cut + nb.cut - 2 * e,
        };
        self.nodes.push(Some(node));
        let p = self.get_mut(parent);
        p.children.retain(|&c| c != a && c != b);
        p.children.push(id);
        self.get_mut(a).parent = Some(id);
        self.get_mut(b).parent = Some(id);
        self.tracked -= delta;
        Ok(id)
    }

    fn lift_parts(&self, a: usize) -> Result<(usize, usize)> {
        let beta = self
            .get(a)?
            .parent
            .ok_or_else(|| Error::Domain("cannot lift the root".into()))?;
        let gamma = self
            .get(beta)?
            .parent
            .ok_or_else(|| Error::Domain(format!("node {a} is a child of the root")))?;
        Ok((beta, gamma))
    }

    /// Returns (delta, parent cut after the move).
    fn lift_eval(&self, g: &Graph, a: usize) -> Result<(f64, u64)> {
        let (beta, gamma) = self.lift_parts(a)?;
        let (na, nb, ng) = (self.get(a)?, self.get(beta)?, self.get(gamma)?);
        let rest = nb.community.difference(&na.community);
        let e = g.edges_between(&na.community, &rest);
        let new_vol = nb.vol - na.vol;
        let new_cut = nb.cut + 2 * e - na.cut;
        let two_m = self.two_m;

        let mut before = entropy_term(na.cut, na.vol, nb.vol, two_m)
            + entropy_term(nb.cut, nb.vol, ng.vol, two_m);
        let mut after = entropy_term(na.cut, na.vol, ng.vol, two_m);
        let remaining: Vec<&TreeNode> = nb
            .children
            .iter()
            .filter(|&&c| c != a)
            .map(|&c| self.get(c))
            .collect::<Result<_>>()?;
        for c in &remaining {
            before += entropy_term(c.cut, c.vol, nb.vol, two_m);
            after += entropy_term(c.cut, c.vol, new_vol, two_m);
        }
        if !remaining.is_empty() {
            after += entropy_term(new_cut, new_vol, ng.vol, two_m);
        }
        Ok((before - after, new_cut))
    }

    /// Entropy before minus entropy after lifting `a` to its grandparent.
    pub fn delta_lift(&self, g: &Graph, a: usize) -> Result<f64> {
        self.lift_eval(g, a).map(|(d, _)| d)
    }

    /// Moves `a` from its parent to its grandparent, deleting the parent if
    /// it is left without children.
    pub fn lift(&mut self, g: &Graph, a: usize) -> Result<()> {
        let (delta, new_cut) = self.lift_eval(g, a)?;
        let (beta, gamma) = self.lift_parts(a)?;
        let (a_vol, a_comm) = {
            let na = self.get(a)?;
            (na.vol, na.community.clone())
        };
        {
            let nb = self.get_mut(beta);
            nb.children.retain(|&c| c != a);
            nb.vol -= a_vol;
            nb.cut = new_cut;
            nb.community = nb.community.difference(&a_comm);
        }
        self.get_mut(gamma).children.push(a);
        self.get_mut(a).parent = Some(gamma);
        if self.get(beta)?.children.is_empty() {
            self.get_mut(gamma).children.retain(|&c| c != beta);
            self.nodes[beta] = None;
        }
        self.tracked -= delta;
        Ok(())
    }

    /// Parents of leaves, each with the leaves directly below it, ordered by
    /// parent id. Every leaf appears in exactly one entry.
    pub fn low_level_communities(&self) -> Vec<(usize, NodeSet)> {
        let mut by_parent: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for leaf in 0..self.leaves {
            if let Some(p) = self.parent(leaf) {
                by_parent.entry(p).or_default().push(leaf);
            }
        }
        by_parent
            .into_iter()
            .map(|(p, members)| (p, NodeSet::new(members)))
            .collect()
    }

    /// Leaf members (graph ids) of the low-level community rooted at `parent`.
    pub fn leaf_children(&self, parent: usize) -> NodeSet {
        self.children(parent)
            .iter()
            .copied()
            .filter(|&c| self.is_leaf(c))
            .collect()
    }

    /// Creates an internal node under `parent` adopting `children`, which
    /// must currently be children of other nodes. Caches are left stale; call
    /// [`EncodingTree::recompute_caches`] afterwards.
    pub(crate) fn graft(&mut self, parent: usize, children: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Some(TreeNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            community: NodeSet::default(),
            vol: 0,
            cut: 0,
        }));
        self.get_mut(parent).children.push(id);
        for &c in children {
            self.reparent(c, id);
        }
        id
    }

    /// Moves `id` under `new_parent`. Caches are left stale.
    pub(crate) fn reparent(&mut self, id: usize, new_parent: usize) {
        if let Some(old) = self.parent(id) {
            self.get_mut(old).children.retain(|&c| c != id);
        }
        self.get_mut(new_parent).children.push(id);
        self.get_mut(id).parent = Some(new_parent);
    }

    /// Deletes non-root internal nodes that have no children, repeatedly.
    pub(crate) fn prune_empty(&mut self) {
        loop {
            let empty: Vec<usize> = self
                .node_ids()
                .filter(|&id| id != self.root && !self.is_leaf(id) && self.children(id).is_empty())
                .collect();
            if empty.is_empty() {
                return;
            }
            for id in empty {
                if let Some(p) = self.parent(id) {
                    self.get_mut(p).children.retain(|&c| c != id);
                }
                self.nodes[id] = None;
            }
        }
    }

    /// Recomputes communities, volumes and cuts bottom-up from the graph and
    /// resets the tracked entropy.
    pub fn recompute_caches(&mut self, g: &Graph) {
        let depth = self.depths();
        let mut order: Vec<usize> = self.node_ids().collect();
        order.sort_by_key(|&id| std::cmp::Reverse(depth[id]));
        for id in order {
            let community = if self.is_leaf(id) {
                NodeSet::singleton(id)
            } else {
                let mut acc = NodeSet::default();
                for &c in self.children(id) {
                    acc = acc.union(&self.get(c).expect("live child").community);
                }
                acc
            };
            let vol = g.volume(&community);
            let cut = g.cut_size(&community);
            let node = self.get_mut(id);
            node.community = community;
            node.vol = vol;
            node.cut = cut;
        }
        self.two_m = g.total_volume();
        self.tracked = self.tree_entropy();
    }

    /// Checks the structural invariants and that every cached volume and cut
    /// matches the graph.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let fail = |msg: String| Err(Error::Internal(msg));
        let root = self.get(self.root)?;
        if root.parent.is_some() {
            return fail("root has a parent".into());
        }
        if root.community != NodeSet::full(g.n()) {
            return fail("root community is not the full node set".into());
        }
        let depth = self.depths();
        for id in self.node_ids() {
            let node = self.get(id)?;
            if depth[id] == usize::MAX {
                return fail(format!("node {id} unreachable from the root"));
            }
            if let Some(p) = node.parent {
                if !self.children(p).contains(&id) {
                    return fail(format!("node {id} missing from its parent's children"));
                }
            }
            if self.is_leaf(id) {
                if !node.children.is_empty() || node.community != NodeSet::singleton(id) {
                    return fail(format!("leaf {id} is malformed"));
                }
            } else {
                if id != self.root && node.children.is_empty() {
                    return fail(format!("internal node {id} has no children"));
                }
                let mut seen = 0usize;
                let mut union = NodeSet::default();
                for &c in &node.children {
                    let child = self.get(c)?;
                    if child.parent != Some(id) {
                        return fail(format!("child {c} does not point back to {id}"));
                    }
                    seen += child.community.len();
                    union = union.union(&child.community);
                }
                if union != node.community || seen != union.len() {
                    return fail(format!("children of {id} do not partition its community"));
                }
            }
            if node.vol != g.volume(&node.community) || node.cut != g.cut_size(&node.community) {
                return fail(format!("stale volume/cut cache on node {id}"));
            }
        }
        for leaf in 0..self.leaves {
            if self.node(leaf).is_none() {
                return fail(format!("leaf {leaf} missing"));
            }
        }
        Ok(())
    }

    /// Nodes whose lift can shorten a root-to-leaf path longer than `k`.
    pub fn lift_candidates(&self, k: usize) -> Vec<usize> {
        let depth = self.depths();
        let reach = self.subtree_heights(&depth);
        self.node_ids()
            .filter(|&id| depth[id] >= 2 && depth[id] + reach[id] > k)
            .collect()
    }

    fn subtree_heights(&self, depth: &[usize]) -> Vec<usize> {
        let mut reach = vec![0usize; self.nodes.len()];
        let mut order: Vec<usize> = self.node_ids().collect();
        order.sort_by_key(|&id| std::cmp::Reverse(depth[id]));
        for id in order {
            if let Some(p) = self.parent(id) {
                reach[p] = reach[p].max(reach[id] + 1);
            }
        }
        reach
    }

    pub fn to_json(&self) -> Result<String> {
        let nodes = self
            .nodes
            .iter()
            .flatten()
            .map(|n| NodeDump {
                id: n.id,
                parent: n.parent,
                children: &n.children,
                community: &n.community,
                g: n.cut,
                vol: n.vol,
                entropy_term: n.parent.map(|_| self.term_of(n)),
            })
            .collect();
        let dump = TreeDump {
            root: self.root,
            height: self.height(),
            entropy: self.tree_entropy(),
            nodes,
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}

/// One applied move of the minimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Move {
    Combine {
        a: usize,
        b: usize,
        new: usize,
        delta: f64,
    },
    Lift {
        node: usize,
        from: usize,
        delta: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Minimized {
    pub tree: EncodingTree,
    pub moves: Vec<Move>,
}

#[derive(Debug, PartialEq)]
struct Candidate {
    delta: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.delta
            .total_cmp(&other.delta)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy combine phase: repeatedly merges the pair of edge-connected root
/// children with the largest entropy reduction until the root has at most
/// two children or no connected pair is left.
pub fn combine_phase(g: &Graph) -> Result<Minimized> {
    let mut tree = EncodingTree::flat(g);
    let mut moves = Vec::new();
    let root = tree.root();
    let two_m = tree.two_m();

    // Edge counts between root children.
    let mut links: HashMap<usize, BTreeMap<usize, u64>> = HashMap::new();
    for (u, v) in g.edges() {
        links.entry(u).or_default().insert(v, 1);
        links.entry(v).or_default().insert(u, 1);
    }
    let root_delta = |tree: &EncodingTree, a: usize, b: usize, e: u64| -> f64 {
        let (na, nb) = (tree.get(a).expect("live"), tree.get(b).expect("live"));
        tree.combine_delta_with(na, nb, two_m, e)
    };

    let mut heap = BinaryHeap::new();
    for (u, v) in g.edges() {
        heap.push(Candidate {
            delta: root_delta(&tree, u, v, 1),
            a: u,
            b: v,
        });
    }

    while tree.children(root).len() > 2 {
        let Some(best) = heap.pop() else { break };
        let alive = |id: usize| tree.parent(id) == Some(root);
        if !alive(best.a) || !alive(best.b) {
            continue;
        }
        let e = links[&best.a][&best.b];
        let new = tree.combine_known(best.a, best.b, e)?;
        moves.push(Move::Combine {
            a: best.a,
            b: best.b,
            new,
            delta: best.delta,
        });

        let mut merged: BTreeMap<usize, u64> = BTreeMap::new();
        for old in [best.a, best.b] {
            for (x, count) in links.remove(&old).unwrap_or_default() {
                if x == best.a || x == best.b {
                    continue;
                }
                *merged.entry(x).or_default() += count;
                let nb = links.get_mut(&x).expect("symmetric links");
                nb.remove(&old);
            }
        }
        for (&x, &count) in &merged {
            links
                .get_mut(&x)
                .expect("symmetric links")
                .insert(new, count);
            heap.push(Candidate {
                delta: root_delta(&tree, x.min(new), x.max(new), count),
                a: x.min(new),
                b: x.max(new),
            });
        }
        links.insert(new, merged);
    }
    Ok(Minimized { tree, moves })
}

/// Best lift among the current candidates, with cached deltas.
struct LiftPlanner {
    cache: HashMap<usize, f64>,
}

impl LiftPlanner {
    fn new() -> Self {
        LiftPlanner {
            cache: HashMap::new(),
        }
    }

    fn step(&mut self, tree: &mut EncodingTree, g: &Graph, k: usize) -> Result<Option<Move>> {
        if tree.height() <= k {
            return Ok(None);
        }
        let mut best: Option<(f64, usize)> = None;
        for id in tree.lift_candidates(k) {
            let delta = match self.cache.get(&id) {
                Some(&d) => d,
                None => {
                    let d = tree.delta_lift(g, id)?;
                    self.cache.insert(id, d);
                    d
                }
            };
            if best.is_none_or(|(bd, _)| delta > bd) {
                best = Some((delta, id));
            }
        }
        let Some((delta, node)) = best else {
            return Err(Error::Internal(
                "no lift candidate while height exceeds K".into(),
            ));
        };
        let (beta, gamma) = tree.lift_parts(node)?;
        let mut stale: Vec<usize> = vec![node, beta];
        stale.extend_from_slice(tree.children(beta));
        stale.extend_from_slice(tree.children(gamma));
        stale.extend_from_slice(tree.children(node));
        for &c in tree.children(beta) {
            stale.extend_from_slice(tree.children(c));
        }
        tree.lift(g, node)?;
        for id in stale {
            self.cache.remove(&id);
        }
        Ok(Some(Move::Lift {
            node,
            from: beta,
            delta,
        }))
    }
}

/// Applies the single best lift (largest delta, smallest id on ties) among
/// [`EncodingTree::lift_candidates`]. Returns `None` once the height is at
/// most `k`.
pub fn lift_step(tree: &mut EncodingTree, g: &Graph, k: usize) -> Result<Option<Move>> {
    LiftPlanner::new().step(tree, g, k)
}

/// Builds a height-≤`k` encoding tree by greedy combining followed by greedy
/// lifting.
pub fn minimize(g: &Graph, k: usize) -> Result<Minimized> {
    if k < 2 {
        return Err(Error::Config(format!(
            "tree height must be at least 2, got {k}"
        )));
    }
    if g.m() == 0 {
        return Err(Error::Domain("graph has no edges".into()));
    }
    let Minimized {
        mut tree,
        mut moves,
    } = combine_phase(g)?;
    let mut planner = LiftPlanner::new();
    while let Some(mv) = planner.step(&mut tree, g, k)? {
        moves.push(mv);
    }
    Ok(Minimized { tree, moves })
}
