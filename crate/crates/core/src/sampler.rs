//! Two-step edge sampling: a high-entropy leaf first, then a partner ranked by
//! soft-label similarity.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSet};
use crate::math::{cosine, mean_vector, softmax};
use crate::oracle::SoftLabel;
use crate::tree::EncodingTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Add,
    Remove,
    #[default]
    Both,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "add" => Ok(Mode::Add),
            "remove" => Ok(Mode::Remove),
            "both" => Ok(Mode::Both),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub theta: usize,
    pub rate: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta < 1 {
            return Err(Error::Config("theta must be at least 1".into()));
        }
        if self.rate < 1 {
            return Err(Error::Config("rate must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Added,
    Removed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAction {
    pub kind: ActionKind,
    pub community: usize,
    pub u: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub v: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

impl EdgeAction {
    fn skipped(community: usize, u: usize, v: Option<usize>, reason: &str) -> Self {
        EdgeAction {
            kind: ActionKind::Skipped,
            community,
            u,
            v,
            reason: Some(reason.into()),
        }
    }
}

/// Softmax over the members' leaf entropy terms.
pub fn p_topo(tree: &EncodingTree, community: &NodeSet) -> Result<Vec<f64>> {
    let terms = community
        .iter()
        .map(|v| tree.node_entropy(tree.leaf_of(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&terms))
}

/// Softmax over candidates of their soft-label cosine with `alpha`.
pub fn p_sema(soft: &[SoftLabel], alpha: usize, candidates: &[usize]) -> Vec<f64> {
    let sims: Vec<f64> = candidates
        .iter()
        .map(|&b| cosine(soft[b].probs(), soft[alpha].probs()))
        .collect();
    softmax(&sims)
}

/// Draws an index proportionally to `weights`.
pub fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    match WeightedIndex::new(weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => rng.random_range(0..weights.len()),
    }
}

fn by_similarity(soft: &[SoftLabel], alpha: usize, ids: &mut [usize], descending: bool) {
    let sim = |v: usize| cosine(soft[v].probs(), soft[alpha].probs());
    ids.sort_by(|&a, &b| {
        let ord = sim(a).partial_cmp(&sim(b)).unwrap_or(Ordering::Equal);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
}

/// Candidate partners for `alpha`: its own community, then whole sibling
/// communities under its grandparent in order of mean soft-label similarity,
/// until at least `theta` members are collected. Oversized sets keep the
/// `theta` members most similar to `alpha`.
pub fn expand_candidates(
    tree: &EncodingTree,
    alpha: usize,
    theta: usize,
    soft: &[SoftLabel],
) -> NodeSet {
    let leaf = tree.leaf_of(alpha);
    let Some(parent) = tree.parent(leaf) else {
        return NodeSet::default();
    };
    let mut pool: Vec<usize> = tree
        .leaf_children(parent)
        .iter()
        .filter(|&v| v != alpha)
        .collect();

    if pool.len() < theta {
        if let Some(grand) = tree.parent(parent) {
            let dim = soft[alpha].classes();
            let mut siblings: Vec<(usize, f64, NodeSet)> = tree
                .children(grand)
                .iter()
                .copied()
                .filter(|&c| c != parent && !tree.is_leaf(c))
                .map(|c| {
                    let members = tree.leaf_children(c);
                    let mean = mean_vector(members.iter().map(|v| soft[v].probs()), dim);
                    (c, cosine(&mean, soft[alpha].probs()), members)
                })
                .filter(|(_, _, members)| !members.is_empty())
                .collect();
            siblings.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            for (_, _, members) in siblings {
                if pool.len() >= theta {
                    break;
                }
                pool.extend(members.iter());
            }
        }
    }
    if pool.len() > theta {
        by_similarity(soft, alpha, &mut pool, true);
        pool.truncate(theta);
    }
    NodeSet::new(pool)
}

/// Ranks `pool` by similarity to `alpha` and draws from the softmax restricted
/// to the first half of that ranking.
fn ranked_draw<R: Rng>(
    soft: &[SoftLabel],
    alpha: usize,
    mut pool: Vec<usize>,
    descending: bool,
    rng: &mut R,
) -> usize {
    by_similarity(soft, alpha, &mut pool, descending);
    pool.truncate(pool.len().div_ceil(2));
    let probs = p_sema(soft, alpha, &pool);
    pool[sample_index(&probs, rng)]
}

/// Mutates a copy of `g` by sampling `m_c * rate` edge edits inside each
/// selected low-level community (given by tree node id).
pub fn run_sampling(
    g: &Graph,
    tree: &EncodingTree,
    soft: &[SoftLabel],
    cfg: &SamplingConfig,
    selected: &[usize],
) -> Result<(Graph, Vec<EdgeAction>)> {
    cfg.validate()?;
    if soft.len() != g.n() || tree.leaf_count() != g.n() {
        return Err(Error::Domain(format!(
            "{} soft labels and {} leaves for {} nodes",
            soft.len(),
            tree.leaf_count(),
            g.n()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = g.clone();
    let mut actions = Vec::new();
    let mut candidates: HashMap<usize, NodeSet> = HashMap::new();

    let mut communities = selected.to_vec();
    communities.sort_unstable();
    communities.dedup();
    for community in communities {
        let members = tree.leaf_children(community);
        if members.is_empty() {
            continue;
        }
        let probs = p_topo(tree, &members)?;
        for i in 0..members.len() * cfg.rate {
            let alpha = members.as_slice()[sample_index(&probs, &mut rng)];
            let add = match cfg.mode {
                Mode::Add => true,
                Mode::Remove => false,
                Mode::Both => i % 2 == 0,
            };
            let cands = candidates
                .entry(alpha)
                .or_insert_with(|| expand_candidates(tree, alpha, cfg.theta, soft));
            let action = if add {
                if cands.is_empty() {
                    EdgeAction::skipped(community, alpha, None, "no candidates")
                } else {
                    let beta = ranked_draw(soft, alpha, cands.as_slice().to_vec(), true, &mut rng);
                    if out.add_edge(alpha, beta)? {
                        EdgeAction {
                            kind: ActionKind::Added,
                            community,
                            u: alpha,
                            v: Some(beta),
                            reason: None,
                        }
                    } else {
                        EdgeAction::skipped(community, alpha, Some(beta), "edge exists")
                    }
                }
            } else {
                // The candidate set holds the nodes most similar to alpha, so
                // removals rank all of alpha's current neighbors instead.
                let pool: Vec<usize> = out.neighbors(alpha).collect();
                if pool.is_empty() {
                    EdgeAction::skipped(community, alpha, None, "no neighbors")
                } else {
                    let beta = ranked_draw(soft, alpha, pool, false, &mut rng);
                    out.remove_edge(alpha, beta)?;
                    EdgeAction {
                        kind: ActionKind::Removed,
                        community,
                        u: alpha,
                        v: Some(beta),
                        reason: None,
                    }
                }
            };
            actions.push(action);
        }
    }
    Ok((out, actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::minimize;
    use proptest::prelude::*;
    use rand::Rng;

    fn onehot(c: usize, k: usize) -> SoftLabel {
        let mut p = vec![0.0; k];
        p[c] = 1.0;
        SoftLabel::new(p).unwrap()
    }

    /// Two triangles joined by one edge, grouped into two communities.
    fn barbell() -> (Graph, EncodingTree) {
        let g = Graph::from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)])
            .unwrap();
        let t = minimize(&g, 2).unwrap().tree;
        (g, t)
    }

    #[test]
    fn p_topo_matches_softmax_of_entropies() {
        let (_, t) = barbell();
        let community = t.leaf_children(t.parent(0).unwrap());
        let probs = p_topo(&t, &community).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let single = p_topo(&t, &NodeSet::singleton(0)).unwrap();
        assert_eq!(single, vec![1.0]);
        let two = softmax(&[1.0, 0.0]);
        assert!((two[0] - 0.7311).abs() < 1e-4 && (two[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn p_sema_examples() {
        let soft = vec![onehot(0, 2), onehot(0, 2), onehot(1, 2), onehot(0, 2)];
        let p = p_sema(&soft, 0, &[1, 2]);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        assert_eq!(p_sema(&soft, 0, &[2]), vec![1.0]);
        let u = p_sema(&soft, 0, &[1, 3]);
        assert!((u[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn expansion_truncates_and_expands() {
        let (_, t) = barbell();
        let soft = vec![
            onehot(0, 2),
            onehot(0, 2),
            onehot(0, 2),
            onehot(1, 2),
            onehot(1, 2),
            onehot(1, 2),
        ];
        let own = expand_candidates(&t, 0, 1, &soft);
        assert_eq!(own.len(), 1);
        assert!(t
            .leaf_children(t.parent(0).unwrap())
            .contains(own.as_slice()[0]));
        // The root is the grandparent here, so the other triangle is appended.
        let wide = expand_candidates(&t, 0, 10, &soft);
        assert_eq!(wide.as_slice(), &[1, 2, 3, 4, 5]);
    }

    #[test]
    fn singleton_community_pulls_in_sibling() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let mut t = EncodingTree::flat(&g);
        let root = t.root();
        let top = t.graft(root, &[]);
        let a = t.graft(top, &[0]);
        let b = t.graft(top, &[1, 2]);
        t.graft(root, &[3]);
        t.recompute_caches(&g);
        t.validate(&g).unwrap();
        let soft = vec![onehot(0, 2); 4];
        assert_eq!(expand_candidates(&t, 0, 5, &soft).as_slice(), &[1, 2]);
        assert_eq!(t.leaf_children(a).as_slice(), &[0]);
        assert_eq!(t.leaf_children(b).len(), 2);
    }

    #[test]
    fn add_on_complete_graph_is_all_skips() {
        let edges: Vec<(usize, usize)> = (0..5)
            .flat_map(|u| (u + 1..5).map(move |v| (u, v)))
            .collect();
        let g = Graph::from_edges(5, &edges).unwrap();
        let t = minimize(&g, 2).unwrap().tree;
        let soft = vec![onehot(0, 2); 5];
        let cfg = SamplingConfig {
            theta: 3,
            rate: 2,
            mode: Mode::Add,
            seed: 1,
        };
        let selected: Vec<usize> = t.low_level_communities().iter().map(|c| c.0).collect();
        let (out, actions) = run_sampling(&g, &t, &soft, &cfg, &selected).unwrap();
        assert!(!actions.is_empty());
        assert!(actions.iter().all(|a| a.kind == ActionKind::Skipped));
        assert_eq!(out.edge_list_string(), g.edge_list_string());
    }

    #[test]
    fn remove_without_neighbors_skips() {
        let g = Graph::from_edges(4, &[(1, 3)]).unwrap();
        let mut t = EncodingTree::flat(&g);
        let root = t.root();
        let isolated = t.graft(root, &[0, 2]);
        t.graft(root, &[1, 3]);
        t.recompute_caches(&g);
        let soft = vec![onehot(0, 2); 4];
        let cfg = SamplingConfig {
            theta: 3,
            rate: 2,
            mode: Mode::Remove,
            seed: 0,
        };
        let (out, actions) = run_sampling(&g, &t, &soft, &cfg, &[isolated]).unwrap();
        assert_eq!(actions.len(), 4);
        assert!(actions
            .iter()
            .all(|a| a.reason.as_deref() == Some("no neighbors")));
        assert_eq!(out.m(), 1);
    }

    #[test]
    fn removal_prefers_dissimilar_neighbors() {
        // Star around 0: neighbors 1..=4 share its class, 5 does not.
        let g = Graph::from_edges(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]).unwrap();
        let mut t = EncodingTree::flat(&g);
        let root = t.root();
        let c = t.graft(root, &[0]);
        t.graft(root, &[1, 2, 3, 4, 5]);
        t.recompute_caches(&g);
        let mut soft = vec![onehot(0, 2); 5];
        soft.push(onehot(1, 2));
        let cfg = SamplingConfig {
            theta: 2,
            rate: 1,
            mode: Mode::Remove,
            seed: 3,
        };
        let (out, actions) = run_sampling(&g, &t, &soft, &cfg, &[c]).unwrap();
        assert_eq!(actions[0].kind, ActionKind::Removed);
        // Ascending ranking keeps {5, 1, 2} and p_sema still leaves 1 and 2 reachable.
        assert!(out.m() == 4);
    }

    fn random_setup(n: usize, seed: u64) -> (Graph, EncodingTree, Vec<SoftLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(0.3) {
                    edges.push((u, v));
                }
            }
        }
        edges.push((0, n - 1));
        edges.dedup();
        let g = Graph::from_edges(n, &edges).unwrap();
        let t = minimize(&g, 3).unwrap().tree;
        let soft = (0..n)
            .map(|_| {
                SoftLabel::new(softmax(&[
                    rng.random::<f64>() * 4.0,
                    rng.random::<f64>() * 4.0,
                    0.0,
                ]))
                .unwrap()
            })
            .collect();
        (g, t, soft)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn actions_are_consistent(n in 5usize..16, seed in any::<u64>(), mode in 0u8..3) {
            let (g, t, soft) = random_setup(n, seed);
            let mode = [Mode::Add, Mode::Remove, Mode::Both][mode as usize];
            let cfg = SamplingConfig { theta: 3, rate: 2, mode, seed };
            let selected: Vec<usize> = t.low_level_communities().iter().map(|c| c.0).collect();
            let (out, actions) = run_sampling(&g, &t, &soft, &cfg, &selected).unwrap();
            let again = run_sampling(&g, &t, &soft, &cfg, &selected).unwrap();
            prop_assert_eq!(&actions, &again.1);

            let mut replay = g.clone();
            for a in &actions {
                match a.kind {
                    ActionKind::Added => {
                        let v = a.v.unwrap();
                        prop_assert!(!replay.has_edge(a.u, v));
                        replay.add_edge(a.u, v).unwrap();
                    }
                    ActionKind::Removed => {
                        let v = a.v.unwrap();
                        prop_assert!(replay.has_edge(a.u, v));
                        replay.remove_edge(a.u, v).unwrap();
                    }
                    ActionKind::Skipped => {}
                }
            }
            prop_assert_eq!(replay.edge_list_string(), out.edge_list_string());
            let budget: usize = selected.iter().map(|&c| t.leaf_children(c).len() * cfg.rate).sum();
            prop_assert!(out.m().abs_diff(g.m()) <= budget);
            for (u, v) in out.edges() {
                prop_assert!(u < v && out.has_edge(v, u));
            }
        }
    }
}
