//! Silhouette-guided clustering of soft labels inside low-level communities
//! and the corresponding encoding-tree rewrite.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSet};
use crate::math::{cosine, euclidean, mean_vector};
use crate::oracle::SoftLabel;
use crate::tree::EncodingTree;

const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster index of every point.
    pub labels: Vec<usize>,
    pub k: usize,
    /// Mean silhouette; 0 when it is undefined (fewer than 3 points).
    pub silhouette: f64,
}

impl ClusterAssignment {
    /// Point indices of every cluster, in cluster order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = euclidean(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].to_vec()).collect();
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest(p, &centroids).1.powi(2))
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

/// Moves the point farthest from its centroid (taken from a cluster with at
/// least two members) into each empty cluster.
fn repair_empty(points: &[&[f64]], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut donor: Option<(usize, f64)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if sizes[l] < 2 {
                continue;
            }
            let d = euclidean(points[i], &centroids[l]);
            if donor.is_none_or(|(_, bd)| d > bd) {
                donor = Some((i, d));
            }
        }
        let Some((i, _)) = donor else { return };
        labels[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

fn points_of(points: &[SoftLabel]) -> Vec<&[f64]> {
    points.iter().map(SoftLabel::probs).collect()
}

/// Lloyd's k-means with k-means++ seeding on Euclidean distance.
pub fn kmeans(points: &[SoftLabel], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let pts = points_of(points);
    if k < 2 || k > pts.len() {
        return Err(Error::Domain(format!("k = {k} outside [2, {}]", pts.len())));
    }
    let dim = pts[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&pts, k, &mut rng);
    let mut labels: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(&pts, &mut labels, &mut centroids);

    for _ in 0..MAX_LLOYD_ITERS {
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members = pts
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| *p);
            *centroid = mean_vector(members, dim);
        }
        let mut next: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(&pts, &mut next, &mut centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    let silhouette = if pts.len() >= 3 {
        silhouette(points, &labels)?
    } else {
        0.0
    };
    Ok(ClusterAssignment {
        labels,
        k,
        silhouette,
    })
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0, as do points whose intra and nearest-cluster distances
/// are both zero.
pub fn silhouette(points: &[SoftLabel], labels: &[usize]) -> Result<f64> {
    let pts = points_of(points);
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 || pts.len() < 3 || labels.len() != pts.len() {
        return Err(Error::Domain(
            "silhouette needs at least two clusters and three points".into(),
        ));
    }
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);

    let mut total = 0.0;
    for i in 0..pts.len() {
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..pts.len() {
            if i != j {
                sums[labels[j]] += euclidean(pts[i], pts[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / pts.len() as f64)
}

/// Scans k = 2, 3, ... up to half the community size and keeps the last k
/// whose silhouette beat the running best by at least `s`. Returns `None`
/// for communities smaller than four or when no clustering has positive
/// silhouette.
pub fn adaptive_cluster(
    points: &[SoftLabel],
    s: f64,
    seed: u64,
) -> Result<Option<ClusterAssignment>> {
    let m = points.len();
    if m < 4 {
        return Ok(None);
    }
    let mut best: Option<ClusterAssignment> = None;
    let mut best_sil = -1.0;
    for k in 2..=m / 2 {
        let assignment = kmeans(points, k, seed)?;
        if assignment.silhouette - best_sil < s || assignment.silhouette <= 0.0 {
            break;
        }
        best_sil = assignment.silhouette;
        best = Some(assignment);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineAction {
    Split,
    Reallocate,
}

/// One tree rewrite performed by [`refine_tree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineMove {
    /// Low-level community (tree node id) the members came from.
    pub community: usize,
    pub action: RefineAction,
    pub members: Vec<usize>,
    /// Community the members ended up in.
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct RefinedTree {
    pub tree: EncodingTree,
    pub moves: Vec<RefineMove>,
}

fn community_seed(seed: u64, community: usize) -> u64 {
    seed ^ (community as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn mean_label(tree: &EncodingTree, community: usize, soft: &[SoftLabel]) -> Vec<f64> {
    let leaves = tree.leaf_children(community);
    let dim = soft.first().map_or(0, SoftLabel::classes);
    mean_vector(leaves.iter().map(|v| soft[v].probs()), dim)
}

/// Splits every low-level community along the clusters of its members' soft
/// labels. Clusters with two or more members become new communities next to
/// the original one; singletons join the sibling community with the most
/// similar mean soft label.
pub fn refine_tree(
    tree: &EncodingTree,
    soft: &[SoftLabel],
    s: f64,
    seed: u64,
    g: &Graph,
) -> Result<RefinedTree> {
    if soft.len() != tree.leaf_count() {
        return Err(Error::Domain(format!(
            "{} soft labels for {} leaves",
            soft.len(),
            tree.leaf_count()
        )));
    }
    if s <= 0.0 {
        return Err(Error::Config(format!(
            "silhouette threshold must be positive, got {s}"
        )));
    }
    let communities = tree.low_level_communities();

    let plans: Vec<(usize, NodeSet, Option<ClusterAssignment>)> = communities
        .into_par_iter()
        .map(|(parent, members)| {
            let first = soft[members.as_slice()[0]].argmax();
            if members.iter().all(|v| soft[v].argmax() == first) {
                return Ok((parent, members, None));
            }
            let points: Vec<SoftLabel> = members.iter().map(|v| soft[v].clone()).collect();
            let plan = adaptive_cluster(&points, s, community_seed(seed, parent))?;
            Ok((parent, members, plan))
        })
        .collect::<Result<_>>()?;

    let mut out = tree.clone();
    let mut moves = Vec::new();
    for (parent, members, plan) in plans {
        let Some(assignment) = plan else { continue };
        let anchor = out.parent(parent).unwrap_or(parent);
        let mut singletons = Vec::new();
        for cluster in assignment.clusters() {
            let leaves: Vec<usize> = cluster.iter().map(|&i| members.as_slice()[i]).collect();
            if leaves.len() > 1 {
                let id = out.graft(anchor, &leaves);
                moves.push(RefineMove {
                    community: parent,
                    action: RefineAction::Split,
                    members: leaves,
                    target: id,
                });
            } else {
                singletons.extend(leaves);
            }
        }
        for leaf in singletons {
            let target = out
                .children(anchor)
                .iter()
                .copied()
                .filter(|&c| c != parent && !out.is_leaf(c) && !out.leaf_children(c).is_empty())
                .map(|c| (c, cosine(soft[leaf].probs(), &mean_label(&out, c, soft))))
                .fold(None::<(usize, f64)>, |best, (c, sim)| match best {
                    Some((_, bs)) if bs >= sim => best,
                    _ => Some((c, sim)),
                });
            if let Some((target, _)) = target {
                out.reparent(leaf, target);
                moves.push(RefineMove {
                    community: parent,
                    action: RefineAction::Reallocate,
                    members: vec![leaf],
                    target,
                });
            }
        }
        out.prune_empty();
    }
    out.recompute_caches(g);
    out.validate(g)?;
    Ok(RefinedTree { tree: out, moves })
}

/// Mean over communities of the fraction of members that share the
/// community's most common argmax class.
pub fn argmax_agreement(tree: &EncodingTree, soft: &[SoftLabel]) -> f64 {
    let communities = tree.low_level_communities();
    if communities.is_empty() {
        return 0.0;
    }
    let total: f64 = communities
        .iter()
        .map(|(_, members)| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for v in members.iter() {
                *counts.entry(soft[v].argmax()).or_default() += 1;
            }
            let top = counts.values().copied().max().unwrap_or(0);
            top as f64 / members.len() as f64
        })
        .sum();
    total / communities.len() as f64
}
