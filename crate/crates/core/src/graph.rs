//! Undirected text-attributed graphs: storage, set queries and file IO.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Sorted set of distinct node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct NodeSet(Vec<usize>);

impl NodeSet {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = ids.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        NodeSet(v)
    }

    pub fn singleton(v: usize) -> Self {
        NodeSet(vec![v])
    }

    pub fn full(n: usize) -> Self {
        NodeSet((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn union(&self, other: &NodeSet) -> NodeSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        NodeSet(out)
    }

    pub fn difference(&self, other: &NodeSet) -> NodeSet {
        NodeSet(
            self.0
                .iter()
                .copied()
                .filter(|&v| !other.contains(v))
                .collect(),
        )
    }
}

impl FromIterator<usize> for NodeSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        NodeSet::new(iter)
    }
}

/// Undirected, unweighted graph whose nodes carry a feature vector, a text
/// and optionally a ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adj: Vec<BTreeSet<usize>>,
    m: usize,
    features: Vec<Vec<f64>>,
    texts: Vec<String>,
    labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph over `n` nodes. Duplicate and reversed pairs collapse to
    /// one edge. Every node gets the feature vector `[1.0]` and an empty text.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        let mut g = Graph {
            adj: vec![BTreeSet::new(); n],
            m: 0,
            features: vec![vec![1.0]; n],
            texts: vec![String::new(); n],
            labels: None,
        };
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Input(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(Error::Input(format!("self-loop on node {u}")));
            }
            g.insert(u, v);
        }
        Ok(g)
    }

    pub fn with_features(mut self, features: Vec<Vec<f64>>) -> Result<Graph> {
        if features.len() != self.n() {
            return Err(Error::Input(format!(
                "{} feature rows for {} nodes",
                features.len(),
                self.n()
            )));
        }
        let dim = features.first().map_or(1, Vec::len);
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Input(
                "feature vectors must share one non-zero dimension".into(),
            ));
        }
        self.features = features;
        Ok(self)
    }

    pub fn with_texts(mut self, texts: Vec<String>) -> Result<Graph> {
        if texts.len() != self.n() {
            return Err(Error::Input(format!(
                "{} texts for {} nodes",
                texts.len(),
                self.n()
            )));
        }
        self.texts = texts;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Graph> {
        if labels.len() != self.n() {
            return Err(Error::Input(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    fn insert(&mut self, u: usize, v: usize) -> bool {
        if self.adj[u].insert(v) {
            self.adj[v].insert(u);
            self.m += 1;
            true
        } else {
            false
        }
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Total degree, 2m.
    pub fn total_volume(&self) -> u64 {
        2 * self.m as u64
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[v].iter().copied()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n() && self.adj[u].contains(&v)
    }

    pub fn volume(&self, s: &NodeSet) -> u64 {
        s.iter().map(|v| self.degree(v) as u64).sum()
    }

    /// Number of edges with exactly one endpoint in `s`.
    pub fn cut_size(&self, s: &NodeSet) -> u64 {
        let mut cut = 0u64;
        for v in s.iter() {
            for w in self.neighbors(v) {
                if !s.contains(w) {
                    cut += 1;
                }
            }
        }
        cut
    }

    /// Number of edges with one endpoint in `a` and the other in `b`.
    /// The sets are assumed disjoint.
    pub fn edges_between(&self, a: &NodeSet, b: &NodeSet) -> u64 {
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        small
            .iter()
            .map(|v| self.neighbors(v).filter(|&w| large.contains(w)).count() as u64)
            .sum()
    }

    fn check_pair(&self, u: usize, v: usize) -> Result<()> {
        if u >= self.n() || v >= self.n() {
            return Err(Error::Input(format!(
                "edge ({u}, {v}) out of range for {} nodes",
                self.n()
            )));
        }
        if u == v {
            return Err(Error::Input(format!("self-loop on node {u}")));
        }
        Ok(())
    }

    /// Returns false when the edge was already present.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<bool> {
        self.check_pair(u, v)?;
        Ok(self.insert(u, v))
    }

    /// Returns false when the edge was absent.
    pub fn remove_edge(&mut self, u: usize, v: usize) -> Result<bool> {
        self.check_pair(u, v)?;
        if self.adj[u].remove(&v) {
            self.adj[v].remove(&u);
            self.m -= 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, nb)| nb.range(u + 1..).map(move |&v| (u, v)))
    }

    pub fn feature(&self, v: usize) -> &[f64] {
        &self.features[v]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(1, Vec::len)
    }

    pub fn text(&self, v: usize) -> &str {
        &self.texts[v]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of classes implied by the ground-truth labels.
    pub fn class_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Fraction of edges whose endpoints share a label.
    pub fn edge_homophily(&self, labels: &[usize]) -> Result<f64> {
        if self.m == 0 {
            return Err(Error::Metric("homophily of a graph without edges".into()));
        }
        if labels.len() != self.n() {
            return Err(Error::Metric(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n()
            )));
        }
        let same = self
            .edges()
            .filter(|&(u, v)| labels[u] == labels[v])
            .count();
        Ok(same as f64 / self.m as f64)
    }

    /// Edge list text: one `u v` pair per line, `u < v`, sorted.
    pub fn edge_list_string(&self) -> String {
        let mut out = String::with_capacity(self.m * 8);
        for (u, v) in self.edges() {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.edge_list_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
struct TextRecord {
    id: usize,
    text: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_edge_list(content: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Input(format!("edge list line {}: `{line}`", lineno + 1)))
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::Input(format!(
                "edge list line {}: expected two ids",
                lineno + 1
            )));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn parse_texts(content: &str) -> Result<Vec<(usize, String)>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("texts line {}: {e}", lineno + 1)))?;
        if !seen.insert(rec.id) {
            return Err(Error::Input(format!("duplicate text id {}", rec.id)));
        }
        records.push((rec.id, rec.text));
    }
    Ok(records)
}

fn parse_features(content: &str) -> Result<Vec<Vec<f64>>> {
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            line.split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| {
                        Error::Input(format!("feature row {row}: bad value `{}`", tok.trim()))
                    })
                })
                .collect()
        })
        .collect()
}

fn parse_labels(content: &str) -> Result<Vec<usize>> {
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Input(format!("label line {}: `{}`", i + 1, l.trim())))
        })
        .collect()
}

/// Loads a graph from its edge list, JSON-lines texts and optional CSV
/// features and label list.
///
/// The node count is declared by the text records (1 + largest id); when the
/// text file is empty it falls back to 1 + the largest edge endpoint. Self-loops
/// in the edge list are dropped with a warning.
pub fn load_graph(
    edge_path: impl AsRef<Path>,
    text_path: impl AsRef<Path>,
    feature_path: Option<&Path>,
    label_path: Option<&Path>,
) -> Result<Graph> {
    let raw_edges = parse_edge_list(&read(edge_path.as_ref())?)?;
    let text_records = parse_texts(&read(text_path.as_ref())?)?;

    let n = match text_records.iter().map(|(id, _)| *id).max() {
        Some(max_id) => max_id + 1,
        None => raw_edges
            .iter()
            .map(|&(u, v)| u.max(v) + 1)
            .max()
            .unwrap_or(0),
    };

    let mut edges = Vec::with_capacity(raw_edges.len());
    for (u, v) in raw_edges {
        if u == v {
            log::warn!("dropping self-loop on node {u}");
            continue;
        }
        edges.push((u, v));
    }
    let mut g = Graph::from_edges(n, &edges)?;

    let mut texts = vec![String::new(); n];
    for (id, text) in text_records {
        texts[id] = text;
    }
    g = g.with_texts(texts)?;

    if let Some(p) = feature_path {
        g = g.with_features(parse_features(&read(p)?)?)?;
    }
    if let Some(p) = label_path {
        g = g.with_labels(parse_labels(&read(p)?)?)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triangle() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap()
    }

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn degrees() {
        assert_eq!(triangle().degree(0), 2);
        assert_eq!(path3().degree(1), 2);
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn volumes() {
        assert_eq!(triangle().volume(&NodeSet::full(3)), 6);
        assert_eq!(path3().volume(&NodeSet::new([0, 1])), 3);
        assert_eq!(path3().volume(&NodeSet::default()), 0);
    }

    #[test]
    fn cuts() {
        assert_eq!(path3().cut_size(&NodeSet::new([0, 1])), 1);
        assert_eq!(triangle().cut_size(&NodeSet::singleton(0)), 2);
        assert_eq!(triangle().cut_size(&NodeSet::full(3)), 0);
    }

    #[test]
    fn add_remove() {
        let mut g = triangle();
        assert!(!g.add_edge(0, 1).unwrap());
        assert_eq!(g.m(), 3);
        let start = path3();
        let mut h = start.clone();
        assert!(h.add_edge(0, 2).unwrap());
        assert!(h.remove_edge(0, 2).unwrap());
        assert_eq!(h, start);
        assert!(!h.remove_edge(0, 2).unwrap());
        assert!(matches!(h.add_edge(1, 1), Err(Error::Input(_))));
    }

    #[test]
    fn homophily() {
        let h = triangle().edge_homophily(&[0, 0, 1]).unwrap();
        assert!((h - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(triangle().edge_homophily(&[2, 2, 2]).unwrap(), 1.0);
        let c6 = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]).unwrap();
        assert_eq!(c6.edge_homophily(&[0, 1, 0, 1, 0, 1]).unwrap(), 0.0);
        let empty = Graph::from_edges(2, &[]).unwrap();
        assert!(matches!(
            empty.edge_homophily(&[0, 0]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn nodeset_ops() {
        let a = NodeSet::new([3, 1, 1]);
        assert_eq!(a.as_slice(), &[1, 3]);
        let b = NodeSet::new([2, 3]);
        assert_eq!(a.union(&b).as_slice(), &[1, 2, 3]);
        assert_eq!(a.difference(&b).as_slice(), &[1]);
    }

    fn write(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn load_cycle_infers_n() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.txt", "# comment\n0 1\n1 2\n2 0\n");
        let t = write(dir.path(), "t.jsonl", "");
        let g = load_graph(&e, &t, None, None).unwrap();
        assert_eq!((g.n(), g.m()), (3, 3));
    }

    #[test]
    fn load_dedups_reversed_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.txt", "0 1\n1 0\n");
        let t = write(dir.path(), "t.jsonl", "");
        assert_eq!(load_graph(&e, &t, None, None).unwrap().m(), 1);
    }

    #[test]
    fn load_rejects_out_of_range_edge() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.txt", "0 5\n");
        let t = write(
            dir.path(),
            "t.jsonl",
            "{\"id\":0,\"text\":\"a\"}\n{\"id\":2,\"text\":\"c\"}\n",
        );
        assert!(matches!(
            load_graph(&e, &t, None, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn load_texts_features_labels() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.txt", "0 1\n");
        let t = write(dir.path(), "t.jsonl", "{\"id\":2,\"text\":\"c\"}\n");
        let f = write(dir.path(), "f.csv", "1,0\n0,1\n1,1\n");
        let l = write(dir.path(), "l.txt", "0\n1\n1\n");
        let g = load_graph(&e, &t, Some(&f), Some(&l)).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.text(0), "");
        assert_eq!(g.text(2), "c");
        assert_eq!(g.feature(1), &[0.0, 1.0]);
        assert_eq!(g.labels(), Some(&[0, 1, 1][..]));

        let dup = write(
            dir.path(),
            "dup.jsonl",
            "{\"id\":0,\"text\":\"a\"}\n{\"id\":0,\"text\":\"b\"}\n",
        );
        assert!(matches!(
            load_graph(&e, &dup, None, None),
            Err(Error::Input(_))
        ));
        let short = write(dir.path(), "short.csv", "1,0\n");
        assert!(matches!(
            load_graph(&e, &t, Some(&short), None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = triangle();
        let parsed = parse_edge_list(&g.edge_list_string()).unwrap();
        assert_eq!(parsed, vec![(0, 1), (0, 2), (1, 2)]);
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (2usize..12).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..30).prop_map(move |pairs| {
                let edges: Vec<_> = pairs.into_iter().filter(|(u, v)| u != v).collect();
                Graph::from_edges(n, &edges).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn cut_and_volume_complement(g in arb_graph(), mask in any::<u32>()) {
            let s: NodeSet = (0..g.n()).filter(|v| mask >> v & 1 == 1).collect();
            let c: NodeSet = (0..g.n()).filter(|v| mask >> v & 1 == 0).collect();
            prop_assert_eq!(g.cut_size(&s), g.cut_size(&c));
            prop_assert_eq!(g.volume(&s) + g.volume(&c), g.total_volume());
            for v in 0..g.n() {
                prop_assert_eq!(g.cut_size(&NodeSet::singleton(v)), g.degree(v) as u64);
            }
        }

        #[test]
        fn mutations_keep_invariants(
            g in arb_graph(),
            ops in proptest::collection::vec((any::<bool>(), 0usize..12, 0usize..12), 0..60),
        ) {
            let mut g = g;
            for (add, u, v) in ops {
                let (u, v) = (u % g.n(), v % g.n());
                let res = if add { g.add_edge(u, v) } else { g.remove_edge(u, v) };
                prop_assert_eq!(res.is_err(), u == v);
            }
            let mut count = 0;
            for u in 0..g.n() {
                prop_assert!(!g.has_edge(u, u));
                for w in g.neighbors(u) {
                    prop_assert!(g.has_edge(w, u));
                    count += 1;
                }
            }
            prop_assert_eq!(count, 2 * g.m());
        }
    }
}
