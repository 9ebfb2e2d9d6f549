//! Seeded stochastic block model graphs with block-correlated texts and
//! features, written in the same file formats the loader reads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::text::ClassInfo;

const TOPICS: [&[&str]; 6] = [
    &[
        "neural",
        "network",
        "training",
        "gradient",
        "layer",
        "activation",
        "backpropagation",
        "weights",
    ],
    &[
        "genetic",
        "evolution",
        "population",
        "mutation",
        "crossover",
        "fitness",
        "selection",
        "chromosome",
    ],
    &[
        "probabilistic",
        "bayesian",
        "inference",
        "posterior",
        "prior",
        "likelihood",
        "sampling",
        "belief",
    ],
    &[
        "reinforcement",
        "reward",
        "policy",
        "agent",
        "exploration",
        "value",
        "action",
        "markov",
    ],
    &[
        "rule",
        "logic",
        "induction",
        "clause",
        "predicate",
        "theory",
        "deduction",
        "symbolic",
    ],
    &[
        "case",
        "retrieval",
        "similarity",
        "memory",
        "analogy",
        "adaptation",
        "index",
        "reuse",
    ],
];

const COMMON: &[&str] = &[
    "we",
    "propose",
    "method",
    "results",
    "show",
    "approach",
    "paper",
    "experiments",
    "model",
    "performance",
    "novel",
    "data",
    "study",
    "analysis",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub blocks: usize,
    pub size: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub seed: u64,
}

impl SbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Config("need at least two blocks".into()));
        }
        if self.size < 1 {
            return Err(Error::Config("block size must be positive".into()));
        }
        for p in [self.p_intra, self.p_inter] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "edge probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub graph: Graph,
    pub classes: Vec<ClassInfo>,
}

fn topic_words(block: usize) -> Vec<String> {
    let base = TOPICS[block % TOPICS.len()];
    let round = block / TOPICS.len();
    base.iter()
        .map(|w| {
            if round == 0 {
                w.to_string()
            } else {
                format!("{w}{round}")
            }
        })
        .collect()
}

/// Samples the graph, then texts and features. Node `v` belongs to block
/// `v / size`, which is also its label.
pub fn generate(params: &SbmParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let n = params.blocks * params.size;
    let block = |v: usize| v / params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) {
                params.p_intra
            } else {
                params.p_inter
            };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let vocab: Vec<Vec<String>> = (0..params.blocks).map(topic_words).collect();
    let texts = (0..n)
        .map(|v| {
            let words: Vec<String> = (0..16)
                .map(|_| {
                    if rng.random_bool(0.6) {
                        let topic = &vocab[block(v)];
                        topic[rng.random_range(0..topic.len())].clone()
                    } else {
                        COMMON[rng.random_range(0..COMMON.len())].to_string()
                    }
                })
                .collect();
            format!("Paper {v}: {}.", words.join(" "))
        })
        .collect();

    let noise = Normal::new(0.0, 0.5).map_err(|e| Error::Internal(e.to_string()))?;
    let features = (0..n)
        .map(|v| {
            (0..params.blocks)
                .map(|b| f64::from(u8::from(b == block(v))) + noise.sample(&mut rng))
                .collect()
        })
        .collect();

    let graph = Graph::from_edges(n, &edges)?
        .with_texts(texts)?
        .with_features(features)?
        .with_labels((0..n).map(block).collect())?;
    let classes = (0..params.blocks)
        .map(|b| ClassInfo {
            name: format!("Topic {b}"),
            description: Some(format!("Papers about {}.", vocab[b][..3].join(", "))),
        })
        .collect();
    Ok(SyntheticDataset { graph, classes })
}

/// File locations of a dataset written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub texts: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub classes: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            edges: dir.join("edges.txt"),
            texts: dir.join("texts.jsonl"),
            features: dir.join("features.csv"),
            labels: dir.join("labels.txt"),
            classes: dir.join("classes.json"),
        }
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(data: &SyntheticDataset, dir: &Path) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    let g = &data.graph;
    g.write_edge_list(&paths.edges)?;

    let mut texts = String::new();
    for v in 0..g.n() {
        let line = serde_json::json!({ "id": v, "text": g.text(v) });
        let _ = writeln!(texts, "{line}");
    }
    write(&paths.texts, &texts)?;

    let mut features = String::new();
    for v in 0..g.n() {
        let row: Vec<String> = g.feature(v).iter().map(|x| format!("{x}")).collect();
        let _ = writeln!(features, "{}", row.join(","));
    }
    write(&paths.features, &features)?;

    let labels = g.labels().unwrap_or_default();
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    write(&paths.labels, &out)?;
    write(
        &paths.classes,
        &serde_json::to_string_pretty(&data.classes)?,
    )?;
    Ok(paths)
}
