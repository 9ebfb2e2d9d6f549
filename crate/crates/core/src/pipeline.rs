//! Stage sequencing from input files to the rewired edge list and run report.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{load_graph, Graph, NodeSet};
use crate::math::{cosine, entropy_bits, mean_vector};
use crate::oracle::{to_soft_label, Oracle, OracleConfig, OracleStats, SoftLabel};
use crate::refine::{refine_tree, RefineAction, RefineMove};
use crate::sampler::{run_sampling, ActionKind, EdgeAction, Mode, SamplingConfig};
use crate::text::{
    augment_text, build_prompt, load_classes, ClassInfo, PromptBundle, PromptTemplate,
};
use crate::tree::{minimize, EncodingTree};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub graph: PathBuf,
    pub texts: PathBuf,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// JSON array of `{name, description}`; class names default to
    /// `Class i` when labels are given.
    pub classes: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub out: PathBuf,
    pub report: Option<PathBuf>,
    /// JSON-lines log of every sampled edge action.
    pub actions: Option<PathBuf>,
    /// JSON-lines log of refinement moves.
    pub refinement_log: Option<PathBuf>,
    pub height: usize,
    pub epsilon: f64,
    pub k_top: usize,
    pub max_chars: usize,
    pub theta: usize,
    pub rate: usize,
    pub s: f64,
    pub mode: Mode,
    pub seed: u64,
    pub fraction: f64,
    pub lambda: [f64; 3],
    pub oracle: OracleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            graph: PathBuf::new(),
            texts: PathBuf::new(),
            features: None,
            labels: None,
            classes: None,
            template: None,
            out: PathBuf::from("out_edges.txt"),
            report: None,
            actions: None,
            refinement_log: None,
            height: 3,
            epsilon: 0.45,
            k_top: 3,
            max_chars: 2000,
            theta: 5,
            rate: 3,
            s: 0.01,
            mode: Mode::Both,
            seed: 0,
            fraction: 1.0,
            lambda: [1.0 / 3.0; 3],
            oracle: OracleConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.height) {
            return Err(Error::Config(format!(
                "height must lie in [2, 8], got {}",
                self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.lambda.iter().any(|&l| l < 0.0 || !l.is_finite())
            || self.lambda.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "lambda weights must be non-negative with a positive sum".into(),
            ));
        }
        if self.s <= 0.0 {
            return Err(Error::Config(format!("s must be positive, got {}", self.s)));
        }
        if self.k_top == 0 {
            return Err(Error::Config("k_top must be at least 1".into()));
        }
        self.sampling().validate()?;
        self.oracle.validate()
    }

    /// Score weights scaled to sum to one.
    pub fn lambda_normalized(&self) -> [f64; 3] {
        let total: f64 = self.lambda.iter().sum();
        self.lambda.map(|l| l / total)
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            theta: self.theta,
            rate: self.rate,
            mode: self.mode,
            seed: self.seed,
        }
    }
}

/// Wall-clock seconds spent in each stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load: f64,
    pub minimize: f64,
    pub select: f64,
    pub prompt: f64,
    pub infer: f64,
    pub refine: f64,
    pub sample: f64,
    pub write: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub nodes: usize,
    pub edges_before: usize,
    pub edges_after: usize,
    pub entropy_flat: f64,
    pub entropy_minimized: f64,
    pub tree_height: usize,
    pub communities_total: usize,
    pub communities_selected: usize,
    pub oracle: OracleStats,
    pub refinement_splits: usize,
    pub refinement_reallocations: usize,
    pub edges_added: usize,
    pub edges_removed: usize,
    pub edges_skipped: usize,
    pub homophily_before: Option<f64>,
    pub homophily_after: Option<f64>,
    pub timings: StageTimings,
}

pub fn emit_report(report: &RunReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Composite need-for-optimization score of one low-level community.
/// Without soft labels, the absolute feature vectors normalized to sum one
/// stand in for label distributions.
pub fn community_score(
    members: &NodeSet,
    tree: &EncodingTree,
    g: &Graph,
    soft: Option<&[SoftLabel]>,
    lambda: [f64; 3],
) -> Result<f64> {
    let mut h_struct = 0.0;
    for v in members.iter() {
        h_struct += tree.node_entropy(tree.leaf_of(v))?;
    }

    let dists: Vec<Vec<f64>> = members
        .iter()
        .map(|v| match soft {
            Some(s) => s[v].probs().to_vec(),
            None => {
                let abs: Vec<f64> = g.feature(v).iter().map(|x| x.abs()).collect();
                let total: f64 = abs.iter().sum();
                if total > 0.0 {
                    abs.iter().map(|x| x / total).collect()
                } else {
                    vec![1.0 / abs.len() as f64; abs.len()]
                }
            }
        })
        .collect();
    let dim = dists.first().map_or(0, Vec::len);
    let h_label = entropy_bits(&mean_vector(dists.iter().map(Vec::as_slice), dim));

    let ids = members.as_slice();
    let mu = if ids.len() < 2 {
        1.0
    } else {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                total += cosine(g.feature(a), g.feature(b));
                pairs += 1;
            }
        }
        total / pairs as f64
    };
    Ok(lambda[0] * h_struct + lambda[1] * h_label + lambda[2] * (1.0 - mu))
}

/// The `ceil(f * count)` highest-scoring community ids, ties to the smallest
/// id, returned in ascending id order.
pub fn select_communities(scores: &[(usize, f64)], f: f64) -> Vec<usize> {
    let want = ((f * scores.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked
        .into_iter()
        .take(want.min(scores.len()))
        .map(|(id, _)| id)
        .collect();
    out.sort_unstable();
    out
}

/// Everything produced by [`execute`] before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub graph: Graph,
    pub tree: EncodingTree,
    pub soft_labels: Vec<SoftLabel>,
    pub actions: Vec<EdgeAction>,
    pub refine_moves: Vec<RefineMove>,
    pub report: RunReport,
}

fn timed<T>(slot: &mut f64, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    log::info!("stage {stage}: start");
    let out = f().map_err(|e| e.at_stage(stage));
    *slot = start.elapsed().as_secs_f64();
    log::info!("stage {stage}: done in {:.3}s", *slot);
    out
}

/// Runs every in-memory stage on a loaded graph.
pub fn execute(
    g: &Graph,
    classes: &[ClassInfo],
    template: &PromptTemplate,
    oracle: &Oracle,
    cfg: &PipelineConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut timings = StageTimings::default();
    let c = classes.len();

    let minimized = timed(&mut timings.minimize, "minimize", || {
        minimize(g, cfg.height)
    })?;
    let tree = minimized.tree;
    let entropy_flat = EncodingTree::flat(g).tree_entropy();
    let communities = tree.low_level_communities();

    let selected: Vec<usize> = timed(&mut timings.select, "select", || {
        if cfg.fraction >= 1.0 {
            return Ok(communities.iter().map(|(id, _)| *id).collect());
        }
        let lambda = cfg.lambda_normalized();
        let scores = communities
            .iter()
            .map(|(id, members)| Ok((*id, community_score(members, &tree, g, None, lambda)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(select_communities(&scores, cfg.fraction))
    })?;
    log::info!(
        "selected {} of {} communities",
        selected.len(),
        communities.len()
    );

    let requests: Vec<(usize, String)> = timed(&mut timings.prompt, "prompt", || {
        let mut out = Vec::new();
        for (id, members) in &communities {
            if selected.binary_search(id).is_err() {
                continue;
            }
            for v in members.iter() {
                let payload = augment_text(g, members, v, cfg.epsilon, cfg.k_top, cfg.max_chars);
                let bundle = PromptBundle::for_node(classes.to_vec(), payload, members.len());
                out.push((v, build_prompt(&bundle, template)?));
            }
        }
        Ok(out)
    })?;

    let soft: Vec<SoftLabel> = timed(&mut timings.infer, "infer", || {
        let logits = oracle.infer_many(&requests, c)?;
        Ok((0..g.n())
            .map(|v| {
                logits
                    .get(&v)
                    .map_or_else(|| SoftLabel::uniform(c), to_soft_label)
            })
            .collect())
    })?;

    let refined = timed(&mut timings.refine, "refine", || {
        refine_tree(&tree, &soft, cfg.s, cfg.seed, g)
    })?;

    let (graph, actions) = timed(&mut timings.sample, "sample", || {
        let chosen: NodeSet = communities
            .iter()
            .filter(|(id, _)| selected.binary_search(id).is_ok())
            .flat_map(|(_, m)| m.iter())
            .collect();
        let after: Vec<usize> = refined
            .tree
            .low_level_communities()
            .into_iter()
            .filter(|(_, m)| m.iter().any(|v| chosen.contains(v)))
            .map(|(id, _)| id)
            .collect();
        run_sampling(g, &refined.tree, &soft, &cfg.sampling(), &after)
    })?;

    let count = |k: ActionKind| actions.iter().filter(|a| a.kind == k).count();
    let homophily = |graph: &Graph| graph.labels().and_then(|l| graph.edge_homophily(l).ok());
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        nodes: g.n(),
        edges_before: g.m(),
        edges_after: graph.m(),
        entropy_flat,
        entropy_minimized: tree.tree_entropy(),
        tree_height: tree.height(),
        communities_total: communities.len(),
        communities_selected: selected.len(),
        oracle: oracle.stats(),
        refinement_splits: refined
            .moves
            .iter()
            .filter(|m| m.action == RefineAction::Split)
            .count(),
        refinement_reallocations: refined
            .moves
            .iter()
            .filter(|m| m.action == RefineAction::Reallocate)
            .count(),
        edges_added: count(ActionKind::Added),
        edges_removed: count(ActionKind::Removed),
        edges_skipped: count(ActionKind::Skipped),
        homophily_before: homophily(g),
        homophily_after: homophily(&graph),
        timings,
    };
    Ok(RunOutcome {
        graph,
        tree: refined.tree,
        soft_labels: soft,
        actions,
        refine_moves: refined.moves,
        report,
    })
}

fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn default_classes(g: &Graph) -> Result<Vec<ClassInfo>> {
    match g.class_count() {
        Some(c) if c >= 2 => Ok((0..c)
            .map(|i| ClassInfo::named(format!("Class {i}")))
            .collect()),
        _ => Err(Error::Config(
            "a class file is needed unless labels with at least two classes are given".into(),
        )),
    }
}

/// Loads inputs, runs every stage and writes the configured outputs.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut load_secs = 0.0;
    let (g, classes, template, oracle) = timed(&mut load_secs, "load", || {
        let g = load_graph(
            &cfg.graph,
            &cfg.texts,
            cfg.features.as_deref(),
            cfg.labels.as_deref(),
        )?;
        let classes = match &cfg.classes {
            Some(p) => load_classes(p)?,
            None => default_classes(&g)?,
        };
        if let Some(labels) = g.labels() {
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
                return Err(Error::Input(format!(
                    "label {bad} but only {} classes",
                    classes.len()
                )));
            }
        }
        let template = match &cfg.template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::default(),
        };
        let oracle = Oracle::from_config(&cfg.oracle, g.labels())?;
        Ok((g, classes, template, oracle))
    })?;
    log::info!("loaded graph with {} nodes and {} edges", g.n(), g.m());

    let mut outcome = execute(&g, &classes, &template, &oracle, cfg)?;
    outcome.report.timings.load = load_secs;

    let mut write_secs = 0.0;
    timed(&mut write_secs, "write", || {
        outcome.graph.write_edge_list(&cfg.out)?;
        if let Some(p) = &cfg.actions {
            write_json_lines(p, &outcome.actions)?;
        }
        if let Some(p) = &cfg.refinement_log {
            write_json_lines(p, &outcome.refine_moves)?;
        }
        Ok(())
    })?;
    outcome.report.timings.write = write_secs;
    if let Some(p) = &cfg.report {
        emit_report(&outcome.report, p).map_err(|e| e.at_stage("write"))?;
    }
    Ok(outcome.report)
}
