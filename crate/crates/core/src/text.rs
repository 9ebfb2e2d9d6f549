//! Community-based text augmentation and prompt assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSet};
use crate::math::cosine;

/// Sentence introducing the texts borrowed from community members.
pub const RELATED_HEADER: &str = "The abstract of other papers related to its content:";

/// Digits used for the example answer line; the first six form the canonical
/// six-class example.
const EXAMPLE_DIGITS: [u8; 10] = [8, 4, 1, 2, 5, 3, 7, 0, 6, 9];

/// Softmax over cosine similarities between `alpha` and every other member
/// of `community`. The node itself is excluded from the normalization.
pub fn similarity_weights(g: &Graph, community: &NodeSet, alpha: usize) -> BTreeMap<usize, f64> {
    let others: Vec<usize> = community.iter().filter(|&v| v != alpha).collect();
    if others.is_empty() {
        return BTreeMap::new();
    }
    let sims: Vec<f64> = others
        .iter()
        .map(|&b| cosine(g.feature(alpha), g.feature(b)))
        .collect();
    others
        .into_iter()
        .zip(crate::math::softmax(&sims))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedText {
    pub node: usize,
    pub base: String,
    /// Borrowed texts as (source node, text), highest weight first.
    pub appended: Vec<(usize, String)>,
}

impl AugmentedText {
    /// Base text followed by the borrowed texts under [`RELATED_HEADER`].
    pub fn concatenated(&self) -> String {
        if self.appended.is_empty() {
            return self.base.clone();
        }
        let mut out = self.base.clone();
        out.push('\n');
        out.push_str(RELATED_HEADER);
        for (_, t) in &self.appended {
            out.push('\n');
            out.push_str(t);
        }
        out
    }
}

fn truncate_chars(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text.to_string(),
    }
}

/// Borrows the texts of up to `k_top` community members whose similarity
/// weight is at least `epsilon`, in descending weight order. Members with an
/// empty text are skipped. Every text is capped at `max_chars` characters.
pub fn augment_text(
    g: &Graph,
    community: &NodeSet,
    alpha: usize,
    epsilon: f64,
    k_top: usize,
    max_chars: usize,
) -> AugmentedText {
    let mut ranked: Vec<(usize, f64)> = similarity_weights(g, community, alpha)
        .into_iter()
        .filter(|&(_, w)| w >= epsilon)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let appended = ranked
        .into_iter()
        .filter(|&(v, _)| !g.text(v).is_empty())
        .take(k_top)
        .map(|(v, _)| (v, truncate_chars(g.text(v), max_chars)))
        .collect();
    AugmentedText {
        node: alpha,
        base: truncate_chars(g.text(alpha), max_chars),
        appended,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
}

impl ClassInfo {
    pub fn named(name: impl Into<String>) -> Self {
        ClassInfo {
            name: name.into(),
            description: None,
        }
    }
}

/// Reads a JSON array of `{name, description}` records.
pub fn load_classes(path: impl AsRef<Path>) -> Result<Vec<ClassInfo>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let classes: Vec<ClassInfo> = serde_json::from_str(&content)?;
    if classes.len() < 2 {
        return Err(Error::Input(
            "class file must list at least two classes".into(),
        ));
    }
    Ok(classes)
}

/// Everything a single node's prompt is rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub task: String,
    pub topology: String,
    pub classes: Vec<ClassInfo>,
    pub payload: AugmentedText,
}

impl PromptBundle {
    /// Bundle with the default task and topology descriptions for a node in a
    /// low-level community of `community_size` members.
    pub fn for_node(
        classes: Vec<ClassInfo>,
        payload: AugmentedText,
        community_size: usize,
    ) -> Self {
        let task = format!(
            "Task: decide which of the {} categories below the target paper belongs to.",
            classes.len()
        );
        let topology = format!(
            "The target paper is part of a community of {} structurally related papers; {} of them were selected for their similar content.",
            community_size,
            payload.appended.len()
        );
        PromptBundle {
            task,
            topology,
            classes,
            payload,
        }
    }
}

pub const DEFAULT_TEMPLATE: &str = "{task}
{topology}

{classes}

The abstract of paper 1:
{target_text}
{related_texts}
Based on the abstract of paper 1 and other papers, please provide the probability that paper 1 belongs to each category.

For the current paper 1, please focus on the topic, methodology, keywords, and conclusions.

For the related papers, please focus on parts similar to those on paper 1.

Use integers from 0 to 9 to represent the probabilities. 0 means it is impossible to belong to that category, and 9 means it definitely belongs to that category.
The example format is:
{format_line}
";

/// Prompt template with `{classes}`, `{target_text}`, `{related_texts}`,
/// `{format_line}`, `{task}` and `{topology}` placeholders. Unknown braces are
/// copied through verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate(String);

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate(DEFAULT_TEMPLATE.to_string())
    }
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Self {
        PromptTemplate(template.into())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read_to_string(path)
            .map(PromptTemplate)
            .map_err(|e| Error::io(path, e))
    }

    fn render(&self, lookup: impl Fn(&str) -> Option<String>) -> String {
        let src = &self.0;
        let mut out = String::with_capacity(src.len() * 2);
        let mut rest = src.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => match lookup(&after[..close]) {
                    Some(value) => {
                        out.push_str(&value);
                        rest = &after[close + 1..];
                    }
                    None => {
                        out.push('{');
                        rest = after;
                    }
                },
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Example answer line for `c` classes, e.g. `[8, 4, 1, 2, 5, 3]` for six.
pub fn format_line(c: usize) -> String {
    let digits: Vec<String> = (0..c)
        .map(|i| EXAMPLE_DIGITS[i % EXAMPLE_DIGITS.len()].to_string())
        .collect();
    format!("[{}]", digits.join(", "))
}

fn render_classes(classes: &[ClassInfo]) -> String {
    let names: Vec<&str> = classes.iter().map(|c| c.name.as_str()).collect();
    let mut out = format!(
        "Here is a paper 1 which belongs to one of the following categories: {{{}}}.",
        names.join(", ")
    );
    let mut missing = 0;
    for class in classes {
        match class
            .description
            .as_deref()
            .filter(|d| !d.trim().is_empty())
        {
            Some(desc) => {
                let _ = write!(out, "\n\nThe description of {{{}}}:\n{}", class.name, desc);
            }
            None => missing += 1,
        }
    }
    if missing > 0 {
        log::warn!("{missing} class(es) have no description; using names only");
    }
    out
}

fn render_related(payload: &AugmentedText) -> String {
    if payload.appended.is_empty() {
        return String::new();
    }
    let texts: Vec<&str> = payload.appended.iter().map(|(_, t)| t.as_str()).collect();
    format!("\n{} {}\n", RELATED_HEADER, texts.join("\n\n"))
}

/// Renders the prompt for one node. Deterministic in its inputs.
pub fn build_prompt(bundle: &PromptBundle, template: &PromptTemplate) -> Result<String> {
    let c = bundle.classes.len();
    if c < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {c}")));
    }
    Ok(template.render(|key| match key {
        "task" => Some(bundle.task.clone()),
        "topology" => Some(bundle.topology.clone()),
        "classes" => Some(render_classes(&bundle.classes)),
        "target_text" => Some(bundle.payload.base.clone()),
        "related_texts" => Some(render_related(&bundle.payload)),
        "format_line" => Some(format_line(c)),
        _ => None,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph_with(features: Vec<Vec<f64>>, texts: &[&str]) -> Graph {
        let n = features.len();
        Graph::from_edges(n, &[])
            .unwrap()
            .with_features(features)
            .unwrap()
            .with_texts(texts.iter().map(|s| s.to_string()).collect())
            .unwrap()
    }

    #[test]
    fn two_member_weight_is_one() {
        let g = graph_with(vec![vec![1.0, 0.3], vec![-0.2, 1.0]], &["a", "b"]);
        let w = similarity_weights(&g, &NodeSet::new([0, 1]), 0);
        assert_eq!(w.len(), 1);
        assert!((w[&1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_weights_split_evenly() {
        let g = graph_with(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]],
            &["a", "b", "c"],
        );
        let w = similarity_weights(&g, &NodeSet::new([0, 1, 2]), 0);
        assert!((w[&1] - 0.5).abs() < 1e-12);
        assert!((w[&2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_cosines() {
        let g = graph_with(
            vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 1.0]],
            &["a", "b", "c"],
        );
        let w = similarity_weights(&g, &NodeSet::new([0, 1, 2]), 0);
        let e = std::f64::consts::E;
        assert!((w[&1] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[&1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn singleton_community_has_no_weights() {
        let g = graph_with(vec![vec![1.0]], &["a"]);
        assert!(similarity_weights(&g, &NodeSet::singleton(0), 0).is_empty());
    }

    #[test]
    fn augment_pair_appends_partner() {
        let g = graph_with(vec![vec![1.0], vec![1.0]], &["own", "other"]);
        let aug = augment_text(&g, &NodeSet::new([0, 1]), 0, 0.45, 3, 2000);
        assert_eq!(aug.appended, vec![(1, "other".to_string())]);
        assert_eq!(aug.concatenated(), format!("own\n{RELATED_HEADER}\nother"));
    }

    #[test]
    fn augment_below_threshold_appends_nothing() {
        // Four near-orthogonal members: every weight is around 1/3 or less.
        let g = graph_with(
            vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.1, 0.0, 0.0, 1.0],
            ],
            &["a", "b", "c", "d"],
        );
        let aug = augment_text(&g, &NodeSet::new([0, 1, 2, 3]), 0, 0.45, 3, 2000);
        assert!(aug.appended.is_empty());
        assert_eq!(aug.concatenated(), "a");
    }

    #[test]
    fn augment_picks_the_single_similar_partner() {
        // Mirrors the four-node case: two similar nodes, two dissimilar ones.
        let g = graph_with(
            vec![
                vec![1.0, 0.0],
                vec![0.98, 0.2],
                vec![-1.0, 0.1],
                vec![-0.9, -0.3],
            ],
            &["red 1", "red 2", "blue 3", "blue 4"],
        );
        let aug = augment_text(&g, &NodeSet::new([0, 1, 2, 3]), 0, 0.45, 3, 2000);
        assert_eq!(aug.appended, vec![(1, "red 2".to_string())]);
    }

    #[test]
    fn augment_skips_empty_texts_and_caps() {
        let g = graph_with(vec![vec![1.0], vec![1.0], vec![1.0]], &["own", "", "ééééé"]);
        let aug = augment_text(&g, &NodeSet::new([0, 1, 2]), 0, 0.0, 3, 3);
        assert_eq!(aug.appended, vec![(2, "ééé".to_string())]);
    }

    fn citeseer_classes() -> Vec<ClassInfo> {
        [
            "Agents",
            "Machine Learning",
            "Information Retrieval",
            "Database",
            "Human-Computer Interaction",
            "Artificial Intelligence",
        ]
        .into_iter()
        .map(|n| ClassInfo {
            name: n.into(),
            description: Some(format!("Research on {n}.")),
        })
        .collect()
    }

    #[test]
    fn six_class_prompt_has_one_format_line() {
        let payload = AugmentedText {
            node: 0,
            base: "target".into(),
            appended: vec![(1, "neighbour".into())],
        };
        let bundle = PromptBundle::for_node(citeseer_classes(), payload, 4);
        let prompt = build_prompt(&bundle, &PromptTemplate::default()).unwrap();
        assert_eq!(prompt.matches("[8, 4, 1, 2, 5, 3]").count(), 1);
        assert!(prompt.contains("integers from 0 to 9"));
        let part1 = prompt.find("The description of {Agents}").unwrap();
        let part2 = prompt.find("The abstract of paper 1:\ntarget").unwrap();
        let part3 = prompt.find(RELATED_HEADER).unwrap();
        let ask = prompt.find("Use integers").unwrap();
        assert!(part1 < part2 && part2 < part3 && part3 < ask);
    }

    #[test]
    fn prompt_without_related_texts_omits_part_three() {
        let payload = AugmentedText {
            node: 0,
            base: "target".into(),
            appended: vec![],
        };
        let bundle = PromptBundle::for_node(citeseer_classes(), payload, 1);
        let prompt = build_prompt(&bundle, &PromptTemplate::default()).unwrap();
        assert!(!prompt.contains(RELATED_HEADER));
        assert_eq!(
            prompt,
            build_prompt(&bundle, &PromptTemplate::default()).unwrap()
        );
    }

    #[test]
    fn names_only_fallback_and_class_guard() {
        let payload = AugmentedText {
            node: 0,
            base: "t".into(),
            appended: vec![],
        };
        let bundle = PromptBundle::for_node(
            vec![ClassInfo::named("A"), ClassInfo::named("B")],
            payload.clone(),
            1,
        );
        let prompt = build_prompt(&bundle, &PromptTemplate::default()).unwrap();
        assert!(prompt.contains("{A, B}"));
        assert!(!prompt.contains("The description of"));
        let one = PromptBundle::for_node(vec![ClassInfo::named("A")], payload, 1);
        assert!(build_prompt(&one, &PromptTemplate::default()).is_err());
    }

    #[test]
    fn custom_template_leaves_literal_braces() {
        let t = PromptTemplate::new("{format_line} {unknown} {target_text} {");
        let bundle = PromptBundle::for_node(
            vec![ClassInfo::named("A"), ClassInfo::named("B")],
            AugmentedText {
                node: 0,
                base: "x {classes}".into(),
                appended: vec![],
            },
            1,
        );
        assert_eq!(
            build_prompt(&bundle, &t).unwrap(),
            "[8, 4] {unknown} x {classes} {"
        );
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_are_scale_invariant(
            feats in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..8),
            scales in proptest::collection::vec(0.1f64..10.0, 8),
        ) {
            let n = feats.len();
            let scaled: Vec<Vec<f64>> = feats
                .iter()
                .zip(&scales)
                .map(|(f, s)| f.iter().map(|x| x * s).collect())
                .collect();
            let texts: Vec<&str> = vec!["t"; n];
            let g = graph_with(feats, &texts);
            let h = graph_with(scaled, &texts);
            let all = NodeSet::full(n);
            let w = similarity_weights(&g, &all, 0);
            let total: f64 = w.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let ws = similarity_weights(&h, &all, 0);
            for (k, v) in &w {
                prop_assert!((v - ws[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn augment_respects_k_top(k in 0usize..5, n in 2usize..9) {
            let g = graph_with(vec![vec![1.0]; n], &vec!["t"; n]);
            let aug = augment_text(&g, &NodeSet::full(n), 0, 0.0, k, 100);
            prop_assert!(aug.appended.len() <= k);
            prop_assert!(aug.appended.iter().all(|(v, _)| *v != 0));
        }
    }
}
