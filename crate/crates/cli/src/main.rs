use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use llata_core::graph::parse_edge_list;
use llata_core::oracle::BackendKind;
use llata_core::pipeline::{run_pipeline, PipelineConfig};
use llata_core::sampler::Mode;
use llata_core::synth::{generate, write_dataset, SbmParams};
use llata_core::tree::minimize;
use llata_core::{EncodingTree, Graph};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "llata",
    version,
    about = "Training-free graph structure learning on text-attributed graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewire a graph and write the new edge list.
    Run(Box<RunArgs>),
    /// Write a synthetic stochastic block model dataset.
    GenSbm(SbmArgs),
    /// Print the structural entropy of a minimized encoding tree.
    Entropy(EntropyArgs),
}

/// Every option can also be given in the `--config` file under the same name
/// with dashes replaced by underscores. Flags win over the file.
#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunArgs {
    /// TOML file with `key = value` settings.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// JSON array of {name, description} class records.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Prompt template with {task}, {topology}, {classes}, {target_text},
    /// {related_texts} and {format_line} placeholders.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Maximum encoding-tree height K.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    ktop: Option<usize>,
    #[arg(long)]
    max_chars: Option<usize>,
    #[arg(long)]
    theta: Option<usize>,
    #[arg(long)]
    rate: Option<usize>,
    /// Silhouette improvement threshold.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    /// Fraction of low-level communities to optimize.
    #[arg(long)]
    fraction: Option<f64>,
    /// Community score weights as three comma-separated numbers.
    #[arg(long)]
    lambda: Option<String>,
    /// `mock` or `remote`.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    mock_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// JSON-lines log of sampled edge actions.
    #[arg(long)]
    actions: Option<PathBuf>,
    /// JSON-lines log of refinement moves.
    #[arg(long)]
    refinement_log: Option<PathBuf>,
}

macro_rules! overlay {
    ($flags:ident, $file:ident, $($field:ident),+) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.take(); } )+
    };
}

impl RunArgs {
    fn merge_file(mut self) -> Result<RunArgs> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut file: RunArgs =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        overlay!(
            self,
            file,
            graph,
            texts,
            features,
            labels,
            classes,
            template,
            height,
            epsilon,
            ktop,
            max_chars,
            theta,
            rate,
            s,
            mode,
            fraction,
            lambda,
            oracle,
            endpoint,
            model,
            api_key_env,
            timeout_secs,
            max_retries,
            max_in_flight,
            mock_noise,
            seed,
            out,
            report,
            cache,
            actions,
            refinement_log
        );
        Ok(self)
    }

    fn into_config(self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let Some(graph) = self.graph else {
            bail!("--graph is required")
        };
        let Some(texts) = self.texts else {
            bail!("--texts is required")
        };
        cfg.graph = graph;
        cfg.texts = texts;
        cfg.features = self.features;
        cfg.labels = self.labels;
        cfg.classes = self.classes;
        cfg.template = self.template;
        cfg.report = self.report;
        cfg.actions = self.actions;
        cfg.refinement_log = self.refinement_log;
        cfg.out = self.out.unwrap_or(cfg.out);
        cfg.height = self.height.unwrap_or(cfg.height);
        cfg.epsilon = self.epsilon.unwrap_or(cfg.epsilon);
        cfg.k_top = self.ktop.unwrap_or(cfg.k_top);
        cfg.max_chars = self.max_chars.unwrap_or(cfg.max_chars);
        cfg.theta = self.theta.unwrap_or(cfg.theta);
        cfg.rate = self.rate.unwrap_or(cfg.rate);
        cfg.s = self.s.unwrap_or(cfg.s);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.fraction = self.fraction.unwrap_or(cfg.fraction);
        if let Some(mode) = self.mode {
            cfg.mode = mode.parse::<Mode>()?;
        }
        if let Some(lambda) = self.lambda {
            let parts: Vec<f64> = lambda
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("bad lambda `{lambda}`"))?;
            let Ok(parts) = <[f64; 3]>::try_from(parts) else {
                bail!("lambda needs exactly three weights");
            };
            cfg.lambda = parts;
        }

        let o = &mut cfg.oracle;
        match self.oracle.as_deref() {
            None | Some("mock") => o.backend = BackendKind::Mock,
            Some("remote") => o.backend = BackendKind::Remote,
            Some(other) => bail!("unknown oracle `{other}`, expected mock or remote"),
        }
        o.endpoint = self.endpoint;
        o.api_key_env = self.api_key_env;
        o.cache_path = self.cache;
        if let Some(model) = self.model {
            o.model = model;
        }
        o.timeout_secs = self.timeout_secs.unwrap_or(o.timeout_secs);
        o.max_retries = self.max_retries.unwrap_or(o.max_retries);
        o.max_in_flight = self.max_in_flight.unwrap_or(o.max_in_flight);
        o.mock_noise = self.mock_noise.unwrap_or(o.mock_noise);
        Ok(cfg)
    }
}

#[derive(Args)]
struct SbmArgs {
    #[arg(long)]
    blocks: usize,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    pintra: f64,
    #[arg(long)]
    pinter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EntropyArgs {
    /// Edge list, one `u v` pair per line.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 3)]
    height: usize,
    /// Write the tree as JSON to this path (`-` for stdout).
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn read_edge_graph(path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let edges: Vec<(usize, usize)> = parse_edge_list(&text)?
        .into_iter()
        .filter(|(u, v)| u != v)
        .collect();
    let n = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
    Ok(Graph::from_edges(n, &edges)?)
}

fn entropy(args: EntropyArgs) -> Result<()> {
    let g = read_edge_graph(&args.graph)?;
    let tree = minimize(&g, args.height)?.tree;
    println!("nodes {} edges {}", g.n(), g.m());
    println!("flat_entropy {:.6}", EncodingTree::flat(&g).tree_entropy());
    println!("entropy {:.6}", tree.tree_entropy());
    println!("height {}", tree.height());
    match args.dump.as_deref() {
        Some(p) if p == Path::new("-") => println!("{}", tree.to_json()?),
        Some(p) => {
            fs::write(p, tree.to_json()?).with_context(|| format!("writing {}", p.display()))?
        }
        None => {}
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.merge_file()?.into_config()?;
            let report = run_pipeline(&cfg)?;
            println!(
                "edges {} -> {} (+{} -{}, {} skipped), oracle calls {} cache hits {}",
                report.edges_before,
                report.edges_after,
                report.edges_added,
                report.edges_removed,
                report.edges_skipped,
                report.oracle.calls,
                report.oracle.cache_hits
            );
            if let (Some(before), Some(after)) = (report.homophily_before, report.homophily_after) {
                println!("homophily {before:.4} -> {after:.4}");
            }
        }
        Command::GenSbm(a) => {
            let params = SbmParams {
                blocks: a.blocks,
                size: a.size,
                p_intra: a.pintra,
                p_inter: a.pinter,
                seed: a.seed,
            };
            let data = generate(&params)?;
            write_dataset(&data, &a.out)?;
            println!(
                "wrote {} nodes and {} edges to {}",
                data.graph.n(),
                data.graph.m(),
                a.out.display()
            );
        }
        Command::Entropy(a) => entropy(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their causes in the message.
            if e.downcast_ref::<llata_core::Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
