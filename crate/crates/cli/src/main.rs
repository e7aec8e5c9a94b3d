//! `bizagent` command-line entry point.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use bizagent_core::agent::{self, AgentConfig, ToolRegistry};
use bizagent_core::bench::{self, BenchOptions};
use bizagent_core::env::{build_record_graph, FkSpec, RecordGraph, SqlEnvironment};
use bizagent_core::llm::{LlmProvider, OpenAiCompatibleProvider, ScriptBook, ScriptedProvider};
use bizagent_core::memory::{self, HashedEmbedder, MemoryContext, MemoryStore};
use bizagent_core::protocol;
use bizagent_core::scoring::EquivalenceConfig;
use bizagent_core::synthesis::{self, KnowledgeSource, SynthOptions, TaskTemplateFile};
use clap::{Parser, Subcommand};
use config::{GlobalArgs, ProviderChoice, Settings};
use tracing::{info, warn};

#[derive(Parser)]
#[command(name = "bizagent", version, about = "Tool-using agent harness for CRM business databases")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the record graph and write it as JSON.
    GraphBuild {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a training dataset from walks, templates and knowledge articles.
    Synthesize {
        #[arg(long)]
        out: PathBuf,
        /// Record graph from `graph-build`; rebuilt from --db/--fk-spec when absent.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Number of complex (multi-hop) samples.
        #[arg(long, default_value_t = 0)]
        complex: usize,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 4)]
        k_max: usize,
        /// Templated single-table questions per table; 0 disables them.
        #[arg(long, default_value_t = 0)]
        simple_per_table: usize,
        /// Knowledge articles as `Table:title_field:body_field`.
        #[arg(long)]
        knowledge: Option<String>,
        /// TOML file of task-specific templates.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Solve one query and print the trajectory.
    Run {
        query: String,
        /// Append the episode log to this JSONL file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a dataset and write report.jsonl, meta.json, table.md and episodes.jsonl.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run logged episodes and check they reproduce byte for byte.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Inspect or reset the memory store.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
}

#[derive(Subcommand)]
enum MemoryAction {
    /// One line per unit: similarity key and guideline length.
    List,
    /// Write the units as JSON to stdout or a file.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove every unit.
    Clear,
}

fn load_provider(settings: &Settings) -> Result<Arc<dyn LlmProvider>> {
    match &settings.provider {
        ProviderChoice::Http => {
            let p = OpenAiCompatibleProvider::new(settings.http.clone()).context("configuring the HTTP provider")?;
            Ok(Arc::new(p))
        }
        ProviderChoice::Scripted(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
            let scripts: BTreeMap<String, Vec<String>> =
                serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?;
            let mut book = ScriptBook::new();
            for (query, turns) in scripts {
                book.insert(query, ScriptedProvider::new(turns)?);
            }
            Ok(Arc::new(book))
        }
    }
}

fn open_env(settings: &Settings) -> Result<Arc<SqlEnvironment>> {
    let path = settings.require_db()?;
    let env = SqlEnvironment::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Arc::new(env))
}

fn agent_config(settings: &Settings, env: &SqlEnvironment) -> Result<AgentConfig> {
    let schema = env.schema_summary()?;
    Ok(AgentConfig {
        max_turns: settings.max_turns,
        temperature: settings.temperature,
        base_system_prompt: agent::default_system_prompt(&schema),
        ..AgentConfig::default()
    })
}

fn build_graph(settings: &Settings, env: &SqlEnvironment) -> Result<RecordGraph> {
    let spec = FkSpec::load(settings.require_fk_spec()?)?;
    let (graph, diag) = build_record_graph(env, &spec)?;
    if diag.dangling > 0 {
        warn!(dangling = diag.dangling, by_link = ?diag.dangling_by_link, "references without a target row");
    }
    info!(nodes = graph.node_count(), edges = graph.edge_count(), "record graph built");
    Ok(graph)
}

fn open_memory(settings: &Settings) -> Result<Option<MemoryStore>> {
    let Some(path) = &settings.memory else { return Ok(None) };
    let store = MemoryStore::load(path, Arc::new(HashedEmbedder::default()), settings.memory_threshold)
        .with_context(|| format!("loading memory {}", path.display()))?;
    Ok(Some(store))
}

fn save_memory(settings: &Settings, store: &MemoryStore) -> Result<()> {
    if let Some(path) = &settings.memory {
        store.save(path).with_context(|| format!("saving memory {}", path.display()))?;
    }
    Ok(())
}

fn cmd_graph_build(settings: &Settings, out: &Path) -> Result<()> {
    let env = open_env(settings)?;
    let spec = FkSpec::load(settings.require_fk_spec()?)?;
    let (graph, diag) = build_record_graph(&env, &spec)?;
    std::fs::write(out, graph.to_json()).with_context(|| format!("writing {}", out.display()))?;
    let summary = serde_json::json!({
        "nodes": graph.node_count(),
        "edges": graph.edge_count(),
        "diagnostics": diag,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synthesize(
    settings: &Settings,
    out: &Path,
    graph_path: Option<&Path>,
    complex: usize,
    k_range: (usize, usize),
    simple_per_table: usize,
    knowledge: Option<&str>,
    templates: Option<&Path>,
) -> Result<()> {
    if k_range.0 == 0 || k_range.0 > k_range.1 {
        bail!("need 1 <= --k-min <= --k-max");
    }
    let needs_env = simple_per_table > 0 || templates.is_some() || (complex > 0 && graph_path.is_none());
    let env = if needs_env { Some(open_env(settings)?) } else { None };

    let mut complex_samples = Vec::new();
    if complex > 0 {
        let graph = match graph_path {
            Some(p) => RecordGraph::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => build_graph(settings, env.as_deref().expect("environment opened"))?,
        };
        let provider = load_provider(settings)?;
        let opts = SynthOptions { temperature: settings.temperature, ..SynthOptions::default() };
        let results = synthesis::synthesize_complex_batch(&graph, complex, k_range, provider.as_ref(), settings.seed, &opts);
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(s) => complex_samples.push(s),
                Err(e) => warn!(sample = i, error = %e, "complex sample skipped"),
            }
        }
    }

    let mut simple = Vec::new();
    if simple_per_table > 0 {
        let env = env.as_deref().expect("environment opened");
        let tables = match &settings.fk_spec {
            Some(p) => FkSpec::load(p)?.resolved_tables().into_iter().map(|t| t.name).collect(),
            None => env.table_names()?,
        };
        let source = knowledge
            .map(|k| match k.split(':').collect::<Vec<_>>()[..] {
                [table, title, body] => Ok(KnowledgeSource {
                    table: table.into(),
                    title_field: title.into(),
                    body_field: body.into(),
                }),
                _ => Err(anyhow::anyhow!("--knowledge expects Table:title_field:body_field")),
            })
            .transpose()?;
        simple = synthesis::synthesize_simple(env, &tables, source.as_ref(), simple_per_table)?;
    }

    let mut task = Vec::new();
    if let Some(p) = templates {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let file: TaskTemplateFile = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        task = synthesis::synthesize_task_specific(env.as_deref().expect("environment opened"), &file.templates)?;
    }

    let counts = (complex_samples.len(), simple.len(), task.len());
    let dataset = synthesis::assemble_dataset(complex_samples, simple, task)?;
    synthesis::write_dataset(out, &dataset)?;
    println!(
        "wrote {} samples to {} (complex {}, simple {}, task-specific {})",
        dataset.len(),
        out.display(),
        counts.0,
        counts.1,
        counts.2
    );
    Ok(())
}

fn cmd_run(settings: &Settings, query: &str, log: Option<&Path>) -> Result<()> {
    let env = open_env(settings)?;
    let config = agent_config(settings, &env)?;
    let tools = ToolRegistry::for_environment(env.clone(), settings.row_cap);
    let provider = load_provider(settings)?;
    let store = open_memory(settings)?;
    let run = match &store {
        Some(store) => {
            let schema = env.schema_summary()?;
            let ctx = MemoryContext {
                store,
                advanced: provider.as_ref(),
                distiller: None,
                gate: None,
                advanced_config: &config,
                schema_information: &schema,
                equivalence: EquivalenceConfig::default(),
            };
            let run = memory::solve_with_memory(query, &ctx, &tools, &config, provider.as_ref())?;
            save_memory(settings, store)?;
            run
        }
        None => agent::run_episode(query, &tools, provider.as_ref(), &config, None)?,
    };
    println!("{}", protocol::serialize_trajectory(&run.trajectory)?);
    eprintln!("termination: {:?}, turns used: {}", run.termination, run.turns_used);
    if let Some(path) = log {
        let guideline = agent::guideline_in_prompt(&run.system_prompt);
        let entry = agent::EpisodeLog::from_run(&run, guideline, 0, provider.model_tag()).with_limits(&config);
        let mut logs = if path.exists() { agent::read_episode_logs(path)? } else { Vec::new() };
        logs.push(entry);
        agent::write_episode_logs(path, &logs)?;
    }
    Ok(())
}

fn cmd_bench(settings: &Settings, dataset: &Path, out: &Path) -> Result<()> {
    let samples = bench::read_bench_dataset(dataset)?;
    let env = open_env(settings)?;
    let config = agent_config(settings, &env)?;
    let tools = ToolRegistry::for_environment(env.clone(), settings.row_cap);
    let provider = load_provider(settings)?;
    let opts = BenchOptions { width: settings.width };
    let store = open_memory(settings)?;
    let schema = env.schema_summary()?;
    let output = match &store {
        Some(store) => {
            let ctx = MemoryContext {
                store,
                advanced: provider.as_ref(),
                distiller: None,
                gate: None,
                advanced_config: &config,
                schema_information: &schema,
                equivalence: EquivalenceConfig::default(),
            };
            bench::bench(&samples, &tools, &config, provider.as_ref(), Some(&ctx), &opts)?
        }
        None => bench::bench(&samples, &tools, &config, provider.as_ref(), None, &opts)?,
    };
    if let Some(store) = &store {
        save_memory(settings, store)?;
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    output.report.write(out)?;
    bench::write_logs(out.join("episodes.jsonl"), &output.logs)?;
    print!("{}", output.report.render_table());
    if output.report.meta.provider_errors > 0 {
        warn!(errors = output.report.meta.provider_errors, "some episodes failed and scored 0");
    }
    Ok(())
}

fn cmd_replay(settings: &Settings, log: &Path) -> Result<()> {
    let logs = agent::read_episode_logs(log)?;
    if logs.is_empty() {
        bail!("{} holds no episodes", log.display());
    }
    let env = open_env(settings)?;
    let config = agent_config(settings, &env)?;
    let tools = ToolRegistry::for_environment(env, settings.row_cap);
    let mut diverged = 0;
    for (i, entry) in logs.iter().enumerate() {
        let label = entry.sample_id.clone().unwrap_or_else(|| format!("#{}", i + 1));
        match bench::replay(entry, &tools, &config) {
            Ok(_) => println!("{label}: identical"),
            Err(e) => {
                diverged += 1;
                println!("{label}: {e}");
            }
        }
    }
    if diverged > 0 {
        bail!("{diverged} of {} episodes did not reproduce", logs.len());
    }
    Ok(())
}

fn cmd_memory(settings: &Settings, action: &MemoryAction) -> Result<()> {
    let store = open_memory(settings)?.context("memory commands need --memory, BIZAGENT_MEMORY or `memory` in the config file")?;
    match action {
        MemoryAction::List => {
            let snap = store.snapshot();
            for (i, u) in snap.units.iter().enumerate() {
                println!("{i}\t{}\t{} lines\t{}", u.model_tag, u.guideline.lines().count(), u.key_query);
            }
            eprintln!("{} units, threshold {}", snap.units.len(), store.threshold());
        }
        MemoryAction::Export { out } => {
            let json = serde_json::to_string_pretty(&store.snapshot().units)?;
            match out {
                Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
        }
        MemoryAction::Clear => {
            let n = store.len();
            store.clear()?;
            save_memory(settings, &store)?;
            println!("removed {n} units");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let settings = Settings::resolve(&cli.global)?;
    match &cli.command {
        Command::GraphBuild { out } => cmd_graph_build(&settings, out),
        Command::Synthesize { out, graph, complex, k_min, k_max, simple_per_table, knowledge, templates } => cmd_synthesize(
            &settings,
            out,
            graph.as_deref(),
            *complex,
            (*k_min, *k_max),
            *simple_per_table,
            knowledge.as_deref(),
            templates.as_deref(),
        ),
        Command::Run { query, log } => cmd_run(&settings, query, log.as_deref()),
        Command::Bench { dataset, out } => cmd_bench(&settings, dataset, out),
        Command::Replay { log } => cmd_replay(&settings, log),
        Command::Memory { action } => cmd_memory(&settings, action),
    }
}
