//! Settings resolution. Every value comes from the first source that has
//! it: command-line flag, then environment variable (clap reads both),
//! then the TOML config file, then the built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bizagent_core::env::DEFAULT_ROW_CAP;
use bizagent_core::llm::{OpenAiCompatibleConfig, DEFAULT_TEMPERATURE, ENV_BASE_URL, ENV_MODEL};
use bizagent_core::memory::DEFAULT_THRESHOLD;
use clap::Args;
use serde::Deserialize;

pub const DEFAULT_MAX_TURNS: u32 = 20;

/// Contents of the optional `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub db: Option<PathBuf>,
    pub fk_spec: Option<PathBuf>,
    pub provider: Option<String>,
    pub model: Option<String>,
    pub base_url: Option<String>,
    pub temperature: Option<f64>,
    pub max_turns: Option<u32>,
    pub row_cap: Option<usize>,
    pub memory_threshold: Option<f64>,
    pub seed: Option<u64>,
    pub width: Option<usize>,
    pub memory: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML file with defaults for any of the settings below.
    #[arg(long, global = true, env = "BIZAGENT_CONFIG")]
    pub config: Option<PathBuf>,
    /// SQLite database of the business environment.
    #[arg(long, global = true, env = "BIZAGENT_DB")]
    pub db: Option<PathBuf>,
    /// TOML relation spec for the record graph.
    #[arg(long, global = true, env = "BIZAGENT_FK_SPEC")]
    pub fk_spec: Option<PathBuf>,
    /// `http` for an OpenAI-compatible endpoint, or `scripted:<file>` for a
    /// JSON object mapping each first user message to its list of replies.
    #[arg(long, global = true, env = "BIZAGENT_PROVIDER")]
    pub provider: Option<String>,
    #[arg(long, global = true, env = ENV_MODEL)]
    pub model: Option<String>,
    #[arg(long, global = true, env = "BIZAGENT_TEMPERATURE")]
    pub temperature: Option<f64>,
    #[arg(long, global = true, env = "BIZAGENT_MAX_TURNS")]
    pub max_turns: Option<u32>,
    #[arg(long, global = true, env = "BIZAGENT_ROW_CAP")]
    pub row_cap: Option<usize>,
    #[arg(long, global = true, env = "BIZAGENT_MEMORY_THRESHOLD")]
    pub memory_threshold: Option<f64>,
    #[arg(long, global = true, env = "BIZAGENT_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "BIZAGENT_WIDTH")]
    pub width: Option<usize>,
    /// Memory store file (JSONL). Enables memory for `run` and `bench`.
    #[arg(long, global = true, env = "BIZAGENT_MEMORY")]
    pub memory: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderChoice {
    Http,
    Scripted(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub db: Option<PathBuf>,
    pub fk_spec: Option<PathBuf>,
    pub provider: ProviderChoice,
    pub http: OpenAiCompatibleConfig,
    pub temperature: f64,
    pub max_turns: u32,
    pub row_cap: usize,
    pub memory_threshold: f64,
    pub seed: u64,
    pub width: usize,
    pub memory: Option<PathBuf>,
}

fn parse_provider(s: &str) -> Result<ProviderChoice> {
    match s.split_once(':') {
        None if s == "http" => Ok(ProviderChoice::Http),
        Some(("scripted", path)) if !path.is_empty() => Ok(ProviderChoice::Scripted(PathBuf::from(path))),
        _ => bail!("unknown provider {s:?}; expected `http` or `scripted:<file>`"),
    }
}

impl Settings {
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut http = OpenAiCompatibleConfig::from_env();
        if std::env::var_os(ENV_BASE_URL).is_none() {
            if let Some(url) = &file.base_url {
                http.base_url = url.clone();
            }
        }
        if let Some(m) = args.model.clone().or(file.model) {
            http.model = m;
        }
        let provider = parse_provider(args.provider.as_deref().or(file.provider.as_deref()).unwrap_or("http"))?;
        let settings = Self {
            db: args.db.clone().or(file.db),
            fk_spec: args.fk_spec.clone().or(file.fk_spec),
            provider,
            http,
            temperature: args.temperature.or(file.temperature).unwrap_or(DEFAULT_TEMPERATURE),
            max_turns: args.max_turns.or(file.max_turns).unwrap_or(DEFAULT_MAX_TURNS),
            row_cap: args.row_cap.or(file.row_cap).unwrap_or(DEFAULT_ROW_CAP),
            memory_threshold: args.memory_threshold.or(file.memory_threshold).unwrap_or(DEFAULT_THRESHOLD),
            seed: args.seed.or(file.seed).unwrap_or(0),
            width: args.width.or(file.width).unwrap_or(1),
            memory: args.memory.clone().or(file.memory),
        };
        settings.validate()?;
        Ok(settings)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 {
            bail!("--width must be at least 1");
        }
        if self.max_turns == 0 {
            bail!("--max-turns must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.memory_threshold) {
            bail!("--memory-threshold must lie in [0, 1]");
        }
        for (flag, path) in [("--db", &self.db), ("--fk-spec", &self.fk_spec)] {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("{flag} {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }

    pub fn require_db(&self) -> Result<&Path> {
        self.db.as_deref().context("a database is required (--db, BIZAGENT_DB or `db` in the config file)")
    }

    pub fn require_fk_spec(&self) -> Result<&Path> {
        self.fk_spec
            .as_deref()
            .context("a relation spec is required (--fk-spec, BIZAGENT_FK_SPEC or `fk_spec` in the config file)")
    }
}
