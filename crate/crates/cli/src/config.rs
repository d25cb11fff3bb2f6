//! Run configuration: preset defaults, then a TOML file, then environment,
//! then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sqlo1::data_prep::DEFAULT_PSG_RATIO;
use sqlo1::db::{RewardMode, DEFAULT_SAMPLES_PER_COLUMN};
use sqlo1::policy::RemoteConfig;
use sqlo1::search::{Preset, SearchConfig};

pub const ENV_ENDPOINT: &str = "SQLO1_ENDPOINT";
pub const ENV_API_KEY: &str = "SQLO1_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub psg_ratio: f64,
    pub sample_per_query: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            psg_ratio: DEFAULT_PSG_RATIO,
            sample_per_query: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub workers: usize,
    pub samples_per_column: usize,
    pub db_root: Option<PathBuf>,
    /// Scripted policy file; takes precedence over the remote endpoint.
    pub scripted: Option<PathBuf>,
    pub search: SearchConfig,
    pub remote: RemoteConfig,
    pub prepare: PrepareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Spider)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            seed: 0,
            workers: 1,
            samples_per_column: DEFAULT_SAMPLES_PER_COLUMN,
            db_root: None,
            scripted: None,
            search: SearchConfig::preset(preset),
            remote: RemoteConfig::default(),
            prepare: PrepareConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.prepare.psg_ratio) {
            bail!("psg_ratio must be in [0, 1), got {}", self.prepare.psg_ratio);
        }
        Ok(())
    }
}

/// Flags shared by every command that runs the search. Each has a
/// config-file key with the same meaning.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Hyperparameter preset: spider or bird
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Seed for every stochastic choice made locally
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Sampled values per column in the prompt
    #[arg(long)]
    pub samples: Option<usize>,
    /// Directory holding <db_id>.sqlite or <db_id>/<db_id>.sqlite
    #[arg(long, value_name = "DIR")]
    pub db_root: Option<PathBuf>,
    /// Scripted policy trie (JSON) instead of a remote endpoint
    #[arg(long, value_name = "FILE")]
    pub scripted: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub api_key: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Policy request timeout in milliseconds
    #[arg(long)]
    pub request_timeout_ms: Option<u64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Rollouts per task (N)
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Maximum depth in fragments (L)
    #[arg(long)]
    pub depth: Option<usize>,
    /// Children kept per expansion (d)
    #[arg(long)]
    pub top_d: Option<usize>,
    /// Beam width (B)
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_fragment_tokens: Option<usize>,
    #[arg(long)]
    pub exploration_weight: Option<f64>,
    /// Weight of the fragment reward against whole-query and execution terms
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub similarity: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Pruning strength
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Last soft-pruning step; defaults to half the depth
    #[arg(long)]
    pub t0: Option<usize>,
    /// Disable dynamic pruning
    #[arg(long)]
    pub no_prune: bool,
    /// Execution reward mode: oracle or blind
    #[arg(long)]
    pub mode: Option<RewardMode>,
    /// Keep searching after the first execution match
    #[arg(long)]
    pub no_early_stop: bool,
    /// SQL execution timeout in milliseconds
    #[arg(long)]
    pub exec_timeout_ms: Option<u64>,
    #[arg(long)]
    pub psg_ratio: Option<f64>,
    #[arg(long)]
    pub sample_per_query: Option<usize>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn has_t0(file: &toml::Table) -> bool {
    file.get("search")
        .and_then(|s| s.get("pruning"))
        .and_then(|p| p.get("t0"))
        .is_some()
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Builds the effective configuration. `env` looks up environment
/// variables so tests can inject them.
pub fn resolve(args: &CommonArgs, env: &dyn Fn(&str) -> Option<String>) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => read_file(p)?,
        None => toml::Table::new(),
    };
    let file_preset = match file.get("preset") {
        Some(v) => Some(
            v.as_str()
                .context("preset must be a string")?
                .parse::<Preset>()
                .map_err(anyhow::Error::msg)?,
        ),
        None => None,
    };
    let preset = args.preset.or(file_preset).unwrap_or_default();
    let explicit_t0 = args.t0.is_some() || has_t0(&file);

    let mut value = toml::Value::try_from(RunConfig::for_preset(preset)).context("serialising defaults")?;
    merge(&mut value, toml::Value::Table(file));
    let mut cfg: RunConfig = value.try_into().context("invalid configuration")?;
    cfg.preset = preset;

    if let Some(e) = env(ENV_ENDPOINT).filter(|v| !v.is_empty()) {
        cfg.remote.endpoint = e;
    }
    if let Some(k) = env(ENV_API_KEY).filter(|v| !v.is_empty()) {
        cfg.remote.api_key = Some(k);
    }

    set(&mut cfg.seed, args.seed);
    set(&mut cfg.workers, args.workers);
    set(&mut cfg.samples_per_column, args.samples);
    if args.db_root.is_some() {
        cfg.db_root = args.db_root.clone();
    }
    if args.scripted.is_some() {
        cfg.scripted = args.scripted.clone();
    }
    set(&mut cfg.remote.endpoint, args.endpoint.clone());
    if args.api_key.is_some() {
        cfg.remote.api_key = args.api_key.clone();
    }
    if args.model.is_some() {
        cfg.remote.model = args.model.clone();
    }
    set(&mut cfg.remote.timeout_ms, args.request_timeout_ms);
    set(&mut cfg.remote.max_in_flight, args.max_in_flight);

    let s = &mut cfg.search;
    set(&mut s.n_rollouts, args.rollouts);
    set(&mut s.max_depth, args.depth);
    set(&mut s.top_d, args.top_d);
    set(&mut s.policy.beam_width, args.beam_width);
    set(&mut s.policy.max_fragment_tokens, args.max_fragment_tokens);
    set(&mut s.exploration_weight, args.exploration_weight);
    set(&mut s.delta, args.delta);
    set(&mut s.similarity_threshold, args.similarity);
    set(&mut s.policy.alpha, args.alpha);
    set(&mut s.policy.beta, args.beta);
    set(&mut s.policy.decode_temperature, args.temperature);
    set(&mut s.pruning.lambda, args.lambda);
    set(&mut s.pruning.t0, args.t0);
    if args.no_prune {
        s.pruning.enabled = false;
    }
    set(&mut s.reward_mode, args.mode);
    if args.no_early_stop {
        s.early_stop = false;
    }
    set(&mut s.exec_timeout_ms, args.exec_timeout_ms);
    if !explicit_t0 {
        s.pruning.t0 = (s.max_depth / 2).max(1);
    }
    set(&mut cfg.prepare.psg_ratio, args.psg_ratio);
    set(&mut cfg.prepare.sample_per_query, args.sample_per_query);

    cfg.validate()?;
    Ok(cfg)
}

pub fn process_env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn defaults_follow_preset() {
        let cfg = resolve(&CommonArgs::default(), &no_env).unwrap();
        assert_eq!(cfg.search, SearchConfig::preset(Preset::Spider));
        let args = CommonArgs {
            preset: Some(Preset::Bird),
            ..Default::default()
        };
        let cfg = resolve(&args, &no_env).unwrap();
        assert_eq!((cfg.search.n_rollouts, cfg.search.max_depth, cfg.search.pruning.t0), (8, 12, 6));
    }

    /// Every combination of {file, env, flag} setting the endpoint; the
    /// highest-precedence source present must win.
    #[test]
    fn precedence_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_config(dir.path(), "[remote]\nendpoint = \"http://file\"\n\n[search]\nn_rollouts = 3\n");
        for mask in 0..8u8 {
            let (use_file, use_env, use_flag) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
            let env: HashMap<&str, String> = if use_env {
                [(ENV_ENDPOINT, "http://env".to_string())].into()
            } else {
                HashMap::new()
            };
            let lookup = |k: &str| env.get(k).cloned();
            let args = CommonArgs {
                config: use_file.then(|| file.clone()),
                endpoint: use_flag.then(|| "http://flag".to_string()),
                rollouts: use_flag.then_some(9),
                ..Default::default()
            };
            let cfg = resolve(&args, &lookup).unwrap();
            let expected = if use_flag {
                "http://flag"
            } else if use_env {
                "http://env"
            } else if use_file {
                "http://file"
            } else {
                ""
            };
            assert_eq!(cfg.remote.endpoint, expected, "mask {mask:03b}");
            let rollouts = if use_flag { 9 } else if use_file { 3 } else { 6 };
            assert_eq!(cfg.search.n_rollouts, rollouts, "mask {mask:03b}");
        }
    }

    #[test]
    fn file_preset_and_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_config(
            dir.path(),
            "preset = \"bird\"\nworkers = 4\n[search.pruning]\nlambda = 0.8\nt0 = 2\n[search.policy]\nalpha = 0.5\n",
        );
        let args = CommonArgs {
            config: Some(file),
            depth: Some(10),
            ..Default::default()
        };
        let cfg = resolve(&args, &no_env).unwrap();
        assert_eq!(cfg.preset, Preset::Bird);
        assert_eq!(cfg.search.n_rollouts, 8);
        assert_eq!(cfg.search.max_depth, 10);
        assert_eq!(cfg.search.pruning.lambda, 0.8);
        assert_eq!(cfg.search.pruning.t0, 2);
        assert_eq!(cfg.search.policy.alpha, 0.5);
        assert_eq!(cfg.workers, 4);
    }

    #[test]
    fn t0_tracks_depth_unless_set() {
        let args = CommonArgs {
            depth: Some(10),
            ..Default::default()
        };
        assert_eq!(resolve(&args, &no_env).unwrap().search.pruning.t0, 5);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let args = CommonArgs {
            rollouts: Some(0),
            ..Default::default()
        };
        assert!(resolve(&args, &no_env).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = write_config(dir.path(), "[search]\nn_rolouts = 3\n");
        let args = CommonArgs {
            config: Some(file),
            ..Default::default()
        };
        assert!(resolve(&args, &no_env).is_err());
    }

    #[test]
    fn flags_and_env_for_credentials() {
        let env = |k: &str| (k == ENV_API_KEY).then(|| "from-env".to_string());
        assert_eq!(resolve(&CommonArgs::default(), &env).unwrap().remote.api_key.as_deref(), Some("from-env"));
        let args = CommonArgs {
            api_key: Some("from-flag".into()),
            no_prune: true,
            mode: Some(RewardMode::Blind),
            ..Default::default()
        };
        let cfg = resolve(&args, &env).unwrap();
        assert_eq!(cfg.remote.api_key.as_deref(), Some("from-flag"));
        assert!(!cfg.search.pruning.enabled);
        assert_eq!(cfg.search.reward_mode, RewardMode::Blind);
    }
}
