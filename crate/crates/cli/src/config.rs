//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use sip_core::attribution::OcclusionConfig;
use sip_core::catalog::{load_manifest, SCHEMA_VERSION};
use sip_core::inference::{BackendDescriptor, BackendKind, RunMode};
use sip_core::metrics::MetricKind;
use sip_core::prompting::PromptTemplate;
use sip_core::selection::SelectionStrategy;
use sip_core::sft::ExperimentRecipe;
use sip_core::Catalog;

/// Row order of the strategy comparison table.
pub const TABLE4_ORDER: [&str; 10] = ["SVP", "SV", "SP", "VP", "S", "V", "P", "CC", "EB", "RS"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub label: String,
    pub k: usize,
    pub reference_center: Option<String>,
    /// Extra equality filters on the reference pool (e.g. `view = "Frontal"`).
    pub value_filter: BTreeMap<String, String>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self { label: "RS".into(), k: 1, reference_center: None, value_filter: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub bootstrap_b: usize,
    pub metrics: Vec<MetricKind>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { bootstrap_b: 1000, metrics: vec![MetricKind::Bacc, MetricKind::F1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub k_values: Vec<usize>,
    /// Also emit the size-matched single-image baseline.
    pub single_baseline: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { k_values: vec![1], single_baseline: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<String>,
    pub manifests: Vec<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// Template file; the bundled default when absent.
    pub template: Option<PathBuf>,
    pub mode: RunMode,
    /// Creation time stamped into new decision logs.
    pub timestamp: Option<u64>,
    /// Restricts queries to these ids (default: every test record).
    pub queries: Option<Vec<String>>,
    pub strategies: Vec<String>,
    pub strategy: StrategyConfig,
    pub backend: BackendDescriptor,
    pub metrics: MetricsConfig,
    pub recipe: Option<ExperimentRecipe>,
    pub sft: SftConfig,
    pub attribution: OcclusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            manifests: Vec::new(),
            seed: 0,
            out: PathBuf::from("out"),
            template: None,
            mode: RunMode::Comparative,
            timestamp: None,
            queries: None,
            strategies: TABLE4_ORDER.iter().map(|s| s.to_string()).collect(),
            strategy: StrategyConfig::default(),
            backend: BackendDescriptor::mock(BackendKind::MockHash),
            metrics: MetricsConfig::default(),
            recipe: None,
            sft: SftConfig::default(),
            attribution: OcclusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `mock-hash`, `mock-nuisance`, `mock-planted`, or an endpoint URL.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Strategy label: RS, SVP, SV, SP, VP, S, V, P, CC, EB, BAG.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// single, comparative or bagging.
    #[arg(long, global = true)]
    pub mode: Option<RunMode>,
    #[arg(long = "bootstrap-B", global = true)]
    pub bootstrap_b: Option<usize>,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn source_date_epoch() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok())
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let cwd = std::env::current_dir()?;
        let mut cfg = match &o.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let base = absolute(&cwd, path).parent().map(Path::to_path_buf).unwrap_or_else(|| cwd.clone());
                cfg.manifests = cfg.manifests.iter().map(|m| absolute(&base, m)).collect();
                cfg.template = cfg.template.as_deref().map(|t| absolute(&base, t));
                cfg.out = absolute(&base, &cfg.out);
                cfg
            }
            None => RunConfig { out: absolute(&cwd, Path::new("out")), ..RunConfig::default() },
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(out) = &o.out {
            cfg.out = absolute(&cwd, out);
        }
        if let Some(b) = &o.backend {
            match b.as_str() {
                "mock-hash" => cfg.backend.kind = BackendKind::MockHash,
                "mock-nuisance" => cfg.backend.kind = BackendKind::MockNuisance,
                "mock-planted" => cfg.backend.kind = BackendKind::MockPlanted,
                url if url.starts_with("http://") || url.starts_with("https://") => {
                    cfg.backend.kind = BackendKind::Remote;
                    cfg.backend.endpoint = Some(url.to_string());
                }
                other => bail!("unknown backend {other:?}"),
            }
        }
        if let Some(s) = &o.strategy {
            cfg.strategy.label = s.clone();
        }
        if let Some(k) = o.k {
            cfg.strategy.k = k;
        }
        if let Some(m) = o.mode {
            cfg.mode = m;
        }
        if let Some(b) = o.bootstrap_b {
            cfg.metrics.bootstrap_b = b;
        }
        if cfg.timestamp.is_none() {
            cfg.timestamp = Some(source_date_epoch().unwrap_or_else(|| {
                std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
            }));
        }
        cfg.backend.validate()?;
        self_check(&cfg)?;
        Ok(cfg)
    }

    /// Writes the resolved configuration as `<out>/<name>.config.toml`.
    pub fn persist(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{name}.config.toml"));
        fs::write(&path, toml::to_string(self)?)?;
        Ok(path)
    }

    pub fn catalog(&self) -> Result<Catalog> {
        let mut iter = self.manifests.iter();
        let first = iter.next().context("config lists no manifests")?;
        let mut catalog = load_manifest(first, SCHEMA_VERSION).with_context(|| format!("loading {}", first.display()))?;
        for m in iter {
            let next = load_manifest(m, SCHEMA_VERSION).with_context(|| format!("loading {}", m.display()))?;
            catalog = catalog.merge(next)?;
        }
        if let Some(task) = &self.task {
            if &catalog.task != task {
                bail!("manifest task {:?} does not match configured task {task:?}", catalog.task);
            }
        }
        Ok(catalog)
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        Ok(match &self.template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::default(),
        })
    }

    pub fn selection_strategy(&self, label: &str) -> Result<SelectionStrategy> {
        let mut s = SelectionStrategy::from_label(label, self.strategy.k, self.seed, self.strategy.reference_center.as_deref())?;
        for (k, v) in &self.strategy.value_filter {
            s = s.with_value_filter(k.clone(), v.clone());
        }
        Ok(s)
    }

    pub fn recipe(&self, catalog: &Catalog) -> Result<ExperimentRecipe> {
        let mut r = match &self.recipe {
            Some(r) => r.clone(),
            None => ExperimentRecipe::bundled(&catalog.task)
                .with_context(|| format!("no bundled recipe for task {:?}; add a [recipe] block", catalog.task))?,
        };
        r.strategy = self.strategy.label.clone();
        r.reference_center = self.strategy.reference_center.clone();
        r.k = self.strategy.k;
        r.seed = self.seed;
        Ok(r)
    }

    pub fn query_ids(&self, catalog: &Catalog) -> Vec<String> {
        match &self.queries {
            Some(q) => q.clone(),
            None => {
                let mut ids: Vec<String> = catalog
                    .records()
                    .iter()
                    .filter(|r| r.split == sip_core::Split::Test)
                    .map(|r| r.id.clone())
                    .collect();
                ids.sort();
                ids
            }
        }
    }
}

fn self_check(cfg: &RunConfig) -> Result<()> {
    if cfg.strategy.k == 0 {
        bail!("strategy.k must be positive");
    }
    cfg.attribution.validate()?;
    Ok(())
}
