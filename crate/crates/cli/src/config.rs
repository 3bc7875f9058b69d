//! Experiment configuration: a TOML file with sections, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use hlq_core::backprop::BackwardStrategy;
use hlq_core::harness::{synthetic, Dataset, GradCheckConfig, ModelSpec, QuantErrorConfig, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub strategy: StrategySection,
    pub data: DataSection,
    pub model: Option<ModelSpec>,
    pub train: TrainConfig,
    pub ablation: AblationSection,
    pub gradcheck: GradCheckSection,
    pub quant_error: QuantErrorConfig,
    pub cost: CostSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub name: String,
    pub bits_gx: Option<u8>,
    pub bits_gw: Option<u8>,
    pub rank: Option<usize>,
    pub block: Option<usize>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            name: "hlq".into(),
            bits_gx: None,
            bits_gw: None,
            rank: None,
            block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset files in the binary layout; both or neither.
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub rank: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            rank: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub strategies: Vec<String>,
    pub fd_batch: usize,
    pub max_entries: usize,
    pub step: f64,
    pub batch: usize,
    pub batches: usize,
    pub bias_trials: usize,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        Self {
            strategies: vec!["hlq".into(), "hq".into(), "naive".into(), "lbp-wht".into()],
            fd_batch: d.fd_batch,
            max_entries: d.max_entries,
            step: d.step,
            batch: d.batch,
            batches: d.seeds.len(),
            bias_trials: d.bias_trials,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub catalog: Option<PathBuf>,
    /// Replaces every catalog batch size.
    pub batch: Option<usize>,
    pub strategies: Vec<String>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            catalog: None,
            batch: None,
            strategies: vec!["vanilla".into(), "hlq".into()],
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strategy: Option<String>,
    pub bits_gx: Option<u8>,
    pub bits_gw: Option<u8>,
    pub rank: Option<usize>,
    pub block: Option<usize>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Resolved configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub file: FileConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub seed_overridden: bool,
    pub threads: usize,
    pub strategy: StrategySection,
    /// Strategy named by `--strategy`; replaces per-command strategy lists.
    pub strategy_flag: Option<String>,
    base_dir: PathBuf,
}

impl Config {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, ConfigError> {
        let (file, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                let file: FileConfig =
                    toml::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", p.display())))?;
                (file, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let mut strategy = file.strategy.clone();
        if let Some(n) = &ov.strategy {
            strategy.name = n.clone();
        }
        strategy.bits_gx = ov.bits_gx.or(strategy.bits_gx);
        strategy.bits_gw = ov.bits_gw.or(strategy.bits_gw);
        strategy.rank = ov.rank.or(strategy.rank);
        strategy.block = ov.block.or(strategy.block);
        let deterministic = std::env::var("HLQ_DETERMINISTIC").is_ok_and(|v| v == "1");
        let threads = if deterministic {
            1
        } else {
            file.threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1)
        };
        let out = ov.out.clone().or_else(|| file.out.as_ref().map(|o| base_dir.join(o))).unwrap_or_else(|| "hlq-out".into());
        let cfg = Self {
            seed: ov.seed.or(file.seed),
            seed_overridden: ov.seed.is_some(),
            file,
            out,
            threads,
            strategy,
            strategy_flag: ov.strategy.clone(),
            base_dir,
        };
        cfg.check_paths()?;
        cfg.build_strategy()?;
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let d = &self.file.data;
        if d.train_path.is_some() != d.val_path.is_some() {
            return Err(ConfigError("data.train_path and data.val_path must be given together".into()));
        }
        let refs = [&d.train_path, &d.val_path, &self.file.cost.catalog];
        for p in refs.into_iter().flatten() {
            let r = self.resolve(p);
            if !r.is_file() {
                return Err(ConfigError(format!("referenced file {} does not exist", r.display())));
            }
        }
        Ok(())
    }

    /// The configured strategy with bit, rank and block overrides applied.
    pub fn build_strategy(&self) -> Result<BackwardStrategy, ConfigError> {
        strategy_with(&self.strategy.name, &self.strategy)
    }

    pub fn model(&self) -> ModelSpec {
        self.file.model.clone().unwrap_or_else(ModelSpec::reference)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.file.train.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    pub fn datasets(&self) -> hlq_core::Result<(Dataset, Dataset)> {
        let d = &self.file.data;
        match (&d.train_path, &d.val_path) {
            (Some(t), Some(v)) => Ok((Dataset::load(&self.resolve(t))?, Dataset::load(&self.resolve(v))?)),
            _ => synthetic(&d.synthetic),
        }
    }

    pub fn catalog_path(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf).or_else(|| self.file.cost.catalog.as_ref().map(|c| self.resolve(c)))
    }
}

/// Builds `name` and applies the overrides in `s`.
pub fn strategy_with(name: &str, s: &StrategySection) -> Result<BackwardStrategy, ConfigError> {
    let mut st = BackwardStrategy::from_name(name).map_err(|e| ConfigError(e.to_string()))?;
    if let Some(b) = s.bits_gx {
        st.gx.bits = Some(b);
    }
    if let Some(b) = s.bits_gw {
        st.gw.bits = Some(b);
    }
    if let Some(r) = s.rank {
        st.rank = r;
    }
    if let Some(b) = s.block {
        st.block = b;
        if s.rank.is_none() && st.rank > b {
            st.rank = b;
        }
    }
    st.validate().map_err(|e| ConfigError(format!("strategy {name}: {e}")))?;
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<FileConfig>("bogus = 1\n").is_err());
        let f: FileConfig = toml::from_str("[train]\nepochs = 3\n[strategy]\nname = \"naive\"\n").unwrap();
        assert_eq!(f.train.epochs, 3);
        assert_eq!(f.strategy.name, "naive");
    }

    #[test]
    fn overrides_apply() {
        let s = StrategySection {
            bits_gx: Some(8),
            rank: Some(4),
            ..StrategySection::default()
        };
        let st = strategy_with("hlq", &s).unwrap();
        assert_eq!(st.gx.bits, Some(8));
        assert_eq!(st.rank, 4);
        assert!(strategy_with("nope", &StrategySection::default()).is_err());
        let bad = StrategySection {
            block: Some(12),
            ..StrategySection::default()
        };
        assert!(strategy_with("hlq", &bad).is_err());
    }
}
