//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use bifair::bilevel::TrainConfig;
use bifair::dataio::PreprocessConfig;
use bifair::embed::SynthEmbedConfig;
use bifair::evalmetrics::EvalOptions;
use bifair::synth::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Which item grouping the fairness objective balances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupingKind {
    #[default]
    Genre,
    Popularity,
}

impl GroupingKind {
    pub fn file_name(self) -> &'static str {
        match self {
            GroupingKind::Genre => "groups_genre.json",
            GroupingKind::Popularity => "groups_popularity.json",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupingKind::Genre => "genre",
            GroupingKind::Popularity => "popularity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plain,
    Reweight,
    #[serde(rename = "groupdro")]
    GroupDro,
    Bifair,
    /// Bifair with the two-phase θ-then-Z schedule.
    BifairSeparate,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Reweight => "reweight",
            Method::GroupDro => "groupdro",
            Method::Bifair => "bifair",
            Method::BifairSeparate => "bifair-separate",
        }
    }
}

/// External inputs. Unset paths fall back to the files `synth` writes under
/// `out_dir/raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub interactions: Option<PathBuf>,
    /// `item,label[,title]` metadata; its row order is also the row order of
    /// the embedding file.
    pub items: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub delimiter: String,
    pub normalize_embeddings: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            items: None,
            embeddings: None,
            delimiter: ",".into(),
            normalize_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Plain, Method::Reweight, Method::GroupDro, Method::Bifair],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Top-level seed; every section's seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grouping: GroupingKind,
    pub input: InputConfig,
    pub world: WorldConfig,
    pub embed: SynthEmbedConfig,
    pub prep: PreprocessConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            grouping: GroupingKind::Genre,
            input: InputConfig::default(),
            world: WorldConfig::default(),
            embed: SynthEmbedConfig::default(),
            prep: PreprocessConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies overrides, then fans out the top-level seed.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| CliError::config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("config error: {}", e.message())))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn propagate_seed(&mut self) {
        self.world.seed = self.seed;
        self.embed.seed = self.seed;
        self.prep.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate()?;
        self.embed.validate()?;
        self.prep.validate()?;
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(CliError::config("eval.k must be >= 1"));
        }
        if !(self.eval.min_fraction > 0.0 && self.eval.min_fraction <= 1.0) {
            return Err(CliError::config("eval.min_fraction must lie in (0, 1]"));
        }
        if self.eval.epsilons.iter().any(|e| e.is_nan() || *e <= 0.0) {
            return Err(CliError::config("eval.epsilons must be > 0"));
        }
        if self.compare.methods.is_empty() || self.compare.seeds.is_empty() {
            return Err(CliError::config("compare needs at least one method and one seed"));
        }
        if self.input.delimiter.len() != 1 {
            return Err(CliError::config("input.delimiter must be a single byte"));
        }
        Ok(())
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.out_dir.join("raw")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoint")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.out_dir.join("compare")
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as TOML and
/// taken as a bare string when that fails.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}`: `{p}` is not a table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::config(format!("override `{key}` does not address a table entry")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
