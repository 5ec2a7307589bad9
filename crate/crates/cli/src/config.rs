//! The TOML run configuration.
//!
//! A file either starts from a named preset (`preset = "nl2sql-isolated"`)
//! and overrides sections, or spells out every section itself:
//!
//! ```toml
//! duration = 300.0
//! warmup = 30.0
//! seed = 1
//! out = "out"
//!
//! [workflow]
//! preset = "nl2sql"
//! [workflow.params]
//! p_fail = 0.5
//!
//! [topology]
//! mode = "isolated"
//! engines = { generator = 1, fixer = 1 }
//!
//! [policy]
//! kind = "stage_aware"
//!
//! [arrivals]
//! rate = 1.0
//!
//! [[compare.cells]]
//! name = "shared"
//! topology = { mode = "shared", total_engines = 2 }
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use stagepool_core::sim::ArrivalConfig;
use stagepool_core::workloads::PRESET_NAMES;
use stagepool_core::{build_nl2sql, named_preset, Nl2SqlParams, PolicyConfig, SimConfig, TopologyPreset, WorkflowSpec};

use crate::CliError;

/// Workflow section: a named generator or an inline graph.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum WorkflowSource {
    Preset(WorkflowPreset),
    Inline(WorkflowSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowPreset {
    pub preset: String,
    /// Generator knobs. Setting only `p_fail` splits it evenly between the
    /// two failure outcomes.
    #[serde(default)]
    pub params: toml::Table,
}

fn nl2sql_params(mut table: toml::Table) -> Result<Nl2SqlParams, CliError> {
    let split_given = table.contains_key("p_syntax_err") || table.contains_key("p_empty_result");
    if let (false, Some(p)) = (split_given, table.get("p_fail").and_then(|v| v.as_float())) {
        table.insert("p_syntax_err".into(), (p / 2.0).into());
        table.insert("p_empty_result".into(), (p / 2.0).into());
    }
    Nl2SqlParams::deserialize(table).map_err(|e| CliError::Config(format!("workflow.params: {e}")))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub topology: Option<TopologyPreset>,
    pub policy: Option<PolicyConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default)]
    pub cells: Vec<CellSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub preset: Option<String>,
    pub workflow: Option<WorkflowSource>,
    pub topology: Option<TopologyPreset>,
    pub policy: Option<PolicyConfig>,
    pub arrivals: Option<ArrivalConfig>,
    pub duration: Option<f64>,
    pub warmup: Option<f64>,
    pub seed: Option<u64>,
    /// Default seed list for `compare`.
    pub seeds: Option<Vec<u64>>,
    pub sample_interval: Option<f64>,
    pub out: Option<PathBuf>,
    pub compare: Option<CompareSection>,
}

/// A loaded file: the resolved base simulation plus the extras that only the
/// CLI uses.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub sim: SimConfig,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub cells: Vec<CellSpec>,
}

fn missing(key: &str) -> CliError {
    CliError::Config(format!("missing required key `{key}`"))
}

fn resolve_workflow(src: WorkflowSource) -> Result<WorkflowSpec, CliError> {
    match src {
        WorkflowSource::Inline(spec) => Ok(spec),
        WorkflowSource::Preset(p) if p.preset == "nl2sql" => {
            build_nl2sql(&nl2sql_params(p.params)?).map_err(|e| CliError::Config(e.to_string()))
        }
        WorkflowSource::Preset(p) => Err(CliError::Config(format!("unknown workflow preset `{}`", p.preset))),
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve(self) -> Result<LoadedConfig, CliError> {
        let base = match &self.preset {
            Some(name) => Some(named_preset(name).ok_or_else(|| unknown_preset(name))?),
            None => None,
        };
        let workflow = match (self.workflow, &base) {
            (Some(w), _) => resolve_workflow(w)?,
            (None, Some(b)) => b.workflow.clone(),
            (None, None) => return Err(missing("workflow")),
        };
        let pick = |own: Option<f64>, from: Option<f64>, key: &str| own.or(from).ok_or_else(|| missing(key));
        let sim = SimConfig {
            workflow,
            topology: self
                .topology
                .or_else(|| base.as_ref().map(|b| b.topology.clone()))
                .ok_or_else(|| missing("topology"))?,
            policy: self.policy.or_else(|| base.as_ref().map(|b| b.policy.clone())).unwrap_or_default(),
            arrivals: self
                .arrivals
                .or_else(|| base.as_ref().map(|b| b.arrivals.clone()))
                .ok_or_else(|| missing("arrivals"))?,
            duration: pick(self.duration, base.as_ref().map(|b| b.duration), "duration")?,
            warmup: self.warmup.or(base.as_ref().map(|b| b.warmup)).unwrap_or(0.0),
            seed: self.seed.or(base.as_ref().map(|b| b.seed)).unwrap_or(0),
            sample_interval: self.sample_interval.or(base.as_ref().map(|b| b.sample_interval)).unwrap_or(1.0),
        };
        Ok(LoadedConfig {
            sim,
            seeds: self.seeds,
            out: self.out,
            cells: self.compare.map(|c| c.cells).unwrap_or_default(),
        })
    }
}

fn unknown_preset(name: &str) -> CliError {
    CliError::Config(format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", ")))
}

/// Loads `preset:NAME` or a TOML file.
pub fn load(arg: &str) -> Result<LoadedConfig, CliError> {
    if let Some(name) = arg.strip_prefix("preset:") {
        let sim = named_preset(name).ok_or_else(|| unknown_preset(name))?;
        return Ok(LoadedConfig { sim, seeds: None, out: None, cells: Vec::new() });
    }
    let path = Path::new(arg);
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfigFile::parse(&text)?.resolve()
}

impl LoadedConfig {
    /// The base config with one cell's overrides applied.
    pub fn cell(&self, cell: &CellSpec) -> SimConfig {
        let mut sim = self.sim.clone();
        if let Some(t) = &cell.topology {
            sim.topology = t.clone();
        }
        if let Some(p) = &cell.policy {
            sim.policy = p.clone();
        }
        sim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_file_with_overrides() {
        let cfg = RunConfigFile::parse("preset = \"nl2sql-shared\"\nseed = 9\n[arrivals]\nrate = 0.5\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.sim.seed, 9);
        assert_eq!(cfg.sim.arrivals.rate, 0.5);
        assert_eq!(cfg.sim.topology.total_engines, 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfigFile::parse("preset = \"nl2sql-shared\"\nbogus = 1\n").is_err());
        assert!(RunConfigFile::parse("[policy]\nkind = \"fcfs\"\nextra = true\n").is_err());
    }

    #[test]
    fn unknown_preset_rejected() {
        let err = RunConfigFile::parse("preset = \"nope\"\n").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("unknown preset"));
        assert!(load("preset:nope").is_err());
    }

    #[test]
    fn workflow_preset_params() {
        let text = "duration = 10.0\n[workflow]\npreset = \"nl2sql\"\n[workflow.params]\np_fail = 0.2\n\
                    [topology]\nmode = \"shared\"\ntotal_engines = 2\n[arrivals]\nrate = 1.0\n";
        let cfg = RunConfigFile::parse(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.sim.workflow.stages.len(), 3);
        assert_eq!(cfg.sim.warmup, 0.0);
        let executor = &cfg.sim.workflow.stages[1];
        assert!(executor.outcomes.iter().all(|o| o.label == "success" || (o.probability - 0.1).abs() < 1e-12));

        let bad = text.replace("p_fail = 0.2", "p_fail = 0.2\np_syntax_err = 0.3");
        assert!(RunConfigFile::parse(&bad).unwrap().resolve().is_err());
        let typo = text.replace("p_fail = 0.2", "p_fial = 0.2");
        assert!(RunConfigFile::parse(&typo).unwrap().resolve().is_err());
    }

    #[test]
    fn missing_sections_named() {
        let err = RunConfigFile::parse("duration = 1.0\n").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("workflow"));
    }
}
