//! Sidecar column schema and optional run-config file. Flags override the
//! file; the file overrides built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use coarsen::cem::CoarsenRule;
use coarsen::dataset::{ColumnKind, ColumnRole, ColumnSpec};
use coarsen::{Error, Result};

#[derive(Debug, Deserialize)]
pub struct SchemaFile {
    pub column: Vec<ColumnEntry>,
}

/// One column of the data file: its kind, role, and (for CEM) an optional
/// explicit coarsening rule.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnEntry {
    pub name: String,
    pub kind: String,
    pub role: String,
    pub bins: Option<usize>,
    pub cutpoints: Option<Vec<f64>>,
    /// Categorical grouping: level code (as a string key) -> group id.
    pub group: Option<BTreeMap<String, i64>>,
}

fn parse_kind(s: &str) -> Result<ColumnKind> {
    match s {
        "continuous" => Ok(ColumnKind::Continuous),
        "categorical" => Ok(ColumnKind::Categorical),
        _ => Err(Error::Config(format!("unknown column kind '{s}'"))),
    }
}

fn parse_role(s: &str) -> Result<ColumnRole> {
    match s {
        "outcome" => Ok(ColumnRole::Outcome),
        "treatment" => Ok(ColumnRole::Treatment),
        "confounder" => Ok(ColumnRole::Confounder),
        "ignore" => Ok(ColumnRole::Ignore),
        _ => Err(Error::Config(format!("unknown column role '{s}'"))),
    }
}

/// Parsed sidecar: the ingest schema plus per-confounder CEM rules when any
/// column declares one.
pub struct ParsedSchema {
    pub columns: Vec<ColumnSpec>,
    pub cem_rules: Option<Vec<CoarsenRule>>,
}

pub fn load_schema(path: &Path) -> Result<ParsedSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: SchemaFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("schema file: {e}")))?;
    if file.column.is_empty() {
        return Err(Error::Config("schema file declares no columns".into()));
    }

    let mut columns = Vec::with_capacity(file.column.len());
    let mut rules = Vec::new();
    let mut any_rule = false;
    for entry in &file.column {
        let kind = parse_kind(&entry.kind)?;
        let role = parse_role(&entry.role)?;
        columns.push(ColumnSpec {
            name: entry.name.clone(),
            kind,
            role,
        });
        if role != ColumnRole::Confounder {
            if entry.bins.is_some() || entry.cutpoints.is_some() || entry.group.is_some() {
                return Err(Error::Config(format!(
                    "column '{}': coarsening rules apply to confounders only",
                    entry.name
                )));
            }
            continue;
        }
        let rule = match (&entry.bins, &entry.cutpoints, &entry.group) {
            (None, None, None) => None,
            (Some(bins), None, None) => Some(CoarsenRule::EqualWidth { bins: *bins }),
            (None, Some(cuts), None) => Some(CoarsenRule::Cutpoints(cuts.clone())),
            (None, None, Some(map)) => {
                let mut grouping = BTreeMap::new();
                for (level, &group) in map {
                    let code: i64 = level.parse().map_err(|_| {
                        Error::Config(format!(
                            "column '{}': group key '{level}' is not a level code",
                            entry.name
                        ))
                    })?;
                    grouping.insert(code, group);
                }
                Some(CoarsenRule::CategoricalGrouping(grouping))
            }
            _ => {
                return Err(Error::Config(format!(
                    "column '{}': declare at most one of bins/cutpoints/group",
                    entry.name
                )))
            }
        };
        any_rule |= rule.is_some();
        rules.push((kind, rule));
    }

    let cem_rules = if any_rule {
        Some(
            rules
                .into_iter()
                .map(|(kind, rule)| {
                    rule.unwrap_or(match kind {
                        ColumnKind::Continuous => CoarsenRule::EqualWidth { bins: 0 },
                        ColumnKind::Categorical => CoarsenRule::CategoricalIdentity,
                    })
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(ParsedSchema { columns, cem_rules })
}

/// Optional run-config file; every field has a flag that overrides it.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub estimand: Option<String>,
    pub weight_mode: Option<String>,
    pub variance_policy: Option<String>,
    pub conventional_att: Option<bool>,
    pub standardize: Option<bool>,
    pub missing: Option<String>,
    pub grid: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub scenario: Option<String>,
    #[serde(default)]
    pub cem: CemSection,
    #[serde(default)]
    pub kmeans: KmeansSection,
    #[serde(default)]
    pub rf: RfSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemSection {
    pub bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansSection {
    pub k: Option<usize>,
    pub restarts: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfSection {
    pub k: Option<usize>,
    pub trees: Option<usize>,
    pub mtry: Option<usize>,
    pub min_leaf: Option<usize>,
    pub max_depth: Option<usize>,
    pub prox: Option<String>,
}

pub fn load_run_file(path: Option<&Path>) -> Result<RunFile> {
    let Some(path) = path else {
        return Ok(RunFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("config file: {e}")))
}
