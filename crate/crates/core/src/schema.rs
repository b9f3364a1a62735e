//! Declarative zero-shot query schemas.
//!
//! A schema is an ordered list of clusters, each holding tasks, each holding
//! two or more mutually exclusive queries. A cluster is either unconditional
//! or routed: a routed cluster only applies to an image when its trigger
//! query wins the argmax of a task in an unconditional cluster.
//!
//! The feature vector layout is the depth-first (cluster, task, query) order
//! of the document. Schemas are written as TOML:
//!
//! ```toml
//! version = 1
//!
//! [[clusters]]
//! name = "general"
//!
//! [[clusters.tasks]]
//! name = "brightness"
//! queries = [
//!     { id = "brightness.dark", text = "A dark photo", report_primary = true },
//!     { id = "brightness.bright", text = "A bright photo" },
//! ]
//!
//! [[clusters]]
//! name = "person"
//! route = { task = "content", query = "content.person" }
//! # ...
//! ```
//!
//! In a two-query task that marks no query `report_primary`, the first query
//! is the primary one.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_SCHEMA_TOML: &str = include_str!("../schemas/default.toml");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub id: String,
    pub text: String,
    pub report_primary: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub queries: Vec<QuerySpec>,
}

impl TaskSpec {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingRule {
    pub source_task: String,
    pub trigger_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpec {
    pub name: String,
    pub route: Option<RoutingRule>,
    pub tasks: Vec<TaskSpec>,
}

impl ClusterSpec {
    pub fn is_routed(&self) -> bool {
        self.route.is_some()
    }
}

/// Column span of one task in the feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLayout {
    pub cluster: usize,
    pub task: usize,
    pub columns: Range<usize>,
}

/// Resolved routing for one routed cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedRoute {
    pub cluster: usize,
    /// Index into [`TaskSchema::layout`] of the source task.
    pub source_layout: usize,
    /// Column of the trigger query.
    pub trigger_column: usize,
}

/// A validated, immutable schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchema {
    pub version: u32,
    pub clusters: Vec<ClusterSpec>,
    pub dimension: usize,
    layout: Vec<TaskLayout>,
    routes: Vec<ResolvedRoute>,
    column_index: HashMap<String, usize>,
}

impl TaskSchema {
    /// Tasks in column order.
    pub fn layout(&self) -> &[TaskLayout] {
        &self.layout
    }

    pub fn routes(&self) -> &[ResolvedRoute] {
        &self.routes
    }

    pub fn task(&self, layout: &TaskLayout) -> &TaskSpec {
        &self.clusters[layout.cluster].tasks[layout.task]
    }

    pub fn queries(&self) -> impl Iterator<Item = &QuerySpec> {
        self.clusters
            .iter()
            .flat_map(|c| c.tasks.iter())
            .flat_map(|t| t.queries.iter())
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.queries().map(|q| q.id.clone()).collect()
    }

    pub fn column_of(&self, query_id: &str) -> Option<usize> {
        self.column_index.get(query_id).copied()
    }

    pub fn cluster_index(&self, name: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.name == name)
    }

    pub fn task_count(&self) -> usize {
        self.layout.len()
    }

    pub fn to_toml(&self) -> String {
        serialize_schema(self)
    }
}

/// The built-in nine-task, 24-query schema.
pub fn default_schema() -> TaskSchema {
    parse_schema(DEFAULT_SCHEMA_TOML).expect("built-in schema is valid")
}

/// The canonical TOML text of the built-in schema.
pub fn default_schema_toml() -> &'static str {
    DEFAULT_SCHEMA_TOML
}

pub fn load_schema(path: &Path) -> Result<TaskSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema(&text)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    version: u32,
    clusters: Vec<RawCluster>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCluster {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    route: Option<RawRoute>,
    tasks: Vec<RawTask>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoute {
    task: String,
    query: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: String,
    queries: Vec<RawQuery>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuery {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    report_primary: bool,
}

pub fn serialize_schema(schema: &TaskSchema) -> String {
    let raw = RawSchema {
        version: schema.version,
        clusters: schema
            .clusters
            .iter()
            .map(|c| RawCluster {
                name: c.name.clone(),
                route: c.route.as_ref().map(|r| RawRoute {
                    task: r.source_task.clone(),
                    query: r.trigger_query.clone(),
                }),
                tasks: c
                    .tasks
                    .iter()
                    .map(|t| RawTask {
                        name: t.name.clone(),
                        queries: t
                            .queries
                            .iter()
                            .map(|q| RawQuery {
                                id: q.id.clone(),
                                text: q.text.clone(),
                                report_primary: q.report_primary,
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    toml::to_string(&raw).expect("schema serializes")
}

pub fn parse_schema(source: &str) -> Result<TaskSchema> {
    let raw: RawSchema = toml::from_str(source).map_err(|e| Error::malformed("schema", e.to_string()))?;
    validate(raw)
}

fn invalid(location: String, message: impl Into<String>) -> Error {
    Error::InvalidSchema {
        location,
        message: message.into(),
    }
}

fn validate(raw: RawSchema) -> Result<TaskSchema> {
    if raw.version != SCHEMA_VERSION {
        return Err(invalid(
            "version".into(),
            format!("unsupported schema version {}", raw.version),
        ));
    }
    if raw.clusters.is_empty() {
        return Err(invalid("clusters".into(), "schema has no clusters"));
    }

    let mut cluster_names = HashSet::new();
    let mut column_index = HashMap::new();
    let mut layout = Vec::new();
    let mut clusters = Vec::with_capacity(raw.clusters.len());
    let mut column = 0usize;

    for (ci, rc) in raw.clusters.iter().enumerate() {
        let cloc = format!("clusters[{ci}]");
        if rc.name.trim().is_empty() {
            return Err(invalid(format!("{cloc}.name"), "empty cluster name"));
        }
        if !cluster_names.insert(rc.name.as_str()) {
            return Err(Error::DuplicateId {
                location: format!("{cloc}.name"),
                id: rc.name.clone(),
            });
        }
        if rc.tasks.is_empty() {
            return Err(invalid(format!("{cloc}.tasks"), "cluster has no tasks"));
        }
        let mut task_names = HashSet::new();
        let mut tasks = Vec::with_capacity(rc.tasks.len());
        for (ti, rt) in rc.tasks.iter().enumerate() {
            let tloc = format!("{cloc}.tasks[{ti}]");
            if rt.name.trim().is_empty() {
                return Err(invalid(format!("{tloc}.name"), "empty task name"));
            }
            if !task_names.insert(rt.name.as_str()) {
                return Err(Error::DuplicateId {
                    location: format!("{tloc}.name"),
                    id: rt.name.clone(),
                });
            }
            if rt.queries.len() < 2 {
                return Err(invalid(
                    format!("{tloc}.queries"),
                    format!(
                        "task `{}` has {} queries; at least 2 are required",
                        rt.name,
                        rt.queries.len()
                    ),
                ));
            }
            let start = column;
            let mut queries = Vec::with_capacity(rt.queries.len());
            for (qi, rq) in rt.queries.iter().enumerate() {
                let qloc = format!("{tloc}.queries[{qi}]");
                if rq.id.trim().is_empty() {
                    return Err(invalid(format!("{qloc}.id"), "empty query id"));
                }
                if rq.text.trim().is_empty() {
                    return Err(invalid(format!("{qloc}.text"), "empty query text"));
                }
                if column_index.insert(rq.id.clone(), column).is_some() {
                    return Err(Error::DuplicateId {
                        location: format!("{qloc}.id"),
                        id: rq.id.clone(),
                    });
                }
                queries.push(QuerySpec {
                    id: rq.id.clone(),
                    text: rq.text.clone(),
                    report_primary: rq.report_primary,
                });
                column += 1;
            }
            if queries.len() == 2 {
                match queries.iter().filter(|q| q.report_primary).count() {
                    0 => queries[0].report_primary = true,
                    1 => {}
                    _ => {
                        return Err(invalid(
                            format!("{tloc}.queries"),
                            "a two-query task must mark exactly one query report_primary",
                        ))
                    }
                }
            }
            layout.push(TaskLayout {
                cluster: ci,
                task: ti,
                columns: start..column,
            });
            tasks.push(TaskSpec {
                name: rt.name.clone(),
                queries,
            });
        }
        clusters.push(ClusterSpec {
            name: rc.name.clone(),
            route: rc.route.as_ref().map(|r| RoutingRule {
                source_task: r.task.clone(),
                trigger_query: r.query.clone(),
            }),
            tasks,
        });
    }

    if clusters.iter().all(ClusterSpec::is_routed) {
        return Err(invalid(
            "clusters".into(),
            "at least one cluster must be unconditional",
        ));
    }

    let mut routes = Vec::new();
    let mut triggers = HashSet::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        let Some(rule) = &cluster.route else { continue };
        let rloc = format!("clusters[{ci}].route");

        let candidates: Vec<usize> = layout
            .iter()
            .enumerate()
            .filter(|(_, l)| clusters[l.cluster].tasks[l.task].name == rule.source_task)
            .map(|(i, _)| i)
            .collect();
        let unconditional: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| !clusters[layout[i].cluster].is_routed())
            .collect();
        let source_layout = match unconditional.as_slice() {
            [one] => *one,
            [] if candidates.is_empty() => {
                return Err(Error::DanglingReference {
                    location: format!("{rloc}.task"),
                    id: rule.source_task.clone(),
                })
            }
            [] => {
                return Err(invalid(
                    format!("{rloc}.task"),
                    format!("source task `{}` belongs to a routed cluster", rule.source_task),
                ))
            }
            _ => {
                return Err(invalid(
                    format!("{rloc}.task"),
                    format!(
                        "source task name `{}` is ambiguous across unconditional clusters",
                        rule.source_task
                    ),
                ))
            }
        };

        let Some(&trigger_column) = column_index.get(&rule.trigger_query) else {
            return Err(Error::DanglingReference {
                location: format!("{rloc}.query"),
                id: rule.trigger_query.clone(),
            });
        };
        if !layout[source_layout].columns.contains(&trigger_column) {
            return Err(invalid(
                format!("{rloc}.query"),
                format!(
                    "trigger `{}` is not a query of task `{}`",
                    rule.trigger_query, rule.source_task
                ),
            ));
        }
        if !triggers.insert(trigger_column) {
            return Err(invalid(
                format!("{rloc}.query"),
                format!(
                    "trigger `{}` is already used by another routed cluster",
                    rule.trigger_query
                ),
            ));
        }
        routes.push(ResolvedRoute {
            cluster: ci,
            source_layout,
            trigger_column,
        });
    }

    Ok(TaskSchema {
        version: raw.version,
        clusters,
        dimension: column,
        layout,
        routes,
        column_index,
    })
}
