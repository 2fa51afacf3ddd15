//! The dialog-graph document: typed nodes, entry points, modules, variable
//! declarations and personas.
//!
//! A [`DialogGraph`] is immutable after load and can be shared freely across
//! sessions. Use [`load_graph`] / [`DialogGraph::to_json`] to move between
//! the JSON document and the in-memory form, and [`validate_graph`] for the
//! static checks that gate publishing.

mod document;
mod reach;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::expr::TypeEnv;
use crate::value::{Value, VarType};

pub use document::{load_graph, load_graph_with, LoadError, LoadOptions};
pub use reach::{reachable_set, successors, UnknownNode};
pub use validate::{validate_graph, Diagnostic, Severity};

/// Engine-maintained read-only variables present in every store.
pub const BUILTIN_VARIABLES: [(&str, VarType); 3] = [
    ("day", VarType::Number),
    ("origin", VarType::Text),
    ("escalated_last_engagement", VarType::Boolean),
];

/// Writing this variable through a Question's `store_as` registers the
/// user's daily check-in time.
pub const CHECKIN_TIME_VARIABLE: &str = "checkin_time";

pub fn is_builtin(name: &str) -> bool {
    BUILTIN_VARIABLES.iter().any(|(b, _)| *b == name)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> NodeId {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// Non-empty list of interchangeable message texts; one is drawn per output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVariantSet(Vec<String>);

impl TextVariantSet {
    /// Returns `None` if the list is empty or any entry is blank.
    pub fn new(variants: Vec<String>) -> Option<TextVariantSet> {
        (!variants.is_empty() && variants.iter().all(|v| !v.trim().is_empty()))
            .then_some(TextVariantSet(variants))
    }

    pub fn single(text: impl Into<String>) -> TextVariantSet {
        TextVariantSet::new(vec![text.into()]).expect("non-empty text")
    }

    pub fn variants(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    AnimatedImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub kind: MediaKind,
    pub uri: String,
    pub alt_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuickReply {
    pub label: String,
    pub next: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    /// Condition source text; parsed when the graph is compiled.
    pub expr: String,
    pub next: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssignValue {
    Literal(Value),
    Variable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub variable: String,
    pub value: AssignValue,
}

pub const DEFAULT_REPROMPT_LIMIT: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Statement {
        text: TextVariantSet,
        media: Vec<MediaRef>,
        /// `None` ends the session, like an End node.
        next: Option<NodeId>,
    },
    Question {
        prompt: TextVariantSet,
        quick_replies: Vec<QuickReply>,
        store_as: Option<String>,
        intent_routes: BTreeMap<String, NodeId>,
        fallback_next: NodeId,
        reprompt_limit: u8,
    },
    Condition {
        branches: Vec<Branch>,
        else_next: NodeId,
    },
    Assign {
        assignments: Vec<Assignment>,
        next: NodeId,
    },
    ModuleCall {
        module: String,
        next: NodeId,
    },
    ModuleReturn,
    End,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Statement { .. } => "statement",
            NodeKind::Question { .. } => "question",
            NodeKind::Condition { .. } => "condition",
            NodeKind::Assign { .. } => "assign",
            NodeKind::ModuleCall { .. } => "module_call",
            NodeKind::ModuleReturn => "module_return",
            NodeKind::End => "end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleDef {
    pub name: String,
    pub entry: NodeId,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableDecl {
    pub name: String,
    pub var_type: VarType,
    /// Unset variables start absent from the store (`exists(v)` is false).
    pub initial: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    #[serde(default)]
    pub avatars: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Onboarding,
    Prompted,
    Unprompted,
}

impl Origin {
    pub const ALL: [Origin; 3] = [Origin::Onboarding, Origin::Prompted, Origin::Unprompted];

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Onboarding => "onboarding",
            Origin::Prompted => "prompted",
            Origin::Unprompted => "unprompted",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Origin::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown origin {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryPoints {
    pub onboarding: NodeId,
    pub prompted: NodeId,
    pub unprompted: NodeId,
}

impl EntryPoints {
    pub fn get(&self, origin: Origin) -> &NodeId {
        match origin {
            Origin::Onboarding => &self.onboarding,
            Origin::Prompted => &self.prompted,
            Origin::Unprompted => &self.unprompted,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Origin, &NodeId)> {
        Origin::ALL.into_iter().map(move |o| (o, self.get(o)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogGraph {
    pub graph_id: String,
    pub nodes: BTreeMap<NodeId, Node>,
    pub entry_points: EntryPoints,
    pub modules: Vec<ModuleDef>,
    pub escalation_module: String,
    pub variables: Vec<VariableDecl>,
    pub personas: Vec<Persona>,
    /// Canvas positions keyed by node id; ignored by validation and the engine.
    pub layout: Option<serde_json::Value>,
}

impl DialogGraph {
    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn module(&self, name: &str) -> Option<&ModuleDef> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn variable(&self, name: &str) -> Option<&VariableDecl> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Declared variables plus the engine built-ins.
    pub fn type_env(&self) -> TypeEnv {
        BUILTIN_VARIABLES
            .iter()
            .map(|(n, t)| (n.to_string(), *t))
            .chain(self.variables.iter().map(|v| (v.name.clone(), v.var_type)))
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Trim + case-fold, used to compare quick-reply labels with user input.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

impl NodeKind {
    /// Rewrites every node reference held by this node.
    pub fn map_targets(&self, f: &mut impl FnMut(&NodeId) -> NodeId) -> NodeKind {
        let mut kind = self.clone();
        match &mut kind {
            NodeKind::Statement { next, .. } => {
                if let Some(n) = next {
                    *n = f(n);
                }
            }
            NodeKind::Question {
                quick_replies,
                intent_routes,
                fallback_next,
                ..
            } => {
                for q in quick_replies {
                    q.next = f(&q.next);
                }
                for target in intent_routes.values_mut() {
                    *target = f(target);
                }
                *fallback_next = f(fallback_next);
            }
            NodeKind::Condition { branches, else_next } => {
                for b in branches {
                    b.next = f(&b.next);
                }
                *else_next = f(else_next);
            }
            NodeKind::Assign { next, .. } | NodeKind::ModuleCall { next, .. } => *next = f(next),
            NodeKind::ModuleReturn | NodeKind::End => {}
        }
        kind
    }
}

impl DialogGraph {
    /// Copy of the graph with every node id (table keys, edges, entry points,
    /// module entries and layout keys) passed through `f`. References to ids
    /// missing from the node table are mapped too, so dangling edges stay
    /// dangling rather than silently pointing elsewhere.
    pub fn map_node_ids(&self, mut f: impl FnMut(&NodeId) -> NodeId) -> DialogGraph {
        let nodes = self
            .nodes
            .values()
            .map(|node| {
                let id = f(&node.id);
                (
                    id.clone(),
                    Node {
                        id,
                        kind: node.kind.map_targets(&mut f),
                    },
                )
            })
            .collect();
        let entry_points = EntryPoints {
            onboarding: f(&self.entry_points.onboarding),
            prompted: f(&self.entry_points.prompted),
            unprompted: f(&self.entry_points.unprompted),
        };
        let modules = self
            .modules
            .iter()
            .map(|m| ModuleDef {
                entry: f(&m.entry),
                ..m.clone()
            })
            .collect();
        let layout = self.layout.as_ref().map(|layout| match layout {
            serde_json::Value::Object(map) => serde_json::Value::Object(
                map.iter()
                    .map(|(k, v)| {
                        let id = NodeId::new(k.as_str());
                        let key = if self.nodes.contains_key(&id) {
                            f(&id).as_str().to_string()
                        } else {
                            k.clone()
                        };
                        (key, v.clone())
                    })
                    .collect(),
            ),
            other => other.clone(),
        });
        DialogGraph {
            graph_id: self.graph_id.clone(),
            nodes,
            entry_points,
            modules,
            escalation_module: self.escalation_module.clone(),
            variables: self.variables.clone(),
            personas: self.personas.clone(),
            layout,
        }
    }
}
