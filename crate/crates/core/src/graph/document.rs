//! JSON form of a dialog graph.
//!
//! The loader walks an order-preserving JSON tree rather than deriving
//! `Deserialize` so that duplicate keys (in particular duplicate node ids)
//! are detected and unknown fields can be rejected or ignored per
//! [`LoadOptions`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{self, Deserialize, Deserializer, MapAccess, SeqAccess, Visitor};
use serde_json::{json, Map, Value as Json};

use super::*;
use crate::value::Number;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoadError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing field `{field}` in {path}")]
    MissingField { path: String, field: String },
    #[error("unknown field `{field}` in {path}")]
    UnknownField { path: String, field: String },
    #[error("duplicate key `{key}` in {path}")]
    DuplicateKey { path: String, key: String },
    #[error("duplicate node id {0}")]
    DuplicateNodeId(String),
    #[error("unknown node kind `{kind}` for node {node}")]
    UnknownNodeKind { node: String, kind: String },
    #[error("invalid value at {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Ignore unknown fields instead of failing.
    pub lenient: bool,
}

/// Loads a graph document in strict mode.
pub fn load_graph(document: &str) -> Result<DialogGraph, LoadError> {
    load_graph_with(document, LoadOptions::default())
}

pub fn load_graph_with(document: &str, options: LoadOptions) -> Result<DialogGraph, LoadError> {
    let raw: Raw = serde_json::from_str(document).map_err(|e| LoadError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Loader { options }.graph(&raw)
}

/// JSON tree that keeps object entries in order, duplicates included.
#[derive(Debug, Clone)]
enum Raw {
    Null,
    Bool(bool),
    Number(serde_json::Number),
    String(String),
    Array(Vec<Raw>),
    Object(Vec<(String, Raw)>),
}

impl<'de> Deserialize<'de> for Raw {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Raw, D::Error> {
        struct RawVisitor;

        impl<'de> Visitor<'de> for RawVisitor {
            type Value = Raw;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("any JSON value")
            }

            fn visit_unit<E>(self) -> Result<Raw, E> {
                Ok(Raw::Null)
            }

            fn visit_bool<E>(self, v: bool) -> Result<Raw, E> {
                Ok(Raw::Bool(v))
            }

            fn visit_i64<E>(self, v: i64) -> Result<Raw, E> {
                Ok(Raw::Number(v.into()))
            }

            fn visit_u64<E>(self, v: u64) -> Result<Raw, E> {
                Ok(Raw::Number(v.into()))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Raw, E> {
                serde_json::Number::from_f64(v)
                    .map(Raw::Number)
                    .ok_or_else(|| E::custom("non-finite number"))
            }

            fn visit_str<E>(self, v: &str) -> Result<Raw, E> {
                Ok(Raw::String(v.to_string()))
            }

            fn visit_string<E>(self, v: String) -> Result<Raw, E> {
                Ok(Raw::String(v))
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Raw, A::Error> {
                let mut items = Vec::new();
                while let Some(item) = seq.next_element()? {
                    items.push(item);
                }
                Ok(Raw::Array(items))
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Raw, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Raw>()? {
                    entries.push((k, v));
                }
                Ok(Raw::Object(entries))
            }
        }

        deserializer.deserialize_any(RawVisitor)
    }
}

impl Raw {
    fn to_json(&self) -> Json {
        match self {
            Raw::Null => Json::Null,
            Raw::Bool(b) => Json::Bool(*b),
            Raw::Number(n) => Json::Number(n.clone()),
            Raw::String(s) => Json::String(s.clone()),
            Raw::Array(items) => Json::Array(items.iter().map(Raw::to_json).collect()),
            Raw::Object(entries) => Json::Object(
                entries
                    .iter()
                    .map(|(k, v)| (k.clone(), v.to_json()))
                    .collect(),
            ),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Raw::Null => "null",
            Raw::Bool(_) => "boolean",
            Raw::Number(_) => "number",
            Raw::String(_) => "string",
            Raw::Array(_) => "array",
            Raw::Object(_) => "object",
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> LoadError {
    LoadError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Field cursor over one JSON object; tracks which keys were consumed.
struct Obj<'a> {
    path: String,
    entries: &'a [(String, Raw)],
    used: HashSet<&'a str>,
}

impl<'a> Obj<'a> {
    fn new(raw: &'a Raw, path: impl Into<String>) -> Result<Obj<'a>, LoadError> {
        let path = path.into();
        let Raw::Object(entries) = raw else {
            return Err(invalid(&path, format!("expected object, found {}", raw.type_name())));
        };
        let mut seen = HashSet::new();
        for (k, _) in entries {
            if !seen.insert(k.as_str()) {
                return Err(LoadError::DuplicateKey {
                    path: if path.is_empty() { "document".into() } else { path },
                    key: k.clone(),
                });
            }
        }
        Ok(Obj {
            path,
            entries,
            used: HashSet::new(),
        })
    }

    fn opt(&mut self, key: &str) -> Option<&'a Raw> {
        let (k, v) = self.entries.iter().find(|(k, _)| k == key)?;
        self.used.insert(k.as_str());
        Some(v)
    }

    /// Like `opt`, but treats an explicit `null` as absent.
    fn opt_non_null(&mut self, key: &str) -> Option<&'a Raw> {
        self.opt(key).filter(|v| !matches!(v, Raw::Null))
    }

    fn req(&mut self, key: &str) -> Result<&'a Raw, LoadError> {
        self.opt(key).ok_or_else(|| LoadError::MissingField {
            path: if self.path.is_empty() {
                "document".into()
            } else {
                self.path.clone()
            },
            field: key.to_string(),
        })
    }

    fn req_str(&mut self, key: &str) -> Result<String, LoadError> {
        let path = self.child(key);
        string(self.req(key)?, &path)
    }

    fn opt_str(&mut self, key: &str) -> Result<Option<String>, LoadError> {
        let path = self.child(key);
        self.opt_non_null(key).map(|v| string(v, &path)).transpose()
    }

    fn child(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn finish(self, options: LoadOptions) -> Result<(), LoadError> {
        if options.lenient {
            return Ok(());
        }
        match self.entries.iter().find(|(k, _)| !self.used.contains(k.as_str())) {
            Some((k, _)) => Err(LoadError::UnknownField {
                path: if self.path.is_empty() {
                    "document".into()
                } else {
                    self.path
                },
                field: k.clone(),
            }),
            None => Ok(()),
        }
    }
}

fn string(raw: &Raw, path: &str) -> Result<String, LoadError> {
    match raw {
        Raw::String(s) => Ok(s.clone()),
        other => Err(invalid(path, format!("expected string, found {}", other.type_name()))),
    }
}

fn array<'a>(raw: &'a Raw, path: &str) -> Result<&'a [Raw], LoadError> {
    match raw {
        Raw::Array(items) => Ok(items),
        other => Err(invalid(path, format!("expected array, found {}", other.type_name()))),
    }
}

fn node_id(raw: &Raw, path: &str) -> Result<NodeId, LoadError> {
    let s = string(raw, path)?;
    if s.is_empty() {
        return Err(invalid(path, "node id must be non-empty"));
    }
    Ok(NodeId(s))
}

fn literal(raw: &Raw, path: &str) -> Result<Value, LoadError> {
    match raw {
        Raw::Bool(b) => Ok(Value::Bool(*b)),
        Raw::String(s) => Ok(Value::Text(s.clone())),
        Raw::Number(n) => Number::from_json(n)
            .map(Value::Number)
            .map_err(|e| invalid(path, e.to_string())),
        other => Err(invalid(
            path,
            format!("expected number, text or boolean literal, found {}", other.type_name()),
        )),
    }
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Loader {
    options: LoadOptions,
}

impl Loader {
    fn graph(&self, raw: &Raw) -> Result<DialogGraph, LoadError> {
        let mut top = Obj::new(raw, "")?;
        let graph_id = top.req_str("graph_id")?;

        let variables = match top.opt("variables") {
            Some(v) => self.variables(v)?,
            None => Vec::new(),
        };
        let entry_points = self.entry_points(top.req("entry_points")?)?;
        let modules = match top.opt("modules") {
            Some(v) => self.modules(v)?,
            None => Vec::new(),
        };
        let escalation_module = top.req_str("escalation_module")?;
        let personas = match top.opt("personas") {
            Some(v) => self.personas(v)?,
            None => Vec::new(),
        };
        let nodes = self.nodes(top.req("nodes")?)?;
        let layout = top.opt_non_null("layout").map(Raw::to_json);
        top.finish(self.options)?;

        Ok(DialogGraph {
            graph_id,
            nodes,
            entry_points,
            modules,
            escalation_module,
            variables,
            personas,
            layout,
        })
    }

    fn variables(&self, raw: &Raw) -> Result<Vec<VariableDecl>, LoadError> {
        let mut out: Vec<VariableDecl> = Vec::new();
        for (i, item) in array(raw, "variables")?.iter().enumerate() {
            let path = format!("variables[{i}]");
            let mut obj = Obj::new(item, path.clone())?;
            let name = obj.req_str("name")?;
            if !is_identifier(&name) {
                return Err(invalid(&path, format!("variable name {name:?} is not an identifier")));
            }
            if out.iter().any(|v| v.name == name) {
                return Err(invalid(&path, format!("duplicate variable {name}")));
            }
            let type_name = obj.req_str("type")?;
            let var_type = match type_name.as_str() {
                "number" => VarType::Number,
                "text" => VarType::Text,
                "boolean" => VarType::Boolean,
                other => return Err(invalid(&obj.child("type"), format!("unknown type {other:?}"))),
            };
            let initial = match obj.opt_non_null("initial") {
                Some(v) => {
                    let value = literal(v, &obj.child("initial"))?;
                    if value.var_type() != var_type {
                        return Err(invalid(
                            &obj.child("initial"),
                            format!("initial value is {}, declared {var_type}", value.var_type()),
                        ));
                    }
                    Some(value)
                }
                None => None,
            };
            obj.finish(self.options)?;
            out.push(VariableDecl {
                name,
                var_type,
                initial,
            });
        }
        Ok(out)
    }

    fn entry_points(&self, raw: &Raw) -> Result<EntryPoints, LoadError> {
        let mut obj = Obj::new(raw, "entry_points")?;
        let mut get = |key: &str| -> Result<NodeId, LoadError> {
            let path = obj.child(key);
            node_id(obj.req(key)?, &path)
        };
        let entry = EntryPoints {
            onboarding: get("onboarding")?,
            prompted: get("prompted")?,
            unprompted: get("unprompted")?,
        };
        obj.finish(self.options)?;
        Ok(entry)
    }

    fn modules(&self, raw: &Raw) -> Result<Vec<ModuleDef>, LoadError> {
        let mut out: Vec<ModuleDef> = Vec::new();
        for (i, item) in array(raw, "modules")?.iter().enumerate() {
            let path = format!("modules[{i}]");
            let mut obj = Obj::new(item, path.clone())?;
            let name = obj.req_str("name")?;
            if name.is_empty() {
                return Err(invalid(&path, "module name must be non-empty"));
            }
            if out.iter().any(|m| m.name == name) {
                return Err(invalid(&path, format!("duplicate module {name}")));
            }
            let entry = node_id(obj.req("entry")?, &obj.child("entry"))?;
            let description = obj.opt_str("description")?.unwrap_or_default();
            obj.finish(self.options)?;
            out.push(ModuleDef {
                name,
                entry,
                description,
            });
        }
        Ok(out)
    }

    fn personas(&self, raw: &Raw) -> Result<Vec<Persona>, LoadError> {
        let mut out = Vec::new();
        for (i, item) in array(raw, "personas")?.iter().enumerate() {
            let mut obj = Obj::new(item, format!("personas[{i}]"))?;
            let name = obj.req_str("name")?;
            let avatars = match obj.opt("avatars") {
                Some(v) => {
                    let path = obj.child("avatars");
                    array(v, &path)?
                        .iter()
                        .map(|a| string(a, &path))
                        .collect::<Result<_, _>>()?
                }
                None => Vec::new(),
            };
            obj.finish(self.options)?;
            out.push(Persona { name, avatars });
        }
        Ok(out)
    }

    fn nodes(&self, raw: &Raw) -> Result<BTreeMap<NodeId, Node>, LoadError> {
        let Raw::Object(entries) = raw else {
            return Err(invalid("nodes", format!("expected object, found {}", raw.type_name())));
        };
        let mut nodes = BTreeMap::new();
        for (id, body) in entries {
            if id.is_empty() {
                return Err(invalid("nodes", "node id must be non-empty"));
            }
            let id = NodeId(id.clone());
            if nodes.contains_key(&id) {
                return Err(LoadError::DuplicateNodeId(id.0));
            }
            let kind = self.node_kind(&id, body)?;
            nodes.insert(id.clone(), Node { id, kind });
        }
        Ok(nodes)
    }

    fn node_kind(&self, id: &NodeId, raw: &Raw) -> Result<NodeKind, LoadError> {
        let path = format!("nodes.{id}");
        let mut obj = Obj::new(raw, path.clone())?;
        let kind_name = obj.req_str("kind")?;
        let kind = match kind_name.as_str() {
            "statement" => NodeKind::Statement {
                text: self.variants(obj.req("text")?, &obj.child("text"))?,
                media: match obj.opt("media") {
                    Some(v) => self.media(v, &obj.child("media"))?,
                    None => Vec::new(),
                },
                next: obj
                    .opt_non_null("next")
                    .map(|v| node_id(v, &join(&path, "next")))
                    .transpose()?,
            },
            "question" => {
                let prompt = self.variants(obj.req("prompt")?, &obj.child("prompt"))?;
                let quick_replies = match obj.opt("quick_replies") {
                    Some(v) => self.quick_replies(v, &obj.child("quick_replies"))?,
                    None => Vec::new(),
                };
                let store_as = obj.opt_str("store_as")?;
                let intent_routes = match obj.opt("intent_routes") {
                    Some(v) => self.routes(v, &obj.child("intent_routes"))?,
                    None => BTreeMap::new(),
                };
                let fallback_next = node_id(obj.req("fallback_next")?, &obj.child("fallback_next"))?;
                let reprompt_limit = match obj.opt_non_null("reprompt_limit") {
                    Some(Raw::Number(n)) => n
                        .as_u64()
                        .and_then(|n| u8::try_from(n).ok())
                        .ok_or_else(|| invalid(&join(&path, "reprompt_limit"), "expected 0..=255"))?,
                    Some(other) => {
                        return Err(invalid(
                            &join(&path, "reprompt_limit"),
                            format!("expected integer, found {}", other.type_name()),
                        ))
                    }
                    None => DEFAULT_REPROMPT_LIMIT,
                };
                NodeKind::Question {
                    prompt,
                    quick_replies,
                    store_as,
                    intent_routes,
                    fallback_next,
                    reprompt_limit,
                }
            }
            "condition" => {
                let branches_path = obj.child("branches");
                let mut branches = Vec::new();
                for (i, item) in array(obj.req("branches")?, &branches_path)?.iter().enumerate() {
                    let mut b = Obj::new(item, format!("{branches_path}[{i}]"))?;
                    branches.push(Branch {
                        expr: b.req_str("expr")?,
                        next: node_id(b.req("next")?, &b.child("next"))?,
                    });
                    b.finish(self.options)?;
                }
                if branches.is_empty() {
                    return Err(invalid(&branches_path, "a condition needs at least one branch"));
                }
                NodeKind::Condition {
                    branches,
                    else_next: node_id(obj.req("else_next")?, &obj.child("else_next"))?,
                }
            }
            "assign" => {
                let list_path = obj.child("assignments");
                let mut assignments = Vec::new();
                for (i, item) in array(obj.req("assignments")?, &list_path)?.iter().enumerate() {
                    let mut a = Obj::new(item, format!("{list_path}[{i}]"))?;
                    let variable = a.req_str("variable")?;
                    let value_path = a.child("value");
                    let value = match a.req("value")? {
                        reference @ Raw::Object(_) => {
                            let mut r = Obj::new(reference, value_path)?;
                            let name = r.req_str("var")?;
                            r.finish(self.options)?;
                            AssignValue::Variable(name)
                        }
                        lit => AssignValue::Literal(literal(lit, &value_path)?),
                    };
                    a.finish(self.options)?;
                    assignments.push(Assignment { variable, value });
                }
                if assignments.is_empty() {
                    return Err(invalid(&list_path, "an assign node needs at least one assignment"));
                }
                NodeKind::Assign {
                    assignments,
                    next: node_id(obj.req("next")?, &obj.child("next"))?,
                }
            }
            "module_call" => NodeKind::ModuleCall {
                module: obj.req_str("module")?,
                next: node_id(obj.req("next")?, &obj.child("next"))?,
            },
            "module_return" => NodeKind::ModuleReturn,
            "end" => NodeKind::End,
            other => {
                return Err(LoadError::UnknownNodeKind {
                    node: id.to_string(),
                    kind: other.to_string(),
                })
            }
        };
        obj.finish(self.options)?;
        Ok(kind)
    }

    fn variants(&self, raw: &Raw, path: &str) -> Result<TextVariantSet, LoadError> {
        let variants = match raw {
            Raw::String(s) => vec![s.clone()],
            other => array(other, path)?
                .iter()
                .map(|v| string(v, path))
                .collect::<Result<Vec<_>, _>>()?,
        };
        TextVariantSet::new(variants)
            .ok_or_else(|| invalid(path, "text variants must be a non-empty list of non-blank strings"))
    }

    fn media(&self, raw: &Raw, path: &str) -> Result<Vec<MediaRef>, LoadError> {
        let mut out = Vec::new();
        for (i, item) in array(raw, path)?.iter().enumerate() {
            let mut obj = Obj::new(item, format!("{path}[{i}]"))?;
            let kind = match obj.req_str("kind")?.as_str() {
                "image" => MediaKind::Image,
                "animated_image" => MediaKind::AnimatedImage,
                other => return Err(invalid(&obj.child("kind"), format!("unknown media kind {other:?}"))),
            };
            let uri = obj.req_str("uri")?;
            if uri.is_empty() {
                return Err(invalid(&obj.child("uri"), "media uri must be non-empty"));
            }
            let alt_text = obj.opt_str("alt_text")?.unwrap_or_default();
            obj.finish(self.options)?;
            out.push(MediaRef { kind, uri, alt_text });
        }
        Ok(out)
    }

    fn quick_replies(&self, raw: &Raw, path: &str) -> Result<Vec<QuickReply>, LoadError> {
        let mut out: Vec<QuickReply> = Vec::new();
        let mut labels = HashSet::new();
        for (i, item) in array(raw, path)?.iter().enumerate() {
            let mut obj = Obj::new(item, format!("{path}[{i}]"))?;
            let label = obj.req_str("label")?;
            if !labels.insert(normalize_label(&label)) {
                return Err(invalid(path, format!("duplicate quick reply label {label:?}")));
            }
            let next = node_id(obj.req("next")?, &obj.child("next"))?;
            obj.finish(self.options)?;
            out.push(QuickReply { label, next });
        }
        Ok(out)
    }

    fn routes(&self, raw: &Raw, path: &str) -> Result<BTreeMap<String, NodeId>, LoadError> {
        let mut obj = Obj::new(raw, path)?;
        let keys: Vec<String> = obj.entries.iter().map(|(k, _)| k.clone()).collect();
        let mut out = BTreeMap::new();
        for key in keys {
            let target = node_id(obj.opt(&key).expect("key present"), &join(path, &key))?;
            out.insert(key, target);
        }
        obj.finish(self.options)?;
        Ok(out)
    }
}

impl DialogGraph {
    /// Serializes to the document form accepted by [`load_graph`].
    pub fn to_json(&self) -> Json {
        let mut top = Map::new();
        top.insert("graph_id".into(), json!(self.graph_id));
        top.insert(
            "variables".into(),
            Json::Array(
                self.variables
                    .iter()
                    .map(|v| {
                        let mut m = Map::new();
                        m.insert("name".into(), json!(v.name));
                        m.insert("type".into(), json!(v.var_type.to_string()));
                        if let Some(init) = &v.initial {
                            m.insert("initial".into(), init.to_json());
                        }
                        Json::Object(m)
                    })
                    .collect(),
            ),
        );
        top.insert(
            "entry_points".into(),
            json!({
                "onboarding": self.entry_points.onboarding,
                "prompted": self.entry_points.prompted,
                "unprompted": self.entry_points.unprompted,
            }),
        );
        top.insert(
            "modules".into(),
            Json::Array(
                self.modules
                    .iter()
                    .map(|m| json!({"name": m.name, "entry": m.entry, "description": m.description}))
                    .collect(),
            ),
        );
        top.insert("escalation_module".into(), json!(self.escalation_module));
        top.insert(
            "personas".into(),
            serde_json::to_value(&self.personas).expect("personas serialize"),
        );
        top.insert(
            "nodes".into(),
            Json::Object(
                self.nodes
                    .iter()
                    .map(|(id, node)| (id.0.clone(), node_to_json(&node.kind)))
                    .collect(),
            ),
        );
        if let Some(layout) = &self.layout {
            top.insert("layout".into(), layout.clone());
        }
        Json::Object(top)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("graph serializes")
    }
}

fn node_to_json(kind: &NodeKind) -> Json {
    let mut m = Map::new();
    m.insert("kind".into(), json!(kind.name()));
    match kind {
        NodeKind::Statement { text, media, next } => {
            m.insert("text".into(), json!(text.variants()));
            if !media.is_empty() {
                m.insert("media".into(), serde_json::to_value(media).expect("media serialize"));
            }
            m.insert("next".into(), json!(next));
        }
        NodeKind::Question {
            prompt,
            quick_replies,
            store_as,
            intent_routes,
            fallback_next,
            reprompt_limit,
        } => {
            m.insert("prompt".into(), json!(prompt.variants()));
            if !quick_replies.is_empty() {
                m.insert(
                    "quick_replies".into(),
                    Json::Array(
                        quick_replies
                            .iter()
                            .map(|q| json!({"label": q.label, "next": q.next}))
                            .collect(),
                    ),
                );
            }
            if let Some(var) = store_as {
                m.insert("store_as".into(), json!(var));
            }
            if !intent_routes.is_empty() {
                m.insert("intent_routes".into(), json!(intent_routes));
            }
            m.insert("fallback_next".into(), json!(fallback_next));
            m.insert("reprompt_limit".into(), json!(reprompt_limit));
        }
        NodeKind::Condition { branches, else_next } => {
            m.insert(
                "branches".into(),
                Json::Array(
                    branches
                        .iter()
                        .map(|b| json!({"expr": b.expr, "next": b.next}))
                        .collect(),
                ),
            );
            m.insert("else_next".into(), json!(else_next));
        }
        NodeKind::Assign { assignments, next } => {
            m.insert(
                "assignments".into(),
                Json::Array(
                    assignments
                        .iter()
                        .map(|a| {
                            let value = match &a.value {
                                AssignValue::Literal(v) => v.to_json(),
                                AssignValue::Variable(name) => json!({ "var": name }),
                            };
                            json!({"variable": a.variable, "value": value})
                        })
                        .collect(),
                ),
            );
            m.insert("next".into(), json!(next));
        }
        NodeKind::ModuleCall { module, next } => {
            m.insert("module".into(), json!(module));
            m.insert("next".into(), json!(next));
        }
        NodeKind::ModuleReturn | NodeKind::End => {}
    }
    Json::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "graph_id": "g",
        "entry_points": {"onboarding": "hello", "prompted": "hello", "unprompted": "hello"},
        "escalation_module": "safety",
        "modules": [{"name": "safety", "entry": "hello", "description": ""}],
        "nodes": {
            "hello": {"kind": "statement", "text": ["Hi there"], "next": "bye"},
            "bye": {"kind": "end"}
        }
    }"#;

    #[test]
    fn loads_minimal_graph() {
        let g = load_graph(MINIMAL).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.entry_points.prompted, NodeId::from("hello"));
    }

    #[test]
    fn smallest_legal_graph_has_one_node() {
        let doc = r#"{"graph_id": "g",
            "entry_points": {"onboarding": "s", "prompted": "s", "unprompted": "s"},
            "escalation_module": "m", "modules": [{"name": "m", "entry": "s"}],
            "nodes": {"s": {"kind": "statement", "text": "only", "next": null}}}"#;
        let g = load_graph(doc).unwrap();
        assert_eq!(g.node_count(), 1);
    }

    #[test]
    fn missing_entry_point_is_named() {
        let doc = MINIMAL.replace(r#""prompted": "hello", "#, "");
        let err = load_graph(&doc).unwrap_err();
        assert_eq!(
            err,
            LoadError::MissingField {
                path: "entry_points".into(),
                field: "prompted".into()
            }
        );
        assert!(err.to_string().contains("prompted"));
    }

    #[test]
    fn duplicate_node_id_rejected() {
        let doc = MINIMAL.replace(r#""bye": {"kind": "end"}"#, r#""bye": {"kind": "end"}, "hello": {"kind": "end"}"#);
        let err = load_graph(&doc).unwrap_err();
        assert_eq!(err.to_string(), "duplicate node id hello");
    }

    #[test]
    fn unknown_kind_rejected() {
        let doc = MINIMAL.replace(r#"{"kind": "end"}"#, r#"{"kind": "teleport"}"#);
        assert!(matches!(load_graph(&doc), Err(LoadError::UnknownNodeKind { .. })));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = load_graph("{\n  \"graph_id\": \"g\",\n  oops\n}").unwrap_err();
        match err {
            LoadError::Syntax { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_strict_vs_lenient() {
        let doc = MINIMAL.replace(r#"{"kind": "end"}"#, r#"{"kind": "end", "colour": "grey"}"#);
        assert!(matches!(load_graph(&doc), Err(LoadError::UnknownField { .. })));
        let g = load_graph_with(&doc, LoadOptions { lenient: true }).unwrap();
        assert_eq!(g.node_count(), 2);
    }

    #[test]
    fn duplicate_quick_reply_labels_after_normalization() {
        let doc = MINIMAL.replace(
            r#"{"kind": "end"}"#,
            r#"{"kind": "question", "prompt": ["?"], "fallback_next": "hello",
                "quick_replies": [{"label": "Yes", "next": "hello"}, {"label": " yes ", "next": "hello"}]}"#,
        );
        assert!(matches!(load_graph(&doc), Err(LoadError::Invalid { .. })));
    }

    #[test]
    fn structural_invariants_enforced() {
        let empty_branches = MINIMAL.replace(
            r#"{"kind": "end"}"#,
            r#"{"kind": "condition", "branches": [], "else_next": "hello"}"#,
        );
        assert!(load_graph(&empty_branches).is_err());
        let blank_text = MINIMAL.replace(r#"["Hi there"]"#, r#"["  "]"#);
        assert!(load_graph(&blank_text).is_err());
        let bad_var = MINIMAL.replace(
            r#""graph_id": "g","#,
            r#""graph_id": "g", "variables": [{"name": "9lives", "type": "number"}],"#,
        );
        assert!(load_graph(&bad_var).is_err());
        let bad_initial = MINIMAL.replace(
            r#""graph_id": "g","#,
            r#""graph_id": "g", "variables": [{"name": "x", "type": "number", "initial": "no"}],"#,
        );
        assert!(load_graph(&bad_initial).is_err());
    }

    #[test]
    fn serialize_round_trips() {
        let g = load_graph(MINIMAL).unwrap();
        let again = load_graph(&g.to_json_string()).unwrap();
        assert_eq!(g, again);
    }
}
