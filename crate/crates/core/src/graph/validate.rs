//! Static checks over a dialog graph.
//!
//! Every check has a stable code. Errors block publishing; warnings do not.
//!
//! | code | severity | meaning |
//! |---|---|---|
//! | `E-ASSIGN` | error | write to an undeclared variable, or a value of the wrong type |
//! | `E-BUILTIN` | error | declaring or writing an engine built-in |
//! | `E-DANGLE` | error | an edge, entry point or module entry names a missing node |
//! | `E-EXPR` | error | a condition fails to parse or typecheck |
//! | `E-LIVELOCK` | error | a cycle that never passes through a Question |
//! | `E-MODULE` | error | a call (or the escalation module) names an undeclared module |
//! | `E-NOEXIT` | error | a module reaches a node from which it can never return or end |
//! | `E-RETURN` | error | a ModuleReturn reachable from an entry point outside any call |
//! | `W-READBEFOREWRITE` | warning | a variable read where it is not written on every path |
//! | `W-UNREACH` | warning | a node no entry point or module entry reaches |

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::*;
use crate::expr::{parse_expr, typecheck_expr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub node: Option<NodeId>,
    pub message: String,
    pub severity: Severity,
}

impl Diagnostic {
    fn error(code: &str, node: Option<&NodeId>, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            code: code.to_string(),
            node: node.cloned(),
            message: message.into(),
        }
    }

    fn warning(code: &str, node: Option<&NodeId>, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            severity: Severity::Warning,
            ..Diagnostic::error(code, node, message)
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.node {
            Some(node) => write!(f, "{sev} {} at {node}: {}", self.code, self.message),
            None => write!(f, "{sev} {}: {}", self.code, self.message),
        }
    }
}

/// Runs every check. The result is sorted by code, then node id.
pub fn validate_graph(graph: &DialogGraph) -> Vec<Diagnostic> {
    let index = Index::new(graph);
    let mut out = Vec::new();
    check_references(graph, &mut out);
    check_expressions(graph, &mut out);
    check_writes(graph, &mut out);
    check_stray_returns(&index, &mut out);
    check_module_exits(&index, &mut out);
    check_livelock(&index, &mut out);
    check_unreachable(&index, &mut out);
    check_read_before_write(&index, &mut out);
    out.sort();
    out.dedup();
    out
}

/// Node table interned to dense indices.
struct Index<'g> {
    graph: &'g DialogGraph,
    ids: Vec<&'g NodeId>,
    pos: HashMap<&'g NodeId, usize>,
}

impl<'g> Index<'g> {
    fn new(graph: &'g DialogGraph) -> Index<'g> {
        let ids: Vec<&NodeId> = graph.nodes.keys().collect();
        let pos = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Index { graph, ids, pos }
    }

    fn get(&self, id: &NodeId) -> Option<usize> {
        self.pos.get(id).copied()
    }

    fn kind(&self, i: usize) -> &'g NodeKind {
        &self.graph.nodes[self.ids[i]].kind
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn local(&self, i: usize) -> Vec<usize> {
        self.kind(i)
            .local_targets()
            .into_iter()
            .filter_map(|t| self.get(t))
            .collect()
    }

    fn module_entry(&self, name: &str) -> Option<usize> {
        self.graph.module(name).and_then(|m| self.get(&m.entry))
    }

    fn entry_points(&self) -> Vec<usize> {
        self.graph
            .entry_points
            .iter()
            .filter_map(|(_, id)| self.get(id))
            .collect()
    }

    /// BFS over `edges` starting from `starts`.
    fn reach(&self, starts: &[usize], edges: impl Fn(usize) -> Vec<usize>) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &s in starts {
            if !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(i) = queue.pop_front() {
            for t in edges(i) {
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
        seen
    }
}

fn check_references(graph: &DialogGraph, out: &mut Vec<Diagnostic>) {
    for (origin, id) in graph.entry_points.iter() {
        if !graph.nodes.contains_key(id) {
            out.push(Diagnostic::error(
                "E-DANGLE",
                None,
                format!("entry point {origin} targets unknown node {id}"),
            ));
        }
    }
    for module in &graph.modules {
        if !graph.nodes.contains_key(&module.entry) {
            out.push(Diagnostic::error(
                "E-DANGLE",
                None,
                format!("module {} has unknown entry node {}", module.name, module.entry),
            ));
        }
    }
    if graph.module(&graph.escalation_module).is_none() {
        out.push(Diagnostic::error(
            "E-MODULE",
            None,
            format!("escalation module {} is not declared", graph.escalation_module),
        ));
    }
    for (id, node) in &graph.nodes {
        for target in node.kind.local_targets() {
            if !graph.nodes.contains_key(target) {
                out.push(Diagnostic::error(
                    "E-DANGLE",
                    Some(id),
                    format!("edge to unknown node {target}"),
                ));
            }
        }
        if let NodeKind::ModuleCall { module, .. } = &node.kind {
            if graph.module(module).is_none() {
                out.push(Diagnostic::error(
                    "E-MODULE",
                    Some(id),
                    format!("call to undeclared module {module}"),
                ));
            }
        }
    }
}

fn check_expressions(graph: &DialogGraph, out: &mut Vec<Diagnostic>) {
    let env = graph.type_env();
    for (id, node) in &graph.nodes {
        let NodeKind::Condition { branches, .. } = &node.kind else {
            continue;
        };
        for (i, branch) in branches.iter().enumerate() {
            match parse_expr(&branch.expr) {
                Err(e) => out.push(Diagnostic::error(
                    "E-EXPR",
                    Some(id),
                    format!("branch {i}: parse error: {e}"),
                )),
                Ok(expr) => {
                    if let Err(errors) = typecheck_expr(&expr, &env) {
                        for e in errors {
                            out.push(Diagnostic::error(
                                "E-EXPR",
                                Some(id),
                                format!("branch {i}: type error: {e}"),
                            ));
                        }
                    }
                }
            }
        }
    }
}

/// Built-in that authors may reset to `false` to clear the escalation flag.
const CLEARABLE_BUILTIN: &str = "escalated_last_engagement";

fn check_writes(graph: &DialogGraph, out: &mut Vec<Diagnostic>) {
    for decl in &graph.variables {
        if is_builtin(&decl.name) {
            out.push(Diagnostic::error(
                "E-BUILTIN",
                None,
                format!("variable {} shadows an engine built-in", decl.name),
            ));
        }
        if decl.name == CHECKIN_TIME_VARIABLE && decl.var_type != VarType::Text {
            out.push(Diagnostic::error(
                "E-ASSIGN",
                None,
                format!("{CHECKIN_TIME_VARIABLE} must be declared text (HH:MM)"),
            ));
        }
    }
    let declared = |name: &str| graph.variable(name).map(|v| v.var_type);
    let env = graph.type_env();
    for (id, node) in &graph.nodes {
        match &node.kind {
            NodeKind::Assign { assignments, .. } => {
                for a in assignments {
                    if is_builtin(&a.variable) {
                        let clearing = a.variable == CLEARABLE_BUILTIN
                            && a.value == AssignValue::Literal(Value::Bool(false));
                        if !clearing {
                            out.push(Diagnostic::error(
                                "E-BUILTIN",
                                Some(id),
                                format!("cannot assign to built-in {}", a.variable),
                            ));
                        }
                        continue;
                    }
                    let Some(target) = declared(&a.variable) else {
                        out.push(Diagnostic::error(
                            "E-ASSIGN",
                            Some(id),
                            format!("assignment to undeclared variable {}", a.variable),
                        ));
                        continue;
                    };
                    let source = match &a.value {
                        AssignValue::Literal(v) => Some(v.var_type()),
                        AssignValue::Variable(name) => {
                            let ty = env.get(name);
                            if ty.is_none() {
                                out.push(Diagnostic::error(
                                    "E-ASSIGN",
                                    Some(id),
                                    format!("{} reads undeclared variable {name}", a.variable),
                                ));
                            }
                            ty
                        }
                    };
                    if let Some(source) = source {
                        if source != target {
                            out.push(Diagnostic::error(
                                "E-ASSIGN",
                                Some(id),
                                format!("{} is {target} but is assigned a {source}", a.variable),
                            ));
                        }
                    }
                }
            }
            NodeKind::Question {
                store_as: Some(var), ..
            } => {
                if is_builtin(var) {
                    out.push(Diagnostic::error(
                        "E-BUILTIN",
                        Some(id),
                        format!("store_as targets built-in {var}"),
                    ));
                } else if declared(var).is_none() {
                    out.push(Diagnostic::error(
                        "E-ASSIGN",
                        Some(id),
                        format!("store_as targets undeclared variable {var}"),
                    ));
                }
            }
            _ => {}
        }
    }
}

fn check_stray_returns(index: &Index, out: &mut Vec<Diagnostic>) {
    let seen = index.reach(&index.entry_points(), |i| index.local(i));
    for (i, reached) in seen.into_iter().enumerate() {
        if reached && matches!(index.kind(i), NodeKind::ModuleReturn) {
            out.push(Diagnostic::error(
                "E-RETURN",
                Some(index.ids[i]),
                "module_return reachable from an entry point without a module call",
            ));
        }
    }
}

fn is_exit(kind: &NodeKind) -> bool {
    matches!(
        kind,
        NodeKind::ModuleReturn | NodeKind::End | NodeKind::Statement { next: None, .. }
    )
}

fn check_module_exits(index: &Index, out: &mut Vec<Diagnostic>) {
    // Reverse local edges, built once.
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); index.len()];
    for i in 0..index.len() {
        for t in index.local(i) {
            preds[t].push(i);
        }
    }
    for module in &index.graph.modules {
        let Some(entry) = index.get(&module.entry) else {
            continue;
        };
        let inside = index.reach(&[entry], |i| index.local(i));
        let exits: Vec<usize> = (0..index.len())
            .filter(|&i| inside[i] && is_exit(index.kind(i)))
            .collect();
        let can_exit = index.reach(&exits, |i| {
            preds[i].iter().copied().filter(|&p| inside[p]).collect()
        });
        let trapped: Vec<&NodeId> = (0..index.len())
            .filter(|&i| inside[i] && !can_exit[i])
            .map(|i| index.ids[i])
            .collect();
        if !trapped.is_empty() {
            let shown: Vec<String> = trapped.iter().take(10).map(|id| id.to_string()).collect();
            let more = if trapped.len() > 10 { ", ..." } else { "" };
            out.push(Diagnostic::error(
                "E-NOEXIT",
                Some(&module.entry),
                format!(
                    "module {} can reach nodes that never return or end: {}{more}",
                    module.name,
                    shown.join(", ")
                ),
            ));
        }
    }
}

/// For each module: whether some path from its entry reaches ModuleReturn
/// without passing a Question.
fn modules_returning_without_yield<'g>(index: &Index<'g>) -> HashMap<&'g str, bool> {
    let mut returns: HashMap<&'g str, bool> = index
        .graph
        .modules
        .iter()
        .map(|m| (m.name.as_str(), false))
        .collect();
    loop {
        let mut changed = false;
        for module in &index.graph.modules {
            if returns[module.name.as_str()] {
                continue;
            }
            let Some(entry) = index.get(&module.entry) else {
                continue;
            };
            let seen = index.reach(&[entry], |i| match index.kind(i) {
                NodeKind::Question { .. } => Vec::new(),
                NodeKind::ModuleCall { module, next } => {
                    if returns.get(module.as_str()).copied().unwrap_or(false) {
                        index.get(next).into_iter().collect()
                    } else {
                        Vec::new()
                    }
                }
                _ => index.local(i),
            });
            let found = (0..index.len())
                .any(|i| seen[i] && matches!(index.kind(i), NodeKind::ModuleReturn));
            if found {
                returns.insert(module.name.as_str(), true);
                changed = true;
            }
        }
        if !changed {
            return returns;
        }
    }
}

fn check_livelock(index: &Index, out: &mut Vec<Diagnostic>) {
    let returns = modules_returning_without_yield(index);
    let edges: Vec<Vec<usize>> = (0..index.len())
        .map(|i| match index.kind(i) {
            NodeKind::Question { .. } => Vec::new(),
            NodeKind::ModuleCall { module, next } => {
                let mut e: Vec<usize> = index.module_entry(module).into_iter().collect();
                if returns.get(module.as_str()).copied().unwrap_or(false) {
                    e.extend(index.get(next));
                }
                e
            }
            _ => index.local(i),
        })
        .collect();
    for component in strongly_connected(&edges) {
        let cyclic = component.len() > 1 || edges[component[0]].contains(&component[0]);
        if !cyclic {
            continue;
        }
        let mut members: Vec<&NodeId> = component.iter().map(|&i| index.ids[i]).collect();
        members.sort();
        let listed: Vec<String> = members.iter().map(|m| m.to_string()).collect();
        out.push(Diagnostic::error(
            "E-LIVELOCK",
            Some(members[0]),
            format!("cycle without a question: {}", listed.join(", ")),
        ));
    }
}

/// Tarjan's algorithm with an explicit stack.
fn strongly_connected(edges: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let n = edges.len();
    let mut index_of = vec![UNVISITED; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    let mut counter = 0;

    for root in 0..n {
        if index_of[root] != UNVISITED {
            continue;
        }
        let mut work: Vec<(usize, usize)> = vec![(root, 0)];
        index_of[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut next_edge)) = work.last_mut() {
            if let Some(&w) = edges[v].get(*next_edge) {
                *next_edge += 1;
                if index_of[w] == UNVISITED {
                    index_of[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index_of[w]);
                }
                continue;
            }
            work.pop();
            if let Some(&(parent, _)) = work.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index_of[v] {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("component member on stack");
                    on_stack[w] = false;
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                components.push(component);
            }
        }
    }
    components
}

fn check_unreachable(index: &Index, out: &mut Vec<Diagnostic>) {
    let mut starts = index.entry_points();
    starts.extend(
        index
            .graph
            .modules
            .iter()
            .filter_map(|m| index.get(&m.entry)),
    );
    let seen = index.reach(&starts, |i| {
        let mut e = index.local(i);
        if let NodeKind::ModuleCall { module, .. } = index.kind(i) {
            e.extend(index.module_entry(module));
        }
        e
    });
    for (i, reached) in seen.into_iter().enumerate() {
        if !reached {
            out.push(Diagnostic::warning(
                "W-UNREACH",
                Some(index.ids[i]),
                "node is unreachable from every entry point and module entry",
            ));
        }
    }
}

/// Fixed-width bit set over declared variables.
#[derive(Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn empty(n: usize) -> Bits {
        Bits(vec![0; n.div_ceil(64).max(1)])
    }

    fn full(n: usize) -> Bits {
        let mut b = Bits::empty(n);
        for i in 0..n {
            b.insert(i);
        }
        b
    }

    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn contains(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }

    fn union(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a | b).collect())
    }

    /// Intersects in place; returns whether anything changed.
    fn intersect_with(&mut self, other: &Bits) -> bool {
        let mut changed = false;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            let next = *a & b;
            changed |= next != *a;
            *a = next;
        }
        changed
    }
}

/// Whether a quick-reply label can be stored into a variable of `ty`.
fn label_fits(label: &str, ty: VarType) -> bool {
    match ty {
        VarType::Text => true,
        VarType::Number => label.trim().parse::<crate::value::Number>().is_ok(),
        VarType::Boolean => matches!(label.trim().to_lowercase().as_str(), "true" | "false"),
    }
}

fn check_read_before_write(index: &Index, out: &mut Vec<Diagnostic>) {
    let graph = index.graph;
    let vars: Vec<&VariableDecl> = graph.variables.iter().filter(|v| !is_builtin(&v.name)).collect();
    let nvars = vars.len();
    if nvars == 0 {
        return;
    }
    let var_pos: HashMap<&str, usize> = vars.iter().enumerate().map(|(i, v)| (v.name.as_str(), i)).collect();
    let mut init = Bits::empty(nvars);
    for (i, v) in vars.iter().enumerate() {
        if v.initial.is_some() {
            init.insert(i);
        }
    }

    let escalation_entry = index.module_entry(&graph.escalation_module);
    let single = |name: &Option<String>| -> Bits {
        let mut b = Bits::empty(nvars);
        if let Some(p) = name.as_deref().and_then(|n| var_pos.get(n)) {
            b.insert(*p);
        }
        b
    };

    // Outgoing edges with the variables written along them.
    let edges: Vec<Vec<(usize, Bits)>> = (0..index.len())
        .map(|i| {
            let none = Bits::empty(nvars);
            let mut e: Vec<(usize, Bits)> = Vec::new();
            match index.kind(i) {
                NodeKind::Question {
                    quick_replies,
                    store_as,
                    intent_routes,
                    fallback_next,
                    ..
                } => {
                    let ty = store_as.as_deref().and_then(|n| graph.variable(n)).map(|v| v.var_type);
                    for q in quick_replies {
                        let writes = match ty {
                            Some(ty) if label_fits(&q.label, ty) => single(store_as),
                            _ => none.clone(),
                        };
                        e.extend(index.get(&q.next).map(|t| (t, writes)));
                    }
                    let free_text = if ty == Some(VarType::Text) {
                        single(store_as)
                    } else {
                        none.clone()
                    };
                    for target in intent_routes.values() {
                        e.extend(index.get(target).map(|t| (t, free_text.clone())));
                    }
                    e.extend(index.get(fallback_next).map(|t| (t, none.clone())));
                    e.extend(escalation_entry.map(|t| (t, none.clone())));
                }
                NodeKind::Assign { assignments, next } => {
                    let mut writes = Bits::empty(nvars);
                    for a in assignments {
                        if let Some(p) = var_pos.get(a.variable.as_str()) {
                            writes.insert(*p);
                        }
                    }
                    e.extend(index.get(next).map(|t| (t, writes)));
                }
                NodeKind::ModuleCall { module, next } => {
                    e.extend(index.module_entry(module).map(|t| (t, none.clone())));
                    e.extend(index.get(next).map(|t| (t, none.clone())));
                }
                _ => e.extend(index.local(i).into_iter().map(|t| (t, none.clone()))),
            }
            e
        })
        .collect();

    let mut has_callers = vec![false; index.len()];
    for list in &edges {
        for (t, _) in list {
            has_callers[*t] = true;
        }
    }
    let mut state = vec![Bits::full(nvars); index.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut queued = vec![false; index.len()];
    let mut seed = |i: usize, state: &mut Vec<Bits>, queue: &mut VecDeque<usize>| {
        state[i].intersect_with(&init);
        if !queued[i] {
            queued[i] = true;
            queue.push_back(i);
        }
    };
    for i in index.entry_points() {
        seed(i, &mut state, &mut queue);
    }
    // A module nothing calls is analysed as if entered fresh.
    for m in &graph.modules {
        if let Some(i) = index.get(&m.entry) {
            if !has_callers[i] {
                seed(i, &mut state, &mut queue);
            }
        }
    }
    let mut reached = queued.clone();
    while let Some(i) = queue.pop_front() {
        queued[i] = false;
        for (t, writes) in &edges[i] {
            let out_state = state[i].union(writes);
            let changed = state[*t].intersect_with(&out_state);
            if (changed || !reached[*t]) && !queued[*t] {
                reached[*t] = true;
                queued[*t] = true;
                queue.push_back(*t);
            }
        }
    }

    for i in (0..index.len()).filter(|&i| reached[i]) {
        let mut written = state[i].clone();
        let mut flagged: BTreeSet<usize> = BTreeSet::new();
        let read = |name: &str, written: &Bits, flagged: &mut BTreeSet<usize>| {
            if let Some(&p) = var_pos.get(name) {
                if !written.contains(p) {
                    flagged.insert(p);
                }
            }
        };
        match index.kind(i) {
            NodeKind::Condition { branches, .. } => {
                for b in branches {
                    if let Ok(expr) = parse_expr(&b.expr) {
                        for name in expr.reads() {
                            read(name, &written, &mut flagged);
                        }
                    }
                }
            }
            NodeKind::Assign { assignments, .. } => {
                for a in assignments {
                    if let AssignValue::Variable(src) = &a.value {
                        read(src, &written, &mut flagged);
                    }
                    if let Some(&p) = var_pos.get(a.variable.as_str()) {
                        written.insert(p);
                    }
                }
            }
            _ => {}
        }
        for name in flagged.into_iter().map(|p| &vars[p].name) {
            out.push(Diagnostic::warning(
                "W-READBEFOREWRITE",
                Some(index.ids[i]),
                format!("variable {name} may be read before it is written"),
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_graph;

    fn graph(vars: &str, nodes: &str, modules: &str) -> DialogGraph {
        load_graph(&format!(
            r#"{{"graph_id": "t", "variables": {vars},
                "entry_points": {{"onboarding": "start", "prompted": "start", "unprompted": "start"}},
                "escalation_module": "safety",
                "modules": [{{"name": "safety", "entry": "s1"}} {modules}],
                "nodes": {{
                    "s1": {{"kind": "statement", "text": "stay safe", "next": "s2"}},
                    "s2": {{"kind": "module_return"}},
                    {nodes}
                }}}}"#
        ))
        .unwrap()
    }

    fn codes(diags: &[Diagnostic]) -> Vec<&str> {
        diags.iter().map(|d| d.code.as_str()).collect()
    }

    #[test]
    fn clean_graph_has_no_diagnostics() {
        let g = graph(
            "[]",
            r#""start": {"kind": "question", "prompt": "ok?", "fallback_next": "start",
                    "quick_replies": [{"label": "yes", "next": "done"}]},
                "done": {"kind": "end"}"#,
            "",
        );
        assert_eq!(validate_graph(&g), vec![]);
    }

    #[test]
    fn dangling_else_is_reported_at_condition() {
        let g = graph(
            r#"[{"name": "x", "type": "boolean", "initial": true}]"#,
            r#""start": {"kind": "condition", "branches": [{"expr": "x", "next": "done"}], "else_next": "deleted"},
                "done": {"kind": "end"}"#,
            "",
        );
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["E-DANGLE"]);
        assert_eq!(diags[0].node, Some(NodeId::from("start")));
        assert!(diags[0].message.contains("deleted"));
    }

    #[test]
    fn two_node_cycle_without_question_is_livelock() {
        let g = graph(
            r#"[{"name": "n", "type": "number", "initial": 0}]"#,
            r#""start": {"kind": "statement", "text": "again", "next": "bump"},
                "bump": {"kind": "assign", "assignments": [{"variable": "n", "value": 1}], "next": "start"}"#,
            "",
        );
        let diags = validate_graph(&g);
        let live: Vec<_> = diags.iter().filter(|d| d.code == "E-LIVELOCK").collect();
        // Enumerating simple cycles of {start -> bump -> start} by hand gives
        // exactly one cycle with members {bump, start}.
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].node, Some(NodeId::from("bump")));
        assert!(live[0].message.contains("bump, start"));
    }

    #[test]
    fn cycle_through_question_is_fine() {
        let g = graph(
            "[]",
            r#""start": {"kind": "statement", "text": "hi", "next": "q"},
                "q": {"kind": "question", "prompt": "again?", "fallback_next": "start",
                      "quick_replies": [{"label": "yes", "next": "start"}, {"label": "no", "next": "done"}]},
                "done": {"kind": "end"}"#,
            "",
        );
        assert!(validate_graph(&g).iter().all(|d| d.code != "E-LIVELOCK"));
    }

    #[test]
    fn module_call_loop_livelock_depends_on_callee() {
        // Callee that returns without asking anything: the loop never yields.
        let g = graph(
            "[]",
            r#""start": {"kind": "module_call", "module": "safety", "next": "start"}"#,
            "",
        );
        assert!(codes(&validate_graph(&g)).contains(&"E-LIVELOCK"));

        // Callee that asks a question before returning: fine.
        let g = graph(
            "[]",
            r#""start": {"kind": "module_call", "module": "ask", "next": "start"},
                "a1": {"kind": "question", "prompt": "?", "fallback_next": "a2"},
                "a2": {"kind": "module_return"}"#,
            r#", {"name": "ask", "entry": "a1"}"#,
        );
        assert!(!codes(&validate_graph(&g)).contains(&"E-LIVELOCK"));
    }

    #[test]
    fn return_outside_module() {
        let g = graph("[]", r#""start": {"kind": "statement", "text": "x", "next": "s2"}"#, "");
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["E-RETURN"]);
        assert_eq!(diags[0].node, Some(NodeId::from("s2")));
    }

    #[test]
    fn module_without_exit() {
        let g = graph(
            "[]",
            r#""start": {"kind": "module_call", "module": "stuck", "next": "done"},
                "done": {"kind": "end"},
                "t1": {"kind": "question", "prompt": "?", "fallback_next": "t1"}"#,
            r#", {"name": "stuck", "entry": "t1"}"#,
        );
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["E-NOEXIT"]);
    }

    #[test]
    fn expression_errors() {
        let g = graph(
            r#"[{"name": "mood", "type": "number", "initial": 1}]"#,
            r#""start": {"kind": "condition", "branches": [
                    {"expr": "mood >", "next": "done"},
                    {"expr": "mood > \"high\"", "next": "done"}], "else_next": "done"},
                "done": {"kind": "end"}"#,
            "",
        );
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["E-EXPR", "E-EXPR"]);
    }

    #[test]
    fn builtin_and_assign_checks() {
        let g = graph(
            r#"[{"name": "n", "type": "number", "initial": 0}]"#,
            r#""start": {"kind": "assign", "assignments": [
                    {"variable": "day", "value": 3},
                    {"variable": "escalated_last_engagement", "value": false},
                    {"variable": "n", "value": "three"},
                    {"variable": "ghost", "value": 1}], "next": "done"},
                "done": {"kind": "end"}"#,
            "",
        );
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["E-ASSIGN", "E-ASSIGN", "E-BUILTIN"]);
    }

    #[test]
    fn unreachable_is_warning() {
        let g = graph(
            "[]",
            r#""start": {"kind": "end"}, "island": {"kind": "end"}"#,
            "",
        );
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["W-UNREACH"]);
        assert!(!diags[0].is_error());
    }

    #[test]
    fn read_before_write_flags_partial_paths() {
        let g = graph(
            r#"[{"name": "stress", "type": "number"}, {"name": "seen", "type": "boolean", "initial": false}]"#,
            r#""start": {"kind": "question", "prompt": "rate", "store_as": "stress", "fallback_next": "check",
                    "quick_replies": [{"label": "1", "next": "check"}, {"label": "2", "next": "check"}]},
                "check": {"kind": "condition", "branches": [{"expr": "stress > 1 or seen", "next": "done"}],
                    "else_next": "done"},
                "done": {"kind": "end"}"#,
            "",
        );
        let diags = validate_graph(&g);
        assert_eq!(codes(&diags), vec!["W-READBEFOREWRITE"]);
        assert!(diags[0].message.contains("stress"));
    }

    #[test]
    fn read_after_write_on_all_paths_is_clean() {
        let g = graph(
            r#"[{"name": "stress", "type": "number"}]"#,
            r#""start": {"kind": "question", "prompt": "rate", "store_as": "stress", "fallback_next": "fb",
                    "quick_replies": [{"label": "1", "next": "check"}], "reprompt_limit": 0},
                "fb": {"kind": "assign", "assignments": [{"variable": "stress", "value": 3}], "next": "check"},
                "check": {"kind": "condition", "branches": [{"expr": "stress > 1", "next": "done"}],
                    "else_next": "done"},
                "done": {"kind": "end"}"#,
            "",
        );
        assert_eq!(validate_graph(&g), vec![]);
    }

    #[test]
    fn ordering_is_stable() {
        let g = graph(
            "[]",
            r#""start": {"kind": "statement", "text": "x", "next": "zz"},
                "b": {"kind": "statement", "text": "x", "next": "yy"}"#,
            "",
        );
        let a = validate_graph(&g);
        let b = validate_graph(&g);
        assert_eq!(a, b);
        let keys: Vec<_> = a.iter().map(|d| (d.code.clone(), d.node.clone())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
