use std::collections::{BTreeSet, VecDeque};

use super::{DialogGraph, NodeId, NodeKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown node id {0}")]
pub struct UnknownNode(pub NodeId);

impl NodeKind {
    /// Edges leaving this node within its own flow. A ModuleCall's edge into
    /// the callee is not included; see [`successors`].
    pub fn local_targets(&self) -> Vec<&NodeId> {
        match self {
            NodeKind::Statement { next, .. } => next.iter().collect(),
            NodeKind::Question {
                quick_replies,
                intent_routes,
                fallback_next,
                ..
            } => quick_replies
                .iter()
                .map(|q| &q.next)
                .chain(intent_routes.values())
                .chain(std::iter::once(fallback_next))
                .collect(),
            NodeKind::Condition { branches, else_next } => branches
                .iter()
                .map(|b| &b.next)
                .chain(std::iter::once(else_next))
                .collect(),
            NodeKind::Assign { next, .. } | NodeKind::ModuleCall { next, .. } => vec![next],
            NodeKind::ModuleReturn | NodeKind::End => Vec::new(),
        }
    }
}

/// All successors of a node: local edges plus, for a ModuleCall, the entry
/// of the called module (when declared).
pub fn successors<'g>(graph: &'g DialogGraph, kind: &'g NodeKind) -> Vec<&'g NodeId> {
    let mut out = kind.local_targets();
    if let NodeKind::ModuleCall { module, .. } = kind {
        if let Some(def) = graph.module(module) {
            out.push(&def.entry);
        }
    }
    out
}

/// Forward reachability from `start` over every edge kind. Targets missing
/// from the node table are skipped.
pub fn reachable_set(graph: &DialogGraph, start: &NodeId) -> Result<BTreeSet<NodeId>, UnknownNode> {
    if !graph.nodes.contains_key(start) {
        return Err(UnknownNode(start.clone()));
    }
    let mut seen: BTreeSet<&NodeId> = BTreeSet::new();
    let mut queue = VecDeque::from([start]);
    seen.insert(start);
    while let Some(id) = queue.pop_front() {
        let Some(node) = graph.nodes.get(id) else {
            continue;
        };
        for next in successors(graph, &node.kind) {
            if graph.nodes.contains_key(next) && seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    Ok(seen.into_iter().cloned().collect())
}
