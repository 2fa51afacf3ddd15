//! Generator for large, valid dialog graphs used in scale and load tests.
//!
//! The graph is a long main flow of mixed node kinds with back edges that
//! only leave Questions (so every cycle yields), plus a set of small
//! modules that are each called at least once.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    AssignValue, Assignment, Branch, DialogGraph, EntryPoints, ModuleDef, Node, NodeId, NodeKind,
    Persona, QuickReply, TextVariantSet, VariableDecl, DEFAULT_REPROMPT_LIMIT,
};
use crate::value::{Number, Value, VarType};

/// Nodes per generated module: statement, question, statement, return.
const MODULE_NODES: usize = 4;

fn id(s: String) -> NodeId {
    NodeId::new(s)
}

fn text(s: String) -> TextVariantSet {
    TextVariantSet::single(s)
}

/// Builds a graph with exactly `nodes` nodes (at least 16) that validates
/// without errors or warnings.
pub fn scale_graph(nodes: usize, seed: u64) -> DialogGraph {
    assert!(nodes >= 16, "scale graphs need at least 16 nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module_count = (nodes / 50).clamp(2, 40);
    let mut table = BTreeMap::new();
    let mut modules = Vec::new();
    let insert = |table: &mut BTreeMap<NodeId, Node>, node: Node| {
        table.insert(node.id.clone(), node);
    };

    for m in 0..module_count {
        let p = |k: usize| id(format!("m{m}_{k}"));
        insert(
            &mut table,
            Node {
                id: p(0),
                kind: NodeKind::Statement {
                    text: text(format!("Module {m} begins.")),
                    media: Vec::new(),
                    next: Some(p(1)),
                },
            },
        );
        insert(
            &mut table,
            Node {
                id: p(1),
                kind: NodeKind::Question {
                    prompt: text(format!("Module {m}: ready?")),
                    quick_replies: vec![
                        QuickReply {
                            label: "yes".into(),
                            next: p(2),
                        },
                        QuickReply {
                            label: "again".into(),
                            next: p(0),
                        },
                    ],
                    store_as: None,
                    intent_routes: BTreeMap::new(),
                    fallback_next: p(2),
                    reprompt_limit: DEFAULT_REPROMPT_LIMIT,
                },
            },
        );
        insert(
            &mut table,
            Node {
                id: p(2),
                kind: NodeKind::Statement {
                    text: text(format!("Module {m} done.")),
                    media: Vec::new(),
                    next: Some(p(3)),
                },
            },
        );
        insert(
            &mut table,
            Node {
                id: p(3),
                kind: NodeKind::ModuleReturn,
            },
        );
        modules.push(ModuleDef {
            name: format!("mod{m}"),
            entry: p(0),
            description: format!("generated module {m}"),
        });
    }

    let main = nodes - module_count * MODULE_NODES;
    let n = |i: usize| id(format!("n{i}"));
    let mut questions: Vec<usize> = Vec::new();
    for i in 0..main {
        let next = n(i + 1);
        let kind = if i == main - 1 {
            NodeKind::End
        } else if i < module_count {
            // Call every module once near the start so all are reachable.
            NodeKind::ModuleCall {
                module: format!("mod{i}"),
                next,
            }
        } else {
            match rng.gen_range(0..10) {
                0..=3 => NodeKind::Statement {
                    text: TextVariantSet::new((0..rng.gen_range(1..=3)).map(|v| format!("Line {i} variant {v}.")).collect())
                        .expect("non-empty"),
                    media: Vec::new(),
                    next: Some(next),
                },
                4..=5 => {
                    let mut replies = vec![QuickReply {
                        label: "next".into(),
                        next: next.clone(),
                    }];
                    if let Some(&back) = questions.last() {
                        if rng.gen_bool(0.5) {
                            replies.push(QuickReply {
                                label: "back".into(),
                                next: n(back),
                            });
                        }
                    }
                    questions.push(i);
                    NodeKind::Question {
                        prompt: text(format!("Question {i}?")),
                        quick_replies: replies,
                        store_as: Some("answer".into()),
                        intent_routes: [("affirm".to_string(), next.clone())].into_iter().collect(),
                        fallback_next: next,
                        reprompt_limit: DEFAULT_REPROMPT_LIMIT,
                    }
                }
                6..=7 => NodeKind::Condition {
                    branches: vec![
                        Branch {
                            expr: format!("score > {} and not flag", rng.gen_range(0..10)),
                            next: next.clone(),
                        },
                        Branch {
                            expr: "answer == \"back\" or day >= 3".into(),
                            next: next.clone(),
                        },
                    ],
                    else_next: next,
                },
                8 => NodeKind::Assign {
                    assignments: vec![Assignment {
                        variable: "score".into(),
                        value: AssignValue::Literal(Value::Number(
                            Number::from_int(rng.gen_range(0..10)).expect("small"),
                        )),
                    }],
                    next,
                },
                _ => NodeKind::ModuleCall {
                    module: format!("mod{}", rng.gen_range(0..module_count)),
                    next,
                },
            }
        };
        insert(&mut table, Node { id: n(i), kind });
    }

    DialogGraph {
        graph_id: format!("scale-{nodes}"),
        nodes: table,
        entry_points: EntryPoints {
            onboarding: n(0),
            prompted: n(main / 3),
            unprompted: n(2 * main / 3),
        },
        modules,
        escalation_module: "mod0".into(),
        variables: vec![
            VariableDecl {
                name: "score".into(),
                var_type: VarType::Number,
                initial: Some(Value::Number(Number::from_int(0).expect("zero"))),
            },
            VariableDecl {
                name: "flag".into(),
                var_type: VarType::Boolean,
                initial: Some(Value::Bool(false)),
            },
            VariableDecl {
                name: "answer".into(),
                var_type: VarType::Text,
                initial: Some(Value::Text(String::new())),
            },
        ],
        personas: vec![Persona {
            name: "Scale".into(),
            avatars: Vec::new(),
        }],
        layout: None,
    }
}
