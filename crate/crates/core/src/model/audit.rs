//! Walks a recorded forward pass and checks where full precision survives.

use crate::autograd::{Op, ParamKind, ParamStore, Tape, Var};
use crate::Real;

/// Full-precision dense layers allowed outside the blocks.
const FLOAT_LINEARS: [&str; 2] = ["patch_embed.w", "head.w"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    pub binary_linears: usize,
    pub similarities: usize,
    pub attention_applies: usize,
    pub stencils: usize,
    pub float_linears: Vec<String>,
    pub violations: Vec<String>,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn op_of<T: Real>(tape: &Tape<T>, v: Var) -> &'static str {
    tape.node(v).op.name()
}

fn param_name<'a, T: Real>(tape: &Tape<T>, store: &'a ParamStore<T>, v: Var) -> Option<&'a str> {
    tape.node(v).param.map(|id| store.get(id).name.as_str())
}

/// Check a binary model's tape: every block weight feeds a binary product,
/// every binary product consumes binarized operands, fixed stencils carry
/// only `{-1, 0, 1}` taps, and dense float products are limited to the
/// patch embedding and the classifier.
pub fn audit_tape<T: Real>(tape: &Tape<T>, store: &ParamStore<T>) -> Audit {
    let mut a = Audit::default();
    for (idx, node) in tape.nodes().iter().enumerate() {
        let mut expect = |v: Var, want: &str, role: &str| {
            let got = op_of(tape, v);
            if got != want {
                a.violations.push(format!(
                    "node {idx} ({}): {role} comes from {got}, expected {want}",
                    node.op.name()
                ));
            }
        };
        match &node.op {
            Op::BinaryLinear { x, .. } => {
                expect(*x, "rsign", "input");
                a.binary_linears += 1;
            }
            Op::Similarity { q, k, .. } => {
                expect(*q, "rsign", "query");
                expect(*k, "rsign", "key");
                a.similarities += 1;
            }
            Op::AttnApply { att, v, .. } => {
                expect(*att, "att_binarize", "attention");
                expect(*v, "rsign", "value");
                a.attention_applies += 1;
            }
            Op::Stencil { kernel, .. } => {
                let k = tape.node(*kernel);
                if k.requires_grad {
                    a.violations
                        .push(format!("node {idx}: stencil kernel is trainable"));
                }
                if k.value
                    .data()
                    .iter()
                    .any(|&t| t != T::zero() && t.abs() != T::one())
                {
                    a.violations
                        .push(format!("node {idx}: stencil kernel has non-binary taps"));
                }
                a.stencils += 1;
            }
            Op::Linear(_, w) => match param_name(tape, store, *w) {
                Some(name) if FLOAT_LINEARS.contains(&name) => {
                    a.float_linears.push(name.to_string())
                }
                other => a.violations.push(format!(
                    "node {idx}: full-precision linear with weight {other:?}"
                )),
            },
            _ => {}
        }
        // block weights may only be consumed as the weight of a binary product
        for (pos, input) in node.op.inputs().into_iter().enumerate() {
            let Some(id) = tape.node(input).param else {
                continue;
            };
            let p = store.get(id);
            if p.kind != ParamKind::Weight || !p.name.starts_with("blocks.") {
                continue;
            }
            if !matches!(node.op, Op::BinaryLinear { .. }) || pos != 1 {
                a.violations.push(format!(
                    "node {idx}: weight {} used by {}",
                    p.name,
                    node.op.name()
                ));
            }
        }
    }
    a
}
