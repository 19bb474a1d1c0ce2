use std::collections::BTreeSet;
use std::fmt;

use super::{apply_action, goal_keys, Action, Binding, Output, SearchError, TermArg, TraceStep};
use crate::scenario::{build_setup, Scenario, SetupError, SetupMode};
use crate::terms::{KnowledgeBase, Term};
use crate::token::{KeyId, TokenState, UserId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Reproduces(KeyId),
    Fails { step: usize, reason: String },
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Reproduces(key) => write!(f, "REPRODUCES {key}"),
            Verdict::Fails { step, reason } => write!(f, "FAILS step={step} reason={reason}"),
        }
    }
}

fn binding_for(output: &Output, outputs: &mut Vec<Term>) -> Option<Binding> {
    match output {
        Output::Term(t) => {
            outputs.push(t.clone());
            Some(Binding::Output(outputs.len() as u32))
        }
        Output::Handle(h) => Some(Binding::Handle(*h)),
        Output::None | Output::Leaks(_) => None,
    }
}

/// Turns a sequence of actions into numbered trace steps, replacing term
/// arguments that an earlier step returned with a reference to that output.
pub fn build_trace(root: &TokenState, kb: &KnowledgeBase, actions: &[Action]) -> Result<Vec<TraceStep>, SearchError> {
    let (mut st, mut kb) = (root.clone(), kb.clone());
    let mut outputs: Vec<Term> = Vec::new();
    let mut steps = Vec::with_capacity(actions.len());
    for (i, action) in actions.iter().enumerate() {
        let op = action.op.clone().try_map_terms(|t| {
            Ok::<_, ()>(match outputs.iter().position(|o| *o == t) {
                Some(pos) => TermArg::Ref(pos as u32 + 1),
                None => TermArg::Literal(t),
            })
        });
        let op = op.expect("mapping cannot fail");
        let (next_st, next_kb, output) = apply_action(&st, &kb, action)?;
        steps.push(TraceStep {
            index: i + 1,
            action: Action::new(action.actor.clone(), op),
            result: binding_for(&output, &mut outputs),
        });
        (st, kb) = (next_st, next_kb);
    }
    Ok(steps)
}

/// Re-executes `trace` against the scenario's initial state.
pub fn replay(scn: &Scenario, trace: &[TraceStep], allow_honest: bool) -> Result<Verdict, SetupError> {
    let setup = build_setup(scn, SetupMode::Lenient)?;
    let goals = goal_keys(scn, &setup.state);
    Ok(replay_from(
        &setup.state,
        &setup.knowledge,
        &setup.config.attackers,
        &goals,
        allow_honest,
        trace,
    ))
}

pub fn replay_from(
    root: &TokenState,
    kb: &KnowledgeBase,
    attackers: &BTreeSet<UserId>,
    goals: &BTreeSet<KeyId>,
    allow_honest: bool,
    trace: &[TraceStep],
) -> Verdict {
    let (mut st, mut kb) = (root.clone(), kb.clone());
    kb.close_in_place();
    let mut outputs: Vec<Term> = Vec::new();
    let fail = |step: usize, reason: &str| Verdict::Fails {
        step,
        reason: reason.to_string(),
    };
    for (i, step) in trace.iter().enumerate() {
        let index = i + 1;
        if step.index != index {
            return fail(step.index, "BadIndex");
        }
        if !allow_honest && !attackers.contains(&step.action.actor) {
            return fail(index, "NotAttacker");
        }
        let resolved = step.action.op.clone().try_map_terms(|arg| match arg {
            TermArg::Ref(n) => outputs
                .get((n as usize).wrapping_sub(1))
                .cloned()
                .ok_or("UnboundReference"),
            TermArg::Literal(t) if kb.derives(&t) => Ok(t),
            TermArg::Literal(_) => Err("NotDerivable"),
        });
        let op = match resolved {
            Ok(op) => op,
            Err(reason) => return fail(index, reason),
        };
        let action = Action::new(step.action.actor.clone(), op);
        let (next_st, next_kb, output) = match apply_action(&st, &kb, &action) {
            Ok(next) => next,
            Err(SearchError::GuardFailed { source, .. }) => return fail(index, source.code()),
            Err(_) => return fail(index, "GuardFailed"),
        };
        if binding_for(&output, &mut outputs) != step.result {
            return fail(index, "BindingMismatch");
        }
        (st, kb) = (next_st, next_kb);
    }
    let leaked = goals
        .iter()
        .find(|id| root.key(id).is_some_and(|k| kb.derives(&k.value)));
    match leaked {
        Some(key) => Verdict::Reproduces(key.clone()),
        None => fail(trace.len(), "NoLeak"),
    }
}
