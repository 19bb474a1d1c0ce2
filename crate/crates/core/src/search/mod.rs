//! Bounded attack search over the token API.
//!
//! The attacker drives the API as the compromised users and keeps a
//! Dolev-Yao knowledge base of everything the device hands out. A goal key is
//! leaked once its value becomes derivable from that knowledge.

mod actions;
mod explore;
mod fingerprint;
mod replay;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::scenario::{Scenario, SetupError};
use crate::terms::Term;
use crate::token::{AttrSet, Attribute, HandleId, KeyId, Origin, Template, TokenError, TokenState, UserId};

pub use actions::{apply_action, enumerate_actions, Output};
pub use explore::{explore, explore_from, reachable_fingerprints, SearchStats};
pub use fingerprint::{canonical_fingerprint, Fingerprint};
pub use replay::{build_trace, replay, replay_from, Verdict};

/// One API call. Variants are listed in the order of their trace tags so the
/// derived ordering sorts actions by tag first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op<T = Term> {
    CreateKey { template: Template },
    Decrypt { ct: T, key: HandleId },
    EmitLeaks,
    Encrypt { data: T, key: HandleId },
    Import { value: T },
    SetAttribute { handle: HandleId, attr: Attribute },
    UnsetAttribute { handle: HandleId, attr: Attribute },
    Unwrap { ct: T, wrapper: HandleId, template: AttrSet },
    Wrap { target: HandleId, wrapper: HandleId },
}

impl<T> Op<T> {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::CreateKey { .. } => "create_key",
            Op::Decrypt { .. } => "decrypt",
            Op::EmitLeaks => "emit_leaks",
            Op::Encrypt { .. } => "encrypt",
            Op::Import { .. } => "import",
            Op::SetAttribute { .. } => "set_attribute",
            Op::UnsetAttribute { .. } => "unset_attribute",
            Op::Unwrap { .. } => "unwrap",
            Op::Wrap { .. } => "wrap",
        }
    }

    /// Same operation with every term argument mapped through `f`.
    pub fn try_map_terms<U, E>(self, mut f: impl FnMut(T) -> Result<U, E>) -> Result<Op<U>, E> {
        Ok(match self {
            Op::CreateKey { template } => Op::CreateKey { template },
            Op::Decrypt { ct, key } => Op::Decrypt { ct: f(ct)?, key },
            Op::EmitLeaks => Op::EmitLeaks,
            Op::Encrypt { data, key } => Op::Encrypt { data: f(data)?, key },
            Op::Import { value } => Op::Import { value: f(value)? },
            Op::SetAttribute { handle, attr } => Op::SetAttribute { handle, attr },
            Op::UnsetAttribute { handle, attr } => Op::UnsetAttribute { handle, attr },
            Op::Unwrap { ct, wrapper, template } => Op::Unwrap {
                ct: f(ct)?,
                wrapper,
                template,
            },
            Op::Wrap { target, wrapper } => Op::Wrap { target, wrapper },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Action<T = Term> {
    pub op: Op<T>,
    pub actor: UserId,
}

impl<T> Action<T> {
    pub fn new(actor: UserId, op: Op<T>) -> Self {
        Action { op, actor }
    }
}

/// `<tag> actor=<user> <key>=<value>...`, the body of a trace line.
impl<T: fmt::Display> fmt::Display for Action<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} actor={}", self.op.tag(), self.actor)?;
        match &self.op {
            Op::CreateKey { template } => write!(f, " template={template}"),
            Op::Decrypt { ct, key } => write!(f, " ct={ct} key={key}"),
            Op::EmitLeaks => Ok(()),
            Op::Encrypt { data, key } => write!(f, " data={data} key={key}"),
            Op::Import { value } => write!(f, " value={value}"),
            Op::SetAttribute { handle, attr } | Op::UnsetAttribute { handle, attr } => {
                write!(f, " handle={handle} attr={attr}")
            }
            Op::Unwrap { ct, wrapper, template } => {
                write!(f, " ct={ct} wrapper={wrapper} template={template}")
            }
            Op::Wrap { target, wrapper } => write!(f, " target={target} wrapper={wrapper}"),
        }
    }
}

/// A term argument in a trace: written out, or a reference to an earlier
/// step's output `c<N>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermArg {
    Literal(Term),
    Ref(u32),
}

impl fmt::Display for TermArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermArg::Literal(t) => write!(f, "{t}"),
            TermArg::Ref(n) => write!(f, "c{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Binding {
    /// A term output, `c<N>`.
    Output(u32),
    /// A new handle, `h<N>`.
    Handle(HandleId),
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binding::Output(n) => write!(f, "c{n}"),
            Binding::Handle(h) => write!(f, "{h}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceStep {
    pub index: usize,
    pub action: Action<TermArg>,
    pub result: Option<Binding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Bfs,
    Iddfs,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Bfs => "bfs",
            Strategy::Iddfs => "iddfs",
        })
    }
}

pub const DEFAULT_STATE_CAP: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchConfig {
    pub max_depth: usize,
    pub attackers: BTreeSet<UserId>,
    pub goal_keys: BTreeSet<KeyId>,
    pub strategy: Strategy,
    pub workers: usize,
    /// Upper bound on distinct canonical states before giving up.
    pub state_cap: usize,
    /// Let every user act, subject to the token's guards, not just attackers.
    pub honest_actions: bool,
}

impl SearchConfig {
    pub fn new(max_depth: usize, attackers: BTreeSet<UserId>, goal_keys: BTreeSet<KeyId>) -> Self {
        SearchConfig {
            max_depth,
            attackers,
            goal_keys,
            strategy: Strategy::Bfs,
            workers: 1,
            state_cap: DEFAULT_STATE_CAP,
            honest_actions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SearchResult {
    Attack {
        trace: Vec<TraceStep>,
        leaked_key: KeyId,
    },
    Exhausted {
        depth: usize,
        states_explored: u64,
        canonical_states: u64,
    },
}

impl SearchResult {
    pub fn is_attack(&self) -> bool {
        matches!(self, SearchResult::Attack { .. })
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("state budget of {cap} canonical states exceeded at depth {depth}")]
    BudgetExceeded { cap: usize, depth: usize },
    #[error("action `{action}` was enumerated but its guard failed: {source}")]
    GuardFailed { action: String, source: TokenError },
    #[error(transparent)]
    Setup(#[from] SetupError),
}

/// Keys whose secrecy the search checks: keys generated with the
/// wrap_with_trusted or non-extractable template, keys with a trusted handle,
/// and keys the scenario marks sensitive.
pub fn goal_keys(scn: &Scenario, st: &TokenState) -> BTreeSet<KeyId> {
    let mut goals: BTreeSet<KeyId> = scn.keys.iter().filter(|k| k.sensitive).map(|k| k.id.clone()).collect();
    for key in st.keys() {
        let protected_template = matches!(
            key.origin,
            Origin::Fresh(Template::Wwt) | Origin::Fresh(Template::NonExtractable)
        );
        let trusted = st.handles_of(&key.id).any(|h| h.attrs.contains(Attribute::Trusted));
        if protected_template || trusted {
            goals.insert(key.id.clone());
        }
    }
    goals
}
