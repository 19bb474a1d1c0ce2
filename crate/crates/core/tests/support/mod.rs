//! Shared helpers for the integration tests: fixture loading, trace
//! execution, random generators and an independent derivability oracle.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use hsmlab::scenario::{build_setup, parse_scenario, Scenario, Setup, SetupMode};
use hsmlab::search::{apply_action, Action, Binding, Op, Output, TermArg, TraceStep};
use hsmlab::terms::{KnowledgeBase, Term};
use hsmlab::token::{AttrSet, Attribute, HandleId, Mode, Role, Template, TokenState, UserId};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn load(name: &str) -> Scenario {
    let path = fixture_path(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_scenario(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn lenient(scn: &Scenario) -> Setup {
    build_setup(scn, SetupMode::Lenient).expect("setup")
}

/// One executed trace step with its arguments resolved.
#[derive(Debug, Clone)]
pub struct Executed {
    pub action: Action,
    pub output: Output,
    pub before: TokenState,
    pub after: TokenState,
}

/// Runs a trace from the setup state, resolving `c<N>` references.
pub fn execute(setup: &Setup, trace: &[TraceStep]) -> (Vec<Executed>, KnowledgeBase) {
    let (mut st, mut kb) = (setup.state.clone(), setup.knowledge.closed());
    let mut outputs: Vec<Term> = Vec::new();
    let mut done = Vec::new();
    for step in trace {
        let op = step
            .action
            .op
            .clone()
            .try_map_terms(|a| match a {
                TermArg::Literal(t) => Ok::<_, ()>(t),
                TermArg::Ref(n) => Ok(outputs[n as usize - 1].clone()),
            })
            .unwrap();
        let action = Action::new(step.action.actor.clone(), op);
        let (st2, kb2, output) = apply_action(&st, &kb, &action).expect("trace step applies");
        if let Output::Term(t) = &output {
            outputs.push(t.clone());
        }
        done.push(Executed {
            action,
            output,
            before: st.clone(),
            after: st2.clone(),
        });
        (st, kb) = (st2, kb2);
    }
    (done, kb)
}

/// A proptest runner with a fixed seed and no failure persistence files.
pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

pub const NAME_POOL: [&str; 4] = ["a", "b", "c", "d"];

pub fn term_strategy(max_depth: u32) -> impl Strategy<Value = Term> {
    let leaf = prop::sample::select(NAME_POOL.to_vec()).prop_map(Term::name);
    leaf.prop_recursive(max_depth, 16, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(Term::hash),
            (inner.clone(), inner).prop_map(|(p, k)| Term::senc(p, k)),
        ]
    })
}

pub fn kb_strategy(max_terms: usize) -> impl Strategy<Value = Vec<Term>> {
    prop::collection::vec(term_strategy(3), 0..=max_terms)
}

/// Derivability by saturation over the finite set of subterms of the
/// knowledge and the target. Written independently of the library's lazy
/// closure and used as its oracle.
pub fn derives_by_saturation(kb: &[Term], target: &Term) -> bool {
    let mut universe = BTreeSet::new();
    for t in kb.iter().chain(std::iter::once(target)) {
        subterms(t, &mut universe);
    }
    let mut known: BTreeSet<Term> = kb.iter().cloned().collect();
    loop {
        let mut grew = false;
        for t in &universe {
            if known.contains(t) {
                continue;
            }
            let by_rule = match t {
                Term::Name(_) => false,
                Term::Hash(x) => known.contains(&**x),
                Term::Senc(p, k) => known.contains(&**p) && known.contains(&**k),
            };
            let by_decryption = known
                .iter()
                .any(|c| matches!(c, Term::Senc(p, k) if **p == *t && known.contains(&**k)));
            if by_rule || by_decryption {
                known.insert(t.clone());
                grew = true;
                break;
            }
        }
        if !grew {
            return known.contains(target);
        }
    }
}

fn subterms(t: &Term, out: &mut BTreeSet<Term>) {
    out.insert(t.clone());
    match t {
        Term::Name(_) => {}
        Term::Hash(x) => subterms(x, out),
        Term::Senc(p, k) => {
            subterms(p, out);
            subterms(k, out);
        }
    }
}

fn identifier() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_]{0,5}"
}

fn term_arg() -> impl Strategy<Value = TermArg> {
    prop_oneof![
        term_strategy(3).prop_map(TermArg::Literal),
        (1u32..20).prop_map(TermArg::Ref),
    ]
}

fn handle() -> impl Strategy<Value = HandleId> {
    (0u32..50).prop_map(HandleId)
}

fn attribute() -> impl Strategy<Value = Attribute> {
    prop::sample::select(Attribute::ALL.to_vec())
}

fn template() -> impl Strategy<Value = Template> {
    prop::sample::select(Template::ALL.to_vec())
}

fn op_strategy() -> impl Strategy<Value = Op<TermArg>> {
    prop_oneof![
        template().prop_map(|template| Op::CreateKey { template }),
        (term_arg(), handle()).prop_map(|(ct, key)| Op::Decrypt { ct, key }),
        Just(Op::EmitLeaks),
        (term_arg(), handle()).prop_map(|(data, key)| Op::Encrypt { data, key }),
        term_arg().prop_map(|value| Op::Import { value }),
        (handle(), attribute()).prop_map(|(handle, attr)| Op::SetAttribute { handle, attr }),
        (handle(), attribute()).prop_map(|(handle, attr)| Op::UnsetAttribute { handle, attr }),
        (term_arg(), handle(), 0u8..128).prop_map(|(ct, wrapper, bits)| Op::Unwrap {
            ct,
            wrapper,
            template: AttrSet::from_bits(bits),
        }),
        (handle(), handle()).prop_map(|(target, wrapper)| Op::Wrap { target, wrapper }),
    ]
}

/// Well-formed traces: contiguous indices and a binding of the right kind.
pub fn trace_strategy(max_len: usize) -> impl Strategy<Value = Vec<TraceStep>> {
    prop::collection::vec((identifier(), op_strategy(), 1u32..30), 0..=max_len).prop_map(|steps| {
        steps
            .into_iter()
            .enumerate()
            .map(|(i, (actor, op, n))| {
                let result = match op {
                    Op::Wrap { .. } | Op::Encrypt { .. } | Op::Decrypt { .. } => Some(Binding::Output(n)),
                    Op::Unwrap { .. } | Op::Import { .. } | Op::CreateKey { .. } => {
                        Some(Binding::Handle(HandleId(n)))
                    }
                    _ => None,
                };
                TraceStep {
                    index: i + 1,
                    action: Action::new(UserId::new(actor), op),
                    result,
                }
            })
            .collect()
    })
}

/// Small random scenarios: one compromised normal user, optional honest
/// users, up to three keys, optionally a known name.
pub fn scenario_strategy(max_depth: usize) -> impl Strategy<Value = String> {
    let key = (
        0usize..3,
        template(),
        0u8..16,
        any::<bool>(),
        prop::bool::weighted(0.15),
        prop::bool::weighted(0.1),
    );
    (
        any::<bool>(),
        any::<bool>(),
        prop::collection::vec(key, 1..=3),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        1..=max_depth,
    )
        .prop_map(|(honest, managers, keys, know, policy, paper, depth)| {
            let mut text = String::from("user U1 NU compromised\n");
            let mut owners = vec!["U1"];
            if honest {
                text.push_str("user U2 NU\n");
                owners.push("U2");
            }
            if managers {
                text.push_str("user SO1 SO\nuser KM1 KM\n");
                owners.push("KM1");
            }
            for (i, (owner, template, bits, sensitive, trusted, imported)) in keys.into_iter().enumerate() {
                let owner = owners[owner % owners.len()];
                let roles = [Attribute::Wrap, Attribute::Unwrap, Attribute::Encrypt, Attribute::Decrypt];
                let attrs: Vec<&str> = roles
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| bits & (1 << b) != 0)
                    .map(|(_, a)| a.as_str())
                    .collect();
                if imported {
                    text.push_str(&format!("importkey k{} owner={owner} value=name:v{i}", i + 1));
                } else {
                    text.push_str(&format!("key k{} owner={owner} template={template}", i + 1));
                }
                if !attrs.is_empty() {
                    text.push_str(&format!(" attrs={}", attrs.join(",")));
                }
                if trusted && managers {
                    text.push_str(" trusted");
                }
                if sensitive {
                    text.push_str(" sensitive");
                }
                text.push('\n');
            }
            if know {
                text.push_str("know name:kA\n");
            }
            text.push_str(&format!(
                "policy {}\nmode {}\ndepth {depth}\n",
                if policy { "on" } else { "off" },
                if paper { "paper" } else { "full" }
            ));
            text
        })
}

/// Commands of a random API session. Indices are resolved against the state
/// when the command runs, so most commands address existing objects.
#[derive(Debug, Clone)]
pub enum Cmd {
    NewUser(u8, Role),
    Create(u8, Template),
    Import(u8, u8),
    Set(u8, u8, Attribute),
    Unset(u8, u8, Attribute),
    Wrap(u8, u8, u8),
    Unwrap(u8, u8, u8, u8),
    Encrypt(u8, u8, u8),
    Decrypt(u8, u8, u8),
    EmitLeaks,
}

fn role() -> impl Strategy<Value = Role> {
    prop::sample::select(vec![Role::NU, Role::KM, Role::SO])
}

fn cmd() -> impl Strategy<Value = Cmd> {
    let u = 0u8..6;
    let i = any::<u8>();
    prop_oneof![
        1 => (u.clone(), role()).prop_map(|(a, r)| Cmd::NewUser(a, r)),
        3 => (u.clone(), template()).prop_map(|(a, t)| Cmd::Create(a, t)),
        1 => (u.clone(), i.clone()).prop_map(|(a, n)| Cmd::Import(a, n)),
        6 => (u.clone(), i.clone(), attribute()).prop_map(|(a, h, x)| Cmd::Set(a, h, x)),
        3 => (u.clone(), i.clone(), attribute()).prop_map(|(a, h, x)| Cmd::Unset(a, h, x)),
        2 => (u.clone(), i.clone(), i.clone()).prop_map(|(a, t, w)| Cmd::Wrap(a, t, w)),
        2 => (u.clone(), i.clone(), i.clone(), 0u8..128).prop_map(|(a, c, w, t)| Cmd::Unwrap(a, c, w, t)),
        1 => (u.clone(), i.clone(), i.clone()).prop_map(|(a, d, h)| Cmd::Encrypt(a, d, h)),
        1 => (u, i.clone(), i).prop_map(|(a, c, h)| Cmd::Decrypt(a, c, h)),
        1 => Just(Cmd::EmitLeaks),
        // The first KM creating a candidate, and the first SO granting trust.
        1 => Just(Cmd::Create(1, Template::NonExtractable)),
        2 => any::<u8>().prop_map(|h| Cmd::Set(0, h, Attribute::Trusted)),
    ]
}

/// A session: the roles of the first users, policy and mode, then commands.
#[derive(Debug, Clone)]
pub struct Session {
    pub roles: Vec<Role>,
    pub policy_on: bool,
    pub mode: Mode,
    pub cmds: Vec<Cmd>,
}

pub fn session_strategy(policy: Option<bool>) -> impl Strategy<Value = Session> {
    let policy = match policy {
        Some(p) => Just(p).boxed(),
        None => any::<bool>().boxed(),
    };
    (
        prop::collection::vec(role(), 0..=3).prop_map(|extra| {
            let mut roles = vec![Role::SO, Role::KM, Role::NU];
            roles.extend(extra);
            roles
        }),
        policy,
        prop::sample::select(vec![Mode::Full, Mode::Paper]),
        prop::collection::vec(cmd(), 0..40),
    )
        .prop_map(|(roles, policy_on, mode, cmds)| Session {
            roles,
            policy_on,
            mode,
            cmds,
        })
}

/// A successful API call as recorded by [`run_session`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    NewUser(UserId, Role),
    Create(UserId, HandleId, Template),
    Import(UserId, HandleId),
    Unwrap(UserId, HandleId, HandleId),
    Set(UserId, HandleId, Attribute),
    Unset(UserId, HandleId, Attribute),
    Wrap(UserId, HandleId, HandleId),
    Encrypt(UserId, HandleId),
    Decrypt(UserId, HandleId),
    Leaks,
}

#[derive(Debug, Clone)]
pub struct Step {
    pub event: Event,
    pub before: TokenState,
    pub after: TokenState,
}

pub fn user_name(i: u8) -> UserId {
    UserId::new(format!("P{i}"))
}

fn pick<T: Clone>(items: &[T], i: u8) -> Option<T> {
    (!items.is_empty()).then(|| items[i as usize % items.len()].clone())
}

/// Executes a session and records every call the token accepted.
pub fn run_session(s: &Session) -> Vec<Step> {
    let mut st = TokenState::new(s.mode, s.policy_on);
    let mut steps = Vec::new();
    let record = |steps: &mut Vec<Step>, before: &TokenState, after: &TokenState, event| {
        steps.push(Step {
            event,
            before: before.clone(),
            after: after.clone(),
        })
    };
    let mut cmds: Vec<Cmd> = s
        .roles
        .iter()
        .enumerate()
        .map(|(i, r)| Cmd::NewUser(i as u8, *r))
        .collect();
    cmds.extend(s.cmds.iter().cloned());

    for cmd in cmds {
        let handles: Vec<HandleId> = st.handles().iter().map(|r| r.handle).collect();
        let mut cts: Vec<Term> = st
            .emitted()
            .iter()
            .filter(|t| matches!(t, Term::Senc(..)))
            .cloned()
            .collect();
        for k in st.keys() {
            cts.push(Term::senc(Term::name("a"), Term::hash(k.value.clone())));
        }
        let next = match cmd {
            Cmd::NewUser(u, r) => st.new_user(&user_name(u), r).ok().map(|n| (n, Event::NewUser(user_name(u), r))),
            Cmd::Create(u, t) => st
                .create_key(&user_name(u), t, false)
                .ok()
                .map(|(n, h)| (n, Event::Create(user_name(u), h, t))),
            Cmd::Import(u, n) => st
                .import_key(&user_name(u), &Term::name(NAME_POOL[n as usize % NAME_POOL.len()]))
                .ok()
                .map(|(n, h)| (n, Event::Import(user_name(u), h))),
            Cmd::Set(u, h, a) => pick(&handles, h).and_then(|h| {
                st.set_attribute(&user_name(u), h, a)
                    .ok()
                    .map(|n| (n, Event::Set(user_name(u), h, a)))
            }),
            Cmd::Unset(u, h, a) => pick(&handles, h).and_then(|h| {
                st.unset_attribute(&user_name(u), h, a)
                    .ok()
                    .map(|n| (n, Event::Unset(user_name(u), h, a)))
            }),
            Cmd::Wrap(u, t, w) => match (pick(&handles, t), pick(&handles, w)) {
                (Some(t), Some(w)) => st
                    .wrap(&user_name(u), t, w)
                    .ok()
                    .map(|(n, _)| (n, Event::Wrap(user_name(u), t, w))),
                _ => None,
            },
            Cmd::Unwrap(u, c, w, bits) => match (pick(&cts, c), pick(&handles, w)) {
                (Some(ct), Some(w)) => st
                    .unwrap(&user_name(u), &ct, w, AttrSet::from_bits(bits))
                    .ok()
                    .map(|(n, h)| (n, Event::Unwrap(user_name(u), h, w))),
                _ => None,
            },
            Cmd::Encrypt(u, d, h) => pick(&handles, h).and_then(|h| {
                let data = Term::name(NAME_POOL[d as usize % NAME_POOL.len()]);
                st.encrypt(&user_name(u), &data, h)
                    .ok()
                    .map(|(n, _)| (n, Event::Encrypt(user_name(u), h)))
            }),
            Cmd::Decrypt(u, c, h) => match (pick(&cts, c), pick(&handles, h)) {
                (Some(ct), Some(h)) => st
                    .decrypt(&user_name(u), &ct, h)
                    .ok()
                    .map(|(n, _)| (n, Event::Decrypt(user_name(u), h))),
                _ => None,
            },
            Cmd::EmitLeaks => st.emit_leaks().ok().map(|(n, _)| (n, Event::Leaks)),
        };
        if let Some((after, event)) = next {
            record(&mut steps, &st, &after, event);
            st = after;
        }
    }
    steps
}

/// Attributes of `h` in `st`, or `None` if the handle does not exist yet.
pub fn attrs_at(st: &TokenState, h: HandleId) -> Option<AttrSet> {
    st.attrs(h).ok()
}
