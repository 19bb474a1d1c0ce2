use std::collections::BTreeSet;

use super::{Action, Op, SearchConfig, SearchError};
use crate::terms::{KnowledgeBase, Term};
use crate::token::{
    AttrSet, Attribute, HandleId, Mode, Template, TokenState, UserId, UNWRAP_TEMPLATE_ATTRS,
};

/// What an applied action handed back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    None,
    Term(Term),
    Handle(HandleId),
    Leaks(BTreeSet<Term>),
}

/// Every unwrap template the caller may request: all subsets of the
/// non-trusted attributes.
fn all_unwrap_templates() -> impl Iterator<Item = AttrSet> {
    (0u32..1 << UNWRAP_TEMPLATE_ATTRS.len()).map(|mask| {
        UNWRAP_TEMPLATE_ATTRS
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .fold(AttrSet::EMPTY, |s, (_, &a)| s.with(a))
    })
}

fn senc_under<'a>(kb: &'a KnowledgeBase, key: &'a Term) -> impl Iterator<Item = &'a Term> {
    kb.iter()
        .filter(move |t| matches!(t, Term::Senc(_, k) if **k == *key))
}

/// All actions available to the acting users in this state, sorted.
///
/// Term arguments come from the materialized knowledge plus one hash on top.
/// Wrap, encrypt, decrypt and leak emission do not depend on who calls them,
/// so only the first capable actor is listed for those; calls whose output
/// the attacker already holds, and attribute toggles that change nothing, are
/// left out.
pub fn enumerate_actions(st: &TokenState, kb: &KnowledgeBase, cfg: &SearchConfig) -> Vec<Action> {
    let actors: Vec<&UserId> = if cfg.honest_actions {
        st.users().keys().collect()
    } else {
        cfg.attackers.iter().filter(|u| st.role(u).is_some()).collect()
    };
    let api_actor = actors
        .iter()
        .copied()
        .find(|u| st.role(u).is_some_and(|r| r.uses_api()));

    let mut args: BTreeSet<Term> = kb.terms().clone();
    args.extend(kb.iter().map(|t| Term::hash(t.clone())));

    let mut out = Vec::new();
    for &actor in &actors {
        let push = |out: &mut Vec<Action>, op| out.push(Action::new(actor.clone(), op));
        let api = st.role(actor).is_some_and(|r| r.uses_api());

        if cfg.honest_actions && api {
            for template in Template::ALL {
                push(&mut out, Op::CreateKey { template });
            }
        }

        for rec in st.handles() {
            for attr in Attribute::ALL {
                let h = rec.handle;
                if rec.attrs.contains(attr) {
                    if st.check_unset_attribute(actor, h, attr).is_ok() {
                        push(&mut out, Op::UnsetAttribute { handle: h, attr });
                    }
                } else if st.check_set_attribute(actor, h, attr).is_ok() {
                    push(&mut out, Op::SetAttribute { handle: h, attr });
                }
            }
        }

        if !api {
            continue;
        }
        for value in args.iter().filter(|t| t.as_name().is_some()) {
            push(&mut out, Op::Import { value: value.clone() });
        }

        for rec in st.handles().iter().filter(|r| r.attrs.contains(Attribute::Unwrap)) {
            let w = rec.handle;
            let key_term = Term::hash(st.key_of(w).expect("live handle").value.clone());
            let mut cts: BTreeSet<Term> = senc_under(kb, &key_term).cloned().collect();
            if kb.constructible(&key_term) {
                cts.extend(args.iter().map(|p| Term::senc(p.clone(), key_term.clone())));
            }
            let templates: Vec<AttrSet> = if rec.attrs.contains(Attribute::Trusted) {
                vec![st.effective_unwrap_template(w, AttrSet::EMPTY).expect("live handle")]
            } else {
                all_unwrap_templates().collect()
            };
            for ct in &cts {
                for &template in &templates {
                    if st.check_unwrap(actor, ct, w, template).is_ok() {
                        push(
                            &mut out,
                            Op::Unwrap {
                                ct: ct.clone(),
                                wrapper: w,
                                template,
                            },
                        );
                    }
                }
            }
        }
    }

    if let Some(actor) = api_actor {
        let push = |out: &mut Vec<Action>, op| out.push(Action::new(actor.clone(), op));
        let value = |h: HandleId| &st.key_of(h).expect("live handle").value;

        for t in st.handles() {
            for w in st.handles() {
                if st.check_wrap(actor, t.handle, w.handle).is_ok() {
                    let ct = Term::senc(value(t.handle).clone(), Term::hash(value(w.handle).clone()));
                    if !kb.contains(&ct) {
                        push(
                            &mut out,
                            Op::Wrap {
                                target: t.handle,
                                wrapper: w.handle,
                            },
                        );
                    }
                }
            }
        }

        match st.mode() {
            Mode::Full => {
                for rec in st.handles() {
                    let h = rec.handle;
                    let key_term = Term::hash(value(h).clone());
                    if st.check_encrypt(actor, h).is_ok() {
                        for data in &args {
                            if !kb.contains(&Term::senc(data.clone(), key_term.clone())) {
                                push(&mut out, Op::Encrypt { data: data.clone(), key: h });
                            }
                        }
                    }
                    if rec.attrs.contains(Attribute::Decrypt) {
                        for ct in senc_under(kb, &key_term) {
                            if let Ok(plain) = st.check_decrypt(actor, ct, h) {
                                if !kb.contains(&plain) {
                                    push(&mut out, Op::Decrypt { ct: ct.clone(), key: h });
                                }
                            }
                        }
                    }
                }
            }
            Mode::Paper => {
                if !st.leak_terms().iter().all(|t| kb.contains(t)) {
                    push(&mut out, Op::EmitLeaks);
                }
            }
        }
    }

    out.sort();
    out.dedup();
    out
}

/// Runs `act` on the token and adds whatever it outputs to the attacker's
/// knowledge.
pub fn apply_action(
    st: &TokenState,
    kb: &KnowledgeBase,
    act: &Action,
) -> Result<(TokenState, KnowledgeBase, Output), SearchError> {
    let user = &act.actor;
    let result = match &act.op {
        Op::CreateKey { template } => st
            .create_key(user, *template, false)
            .map(|(s, h)| (s, Output::Handle(h))),
        Op::Decrypt { ct, key } => st.decrypt(user, ct, *key).map(|(s, t)| (s, Output::Term(t))),
        Op::EmitLeaks => st.emit_leaks().map(|(s, l)| (s, Output::Leaks(l))),
        Op::Encrypt { data, key } => st.encrypt(user, data, *key).map(|(s, t)| (s, Output::Term(t))),
        Op::Import { value } => st.import_key(user, value).map(|(s, h)| (s, Output::Handle(h))),
        Op::SetAttribute { handle, attr } => st.set_attribute(user, *handle, *attr).map(|s| (s, Output::None)),
        Op::UnsetAttribute { handle, attr } => {
            st.unset_attribute(user, *handle, *attr).map(|s| (s, Output::None))
        }
        Op::Unwrap { ct, wrapper, template } => st
            .unwrap(user, ct, *wrapper, *template)
            .map(|(s, h)| (s, Output::Handle(h))),
        Op::Wrap { target, wrapper } => st.wrap(user, *target, *wrapper).map(|(s, t)| (s, Output::Term(t))),
    };
    let (next, output) = result.map_err(|source| SearchError::GuardFailed {
        action: act.to_string(),
        source,
    })?;
    let mut kb = kb.clone();
    match &output {
        Output::Term(t) => {
            kb.learn([t.clone()]);
        }
        Output::Leaks(ts) => {
            kb.learn(ts.iter().cloned());
        }
        Output::None | Output::Handle(_) => {}
    }
    Ok((next, kb, output))
}
