//! The secure configuration: five rules on sensitive, trusted and candidate
//! keys, enforced at run time by the token and checked statically by [`lint`].
//!
//! A *candidate* is a key generated fresh inside the device by a KM user with
//! the non-extractable template. Only candidates may become trusted, and KM
//! users may only give their candidates the wrap and unwrap roles.

use std::fmt;

use crate::scenario::{KeySource, Scenario};
use crate::token::{
    AttrSet, Attribute, HandleId, Origin, Role, Template, TokenError, TokenResult, TokenState, UserId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyRule {
    /// Sensitive keys must be wrap_with_trusted or non-extractable.
    R1,
    /// Only KM candidates may be trusted.
    R2,
    /// Candidates only ever wrap and unwrap.
    R3,
    /// Candidates are generated non-extractable.
    R4,
    /// Candidates are generated fresh in the device.
    R5,
    /// Attribute changes by someone other than the owner (or SO for trusted).
    Ownership,
}

impl fmt::Display for PolicyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyRule::R1 => "R1",
            PolicyRule::R2 => "R2",
            PolicyRule::R3 => "R3",
            PolicyRule::R4 => "R4",
            PolicyRule::R5 => "R5",
            PolicyRule::Ownership => "OWNERSHIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyVerdict {
    pub allowed: bool,
    pub rule: Option<PolicyRule>,
    pub detail: String,
}

impl PolicyVerdict {
    pub fn allow() -> Self {
        PolicyVerdict {
            allowed: true,
            rule: None,
            detail: String::new(),
        }
    }

    pub fn deny(rule: PolicyRule, detail: impl Into<String>) -> Self {
        PolicyVerdict {
            allowed: false,
            rule: Some(rule),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for PolicyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rule {
            Some(rule) => write!(f, "{rule}: {}", self.detail),
            None => f.write_str("allowed"),
        }
    }
}

/// Attributes a KM may give its own candidate keys.
pub const CANDIDATE_ROLES: [Attribute; 2] = [Attribute::Wrap, Attribute::Unwrap];

fn candidate_roles() -> AttrSet {
    AttrSet::of(&CANDIDATE_ROLES)
}

/// The rule a key with this owner role and origin breaks by being trusted,
/// or `None` for a candidate.
fn candidacy_failure(owner_role: Option<Role>, origin: Origin) -> Option<(PolicyRule, &'static str)> {
    if owner_role != Some(Role::KM) {
        Some((PolicyRule::R2, "key is not managed by a KM user"))
    } else if !matches!(origin, Origin::Fresh(_)) {
        Some((PolicyRule::R5, "key was not generated fresh in the device"))
    } else if origin != Origin::Fresh(Template::NonExtractable) {
        Some((PolicyRule::R4, "key was not generated non-extractable"))
    } else {
        None
    }
}

pub fn is_candidate(st: &TokenState, h: HandleId) -> TokenResult<bool> {
    let key = st.key_of(h)?;
    Ok(candidacy_failure(st.role(&key.owner), key.origin).is_none())
}

pub fn check_set_trusted(st: &TokenState, so: &UserId, h: HandleId) -> TokenResult<PolicyVerdict> {
    let role = st.role(so).ok_or_else(|| TokenError::NotAUser(so.clone()))?;
    if role != Role::SO {
        return Err(TokenError::RoleForbidden { user: so.clone(), role });
    }
    let key = st.key_of(h)?;
    Ok(match candidacy_failure(st.role(&key.owner), key.origin) {
        None => PolicyVerdict::allow(),
        Some((rule, why)) => PolicyVerdict::deny(rule, format!("{} ({h}): {why}", key.id)),
    })
}

pub fn check_km_attr_change(
    st: &TokenState,
    km: &UserId,
    h: HandleId,
    a: Attribute,
) -> TokenResult<PolicyVerdict> {
    let role = st.role(km).ok_or_else(|| TokenError::NotAUser(km.clone()))?;
    if role != Role::KM {
        return Err(TokenError::RoleForbidden { user: km.clone(), role });
    }
    let key = st.key_of(h)?;
    let own_candidate = &key.owner == km && is_candidate(st, h)?;
    if own_candidate && !CANDIDATE_ROLES.contains(&a) {
        return Ok(PolicyVerdict::deny(
            PolicyRule::R3,
            format!("{} ({h}) is a candidate key and may not get {a}", key.id),
        ));
    }
    Ok(PolicyVerdict::allow())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: PolicyRule,
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VIOLATION {} {} {}", self.rule, self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LintReport {
    pub violations: Vec<Violation>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn rules(&self) -> Vec<PolicyRule> {
        self.violations.iter().map(|v| v.rule).collect()
    }

    fn push(&mut self, rule: PolicyRule, subject: impl fmt::Display, message: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            subject: subject.to_string(),
            message: message.into(),
        });
    }
}

/// One line per violation, in the order found.
impl fmt::Display for LintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Static check of a scenario against the five rules and the ownership model.
pub fn lint(scn: &Scenario) -> LintReport {
    let mut report = LintReport::default();
    let role_of = |u: &UserId| scn.user(u).map(|d| d.role);

    for key in &scn.keys {
        let origin = match &key.source {
            KeySource::Fresh(t) => Origin::Fresh(*t),
            KeySource::Imported(_) => Origin::Imported,
        };
        let changes: Vec<_> = scn.changes.iter().filter(|c| c.key == key.id).collect();

        if key.sensitive && matches!(origin, Origin::Fresh(Template::Generic) | Origin::Imported) {
            report.push(
                PolicyRule::R1,
                &key.id,
                "sensitive key is neither wrap_with_trusted nor non-extractable",
            );
        }

        let trusted = key.trusted
            || changes
                .iter()
                .any(|c| c.set && c.attr == Attribute::Trusted && role_of(&c.by) == Some(Role::SO));
        let failure = candidacy_failure(role_of(&key.owner), origin);
        if trusted {
            if let Some((rule, why)) = failure {
                report.push(rule, &key.id, format!("trusted {why}"));
            }
        }

        if trusted || failure.is_none() {
            let mut extra = key.attrs;
            for c in &changes {
                let by_km_owner = c.by == key.owner && role_of(&c.by) == Some(Role::KM);
                if c.set && c.attr != Attribute::Trusted && (trusted || by_km_owner) {
                    extra = extra.with(c.attr);
                }
            }
            let extra = extra.difference(candidate_roles());
            if !extra.is_empty() {
                report.push(
                    PolicyRule::R3,
                    &key.id,
                    format!("candidate or trusted key gets roles beyond wrap/unwrap: {extra}"),
                );
            }
        }

        for c in &changes {
            let ok = if c.attr == Attribute::Trusted {
                role_of(&c.by) == Some(Role::SO)
            } else {
                c.by == key.owner
            };
            if !ok {
                let verb = if c.set { "sets" } else { "unsets" };
                report.push(
                    PolicyRule::Ownership,
                    &key.id,
                    format!("{} {verb} {} without authority", c.by, c.attr),
                );
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;
    use crate::terms::Term;
    use crate::token::{KeyId, Mode};

    fn u(s: &str) -> UserId {
        UserId::new(s)
    }

    fn state() -> TokenState {
        [("NU1", Role::NU), ("KM1", Role::KM), ("SO1", Role::SO)]
            .into_iter()
            .fold(TokenState::new(Mode::Full, true), |st, (id, r)| {
                st.new_user(&u(id), r).unwrap()
            })
    }

    #[test]
    fn candidates_are_fresh_ne_km_keys() {
        let st = state();
        let (st, km_ne) = st.create_key(&u("KM1"), Template::NonExtractable, true).unwrap();
        let (st, nu_ne) = st.create_key(&u("NU1"), Template::NonExtractable, true).unwrap();
        let (st, km_imp) = st.import_key(&u("KM1"), &Term::name("x")).unwrap();
        let (st, km_wwt) = st.create_key(&u("KM1"), Template::Wwt, true).unwrap();
        assert!(is_candidate(&st, km_ne).unwrap());
        assert!(!is_candidate(&st, nu_ne).unwrap());
        assert!(!is_candidate(&st, km_imp).unwrap());
        assert!(!is_candidate(&st, km_wwt).unwrap());
        assert_eq!(is_candidate(&st, HandleId(99)), Err(TokenError::UnknownHandle(HandleId(99))));
    }

    #[test]
    fn set_trusted_verdicts() {
        let st = state();
        let (st, cand) = st.create_key(&u("KM1"), Template::NonExtractable, true).unwrap();
        let (st, generic) = st.create_key(&u("NU1"), Template::Generic, false).unwrap();
        let (st, imported) = st.import_key(&u("KM1"), &Term::name("x")).unwrap();
        let (st, wwt) = st.create_key(&u("KM1"), Template::Wwt, false).unwrap();
        let so = u("SO1");
        assert!(check_set_trusted(&st, &so, cand).unwrap().allowed);
        let rule = |h| check_set_trusted(&st, &so, h).unwrap().rule;
        assert_eq!(rule(generic), Some(PolicyRule::R2));
        assert_eq!(rule(imported), Some(PolicyRule::R5));
        assert_eq!(rule(wwt), Some(PolicyRule::R4));
        assert!(matches!(
            check_set_trusted(&st, &u("KM1"), cand),
            Err(TokenError::RoleForbidden { .. })
        ));
    }

    #[test]
    fn km_changes_on_candidates_limited_to_wrap_unwrap() {
        let st = state();
        let (st, cand) = st.create_key(&u("KM1"), Template::NonExtractable, true).unwrap();
        let (st, generic) = st.create_key(&u("KM1"), Template::Generic, false).unwrap();
        let km = u("KM1");
        assert!(check_km_attr_change(&st, &km, cand, Attribute::Wrap).unwrap().allowed);
        assert!(check_km_attr_change(&st, &km, cand, Attribute::Unwrap).unwrap().allowed);
        let denied = check_km_attr_change(&st, &km, cand, Attribute::Decrypt).unwrap();
        assert_eq!(denied.rule, Some(PolicyRule::R3));
        assert!(!denied.allowed);
        assert!(check_km_attr_change(&st, &km, generic, Attribute::Encrypt).unwrap().allowed);
        // the guard is wired into the token
        assert!(matches!(
            st.set_attribute(&km, cand, Attribute::Encrypt),
            Err(TokenError::PolicyViolation(_))
        ));
        assert!(st.set_attribute(&km, generic, Attribute::Encrypt).is_ok());
        assert!(matches!(
            check_km_attr_change(&st, &u("NU1"), generic, Attribute::Encrypt),
            Err(TokenError::RoleForbidden { .. })
        ));
    }

    fn lint_text(text: &str) -> LintReport {
        lint(&parse_scenario(text).unwrap())
    }

    #[test]
    fn lint_flags_each_rule() {
        let head = "user SO1 SO\nuser KM1 KM\nuser NU1 NU compromised\n";
        let r1 = lint_text(&format!("{head}key k1 owner=NU1 template=generic sensitive\n"));
        assert_eq!(r1.rules(), vec![PolicyRule::R1]);
        let r2 = lint_text(&format!("{head}key k1 owner=NU1 template=ne attrs=wrap trusted\n"));
        assert_eq!(r2.rules(), vec![PolicyRule::R2]);
        let r3 = lint_text(&format!("{head}key k1 owner=KM1 template=ne attrs=wrap,decrypt trusted\n"));
        assert_eq!(r3.rules(), vec![PolicyRule::R3]);
        let r4 = lint_text(&format!("{head}key k1 owner=KM1 template=wwt attrs=wrap trusted\n"));
        assert_eq!(r4.rules(), vec![PolicyRule::R4]);
        let r5 = lint_text(&format!("{head}importkey k1 owner=KM1 value=name:x attrs=wrap trusted\n"));
        assert_eq!(r5.rules(), vec![PolicyRule::R5]);
        let own = lint_text(&format!(
            "{head}key k1 owner=KM1 template=generic\nsetattr k1 decrypt by=NU1\n"
        ));
        assert_eq!(own.rules(), vec![PolicyRule::Ownership]);
        assert_eq!(
            own.to_string(),
            "VIOLATION OWNERSHIP k1 NU1 sets decrypt without authority\n"
        );
    }

    #[test]
    fn lint_accepts_clean_configuration() {
        let report = lint_text(
            "user SO1 SO\nuser KM1 KM\nuser NU1 NU compromised\n\
             key kT owner=KM1 template=ne attrs=wrap,unwrap trusted\n\
             key kW owner=NU1 template=wwt sensitive\n\
             key kN owner=NU1 template=ne sensitive\n\
             key kG owner=NU1 template=generic attrs=encrypt,decrypt\n",
        );
        assert!(report.is_clean(), "{report}");
        assert_eq!(report.to_string(), "");
    }

    #[test]
    fn km_setattr_on_candidate_is_r3() {
        let report = lint_text(
            "user SO1 SO\nuser KM1 KM\nkey kT owner=KM1 template=ne\nsetattr kT encrypt by=KM1\n",
        );
        assert_eq!(report.rules(), vec![PolicyRule::R3]);
        assert_eq!(report.violations[0].subject, KeyId::new("kT").to_string());
    }
}
