//! Scenario files, the scripted setup they describe, and the trace format.
//!
//! A scenario is line-oriented, one directive per line, `#` starts a comment:
//!
//! ```text
//! user <id> <NU|KM|SO> [compromised]
//! key <id> owner=<user> template=<generic|wwt|ne> [attrs=<a1,a2,...>] [trusted] [sensitive]
//! importkey <id> owner=<user> value=<term> [attrs=<a1,...>] [trusted] [sensitive]
//! setattr <key> <attr> by=<user>
//! unsetattr <key> <attr> by=<user>
//! know <term>
//! policy <on|off>
//! mode <full|paper>
//! depth <n>
//! conflicts <forbid|allow>
//! ```
//!
//! Keys, users and attribute changes must be declared before they are
//! referenced. `attrs=` is shorthand for the owner setting each attribute
//! right after creation, and `trusted` for the first SO granting it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::policy::PolicyVerdict;
use crate::search::{goal_keys, Action, Binding, Op, SearchConfig, TermArg, TraceStep};
use crate::terms::{is_identifier, KnowledgeBase, Term};
use crate::token::{
    AttrSet, Attribute, HandleId, KeyId, Mode, Role, Template, TokenError, TokenResult, TokenState, UserId,
};

pub const DEFAULT_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn perr<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserDecl {
    pub id: UserId,
    pub role: Role,
    pub compromised: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySource {
    Fresh(Template),
    Imported(Term),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDecl {
    pub id: KeyId,
    pub owner: UserId,
    pub source: KeySource,
    pub attrs: AttrSet,
    pub trusted: bool,
    pub sensitive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttrChange {
    pub key: KeyId,
    pub attr: Attribute,
    pub by: UserId,
    pub set: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub users: Vec<UserDecl>,
    pub keys: Vec<KeyDecl>,
    pub changes: Vec<AttrChange>,
    pub knowledge: Vec<Term>,
    pub policy_on: bool,
    pub mode: Mode,
    pub depth: usize,
    /// Reject handles combining wrap with decrypt or unwrap with encrypt.
    pub forbid_conflicts: bool,
}

impl Scenario {
    pub fn user(&self, id: &UserId) -> Option<&UserDecl> {
        self.users.iter().find(|u| &u.id == id)
    }

    pub fn key(&self, id: &KeyId) -> Option<&KeyDecl> {
        self.keys.iter().find(|k| &k.id == id)
    }

    pub fn attackers(&self) -> BTreeSet<UserId> {
        self.users.iter().filter(|u| u.compromised).map(|u| u.id.clone()).collect()
    }
}

impl FromStr for Scenario {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_scenario(s)
    }
}

/// Canonical text: users, keys, attribute changes, knowledge, then settings.
impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for u in &self.users {
            write!(f, "user {} {}", u.id, u.role)?;
            if u.compromised {
                f.write_str(" compromised")?;
            }
            writeln!(f)?;
        }
        for k in &self.keys {
            match &k.source {
                KeySource::Fresh(t) => write!(f, "key {} owner={} template={t}", k.id, k.owner)?,
                KeySource::Imported(v) => write!(f, "importkey {} owner={} value={v}", k.id, k.owner)?,
            }
            if !k.attrs.is_empty() {
                write!(f, " attrs={}", k.attrs)?;
            }
            if k.trusted {
                f.write_str(" trusted")?;
            }
            if k.sensitive {
                f.write_str(" sensitive")?;
            }
            writeln!(f)?;
        }
        for c in &self.changes {
            let verb = if c.set { "setattr" } else { "unsetattr" };
            writeln!(f, "{verb} {} {} by={}", c.key, c.attr, c.by)?;
        }
        for t in &self.knowledge {
            writeln!(f, "know {t}")?;
        }
        writeln!(f, "policy {}", if self.policy_on { "on" } else { "off" })?;
        writeln!(f, "mode {}", self.mode)?;
        writeln!(f, "depth {}", self.depth)?;
        if self.forbid_conflicts {
            writeln!(f, "conflicts forbid")?;
        }
        Ok(())
    }
}

/// Splits `key=value` options and bare flags, rejecting repeats.
struct Options<'a> {
    line: usize,
    values: BTreeMap<&'a str, &'a str>,
    flags: BTreeSet<&'a str>,
}

impl<'a> Options<'a> {
    fn parse(line: usize, tokens: &[&'a str], allowed_keys: &[&str], allowed_flags: &[&str]) -> Result<Self, ParseError> {
        let mut opts = Options {
            line,
            values: BTreeMap::new(),
            flags: BTreeSet::new(),
        };
        for tok in tokens {
            if let Some((k, v)) = tok.split_once('=') {
                if !allowed_keys.contains(&k) {
                    return perr(line, format!("unknown option `{k}`"));
                }
                if opts.values.insert(k, v).is_some() {
                    return perr(line, format!("option `{k}` given twice"));
                }
            } else {
                if !allowed_flags.contains(tok) {
                    return perr(line, format!("unknown flag `{tok}`"));
                }
                if !opts.flags.insert(tok) {
                    return perr(line, format!("flag `{tok}` given twice"));
                }
            }
        }
        Ok(opts)
    }

    fn required(&self, key: &str) -> Result<&'a str, ParseError> {
        match self.values.get(key) {
            Some(v) => Ok(v),
            None => perr(self.line, format!("missing `{key}=`")),
        }
    }

    fn flag(&self, name: &str) -> bool {
        self.flags.contains(name)
    }
}

fn parse_id(line: usize, what: &str, s: Option<&&str>) -> Result<String, ParseError> {
    match s {
        Some(s) if is_identifier(s) => Ok(s.to_string()),
        Some(s) => perr(line, format!("bad {what} `{s}`")),
        None => perr(line, format!("missing {what}")),
    }
}

fn parse_term(line: usize, s: &str) -> Result<Term, ParseError> {
    s.parse::<Term>()
        .or_else(|e| perr(line, format!("bad term `{s}`: {e}")))
}

fn parse_key_attrs(line: usize, s: &str) -> Result<AttrSet, ParseError> {
    let set: AttrSet = s.parse().or_else(|e: String| perr(line, e))?;
    for a in [Attribute::Extractable, Attribute::Trusted] {
        if set.contains(a) {
            return perr(line, format!("`{a}` cannot be listed in attrs="));
        }
    }
    Ok(set)
}

/// Parses scenario text. Errors carry the 1-based line number.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut scn = Scenario {
        users: Vec::new(),
        keys: Vec::new(),
        changes: Vec::new(),
        knowledge: Vec::new(),
        policy_on: false,
        mode: Mode::Full,
        depth: DEFAULT_DEPTH,
        forbid_conflicts: false,
    };
    let mut settings_seen = BTreeSet::new();
    let mut know_lines = Vec::new();
    let mut trusted_line = None;
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some((&directive, rest)) = tokens.split_first() else {
            continue;
        };
        match directive {
            "user" => {
                let id = UserId::new(parse_id(line, "user id", rest.first())?);
                let role: Role = match rest.get(1) {
                    Some(r) => r.parse().or_else(|e: String| perr(line, e))?,
                    None => return perr(line, "missing role"),
                };
                let compromised = match rest.get(2..) {
                    Some([]) | None => false,
                    Some(["compromised"]) => true,
                    Some(other) => return perr(line, format!("unexpected `{}`", other.join(" "))),
                };
                if scn.user(&id).is_some() {
                    return perr(line, format!("duplicate user `{id}`"));
                }
                scn.users.push(UserDecl { id, role, compromised });
            }
            "key" | "importkey" => {
                let id = KeyId::new(parse_id(line, "key id", rest.first())?);
                if scn.key(&id).is_some() {
                    return perr(line, format!("duplicate key `{id}`"));
                }
                let fresh = directive == "key";
                let keys: &[&str] = if fresh {
                    &["owner", "template", "attrs"]
                } else {
                    &["owner", "value", "attrs"]
                };
                let opts = Options::parse(line, &rest[1..], keys, &["trusted", "sensitive"])?;
                let owner = UserId::new(opts.required("owner")?);
                match scn.user(&owner).map(|u| u.role) {
                    None => return perr(line, format!("undeclared owner `{owner}`")),
                    Some(Role::SO) => return perr(line, format!("security officer `{owner}` cannot own keys")),
                    Some(_) => {}
                }
                let source = if fresh {
                    let t = opts.required("template")?;
                    KeySource::Fresh(t.parse().or_else(|e: String| perr(line, e))?)
                } else {
                    let value = parse_term(line, opts.required("value")?)?;
                    if value.as_name().is_none() {
                        return perr(line, format!("imported key value `{value}` is not a name"));
                    }
                    KeySource::Imported(value)
                };
                let attrs = match opts.values.get("attrs") {
                    Some(s) => parse_key_attrs(line, s)?,
                    None => AttrSet::EMPTY,
                };
                let trusted = opts.flag("trusted");
                if trusted && trusted_line.is_none() {
                    trusted_line = Some(line);
                }
                scn.keys.push(KeyDecl {
                    id,
                    owner,
                    source,
                    attrs,
                    trusted,
                    sensitive: opts.flag("sensitive"),
                });
            }
            "setattr" | "unsetattr" => {
                let key = KeyId::new(parse_id(line, "key id", rest.first())?);
                if scn.key(&key).is_none() {
                    return perr(line, format!("undeclared key `{key}`"));
                }
                let attr: Attribute = match rest.get(1) {
                    Some(a) => a.parse().or_else(|e: String| perr(line, e))?,
                    None => return perr(line, "missing attribute"),
                };
                let opts = Options::parse(line, rest.get(2..).unwrap_or(&[]), &["by"], &[])?;
                let by = UserId::new(opts.required("by")?);
                if scn.user(&by).is_none() {
                    return perr(line, format!("undeclared user `{by}`"));
                }
                scn.changes.push(AttrChange {
                    key,
                    attr,
                    by,
                    set: directive == "setattr",
                });
            }
            "know" => {
                let [term] = rest else {
                    return perr(line, "`know` takes exactly one term");
                };
                scn.knowledge.push(parse_term(line, term)?);
                know_lines.push(line);
            }
            "policy" | "mode" | "depth" | "conflicts" => {
                if !settings_seen.insert(directive) {
                    return perr(line, format!("`{directive}` given twice"));
                }
                let [value] = rest else {
                    return perr(line, format!("`{directive}` takes exactly one value"));
                };
                match (directive, *value) {
                    ("policy", "on") => scn.policy_on = true,
                    ("policy", "off") => scn.policy_on = false,
                    ("mode", m) => scn.mode = m.parse().or_else(|e: String| perr(line, e))?,
                    ("depth", d) => {
                        scn.depth = d
                            .parse()
                            .or_else(|_| perr(line, format!("bad depth `{d}`")))?
                    }
                    ("conflicts", "forbid") => scn.forbid_conflicts = true,
                    ("conflicts", "allow") => scn.forbid_conflicts = false,
                    (_, v) => return perr(line, format!("bad value `{v}` for `{directive}`")),
                }
            }
            other => return perr(line, format!("unknown directive `{other}`")),
        }
    }

    if scn.users.is_empty() {
        return perr(last_line.max(1), "scenario declares no users");
    }
    if let Some(line) = trusted_line {
        if !scn.users.iter().any(|u| u.role == Role::SO) {
            return perr(line, "trusted keys need a security officer");
        }
    }
    for (term, line) in scn.knowledge.iter().zip(know_lines) {
        for key in &scn.keys {
            if matches!(key.source, KeySource::Fresh(_)) && term.mentions_name(key.id.as_str()) {
                return perr(line, format!("attacker knowledge mentions generated key `{}`", key.id));
            }
        }
    }
    Ok(scn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetupMode {
    /// Any failing setup step is an error.
    Strict,
    /// Failing attribute steps are skipped and recorded.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedStep {
    pub step: String,
    pub error: TokenError,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SetupError {
    #[error("setup step `{step}` violates the policy: {verdict}")]
    PolicyViolation { step: String, verdict: PolicyVerdict },
    #[error("setup step `{step}` failed: {source}")]
    GuardFailed { step: String, source: TokenError },
}

#[derive(Debug, Clone)]
pub struct Setup {
    pub state: TokenState,
    pub knowledge: KnowledgeBase,
    pub config: SearchConfig,
    /// The handle each scenario key received.
    pub handles: BTreeMap<KeyId, HandleId>,
    pub skipped: Vec<SkippedStep>,
}

/// Runs the scripted setup; any step the token rejects is an error.
pub fn build_initial_state(scn: &Scenario) -> Result<Setup, SetupError> {
    build_setup(scn, SetupMode::Strict)
}

pub fn build_setup(scn: &Scenario, mode: SetupMode) -> Result<Setup, SetupError> {
    let mut reserved = BTreeSet::new();
    let sources = scn.knowledge.iter().chain(scn.keys.iter().filter_map(|k| match &k.source {
        KeySource::Imported(v) => Some(v),
        KeySource::Fresh(_) => None,
    }));
    for t in sources {
        t.for_each_name(&mut |n| {
            reserved.insert(n.to_string());
        });
    }
    let mut st = TokenState::new(scn.mode, scn.policy_on)
        .with_conflict_guard(scn.forbid_conflicts)
        .with_reserved_names(reserved.iter().map(String::as_str));

    let fatal = |step: String, e: TokenError| match e {
        TokenError::PolicyViolation(verdict) => SetupError::PolicyViolation { step, verdict },
        source => SetupError::GuardFailed { step, source },
    };
    let mut skipped = Vec::new();
    let mut attempt = |st: TokenState, step: String, result: TokenResult<TokenState>| match result {
        Ok(next) => Ok(next),
        Err(error) if mode == SetupMode::Lenient => {
            skipped.push(SkippedStep { step, error });
            Ok(st)
        }
        Err(e) => Err(fatal(step, e)),
    };

    for u in &scn.users {
        st = st
            .new_user(&u.id, u.role)
            .map_err(|e| fatal(format!("user {}", u.id), e))?;
    }
    let so = scn.users.iter().find(|u| u.role == Role::SO).map(|u| u.id.clone());
    let mut handles = BTreeMap::new();
    for key in &scn.keys {
        let created = match &key.source {
            KeySource::Fresh(t) => st.create_labeled_key(&key.owner, &key.id, *t, key.sensitive),
            KeySource::Imported(v) => st.import_labeled_key(&key.owner, &key.id, v, key.sensitive),
        };
        let (next, h) = created.map_err(|e| fatal(format!("key {}", key.id), e))?;
        st = next;
        handles.insert(key.id.clone(), h);
        for a in key.attrs.iter() {
            let step = format!("setattr {} {a} by={}", key.id, key.owner);
            let result = st.set_attribute(&key.owner, h, a);
            st = attempt(st, step, result)?;
        }
        if key.trusted {
            let so = so.as_ref().expect("parser requires an SO for trusted keys");
            let step = format!("setattr {} trusted by={so}", key.id);
            let result = st.set_attribute(so, h, Attribute::Trusted);
            st = attempt(st, step, result)?;
        }
    }
    for c in &scn.changes {
        let verb = if c.set { "setattr" } else { "unsetattr" };
        let step = format!("{verb} {} {} by={}", c.key, c.attr, c.by);
        let h = handles[&c.key];
        let result = if c.set {
            st.set_attribute(&c.by, h, c.attr)
        } else {
            st.unset_attribute(&c.by, h, c.attr)
        };
        st = attempt(st, step, result)?;
    }
    let st = st.seal();

    let knowledge: KnowledgeBase = scn.knowledge.iter().cloned().collect::<KnowledgeBase>().closed();
    let config = SearchConfig::new(scn.depth, scn.attackers(), goal_keys(scn, &st));
    Ok(Setup {
        state: st,
        knowledge,
        config,
        handles,
        skipped,
    })
}

pub const TRACE_HEADER: &str = "trace v1";

/// `trace v1` followed by one line per step.
pub fn format_trace(trace: &[TraceStep]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for step in trace {
        let result = step.result.map_or_else(|| "-".to_string(), |b| b.to_string());
        out.push_str(&format!("{}. {} -> {result}\n", step.index, step.action));
    }
    out
}

fn parse_counter(s: &str, prefix: char) -> Option<u32> {
    let digits = s.strip_prefix(prefix)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&n| n >= 1)
}

fn parse_term_arg(line: usize, s: &str) -> Result<TermArg, ParseError> {
    match parse_counter(s, 'c') {
        Some(n) => Ok(TermArg::Ref(n)),
        None => parse_term(line, s).map(TermArg::Literal),
    }
}

/// What kind of binding each operation produces.
#[derive(PartialEq)]
enum Produces {
    Output,
    Handle,
    Nothing,
}

fn produces<T>(op: &Op<T>) -> Produces {
    match op {
        Op::Wrap { .. } | Op::Encrypt { .. } | Op::Decrypt { .. } => Produces::Output,
        Op::Unwrap { .. } | Op::Import { .. } | Op::CreateKey { .. } => Produces::Handle,
        Op::SetAttribute { .. } | Op::UnsetAttribute { .. } | Op::EmitLeaks => Produces::Nothing,
    }
}

fn parse_step(line: usize, text: &str) -> Result<TraceStep, ParseError> {
    let (body, result) = match text.rsplit_once(" -> ") {
        Some(parts) => parts,
        None => return perr(line, "missing ` -> <binding>`"),
    };
    let mut tokens = body.split(' ');
    let index = tokens
        .next()
        .and_then(|t| t.strip_suffix('.'))
        .and_then(|n| n.parse::<usize>().ok())
        .map_or_else(|| perr(line, "missing step index"), Ok)?;
    let tag = tokens.next().map_or_else(|| perr(line, "missing operation"), Ok)?;
    let args: Vec<&str> = tokens.collect();

    let mut values = Vec::with_capacity(args.len());
    for arg in &args {
        match arg.split_once('=') {
            Some(kv) => values.push(kv),
            None => return perr(line, format!("bad argument `{arg}`")),
        }
    }
    let expected: &[&str] = match tag {
        "create_key" => &["actor", "template"],
        "decrypt" => &["actor", "ct", "key"],
        "emit_leaks" => &["actor"],
        "encrypt" => &["actor", "data", "key"],
        "import" => &["actor", "value"],
        "set_attribute" | "unset_attribute" => &["actor", "handle", "attr"],
        "unwrap" => &["actor", "ct", "wrapper", "template"],
        "wrap" => &["actor", "target", "wrapper"],
        other => return perr(line, format!("unknown operation `{other}`")),
    };
    let keys: Vec<&str> = values.iter().map(|(k, _)| *k).collect();
    if keys != expected {
        return perr(line, format!("`{tag}` expects arguments {}", expected.join(" ")));
    }
    let v = |i: usize| values[i].1;
    let handle = |i: usize| v(i).parse::<HandleId>().or_else(|e| perr(line, e));
    let term = |i: usize| parse_term_arg(line, v(i));

    let actor = v(0);
    if !is_identifier(actor) {
        return perr(line, format!("bad actor `{actor}`"));
    }
    let op = match tag {
        "create_key" => Op::CreateKey {
            template: v(1).parse().or_else(|e: String| perr(line, e))?,
        },
        "decrypt" => Op::Decrypt {
            ct: term(1)?,
            key: handle(2)?,
        },
        "emit_leaks" => Op::EmitLeaks,
        "encrypt" => Op::Encrypt {
            data: term(1)?,
            key: handle(2)?,
        },
        "import" => Op::Import { value: term(1)? },
        "set_attribute" | "unset_attribute" => {
            let handle = handle(1)?;
            let attr = v(2).parse().or_else(|e: String| perr(line, e))?;
            if tag == "set_attribute" {
                Op::SetAttribute { handle, attr }
            } else {
                Op::UnsetAttribute { handle, attr }
            }
        }
        "unwrap" => Op::Unwrap {
            ct: term(1)?,
            wrapper: handle(2)?,
            template: v(3).parse().or_else(|e: String| perr(line, e))?,
        },
        _ => Op::Wrap {
            target: handle(1)?,
            wrapper: handle(2)?,
        },
    };

    let result = match (produces(&op), result) {
        (Produces::Nothing, "-") => None,
        (Produces::Output, r) if parse_counter(r, 'c').is_some() => {
            Some(Binding::Output(parse_counter(r, 'c').unwrap()))
        }
        (Produces::Handle, r) if parse_counter(r, 'h').is_some() => {
            Some(Binding::Handle(HandleId(parse_counter(r, 'h').unwrap())))
        }
        (_, r) => return perr(line, format!("`{tag}` cannot bind `{r}`")),
    };
    Ok(TraceStep {
        index,
        action: Action::new(UserId::new(actor), op),
        result,
    })
}

/// Parses a trace file. Step indices must run 1, 2, 3, ... in order.
pub fn parse_trace(text: &str) -> Result<Vec<TraceStep>, ParseError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, TRACE_HEADER)) => {}
        Some((line, other)) => return perr(line, format!("expected `{TRACE_HEADER}`, found `{other}`")),
        None => return perr(1, format!("expected `{TRACE_HEADER}`")),
    }
    let mut steps = Vec::new();
    for (line, text) in lines {
        let step = parse_step(line, text)?;
        if step.index != steps.len() + 1 {
            return perr(
                line,
                format!("step {} out of order, expected {}", step.index, steps.len() + 1),
            );
        }
        steps.push(step);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WRAP_DECRYPT: &str = "user U1 NU compromised\n\
        key k1 owner=U1 template=generic sensitive\n\
        key k2 owner=U1 template=generic attrs=wrap,decrypt\n\
        policy off\nmode full\ndepth 2\n";

    #[test]
    fn parses_wrap_decrypt() {
        let scn = parse_scenario(WRAP_DECRYPT).unwrap();
        assert_eq!(scn.users.len(), 1);
        assert!(scn.users[0].compromised);
        assert_eq!(scn.keys.len(), 2);
        assert_eq!(scn.keys[1].attrs, AttrSet::of(&[Attribute::Wrap, Attribute::Decrypt]));
        assert!(scn.keys[0].sensitive);
        assert_eq!(scn.depth, 2);
        assert_eq!(scn.to_string(), WRAP_DECRYPT);
    }

    #[test]
    fn defaults_and_comments() {
        let scn = parse_scenario("# header\nuser U1 NU   # trailing\n\n").unwrap();
        assert!(!scn.policy_on);
        assert_eq!(scn.mode, Mode::Full);
        assert_eq!(scn.depth, DEFAULT_DEPTH);
        assert!(!scn.forbid_conflicts);
    }

    fn err_line(text: &str) -> usize {
        parse_scenario(text).unwrap_err().line
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_scenario("").is_err());
        assert!(parse_scenario("policy on\n").is_err());
        assert_eq!(err_line("user U1 NU\nkey k1 owner=U2 template=generic\n"), 2);
        assert_eq!(err_line("user U1 NU\nuser U1 KM\n"), 2);
        assert_eq!(err_line("user U1 NU\nfrobnicate\n"), 2);
        assert_eq!(err_line("user U1 NU\nkey k1 owner=U1\n"), 2);
        assert_eq!(err_line("user U1 NU\nkey k1 owner=U1 template=generic attrs=trusted\n"), 2);
        assert_eq!(err_line("user U1 NU\nkey k1 owner=U1 template=generic trusted\n"), 2);
        assert_eq!(err_line("user S SO\nkey k1 owner=S template=generic\n"), 2);
        assert_eq!(err_line("user U1 NU\nsetattr k1 wrap by=U1\n"), 2);
        assert_eq!(err_line("user U1 NU\ndepth 2\ndepth 3\n"), 3);
        assert_eq!(err_line("user U1 NU\nknow senc(name:a\n"), 2);
        assert_eq!(err_line("user U1 NU\nimportkey k1 owner=U1 value=h(name:a)\n"), 2);
        assert_eq!(
            err_line("user U1 NU\nkey k1 owner=U1 template=generic\nknow h(name:k1)\n"),
            3
        );
    }

    #[test]
    fn scenario_round_trip() {
        let text = "user SO1 SO\nuser KM1 KM\nuser U1 NU compromised\n\
            key kT owner=KM1 template=ne attrs=wrap,unwrap trusted\n\
            importkey kI owner=U1 value=name:y attrs=encrypt sensitive\n\
            setattr kI decrypt by=U1\nunsetattr kI extractable by=U1\n\
            know name:x\npolicy on\nmode paper\ndepth 6\nconflicts forbid\n";
        let scn = parse_scenario(text).unwrap();
        assert_eq!(scn.to_string(), text);
        assert_eq!(parse_scenario(&scn.to_string()).unwrap(), scn);
    }

    #[test]
    fn setup_runs_declarations_in_order() {
        let scn = parse_scenario(
            "user SO1 SO\nuser KM1 KM\nuser U1 NU compromised\n\
             key kT owner=KM1 template=ne attrs=wrap,unwrap trusted\n\
             key kW owner=U1 template=wwt sensitive\nknow name:kA\npolicy on\n",
        )
        .unwrap();
        let setup = build_initial_state(&scn).unwrap();
        let kt = setup.handles[&KeyId::new("kT")];
        assert_eq!(kt, HandleId(1));
        assert_eq!(
            setup.state.attrs(kt).unwrap(),
            AttrSet::of(&[Attribute::Wrap, Attribute::Unwrap, Attribute::Trusted])
        );
        assert!(crate::policy::is_candidate(&setup.state, kt).unwrap());
        assert!(setup.knowledge.contains(&Term::name("kA")));
        assert_eq!(setup.config.attackers, BTreeSet::from([UserId::new("U1")]));
        assert_eq!(setup.config.max_depth, DEFAULT_DEPTH);
        assert!(setup.skipped.is_empty());
    }

    #[test]
    fn strict_setup_reports_policy_violation() {
        let scn = parse_scenario(
            "user SO1 SO\nuser U1 NU\nkey k1 owner=U1 template=generic attrs=wrap trusted\npolicy on\n",
        )
        .unwrap();
        match build_initial_state(&scn) {
            Err(SetupError::PolicyViolation { verdict, .. }) => {
                assert_eq!(verdict.rule, Some(crate::policy::PolicyRule::R2))
            }
            other => panic!("unexpected {other:?}"),
        }
        let lenient = build_setup(&scn, SetupMode::Lenient).unwrap();
        assert_eq!(lenient.skipped.len(), 1);
        assert!(!lenient.state.attrs(HandleId(1)).unwrap().contains(Attribute::Trusted));
    }

    const WRAP_DECRYPT_TRACE: &str = "trace v1\n\
        1. wrap actor=U1 target=h1 wrapper=h2 -> c1\n\
        2. decrypt actor=U1 ct=c1 key=h2 -> c2\n";

    #[test]
    fn trace_round_trip() {
        let trace = parse_trace(WRAP_DECRYPT_TRACE).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[0].action.op.tag(), "wrap");
        assert_eq!(trace[1].action.op.tag(), "decrypt");
        assert_eq!(format_trace(&trace), WRAP_DECRYPT_TRACE);

        let all = "trace v1\n\
            1. create_key actor=U1 template=ne -> h3\n\
            2. import actor=U1 value=name:kA -> h4\n\
            3. set_attribute actor=U1 handle=h4 attr=wrap -> -\n\
            4. unset_attribute actor=U1 handle=h4 attr=extractable -> -\n\
            5. encrypt actor=U1 data=h(name:kA) key=h2 -> c1\n\
            6. unwrap actor=U1 ct=c1 wrapper=h2 template=wrap,decrypt -> h5\n\
            7. unwrap actor=U1 ct=senc(name:kA,h(name:kA)) wrapper=h4 template=- -> h6\n\
            8. emit_leaks actor=U1 -> -\n";
        assert_eq!(format_trace(&parse_trace(all).unwrap()), all);
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(format_trace(&[]), "trace v1\n");
        assert!(parse_trace("trace v1\n").unwrap().is_empty());
    }

    #[test]
    fn trace_errors() {
        assert!(parse_trace("").is_err());
        assert!(parse_trace("trace v2\n").is_err());
        let swapped = "trace v1\n2. wrap actor=U1 target=h1 wrapper=h2 -> c1\n\
            1. decrypt actor=U1 ct=c1 key=h2 -> c2\n";
        assert_eq!(parse_trace(swapped).unwrap_err().line, 2);
        assert!(parse_trace("trace v1\n1. wrap actor=U1 wrapper=h2 target=h1 -> c1\n").is_err());
        assert!(parse_trace("trace v1\n1. wrap actor=U1 target=h1 wrapper=h2 -> h3\n").is_err());
        assert!(parse_trace("trace v1\n1. fly actor=U1 -> -\n").is_err());
        assert!(parse_trace("trace v1\n1. wrap actor=U1 target=h1 wrapper=h2\n").is_err());
    }
}
