//! Symbolic messages and the Dolev-Yao deduction closure.
//!
//! A [`Term`] is an atomic name, a one-way hash, or a symmetric encryption.
//! Keys held by the token are always used through their hash: a ciphertext
//! produced under key `k` has the shape `senc(m,h(k))`. Knowing `h(k)` lets
//! the attacker decrypt, but never recovers `k` itself.
//!
//! The attacker's deduction rules are:
//!
//! * hashing: `t` known gives `h(t)`,
//! * encryption: `p` and `k` known give `senc(p,k)`,
//! * decryption: `senc(p,k)` and `k` known give `p`.
//!
//! Constructed terms are infinite, so a [`KnowledgeBase`] only materializes
//! what decryption yields and decides constructibility on demand.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Name(Arc<str>),
    Hash(Arc<Term>),
    Senc(Arc<Term>, Arc<Term>),
}

impl Term {
    /// Builds an atomic name. The label is not validated here; use
    /// [`is_identifier`] when it comes from user input.
    pub fn name(label: impl AsRef<str>) -> Term {
        Term::Name(Arc::from(label.as_ref()))
    }

    pub fn hash(inner: Term) -> Term {
        Term::Hash(Arc::new(inner))
    }

    pub fn senc(payload: Term, key: Term) -> Term {
        Term::Senc(Arc::new(payload), Arc::new(key))
    }

    pub fn as_name(&self) -> Option<&str> {
        match self {
            Term::Name(label) => Some(label),
            _ => None,
        }
    }

    /// Height of the term tree; names have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Term::Name(_) => 0,
            Term::Hash(inner) => 1 + inner.depth(),
            Term::Senc(p, k) => 1 + p.depth().max(k.depth()),
        }
    }

    /// Collects every subterm, including `self`.
    pub fn collect_subterms(&self, out: &mut BTreeSet<Term>) {
        if !out.insert(self.clone()) {
            return;
        }
        match self {
            Term::Name(_) => {}
            Term::Hash(inner) => inner.collect_subterms(out),
            Term::Senc(p, k) => {
                p.collect_subterms(out);
                k.collect_subterms(out);
            }
        }
    }

    pub fn mentions_name(&self, label: &str) -> bool {
        match self {
            Term::Name(l) => &**l == label,
            Term::Hash(inner) => inner.mentions_name(label),
            Term::Senc(p, k) => p.mentions_name(label) || k.mentions_name(label),
        }
    }

    /// Calls `f` on every name label in the term, left to right.
    pub fn for_each_name(&self, f: &mut impl FnMut(&str)) {
        match self {
            Term::Name(l) => f(l),
            Term::Hash(inner) => inner.for_each_name(f),
            Term::Senc(p, k) => {
                p.for_each_name(f);
                k.for_each_name(f);
            }
        }
    }

    /// Returns the term with names substituted by `rename` where it yields a
    /// replacement.
    pub fn rename(&self, rename: &impl Fn(&str) -> Option<Arc<str>>) -> Term {
        match self {
            Term::Name(l) => match rename(l) {
                Some(new) => Term::Name(new),
                None => self.clone(),
            },
            Term::Hash(inner) => Term::hash(inner.rename(rename)),
            Term::Senc(p, k) => Term::senc(p.rename(rename), k.rename(rename)),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Name(l) => write!(f, "name:{l}"),
            Term::Hash(inner) => write!(f, "h({inner})"),
            Term::Senc(p, k) => write!(f, "senc({p},{k})"),
        }
    }
}

/// True for `[A-Za-z0-9_]+`.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad term at offset {offset}: {message}")]
pub struct TermParseError {
    pub offset: usize,
    pub message: String,
}

impl FromStr for Term {
    type Err = TermParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parser = TermParser { src: s.as_bytes(), pos: 0 };
        let term = parser.term()?;
        if parser.pos != s.len() {
            return Err(parser.error("trailing input"));
        }
        Ok(term)
    }
}

struct TermParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl TermParser<'_> {
    fn error(&self, message: &str) -> TermParseError {
        TermParseError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.src[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), TermParseError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{lit}`")))
        }
    }

    fn term(&mut self) -> Result<Term, TermParseError> {
        if self.eat("name:") {
            let start = self.pos;
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.error("expected identifier"));
            }
            // identifier bytes are ASCII
            let label = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
            Ok(Term::name(label))
        } else if self.eat("h(") {
            let inner = self.term()?;
            self.expect(")")?;
            Ok(Term::hash(inner))
        } else if self.eat("senc(") {
            let payload = self.term()?;
            self.expect(",")?;
            let key = self.term()?;
            self.expect(")")?;
            Ok(Term::senc(payload, key))
        } else {
            Err(self.error("expected `name:`, `h(` or `senc(`"))
        }
    }
}

/// A finite set of terms known to the attacker.
///
/// Values produced by [`close_knowledge`] are closed under decryption; the
/// search keeps its knowledge closed at all times and uses
/// [`KnowledgeBase::constructible`] for cheap derivability checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct KnowledgeBase {
    terms: BTreeSet<Term>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn contains(&self, term: &Term) -> bool {
        self.terms.contains(term)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter()
    }

    pub fn terms(&self) -> &BTreeSet<Term> {
        &self.terms
    }

    pub fn is_subset(&self, other: &KnowledgeBase) -> bool {
        self.terms.is_subset(&other.terms)
    }

    /// Adds a term without closing. Returns whether it was new.
    pub fn insert(&mut self, term: Term) -> bool {
        self.terms.insert(term)
    }

    /// Adds terms and restores closure. Returns whether anything changed.
    pub fn learn(&mut self, terms: impl IntoIterator<Item = Term>) -> bool {
        let mut changed = false;
        for t in terms {
            changed |= self.terms.insert(t);
        }
        if changed {
            self.close_in_place();
        }
        changed
    }

    /// Whether `target` can be built from the materialized terms with the
    /// hashing and encryption rules. Only meaningful on a closed base.
    pub fn constructible(&self, target: &Term) -> bool {
        if self.terms.contains(target) {
            return true;
        }
        match target {
            Term::Name(_) => false,
            Term::Hash(inner) => self.constructible(inner),
            Term::Senc(p, k) => self.constructible(p) && self.constructible(k),
        }
    }

    /// Applies decryption to a fixpoint.
    pub fn close_in_place(&mut self) {
        loop {
            let opened: Vec<Term> = self
                .terms
                .iter()
                .filter_map(|t| match t {
                    Term::Senc(p, k) if !self.terms.contains(&**p) && self.constructible(k) => {
                        Some((**p).clone())
                    }
                    _ => None,
                })
                .collect();
            if opened.is_empty() {
                return;
            }
            self.terms.extend(opened);
        }
    }

    pub fn closed(&self) -> KnowledgeBase {
        let mut kb = self.clone();
        kb.close_in_place();
        kb
    }

    /// Derivability of `target` from this base (closing a copy first).
    pub fn derives(&self, target: &Term) -> bool {
        self.closed().constructible(target)
    }
}

impl FromIterator<Term> for KnowledgeBase {
    fn from_iter<I: IntoIterator<Item = Term>>(iter: I) -> Self {
        KnowledgeBase {
            terms: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a KnowledgeBase {
    type Item = &'a Term;
    type IntoIter = std::collections::btree_set::Iter<'a, Term>;

    fn into_iter(self) -> Self::IntoIter {
        self.terms.iter()
    }
}

/// Least fixpoint of the decryption rule over `kb`.
pub fn close_knowledge(kb: &KnowledgeBase) -> KnowledgeBase {
    kb.closed()
}

pub fn derives(kb: &KnowledgeBase, target: &Term) -> bool {
    kb.derives(target)
}
