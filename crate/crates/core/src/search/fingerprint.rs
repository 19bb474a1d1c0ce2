use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::terms::{KnowledgeBase, Term};
use crate::token::{Origin, Template, TokenState};

/// Truncated SHA-256 of a state's canonical form.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub [u8; 16]);

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

fn feed_str(h: &mut Sha256, s: &str) {
    h.update((s.len() as u32).to_le_bytes());
    h.update(s.as_bytes());
}

fn feed_term(h: &mut Sha256, t: &Term) {
    match t {
        Term::Name(n) => {
            h.update([0]);
            feed_str(h, n);
        }
        Term::Hash(inner) => {
            h.update([1]);
            feed_term(h, inner);
        }
        Term::Senc(p, k) => {
            h.update([2]);
            feed_term(h, p);
            feed_term(h, k);
        }
    }
}

fn origin_code(o: Origin) -> u8 {
    match o {
        Origin::Fresh(Template::Generic) => 0,
        Origin::Fresh(Template::Wwt) => 1,
        Origin::Fresh(Template::NonExtractable) => 2,
        Origin::Imported => 3,
        Origin::Unwrapped => 4,
    }
}

/// Digest of the token and knowledge up to the order of handles and the
/// choice of names for keys generated after setup.
///
/// Each handle is summarized by owner, origin, key value, attributes and
/// sensitivity; those summaries are sorted, so states reached by commuting
/// actions coincide. Values of keys generated after setup are renamed in
/// creation order. Counters and the device's output log do not contribute.
pub fn canonical_fingerprint(st: &TokenState, kb: &KnowledgeBase) -> Fingerprint {
    let generated: Vec<&Arc<str>> = st.keys()[st.sealed_keys()..]
        .iter()
        .filter(|k| matches!(k.origin, Origin::Fresh(_)))
        .filter_map(|k| match &k.value {
            Term::Name(n) => Some(n),
            _ => None,
        })
        .collect();
    let renames: BTreeMap<&str, Arc<str>> = generated
        .iter()
        .enumerate()
        .map(|(i, n)| (&***n, Arc::from(format!("#{i}"))))
        .collect();
    let rename = |t: &Term| -> Term {
        if renames.is_empty() {
            t.clone()
        } else {
            t.rename(&|n: &str| renames.get(n).cloned())
        }
    };

    let mut sigs: Vec<(&str, u8, Term, u8, bool)> = st
        .handles()
        .iter()
        .map(|rec| {
            let key = st.key(&rec.key).expect("handle references a live key");
            (
                key.owner.as_str(),
                origin_code(key.origin),
                rename(&key.value),
                rec.attrs.bits(),
                rec.sensitive,
            )
        })
        .collect();
    sigs.sort();

    let mut h = Sha256::new();
    h.update((sigs.len() as u32).to_le_bytes());
    for (owner, origin, value, attrs, sensitive) in &sigs {
        feed_str(&mut h, owner);
        h.update([*origin, *attrs, *sensitive as u8]);
        feed_term(&mut h, value);
    }
    h.update((kb.len() as u32).to_le_bytes());
    if renames.is_empty() {
        for t in kb {
            feed_term(&mut h, t);
        }
    } else {
        let renamed: BTreeSet<Term> = kb.iter().map(rename).collect();
        for t in &renamed {
            feed_term(&mut h, t);
        }
    }
    let digest = h.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    Fingerprint(out)
}
