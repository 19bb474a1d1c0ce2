//! The soft token: users, key objects, handles and the key-management API.
//!
//! Every operation is a pure transition. It borrows the current state and
//! returns a new one, or a [`TokenError`] with the original state untouched.
//! Guards follow the PKCS#11 subset modeled here:
//!
//! * only the key owner (an NU or KM user) changes a handle's attributes,
//!   except `trusted`, which belongs to the Security Officer;
//! * `extractable` is only ever cleared and `wrap_with_trusted` only ever set;
//! * any NU/KM user may *use* any key (wrap, unwrap, encrypt, decrypt).
//!
//! With `policy_on`, trust grants and KM attribute changes additionally go
//! through [`crate::policy`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::policy::{self, PolicyVerdict};
use crate::terms::{KnowledgeBase, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    NU,
    KM,
    SO,
}

impl Role {
    /// NU and KM users drive the cryptographic API; SO does not.
    pub fn uses_api(self) -> bool {
        matches!(self, Role::NU | Role::KM)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::NU => "NU",
            Role::KM => "KM",
            Role::SO => "SO",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NU" => Ok(Role::NU),
            "KM" => Ok(Role::KM),
            "SO" => Ok(Role::SO),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: impl AsRef<str>) -> Self {
                $name(Arc::from(id.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name::new(s)
            }
        }
    };
}

string_id!(UserId);
string_id!(
    /// Identifier of a key object. Scenario keys keep their declared id;
    /// keys created at run time get `k<N>`.
    KeyId
);

/// Opaque handle, rendered as `h<N>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HandleId(pub u32);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

impl FromStr for HandleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('h')
            .filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|n| n.parse().ok())
            .map(HandleId)
            .ok_or_else(|| format!("bad handle `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Extractable,
    Wrap,
    Unwrap,
    Encrypt,
    Decrypt,
    WrapWithTrusted,
    Trusted,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::Extractable,
        Attribute::Wrap,
        Attribute::Unwrap,
        Attribute::Encrypt,
        Attribute::Decrypt,
        Attribute::WrapWithTrusted,
        Attribute::Trusted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Extractable => "extractable",
            Attribute::Wrap => "wrap",
            Attribute::Unwrap => "unwrap",
            Attribute::Encrypt => "encrypt",
            Attribute::Decrypt => "decrypt",
            Attribute::WrapWithTrusted => "wrap_with_trusted",
            Attribute::Trusted => "trusted",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attribute `{s}`"))
    }
}

/// A set of attributes, stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttrSet(u8);

impl AttrSet {
    pub const EMPTY: AttrSet = AttrSet(0);

    pub fn of(attrs: &[Attribute]) -> AttrSet {
        attrs.iter().fold(AttrSet::EMPTY, |s, &a| s.with(a))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, a: Attribute) -> bool {
        self.0 & a.bit() != 0
    }

    pub fn with(self, a: Attribute) -> AttrSet {
        AttrSet(self.0 | a.bit())
    }

    pub fn without(self, a: Attribute) -> AttrSet {
        AttrSet(self.0 & !a.bit())
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn difference(self, other: AttrSet) -> AttrSet {
        AttrSet(self.0 & !other.0)
    }

    pub fn from_bits(bits: u8) -> AttrSet {
        AttrSet(bits & 0x7f)
    }

    pub fn is_subset(self, other: AttrSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Attribute> {
        Attribute::ALL.into_iter().filter(move |a| self.contains(*a))
    }

    /// Both halves of a conflicting pair of roles (wrap with decrypt, or
    /// unwrap with encrypt).
    pub fn has_conflicting_roles(self) -> bool {
        (self.contains(Attribute::Wrap) && self.contains(Attribute::Decrypt))
            || (self.contains(Attribute::Unwrap) && self.contains(Attribute::Encrypt))
    }
}

impl fmt::Debug for AttrSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Comma-separated attribute names in canonical order, `-` when empty.
impl fmt::Display for AttrSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        let names: Vec<&str> = self.iter().map(Attribute::as_str).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for AttrSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-" {
            return Ok(AttrSet::EMPTY);
        }
        s.split(',')
            .map(str::parse::<Attribute>)
            .try_fold(AttrSet::EMPTY, |set, a| Ok(set.with(a?)))
    }
}

/// Attributes an unwrap template may carry. `trusted` is reserved to SO.
pub const UNWRAP_TEMPLATE_ATTRS: [Attribute; 6] = [
    Attribute::Extractable,
    Attribute::Wrap,
    Attribute::Unwrap,
    Attribute::Encrypt,
    Attribute::Decrypt,
    Attribute::WrapWithTrusted,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Template {
    Generic,
    Wwt,
    NonExtractable,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Generic, Template::Wwt, Template::NonExtractable];

    pub fn initial_attrs(self) -> AttrSet {
        match self {
            Template::Generic => AttrSet::of(&[Attribute::Extractable]),
            Template::Wwt => AttrSet::of(&[Attribute::WrapWithTrusted, Attribute::Extractable]),
            Template::NonExtractable => AttrSet::EMPTY,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::Generic => "generic",
            Template::Wwt => "wwt",
            Template::NonExtractable => "ne",
        })
    }
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generic" => Ok(Template::Generic),
            "wwt" => Ok(Template::Wwt),
            "ne" => Ok(Template::NonExtractable),
            other => Err(format!("unknown template `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    /// Generated inside the device from a creation template.
    Fresh(Template),
    /// Imported in the clear.
    Imported,
    /// Materialized from a ciphertext by unwrap.
    Unwrapped,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyObject {
    pub id: KeyId,
    pub value: Term,
    pub owner: UserId,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HandleRecord {
    pub handle: HandleId,
    pub key: KeyId,
    pub attrs: AttrSet,
    pub sensitive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    /// Encrypt and decrypt are explicit API calls.
    Full,
    /// Encrypt/decrypt are replaced by leaking key hashes (`emit_leaks`).
    Paper,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Paper => "paper",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "paper" => Ok(Mode::Paper),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("user `{0}` already exists")]
    DuplicateUser(UserId),
    #[error("key `{0}` already exists")]
    DuplicateKey(KeyId),
    #[error("`{0}` is not a user")]
    NotAUser(UserId),
    #[error("security officer `{0}` cannot create or import keys")]
    SOCannotCreateKeys(UserId),
    #[error("unknown handle {0}")]
    UnknownHandle(HandleId),
    #[error("`{user}` does not own the key behind {handle}")]
    NotOwner { user: UserId, handle: HandleId },
    #[error("role {role} of `{user}` may not perform this operation")]
    RoleForbidden { user: UserId, role: Role },
    #[error("attribute {0} cannot be changed this way")]
    AttributeImmutable(Attribute),
    #[error("policy violation: {0}")]
    PolicyViolation(PolicyVerdict),
    #[error("handle {0} is not extractable")]
    NotExtractable(HandleId),
    #[error("handle {0} cannot wrap")]
    NotWrapKey(HandleId),
    #[error("wrap_with_trusted target needs a trusted wrapping key, {0} is not")]
    TrustedRequired(HandleId),
    #[error("handle {0} cannot unwrap")]
    NotUnwrapKey(HandleId),
    #[error("ciphertext does not match the key behind {0}")]
    MalformedCiphertext(HandleId),
    #[error("handle {0} cannot encrypt")]
    NotEncryptKey(HandleId),
    #[error("handle {0} cannot decrypt")]
    NotDecryptKey(HandleId),
    #[error("operation not available in {0} mode")]
    ModeForbidden(Mode),
    #[error("attribute `{0}` is not allowed in an unwrap template")]
    InvalidTemplate(Attribute),
    #[error("handle would combine conflicting roles: {0}")]
    ConflictingRoles(AttrSet),
    #[error("key values are atomic names, `{0}` is not")]
    NotAKeyValue(Term),
}

impl TokenError {
    /// Stable variant name, used in replay verdicts.
    pub fn code(&self) -> &'static str {
        match self {
            TokenError::DuplicateUser(_) => "DuplicateUser",
            TokenError::DuplicateKey(_) => "DuplicateKey",
            TokenError::NotAUser(_) => "NotAUser",
            TokenError::SOCannotCreateKeys(_) => "SOCannotCreateKeys",
            TokenError::UnknownHandle(_) => "UnknownHandle",
            TokenError::NotOwner { .. } => "NotOwner",
            TokenError::RoleForbidden { .. } => "RoleForbidden",
            TokenError::AttributeImmutable(_) => "AttributeImmutable",
            TokenError::PolicyViolation(_) => "PolicyViolation",
            TokenError::NotExtractable(_) => "NotExtractable",
            TokenError::NotWrapKey(_) => "NotWrapKey",
            TokenError::TrustedRequired(_) => "TrustedRequired",
            TokenError::NotUnwrapKey(_) => "NotUnwrapKey",
            TokenError::MalformedCiphertext(_) => "MalformedCiphertext",
            TokenError::NotEncryptKey(_) => "NotEncryptKey",
            TokenError::NotDecryptKey(_) => "NotDecryptKey",
            TokenError::ModeForbidden(_) => "ModeForbidden",
            TokenError::InvalidTemplate(_) => "InvalidTemplate",
            TokenError::ConflictingRoles(_) => "ConflictingRoles",
            TokenError::NotAKeyValue(_) => "NotAKeyValue",
        }
    }
}

pub type TokenResult<T> = Result<T, TokenError>;

fn check_key_value(value: &Term) -> TokenResult<()> {
    match value {
        Term::Name(_) => Ok(()),
        other => Err(TokenError::NotAKeyValue(other.clone())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenState {
    users: Arc<BTreeMap<UserId, Role>>,
    keys: Vec<KeyObject>,
    handles: Vec<HandleRecord>,
    mode: Mode,
    policy_on: bool,
    conflict_guard: bool,
    emitted: KnowledgeBase,
    next_handle: u32,
    next_key: u32,
    /// Keys created before this index belong to the scripted setup.
    sealed_keys: usize,
    /// Names fresh key values must avoid (e.g. terms the attacker starts with).
    reserved: Arc<BTreeSet<Arc<str>>>,
}

impl TokenState {
    pub fn new(mode: Mode, policy_on: bool) -> Self {
        TokenState {
            users: Arc::default(),
            keys: Vec::new(),
            handles: Vec::new(),
            mode,
            policy_on,
            conflict_guard: false,
            emitted: KnowledgeBase::new(),
            next_handle: 1,
            next_key: 1,
            sealed_keys: 0,
            reserved: Arc::default(),
        }
    }

    /// Rejects any handle that would hold wrap with decrypt, or unwrap with
    /// encrypt. Off by default.
    pub fn with_conflict_guard(mut self, on: bool) -> Self {
        self.conflict_guard = on;
        self
    }

    pub fn with_reserved_names<'a>(mut self, names: impl IntoIterator<Item = &'a str>) -> Self {
        let set = Arc::make_mut(&mut self.reserved);
        set.extend(names.into_iter().map(Arc::from));
        self
    }

    /// Marks every key created so far as part of the fixed setup. Names of
    /// keys generated later are treated as interchangeable.
    pub fn seal(mut self) -> Self {
        self.sealed_keys = self.keys.len();
        self
    }

    pub fn sealed_keys(&self) -> usize {
        self.sealed_keys
    }

    #[cfg(test)]
    pub(crate) fn with_attrs_for_test(mut self, h: HandleId, attrs: AttrSet) -> Self {
        self.handle_mut(h).attrs = attrs;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn policy_on(&self) -> bool {
        self.policy_on
    }

    pub fn conflict_guard(&self) -> bool {
        self.conflict_guard
    }

    pub fn users(&self) -> &BTreeMap<UserId, Role> {
        &self.users
    }

    pub fn role(&self, user: &UserId) -> Option<Role> {
        self.users.get(user).copied()
    }

    pub fn keys(&self) -> &[KeyObject] {
        &self.keys
    }

    pub fn handles(&self) -> &[HandleRecord] {
        &self.handles
    }

    pub fn emitted(&self) -> &KnowledgeBase {
        &self.emitted
    }

    pub fn key(&self, id: &KeyId) -> Option<&KeyObject> {
        self.keys.iter().find(|k| &k.id == id)
    }

    pub fn handle(&self, h: HandleId) -> TokenResult<&HandleRecord> {
        // handles are numbered densely from 1 in creation order
        self.handles
            .get((h.0 as usize).wrapping_sub(1))
            .filter(|r| r.handle == h)
            .ok_or(TokenError::UnknownHandle(h))
    }

    pub fn key_of(&self, h: HandleId) -> TokenResult<&KeyObject> {
        let rec = self.handle(h)?;
        Ok(self.key(&rec.key).expect("handle references a live key"))
    }

    pub fn attrs(&self, h: HandleId) -> TokenResult<AttrSet> {
        self.handle(h).map(|r| r.attrs)
    }

    /// Handles of a key object, in creation order.
    pub fn handles_of<'a>(&'a self, key: &'a KeyId) -> impl Iterator<Item = &'a HandleRecord> {
        self.handles.iter().filter(move |r| &r.key == key)
    }

    fn handle_mut(&mut self, h: HandleId) -> &mut HandleRecord {
        &mut self.handles[h.0 as usize - 1]
    }

    fn api_user(&self, user: &UserId) -> TokenResult<Role> {
        let role = self.role(user).ok_or_else(|| TokenError::NotAUser(user.clone()))?;
        if !role.uses_api() {
            return Err(TokenError::RoleForbidden {
                user: user.clone(),
                role,
            });
        }
        Ok(role)
    }

    fn key_creator(&self, user: &UserId) -> TokenResult<()> {
        match self.role(user) {
            None => Err(TokenError::NotAUser(user.clone())),
            Some(Role::SO) => Err(TokenError::SOCannotCreateKeys(user.clone())),
            Some(_) => Ok(()),
        }
    }

    fn fresh_key_id(&self) -> (KeyId, u32) {
        let mut n = self.next_key;
        loop {
            let id = format!("k{n}");
            if self.key(&KeyId::new(&id)).is_none() && !self.reserved.contains(id.as_str()) {
                return (KeyId::new(id), n + 1);
            }
            n += 1;
        }
    }

    fn add_key(&mut self, key: KeyObject, attrs: AttrSet, sensitive: bool) -> HandleId {
        let handle = HandleId(self.next_handle);
        self.next_handle += 1;
        self.handles.push(HandleRecord {
            handle,
            key: key.id.clone(),
            attrs,
            sensitive,
        });
        self.keys.push(key);
        handle
    }

    pub fn new_user(&self, id: &UserId, role: Role) -> TokenResult<TokenState> {
        if self.users.contains_key(id) {
            return Err(TokenError::DuplicateUser(id.clone()));
        }
        let mut next = self.clone();
        Arc::make_mut(&mut next.users).insert(id.clone(), role);
        Ok(next)
    }

    /// Generates a fresh key with an automatic `k<N>` identifier.
    pub fn create_key(
        &self,
        user: &UserId,
        template: Template,
        sensitive: bool,
    ) -> TokenResult<(TokenState, HandleId)> {
        self.key_creator(user)?;
        let (id, next_key) = self.fresh_key_id();
        let mut next = self.clone();
        next.next_key = next_key;
        let h = next.install_fresh(user, id, template, sensitive);
        Ok((next, h))
    }

    /// Generates a fresh key whose identifier (and name) is `label`.
    pub fn create_labeled_key(
        &self,
        user: &UserId,
        label: &KeyId,
        template: Template,
        sensitive: bool,
    ) -> TokenResult<(TokenState, HandleId)> {
        self.key_creator(user)?;
        if self.key(label).is_some() {
            return Err(TokenError::DuplicateKey(label.clone()));
        }
        let mut next = self.clone();
        let h = next.install_fresh(user, label.clone(), template, sensitive);
        Ok((next, h))
    }

    fn install_fresh(&mut self, user: &UserId, id: KeyId, template: Template, sensitive: bool) -> HandleId {
        let key = KeyObject {
            value: Term::name(id.as_str()),
            id,
            owner: user.clone(),
            origin: Origin::Fresh(template),
        };
        self.add_key(key, template.initial_attrs(), sensitive)
    }

    /// Imports `value` in the clear with the generic template.
    pub fn import_key(&self, user: &UserId, value: &Term) -> TokenResult<(TokenState, HandleId)> {
        self.key_creator(user)?;
        check_key_value(value)?;
        let (id, next_key) = self.fresh_key_id();
        let mut next = self.clone();
        next.next_key = next_key;
        let h = next.install_imported(user, id, value, false);
        Ok((next, h))
    }

    pub fn import_labeled_key(
        &self,
        user: &UserId,
        label: &KeyId,
        value: &Term,
        sensitive: bool,
    ) -> TokenResult<(TokenState, HandleId)> {
        self.key_creator(user)?;
        check_key_value(value)?;
        if self.key(label).is_some() {
            return Err(TokenError::DuplicateKey(label.clone()));
        }
        let mut next = self.clone();
        let h = next.install_imported(user, label.clone(), value, sensitive);
        Ok((next, h))
    }

    fn install_imported(&mut self, user: &UserId, id: KeyId, value: &Term, sensitive: bool) -> HandleId {
        let key = KeyObject {
            id,
            value: value.clone(),
            owner: user.clone(),
            origin: Origin::Imported,
        };
        self.add_key(key, AttrSet::of(&[Attribute::Extractable]), sensitive)
    }

    /// Guards of [`TokenState::set_attribute`], without performing it.
    pub fn check_set_attribute(&self, user: &UserId, h: HandleId, a: Attribute) -> TokenResult<()> {
        let role = self.role(user).ok_or_else(|| TokenError::NotAUser(user.clone()))?;
        let rec = self.handle(h)?;
        match a {
            Attribute::Extractable => return Err(TokenError::AttributeImmutable(a)),
            Attribute::Trusted => {
                if role != Role::SO {
                    return Err(TokenError::RoleForbidden {
                        user: user.clone(),
                        role,
                    });
                }
                if self.policy_on {
                    let verdict = policy::check_set_trusted(self, user, h)?;
                    if !verdict.allowed {
                        return Err(TokenError::PolicyViolation(verdict));
                    }
                }
            }
            _ => {
                self.check_owner(user, role, h)?;
                if self.policy_on && role == Role::KM {
                    let verdict = policy::check_km_attr_change(self, user, h, a)?;
                    if !verdict.allowed {
                        return Err(TokenError::PolicyViolation(verdict));
                    }
                }
            }
        }
        self.check_conflicts(rec.attrs.with(a))
    }

    fn check_owner(&self, user: &UserId, role: Role, h: HandleId) -> TokenResult<()> {
        if !role.uses_api() {
            return Err(TokenError::RoleForbidden {
                user: user.clone(),
                role,
            });
        }
        if &self.key_of(h)?.owner != user {
            return Err(TokenError::NotOwner {
                user: user.clone(),
                handle: h,
            });
        }
        Ok(())
    }

    fn check_conflicts(&self, attrs: AttrSet) -> TokenResult<()> {
        if self.conflict_guard && attrs.has_conflicting_roles() {
            return Err(TokenError::ConflictingRoles(attrs));
        }
        Ok(())
    }

    pub fn set_attribute(&self, user: &UserId, h: HandleId, a: Attribute) -> TokenResult<TokenState> {
        self.check_set_attribute(user, h, a)?;
        let mut next = self.clone();
        let rec = next.handle_mut(h);
        rec.attrs = rec.attrs.with(a);
        Ok(next)
    }

    /// Guards of [`TokenState::unset_attribute`]. Clearing an attribute never
    /// grants a capability, so no policy check applies.
    pub fn check_unset_attribute(&self, user: &UserId, h: HandleId, a: Attribute) -> TokenResult<()> {
        let role = self.role(user).ok_or_else(|| TokenError::NotAUser(user.clone()))?;
        self.handle(h)?;
        match a {
            Attribute::WrapWithTrusted => Err(TokenError::AttributeImmutable(a)),
            Attribute::Trusted if role == Role::SO => Ok(()),
            Attribute::Trusted => Err(TokenError::RoleForbidden {
                user: user.clone(),
                role,
            }),
            _ => self.check_owner(user, role, h),
        }
    }

    pub fn unset_attribute(&self, user: &UserId, h: HandleId, a: Attribute) -> TokenResult<TokenState> {
        self.check_unset_attribute(user, h, a)?;
        let mut next = self.clone();
        let rec = next.handle_mut(h);
        rec.attrs = rec.attrs.without(a);
        Ok(next)
    }

    pub fn check_wrap(&self, user: &UserId, target: HandleId, wrapper: HandleId) -> TokenResult<()> {
        self.api_user(user)?;
        let t = self.attrs(target)?;
        let w = self.attrs(wrapper)?;
        if !t.contains(Attribute::Extractable) {
            return Err(TokenError::NotExtractable(target));
        }
        if !w.contains(Attribute::Wrap) {
            return Err(TokenError::NotWrapKey(wrapper));
        }
        if t.contains(Attribute::WrapWithTrusted) && !w.contains(Attribute::Trusted) {
            return Err(TokenError::TrustedRequired(wrapper));
        }
        Ok(())
    }

    /// Exports `target` as `senc(target, h(wrapper))`.
    pub fn wrap(&self, user: &UserId, target: HandleId, wrapper: HandleId) -> TokenResult<(TokenState, Term)> {
        self.check_wrap(user, target, wrapper)?;
        let ct = Term::senc(
            self.key_of(target)?.value.clone(),
            Term::hash(self.key_of(wrapper)?.value.clone()),
        );
        let mut next = self.clone();
        next.emitted.insert(ct.clone());
        Ok((next, ct))
    }

    /// The template unwrap would actually apply: a trusted wrapping key forces
    /// `{wrap_with_trusted, extractable}` regardless of the request.
    pub fn effective_unwrap_template(&self, wrapper: HandleId, requested: AttrSet) -> TokenResult<AttrSet> {
        if self.attrs(wrapper)?.contains(Attribute::Trusted) {
            Ok(AttrSet::of(&[Attribute::WrapWithTrusted, Attribute::Extractable]))
        } else {
            Ok(requested)
        }
    }

    /// Checks the guards and returns the payload the unwrap would import.
    pub fn check_unwrap(&self, user: &UserId, ct: &Term, wrapper: HandleId, template: AttrSet) -> TokenResult<Term> {
        self.api_user(user)?;
        let w = self.attrs(wrapper)?;
        if !w.contains(Attribute::Unwrap) {
            return Err(TokenError::NotUnwrapKey(wrapper));
        }
        if let Some(bad) = template.iter().find(|a| !UNWRAP_TEMPLATE_ATTRS.contains(a)) {
            return Err(TokenError::InvalidTemplate(bad));
        }
        let payload = self.open(ct, wrapper)?;
        check_key_value(&payload)?;
        self.check_conflicts(self.effective_unwrap_template(wrapper, template)?)?;
        Ok(payload)
    }

    fn open(&self, ct: &Term, h: HandleId) -> TokenResult<Term> {
        let key_term = Term::hash(self.key_of(h)?.value.clone());
        match ct {
            Term::Senc(p, k) if **k == key_term => Ok((**p).clone()),
            _ => Err(TokenError::MalformedCiphertext(h)),
        }
    }

    /// Imports the payload of `ct` as a new key owned by `user`.
    pub fn unwrap(
        &self,
        user: &UserId,
        ct: &Term,
        wrapper: HandleId,
        template: AttrSet,
    ) -> TokenResult<(TokenState, HandleId)> {
        let payload = self.check_unwrap(user, ct, wrapper, template)?;
        let attrs = self.effective_unwrap_template(wrapper, template)?;
        let (id, next_key) = self.fresh_key_id();
        let mut next = self.clone();
        next.next_key = next_key;
        let key = KeyObject {
            id,
            value: payload,
            owner: user.clone(),
            origin: Origin::Unwrapped,
        };
        let h = next.add_key(key, attrs, false);
        Ok((next, h))
    }

    pub fn check_encrypt(&self, user: &UserId, h: HandleId) -> TokenResult<()> {
        if self.mode != Mode::Full {
            return Err(TokenError::ModeForbidden(self.mode));
        }
        self.api_user(user)?;
        if !self.attrs(h)?.contains(Attribute::Encrypt) {
            return Err(TokenError::NotEncryptKey(h));
        }
        Ok(())
    }

    pub fn encrypt(&self, user: &UserId, data: &Term, h: HandleId) -> TokenResult<(TokenState, Term)> {
        self.check_encrypt(user, h)?;
        let ct = Term::senc(data.clone(), Term::hash(self.key_of(h)?.value.clone()));
        let mut next = self.clone();
        next.emitted.insert(ct.clone());
        Ok((next, ct))
    }

    pub fn check_decrypt(&self, user: &UserId, ct: &Term, h: HandleId) -> TokenResult<Term> {
        if self.mode != Mode::Full {
            return Err(TokenError::ModeForbidden(self.mode));
        }
        self.api_user(user)?;
        if !self.attrs(h)?.contains(Attribute::Decrypt) {
            return Err(TokenError::NotDecryptKey(h));
        }
        self.open(ct, h)
    }

    pub fn decrypt(&self, user: &UserId, ct: &Term, h: HandleId) -> TokenResult<(TokenState, Term)> {
        let plain = self.check_decrypt(user, ct, h)?;
        let mut next = self.clone();
        next.emitted.insert(plain.clone());
        Ok((next, plain))
    }

    /// What [`TokenState::emit_leaks`] outputs in the current state.
    pub fn leak_terms(&self) -> BTreeSet<Term> {
        self.handles
            .iter()
            .filter(|r| {
                let a = r.attrs;
                a.contains(Attribute::Encrypt)
                    || a.contains(Attribute::Decrypt)
                    || (a.contains(Attribute::Extractable) && !a.contains(Attribute::WrapWithTrusted))
            })
            .map(|r| Term::hash(self.key(&r.key).expect("live key").value.clone()))
            .collect()
    }

    /// Simplified-model leakage: the hash of every encrypt/decrypt key and of
    /// every extractable key lacking `wrap_with_trusted`.
    pub fn emit_leaks(&self) -> TokenResult<(TokenState, BTreeSet<Term>)> {
        if self.mode != Mode::Paper {
            return Err(TokenError::ModeForbidden(self.mode));
        }
        let leaks = self.leak_terms();
        let mut next = self.clone();
        for t in &leaks {
            next.emitted.insert(t.clone());
        }
        Ok((next, leaks))
    }
}
