//! The seven promises and bitmask sets over them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PromiseParseError;

/// A coarse permission category. The discriminant is the bit position used
/// in [`PromiseSet`] and must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Promise {
    /// Process creation and program execution.
    Proc = 0,
    /// Read-only filesystem access.
    Rpath = 1,
    /// Filesystem modification: write, create, delete, rename, permissions.
    Wpath = 2,
    /// INET sockets.
    Net = 3,
    /// Changing user and group identities.
    Id = 4,
    /// UNIX-domain sockets (also accepted as `unix` or `gui`).
    Ipc = 5,
    /// Spawning threads that share the caller's address space.
    Threading = 6,
}

impl Promise {
    pub const ALL: [Promise; 7] = [
        Promise::Proc,
        Promise::Rpath,
        Promise::Wpath,
        Promise::Net,
        Promise::Id,
        Promise::Ipc,
        Promise::Threading,
    ];

    pub const fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Promise> {
        Self::ALL.get(usize::from(id)).copied()
    }

    pub const fn name(self) -> &'static str {
        match self {
            Promise::Proc => "proc",
            Promise::Rpath => "rpath",
            Promise::Wpath => "wpath",
            Promise::Net => "net",
            Promise::Id => "id",
            Promise::Ipc => "ipc",
            Promise::Threading => "threading",
        }
    }

    const fn bit(self) -> u8 {
        1 << self.id()
    }
}

impl fmt::Display for Promise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Promise {
    type Err = PromiseParseError;

    fn from_str(token: &str) -> Result<Self, Self::Err> {
        Ok(match token {
            "proc" => Promise::Proc,
            "rpath" => Promise::Rpath,
            "wpath" => Promise::Wpath,
            "net" => Promise::Net,
            "id" => Promise::Id,
            "ipc" | "unix" | "gui" => Promise::Ipc,
            "threading" => Promise::Threading,
            other => {
                return Err(PromiseParseError::UnknownToken(other.to_owned()));
            }
        })
    }
}

/// Granted promises of one sandbox, bit `i` set when the promise with id `i`
/// is granted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PromiseSet(u8);

impl PromiseSet {
    pub const EMPTY: PromiseSet = PromiseSet(0);
    pub const FULL: PromiseSet = PromiseSet(0x7f);

    pub fn from_bits(bits: u8) -> Option<PromiseSet> {
        (bits <= Self::FULL.0).then_some(PromiseSet(bits))
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, promise: Promise) -> bool {
        self.0 & promise.bit() != 0
    }

    pub fn insert(&mut self, promise: Promise) {
        self.0 |= promise.bit();
    }

    pub fn remove(&mut self, promise: Promise) {
        self.0 &= !promise.bit();
    }

    #[must_use]
    pub const fn with(self, promise: Promise) -> PromiseSet {
        PromiseSet(self.0 | promise.bit())
    }

    #[must_use]
    pub const fn without(self, promise: Promise) -> PromiseSet {
        PromiseSet(self.0 & !promise.bit())
    }

    #[must_use]
    pub const fn union(self, other: PromiseSet) -> PromiseSet {
        PromiseSet(self.0 | other.0)
    }

    #[must_use]
    pub const fn difference(self, other: PromiseSet) -> PromiseSet {
        PromiseSet(self.0 & !other.0)
    }

    pub const fn is_subset(self, other: PromiseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Promises in id order.
    pub fn iter(self) -> impl Iterator<Item = Promise> {
        Promise::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Lowest-id member, used to pick a deterministic violated promise.
    pub fn first(self) -> Option<Promise> {
        self.iter().next()
    }

    /// Every subset of the seven promises, in bit order.
    pub fn all_subsets() -> impl Iterator<Item = PromiseSet> {
        (0..=Self::FULL.0).map(PromiseSet)
    }
}

impl FromIterator<Promise> for PromiseSet {
    fn from_iter<I: IntoIterator<Item = Promise>>(iter: I) -> Self {
        let mut set = PromiseSet::EMPTY;
        for p in iter {
            set.insert(p);
        }
        set
    }
}

impl From<Promise> for PromiseSet {
    fn from(p: Promise) -> Self {
        PromiseSet(p.bit())
    }
}

/// Parses a space-separated promise string. Whitespace-only input is the
/// empty set; an unknown token rejects the whole string.
pub fn parse_promises(text: &str) -> Result<PromiseSet, PromiseParseError> {
    text.split_whitespace().map(Promise::from_str).collect()
}

/// Canonical form: promise names in id order, single-space separated.
pub fn promises_to_string(set: PromiseSet) -> String {
    set.to_string()
}

impl fmt::Display for PromiseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(p.name())?;
        }
        Ok(())
    }
}

impl FromStr for PromiseSet {
    type Err = PromiseParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_promises(s)
    }
}

impl From<PromiseSet> for String {
    fn from(set: PromiseSet) -> Self {
        set.to_string()
    }
}

impl TryFrom<String> for PromiseSet {
    type Error = PromiseParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        parse_promises(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_bit_positions() {
        let ids: Vec<u8> = Promise::ALL.iter().map(|p| p.id()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5, 6]);
        for p in Promise::ALL {
            assert_eq!(Promise::from_id(p.id()), Some(p));
        }
        assert_eq!(Promise::from_id(7), None);
    }

    #[test]
    fn parse_examples() {
        let set = parse_promises("net rpath").unwrap();
        assert_eq!(set, PromiseSet::from_iter([Promise::Net, Promise::Rpath]));
        assert_eq!(parse_promises("").unwrap(), PromiseSet::EMPTY);
        assert_eq!(parse_promises("   ").unwrap(), PromiseSet::EMPTY);
        assert_eq!(
            parse_promises("wpath wpath").unwrap(),
            Promise::Wpath.into()
        );
    }

    #[test]
    fn unknown_token_is_rejected_by_name() {
        let err = parse_promises("netrpath").unwrap_err();
        assert_eq!(err, PromiseParseError::UnknownToken("netrpath".into()));
        assert!(err.to_string().contains("netrpath"));
        assert!(parse_promises("rpath stdio").is_err());
    }

    #[test]
    fn ipc_aliases() {
        let set = parse_promises("threading unix net rpath").unwrap();
        assert!(set.contains(Promise::Ipc));
        assert_eq!(set.to_string(), "rpath net ipc threading");
        assert_eq!(parse_promises("gui").unwrap(), Promise::Ipc.into());
    }

    #[test]
    fn canonical_format() {
        let set = PromiseSet::from_iter([Promise::Net, Promise::Rpath]);
        assert_eq!(promises_to_string(set), "rpath net");
        assert_eq!(promises_to_string(PromiseSet::EMPTY), "");
        assert_eq!(
            promises_to_string(PromiseSet::FULL),
            "proc rpath wpath net id ipc threading"
        );
    }

    #[test]
    fn round_trip_all_subsets() {
        let mut n = 0;
        for set in PromiseSet::all_subsets() {
            assert_eq!(parse_promises(&promises_to_string(set)).unwrap(), set);
            n += 1;
        }
        assert_eq!(n, 128);
    }

    #[test]
    fn bits_are_bounded() {
        assert!(PromiseSet::from_bits(0x80).is_none());
        assert_eq!(PromiseSet::from_bits(0x7f), Some(PromiseSet::FULL));
    }

    #[test]
    fn serde_uses_promise_string() {
        let set = parse_promises("ipc rpath").unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, "\"rpath ipc\"");
        let back: PromiseSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
