//! A symbolic PKCS#11 soft token with a trusted-key policy and a bounded
//! Dolev-Yao attack search.
//!
//! * [`terms`]: messages and attacker deduction.
//! * [`token`]: the device state machine.
//! * [`policy`]: the secure configuration, as runtime guards and as a linter.
//! * [`scenario`]: scenario and trace files.
//! * [`search`]: attack search and trace replay.
//! * [`cli`]: the `hsmlab` command line.

pub mod cli;
pub mod policy;
pub mod scenario;
pub mod search;
pub mod terms;
pub mod token;
