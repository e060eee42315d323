//! Compiler from an abstract, platform-independent firewall policy to
//! iptables, pf and ipfilter configurations.

pub mod model;
pub mod diag;
pub mod fwbxml;
pub mod semantics;

#[cfg(test)]
pub(crate) mod testutil;
pub mod analysis;
pub mod transform;
pub mod backends;
pub mod cli;
