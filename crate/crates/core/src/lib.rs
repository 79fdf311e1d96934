// SPDX-License-Identifier: Apache-2.0

//! A permissioned-ledger kernel with off-state big-file sharing.
//!
//! Files never enter the ledger. Each node keeps them in its own off-state
//! store; the ledger records file metadata, sharing events and the public
//! half of a one-time lock, and a private collection carries the key.

pub mod audit;
pub mod bench;
pub mod codec;
pub mod config;
pub mod contract;
pub mod identity;
pub mod netsim;
pub mod ledger;
pub mod offstate;
pub mod par;
pub mod pdc;
pub mod txflow;

#[doc(hidden)]
pub mod testkit;
