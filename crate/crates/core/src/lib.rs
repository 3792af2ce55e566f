//! Schedules for collective operations built on Bine (binomial negabinary)
//! trees and butterflies, together with the classical binomial, butterfly,
//! ring and Bruck baselines.
//!
//! Every algorithm builder produces a [`CommSchedule`]: an explicit list of
//! transfers per synchronous step. Schedules can be checked against the
//! definitional result of their collective with [`simulator::verify`], and
//! their inter-group traffic can be measured against a [`GroupMap`] with
//! [`traffic::account`].

pub mod butterflies;
pub mod error;
pub mod negabinary;
pub mod schedules;
pub mod simulator;
pub mod topology;
pub mod traffic;
pub mod trees;

mod bitset;

pub use error::{Error, Result};
pub use negabinary::NegabinaryCode;
pub use schedules::{
    BlockRange, BlockSet, Collective, CommSchedule, Contiguity, ScheduleRequest, Transfer, Variant,
};
pub use topology::GroupMap;
pub use traffic::{ReductionStat, TrafficReport};
pub use trees::{CommTree, TreeKind};

/// Identifier of a process taking part in a collective.
pub type Rank = u32;

/// Returns `log2(p)` when `p` is a power of two no smaller than two.
pub fn steps_for(p: u32) -> Result<u32> {
    if p >= 2 && p.is_power_of_two() {
        Ok(p.trailing_zeros())
    } else {
        Err(Error::UnsupportedRankCount(p))
    }
}

/// Circular distance between two ranks on a ring of `p` ranks.
pub fn modulo_distance(a: Rank, b: Rank, p: u32) -> u32 {
    let forward = (a + p - b) % p;
    let backward = (b + p - a) % p;
    forward.min(backward)
}
