//! Symbolic execution of schedules and the definitional result of every
//! collective.
//!
//! Each rank buffer maps logical block ids to a value. In the default mode a
//! value is a [`Tag`]: the block id plus the set of ranks whose input has been
//! combined into it. Combining two tags that share a contributor is reported
//! as a defect, so double counting cannot hide behind a commutative sum. A
//! numeric mode with wrapping 32-bit sums cross-checks the tag mode.
//!
//! Alltoall buffers use item ids `src * p + dst`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::bitset::BitSet;
use crate::schedules::{alltoall_item, Collective, CommSchedule, FinalPermutation};
use crate::{Error, Rank, Result};

/// Ranks whose input has been folded into a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Contributors {
    One(Rank),
    Many(Arc<BitSet>),
}

impl Contributors {
    pub fn len(&self) -> usize {
        match self {
            Contributors::One(_) => 1,
            Contributors::Many(set) => set.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, r: Rank) -> bool {
        match self {
            Contributors::One(x) => *x == r,
            Contributors::Many(set) => set.contains(r),
        }
    }

    pub fn ranks(&self) -> Vec<Rank> {
        match self {
            Contributors::One(x) => vec![*x],
            Contributors::Many(set) => set.iter().collect(),
        }
    }

    fn to_set(&self, p: u32) -> BitSet {
        match self {
            Contributors::One(x) => {
                let mut set = BitSet::new(p as usize);
                set.insert(*x);
                set
            }
            Contributors::Many(set) => (**set).clone(),
        }
    }

    fn merge(&self, other: &Contributors, p: u32) -> std::result::Result<Contributors, Rank> {
        let mut set = self.to_set(p);
        let incoming = other.to_set(p);
        if let Some(dup) = set.first_common(&incoming) {
            return Err(dup);
        }
        set.union_with(&incoming);
        Ok(Contributors::Many(Arc::new(set)))
    }
}

impl fmt::Display for Contributors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ranks = self.ranks();
        let mut parts = Vec::new();
        let mut k = 0;
        while k < ranks.len() {
            let start = ranks[k];
            let mut end = start;
            while k + 1 < ranks.len() && ranks[k + 1] == end + 1 {
                k += 1;
                end += 1;
            }
            parts.push(if start == end { start.to_string() } else { format!("{start}..{end}") });
            k += 1;
        }
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Symbolic value of one buffer slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tag {
    pub block: u32,
    pub contributors: Contributors,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {} from {}", self.block, self.contributors)
    }
}

/// Value carried by a buffer slot during execution.
pub trait SlotValue: Clone + PartialEq + fmt::Display {
    /// Value rank `origin` contributes for `block` before any communication.
    fn input(origin: Rank, block: u32, p: u32, elements: usize) -> Self;

    /// Folds `incoming` into `self`; errors describe a defect.
    fn combine(&mut self, incoming: &Self, p: u32) -> std::result::Result<(), String>;
}

impl SlotValue for Tag {
    fn input(origin: Rank, block: u32, _p: u32, _elements: usize) -> Self {
        Tag {
            block,
            contributors: Contributors::One(origin),
        }
    }

    fn combine(&mut self, incoming: &Self, p: u32) -> std::result::Result<(), String> {
        if self.block != incoming.block {
            return Err(format!("combining block {} into block {}", incoming.block, self.block));
        }
        self.contributors = self
            .contributors
            .merge(&incoming.contributors, p)
            .map_err(|dup| format!("contribution of rank {dup} to block {} counted twice", self.block))?;
        Ok(())
    }
}

/// Vector of 32-bit integers combined by wrapping elementwise sums.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Numeric(pub Arc<[i32]>);

impl Numeric {
    fn element(origin: Rank, block: u32, e: usize) -> i32 {
        // odd multipliers keep distinct inputs apart
        (origin as i32)
            .wrapping_mul(1_000_003)
            .wrapping_add((block as i32).wrapping_mul(7919))
            .wrapping_add(e as i32 * 31)
            .wrapping_add(1)
    }
}

impl fmt::Display for Numeric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &self.0[..self.0.len().min(4)])?;
        if self.0.len() > 4 {
            write!(f, "…({} elements)", self.0.len())?;
        }
        Ok(())
    }
}

impl SlotValue for Numeric {
    fn input(origin: Rank, block: u32, _p: u32, elements: usize) -> Self {
        Numeric((0..elements).map(|e| Numeric::element(origin, block, e)).collect())
    }

    fn combine(&mut self, incoming: &Self, _p: u32) -> std::result::Result<(), String> {
        if self.0.len() != incoming.0.len() {
            return Err("element count mismatch".into());
        }
        self.0 = self.0.iter().zip(incoming.0.iter()).map(|(a, b)| a.wrapping_add(*b)).collect();
        Ok(())
    }
}

/// One rank's buffer, keyed by logical block id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankState<V = Tag> {
    pub rank: Rank,
    pub slots: BTreeMap<u32, V>,
}

fn empty_states<V>(p: u32) -> Vec<RankState<V>> {
    (0..p).map(|rank| RankState { rank, slots: BTreeMap::new() }).collect()
}

fn fill<V: SlotValue>(state: &mut RankState<V>, origin: Rank, blocks: impl Iterator<Item = u32>, p: u32, elements: usize) {
    for b in blocks {
        state.slots.insert(b, V::input(origin, b, p, elements));
    }
}

/// Buffers before the first step. `blocks` is the number of logical blocks a
/// rank buffer holds (ignored for alltoall, which always uses `p * p` items).
pub fn initial_with<V: SlotValue>(collective: Collective, p: u32, root: Rank, blocks: u32, elements: usize) -> Vec<RankState<V>> {
    let mut states = empty_states(p);
    for state in &mut states {
        let r = state.rank;
        match collective {
            Collective::Broadcast | Collective::Scatter => {
                if r == root {
                    fill(state, r, 0..blocks, p, elements);
                }
            }
            Collective::Reduce | Collective::ReduceScatter | Collective::Allreduce => fill(state, r, 0..blocks, p, elements),
            Collective::Gather | Collective::Allgather => fill(state, r, std::iter::once(r), p, elements),
            Collective::Alltoall => fill(state, r, (0..p).map(|d| alltoall_item(r, d, p)), p, elements),
        }
    }
    states
}

fn reduced<V: SlotValue>(block: u32, p: u32, elements: usize) -> V {
    let mut value = V::input(0, block, p, elements);
    for origin in 1..p {
        value
            .combine(&V::input(origin, block, p, elements), p)
            .expect("distinct origins never collide");
    }
    value
}

/// Definitional result: the slots every rank must hold afterwards. Slots
/// not listed are unconstrained.
pub fn oracle_with<V: SlotValue>(collective: Collective, p: u32, root: Rank, blocks: u32, elements: usize) -> Vec<RankState<V>> {
    let mut states = empty_states(p);
    let all_reduced: Vec<V> = if collective.reduces() {
        (0..blocks).map(|b| reduced(b, p, elements)).collect()
    } else {
        Vec::new()
    };
    for state in &mut states {
        let r = state.rank;
        match collective {
            Collective::Broadcast => fill(state, root, 0..blocks, p, elements),
            Collective::Scatter => fill(state, root, std::iter::once(r), p, elements),
            Collective::Gather => {
                if r == root {
                    for j in 0..p {
                        fill(state, j, std::iter::once(j), p, elements);
                    }
                }
            }
            Collective::Allgather => {
                for j in 0..p {
                    fill(state, j, std::iter::once(j), p, elements);
                }
            }
            Collective::Reduce => {
                if r == root {
                    state.slots.extend(all_reduced.iter().cloned().enumerate().map(|(b, v)| (b as u32, v)));
                }
            }
            Collective::Allreduce => {
                state.slots.extend(all_reduced.iter().cloned().enumerate().map(|(b, v)| (b as u32, v)));
            }
            Collective::ReduceScatter => {
                state.slots.insert(r, all_reduced[r as usize].clone());
            }
            Collective::Alltoall => {
                for src in 0..p {
                    fill(state, src, std::iter::once(alltoall_item(src, r, p)), p, elements);
                }
            }
        }
    }
    states
}

pub fn initial_state(schedule: &CommSchedule) -> Vec<RankState> {
    initial_with(schedule.collective, schedule.p, schedule.root.unwrap_or(0), schedule.blocks, 1)
}

pub fn oracle(collective: Collective, p: u32, root: Rank, blocks: u32) -> Vec<RankState> {
    oracle_with(collective, p, root, blocks, 1)
}

/// Runs every step synchronously: all transfers of a step read the state
/// left by the previous step. The final permutation, if any, is applied last.
pub fn execute_with<V: SlotValue>(schedule: &CommSchedule, initial: Vec<RankState<V>>) -> Result<Vec<RankState<V>>> {
    let p = schedule.p;
    if initial.len() != p as usize {
        return Err(Error::RankCountMismatch { schedule: p, groups: initial.len() as u32 });
    }
    schedule.validate()?;
    let mut states = initial;
    for (i, step) in schedule.steps.iter().enumerate() {
        let mut deliveries = Vec::with_capacity(step.len());
        for (k, t) in step.iter().enumerate() {
            let source = &states[t.src as usize].slots;
            let mut payload = Vec::with_capacity(t.blocks.len());
            for position in t.blocks.positions() {
                let block = schedule.logical_block(position);
                let value = source.get(&block).ok_or_else(|| Error::ScheduleDefect {
                    step: i,
                    transfer: k,
                    reason: format!("rank {} sends block {block} it does not hold", t.src),
                })?;
                payload.push((block, value.clone()));
            }
            deliveries.push((k, t.dst, t.reduce, payload));
        }
        for (k, dst, reduce, payload) in deliveries {
            let slots = &mut states[dst as usize].slots;
            for (block, value) in payload {
                match slots.get_mut(&block) {
                    Some(existing) if reduce => existing.combine(&value, p).map_err(|reason| Error::ScheduleDefect {
                        step: i,
                        transfer: k,
                        reason,
                    })?,
                    _ => {
                        slots.insert(block, value);
                    }
                }
            }
        }
    }
    if let Some(FinalPermutation::Exchange { destination }) = &schedule.final_permutation {
        let step = schedule.steps.len();
        let mut moves = Vec::with_capacity(destination.len());
        for (j, &d) in destination.iter().enumerate() {
            if d as usize >= states.len() {
                return Err(Error::ScheduleDefect { step, transfer: j, reason: format!("final exchange to rank {d}") });
            }
            let value = states[j].slots.get(&d).cloned().ok_or_else(|| Error::ScheduleDefect {
                step,
                transfer: j,
                reason: format!("rank {j} holds no block {d} for the final exchange"),
            })?;
            moves.push((d, value));
        }
        for (d, value) in moves {
            states[d as usize].slots.insert(d, value);
        }
    }
    Ok(states)
}

pub fn execute(schedule: &CommSchedule, initial: Vec<RankState>) -> Result<Vec<RankState>> {
    execute_with(schedule, initial)
}

/// First slot where the simulated result departs from the oracle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub rank: Rank,
    pub slot: u32,
    pub expected: String,
    pub actual: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub collective: Collective,
    pub algorithm: String,
    pub p: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<Rank>,
    pub mode: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
    /// Set when execution stopped on a malformed schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defect: Option<String>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields always serialize")
    }
}

fn compare<V: SlotValue>(actual: &[RankState<V>], expected: &[RankState<V>]) -> Option<Divergence> {
    for (a, e) in actual.iter().zip(expected) {
        for (slot, want) in &e.slots {
            let got = a.slots.get(slot);
            if got != Some(want) {
                return Some(Divergence {
                    rank: e.rank,
                    slot: *slot,
                    expected: want.to_string(),
                    actual: got.map(ToString::to_string),
                });
            }
        }
    }
    None
}

fn verify_mode<V: SlotValue>(schedule: &CommSchedule, elements: usize, mode: String) -> VerifyReport {
    let root = schedule.root.unwrap_or(0);
    let mut report = VerifyReport {
        collective: schedule.collective,
        algorithm: schedule.label(),
        p: schedule.p,
        root: schedule.root,
        mode,
        pass: false,
        divergence: None,
        defect: None,
    };
    let initial = initial_with::<V>(schedule.collective, schedule.p, root, schedule.blocks, elements);
    match execute_with(schedule, initial) {
        Ok(result) => {
            let expected = oracle_with::<V>(schedule.collective, schedule.p, root, schedule.blocks, elements);
            report.divergence = compare(&result, &expected);
            report.pass = report.divergence.is_none();
        }
        Err(e) => report.defect = Some(e.to_string()),
    }
    report
}

/// Executes `schedule` symbolically and compares against the oracle.
/// Failures are reported, never raised.
pub fn verify(schedule: &CommSchedule) -> VerifyReport {
    verify_mode::<Tag>(schedule, 1, "symbolic".into())
}

/// Same as [`verify`] with `elements` 32-bit integers per block.
pub fn verify_numeric(schedule: &CommSchedule, elements: usize) -> VerifyReport {
    verify_mode::<Numeric>(schedule, elements.max(1), format!("numeric:{}", elements.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{self, Contiguity, ScheduleRequest, Variant};

    #[test]
    fn two_rank_broadcast_delivers_root_tags() {
        let s = schedules::build_bcast(2, 0, 16, Variant::BineSmall).unwrap();
        let out = execute(&s, initial_state(&s)).unwrap();
        assert!(out[1].slots.values().all(|t| t.contributors == Contributors::One(0)));
        assert!(verify(&s).pass);
    }

    #[test]
    fn large_allreduce_counts_every_rank_once() {
        let s = schedules::build_allreduce(8, 64, Variant::BineLarge).unwrap();
        let out = execute(&s, initial_state(&s)).unwrap();
        for state in &out {
            assert_eq!(state.slots.len(), 8);
            for tag in state.slots.values() {
                assert_eq!(tag.contributors.ranks(), (0..8).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn sending_an_empty_slot_is_a_defect() {
        let mut s = schedules::build_bcast(8, 0, 8, Variant::BinomialHalving).unwrap();
        s.steps.swap(0, 2);
        let err = execute(&s, initial_state(&s)).unwrap_err();
        assert!(matches!(err, Error::ScheduleDefect { step: 0, .. }), "{err}");
        let report = verify(&s);
        assert!(!report.pass && report.defect.is_some());
    }

    #[test]
    fn double_reduction_is_a_defect() {
        let mut s = schedules::build_allreduce(4, 16, Variant::BineSmall).unwrap();
        let repeated = s.steps[0].clone();
        s.steps.push(repeated);
        let report = verify(&s);
        assert!(!report.pass);
        assert!(report.defect.unwrap().contains("counted twice"));
    }

    #[test]
    fn oracle_examples() {
        let bc = oracle(Collective::Broadcast, 4, 2, 4);
        assert!(bc.iter().all(|s| s.slots.values().all(|t| t.contributors == Contributors::One(2))));
        let rs = oracle(Collective::ReduceScatter, 8, 0, 8);
        for (j, state) in rs.iter().enumerate() {
            assert_eq!(state.slots.keys().copied().collect::<Vec<_>>(), vec![j as u32]);
            assert_eq!(state.slots[&(j as u32)].contributors.len(), 8);
        }
        let ga = oracle(Collective::Gather, 16, 5, 16);
        assert_eq!(ga[5].slots.keys().copied().collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
        assert!(ga.iter().filter(|s| s.rank != 5).all(|s| s.slots.is_empty()));
        let a2a = oracle(Collective::Alltoall, 4, 0, 4);
        assert_eq!(a2a[1].slots.keys().copied().collect::<Vec<_>>(), vec![1, 5, 9, 13]);
    }

    #[test]
    fn deleted_transfer_is_named() {
        let mut s = schedules::build_allgather(16, 16, Variant::Bine).unwrap();
        assert!(verify(&s).pass);
        s.steps[3].remove(5);
        let report = verify(&s);
        assert!(!report.pass);
        assert!(report.divergence.is_some() || report.defect.is_some());
    }

    #[test]
    fn unpermuted_reduce_scatter_needs_its_exchange() {
        let mut s = ScheduleRequest::new(Collective::ReduceScatter, Variant::Bine, 8, 64)
            .contiguity(Contiguity::UnpermutedOutput)
            .build()
            .unwrap();
        assert!(verify(&s).pass);
        s.final_permutation = None;
        assert!(!verify(&s).pass);
    }

    #[test]
    fn numeric_mode_agrees() {
        for c in Collective::ALL {
            for &v in c.variants() {
                let s = ScheduleRequest::new(c, v, 16, 160).root(3).build().unwrap();
                assert!(verify_numeric(&s, 3).pass, "{c} {v}");
            }
        }
    }

    #[test]
    fn reports_are_deterministic_json() {
        let s = schedules::build_alltoall(16, 64, Variant::Bine).unwrap();
        let a = verify(&s).to_json();
        assert_eq!(a, verify(&s).to_json());
        assert!(a.contains("\"pass\":true"));
    }
}
