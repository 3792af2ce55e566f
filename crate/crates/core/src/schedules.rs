//! Explicit communication schedules for the eight collectives.
//!
//! A schedule is a list of synchronous steps; each step is a list of
//! [`Transfer`]s. Vectors are split into whole blocks (one per rank for the
//! block-structured algorithms, a single block for the small-vector trees and
//! butterflies), and byte counts are always `blocks × block_bytes`.
//!
//! Transfers name buffer *positions*. Unless the schedule carries a layout,
//! position `x` holds logical block `x`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitset::BitSet;
use crate::butterflies::{Butterfly, ButterflyKind};
use crate::trees::{build_tree, from_virtual, to_virtual, CommTree, NuTable, TreeKind};
use crate::{steps_for, Error, Rank, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    Broadcast,
    Reduce,
    Gather,
    Scatter,
    ReduceScatter,
    Allgather,
    Allreduce,
    Alltoall,
}

impl Collective {
    pub const ALL: [Collective; 8] = [
        Collective::Broadcast,
        Collective::Reduce,
        Collective::Gather,
        Collective::Scatter,
        Collective::ReduceScatter,
        Collective::Allgather,
        Collective::Allreduce,
        Collective::Alltoall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Collective::Broadcast => "broadcast",
            Collective::Reduce => "reduce",
            Collective::Gather => "gather",
            Collective::Scatter => "scatter",
            Collective::ReduceScatter => "reduce_scatter",
            Collective::Allgather => "allgather",
            Collective::Allreduce => "allreduce",
            Collective::Alltoall => "alltoall",
        }
    }

    pub fn is_rooted(self) -> bool {
        matches!(
            self,
            Collective::Broadcast | Collective::Reduce | Collective::Gather | Collective::Scatter
        )
    }

    pub fn variants(self) -> &'static [Variant] {
        use Variant::*;
        match self {
            Collective::Broadcast => &[BineSmall, BineLarge, BinomialDoubling, BinomialHalving, BinomialSag],
            Collective::Reduce => &[BineSmall, BineLarge, Binomial],
            Collective::Gather | Collective::Scatter => &[Bine, Binomial],
            Collective::ReduceScatter => &[Bine, RecursiveHalving, Ring],
            Collective::Allgather => &[Bine, RecursiveDoubling, Ring, Bruck, SparbitLike],
            Collective::Allreduce => &[BineSmall, BineLarge, RecursiveDoubling, Ring, RabenseifnerLike],
            Collective::Alltoall => &[Bine, Bruck, Pairwise, Linear],
        }
    }

    /// Whether the collective combines data from several ranks.
    pub fn reduces(self) -> bool {
        matches!(self, Collective::Reduce | Collective::ReduceScatter | Collective::Allreduce)
    }
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Collective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase().replace('-', "_");
        let normalized = match normalized.as_str() {
            "bcast" => "broadcast",
            "reducescatter" => "reduce_scatter",
            other => other,
        }
        .to_string();
        Collective::ALL
            .into_iter()
            .find(|c| c.name() == normalized)
            .ok_or_else(|| Error::Unsupported(format!("unknown collective `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bine,
    BineSmall,
    BineLarge,
    Binomial,
    BinomialDoubling,
    BinomialHalving,
    BinomialSag,
    RecursiveHalving,
    RecursiveDoubling,
    Ring,
    Bruck,
    SparbitLike,
    RabenseifnerLike,
    Pairwise,
    Linear,
}

impl Variant {
    pub const ALL: [Variant; 15] = [
        Variant::Bine,
        Variant::BineSmall,
        Variant::BineLarge,
        Variant::Binomial,
        Variant::BinomialDoubling,
        Variant::BinomialHalving,
        Variant::BinomialSag,
        Variant::RecursiveHalving,
        Variant::RecursiveDoubling,
        Variant::Ring,
        Variant::Bruck,
        Variant::SparbitLike,
        Variant::RabenseifnerLike,
        Variant::Pairwise,
        Variant::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bine => "bine",
            Variant::BineSmall => "bine_small",
            Variant::BineLarge => "bine_large",
            Variant::Binomial => "binomial",
            Variant::BinomialDoubling => "binomial_doubling",
            Variant::BinomialHalving => "binomial_halving",
            Variant::BinomialSag => "binomial_sag",
            Variant::RecursiveHalving => "recursive_halving",
            Variant::RecursiveDoubling => "recursive_doubling",
            Variant::Ring => "ring",
            Variant::Bruck => "bruck",
            Variant::SparbitLike => "sparbit_like",
            Variant::RabenseifnerLike => "rabenseifner_like",
            Variant::Pairwise => "pairwise",
            Variant::Linear => "linear",
        }
    }

    pub fn is_bine(self) -> bool {
        matches!(self, Variant::Bine | Variant::BineSmall | Variant::BineLarge)
    }

    /// Ring, pairwise and linear schedules work for any rank count.
    pub fn requires_power_of_two(self) -> bool {
        !matches!(self, Variant::Ring | Variant::Pairwise | Variant::Linear)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == normalized)
            .ok_or_else(|| Error::Unsupported(format!("unknown variant `{s}`")))
    }
}

/// How the Bine reduce-scatter lays out the blocks it sends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contiguity {
    /// Blocks stay in natural order; sends are scattered block lists.
    #[default]
    Noncontig,
    /// Block `r` is first moved to position `reverse(ν(r))`; every send is
    /// then a contiguous range.
    PrePermute,
    /// Sends contiguous ranges as if the permutation had been applied; each
    /// rank ends with another rank's block and a final exchange is recorded.
    UnpermutedOutput,
}

impl Contiguity {
    pub const ALL: [Contiguity; 3] = [
        Contiguity::Noncontig,
        Contiguity::PrePermute,
        Contiguity::UnpermutedOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Contiguity::Noncontig => "noncontig",
            Contiguity::PrePermute => "pre_permute",
            Contiguity::UnpermutedOutput => "unpermuted_output",
        }
    }
}

impl fmt::Display for Contiguity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Contiguity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase().replace('-', "_");
        Contiguity::ALL
            .into_iter()
            .find(|c| c.name() == normalized)
            .ok_or_else(|| Error::Unsupported(format!("unknown contiguity option `{s}`")))
    }
}

/// Circular range `[first, last]` of block positions modulo `modulus`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockRange {
    pub first: u32,
    pub last: u32,
    pub modulus: u32,
}

impl BlockRange {
    pub fn new(first: u32, last: u32, modulus: u32) -> Result<Self> {
        if modulus == 0 || first >= modulus || last >= modulus {
            return Err(Error::Unsupported(format!(
                "block range [{first}, {last}] invalid modulo {modulus}"
            )));
        }
        Ok(Self { first, last, modulus })
    }

    /// Range starting at `first` covering `len` positions.
    pub fn starting_at(first: u32, len: u32, modulus: u32) -> Result<Self> {
        if len == 0 || len > modulus {
            return Err(Error::Unsupported(format!("range length {len} modulo {modulus}")));
        }
        Self::new(first % modulus, (first + len - 1) % modulus, modulus)
    }

    pub fn len(&self) -> u32 {
        (self.last + self.modulus - self.first) % self.modulus + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: u32) -> bool {
        x < self.modulus && (x + self.modulus - self.first) % self.modulus < self.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len()).map(move |k| (self.first + k) % self.modulus)
    }

    /// Splits into the lower and upper halves (by offset from `first`).
    pub fn halves(&self) -> Option<(BlockRange, BlockRange)> {
        let len = self.len();
        if len < 2 || len % 2 == 1 {
            return None;
        }
        let lower = BlockRange::starting_at(self.first, len / 2, self.modulus).ok()?;
        let upper = BlockRange::starting_at(self.first + len / 2, len / 2, self.modulus).ok()?;
        Some((lower, upper))
    }
}

impl fmt::Display for BlockRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.first, self.last)
    }
}

/// Buffer positions moved by one transfer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSet {
    Range(BlockRange),
    List(Vec<u32>),
}

impl BlockSet {
    /// Builds the most compact set: a range when the positions are
    /// circularly contiguous modulo `modulus`, otherwise a sorted list.
    pub fn from_positions(mut positions: Vec<u32>, modulus: u32) -> Self {
        positions.sort_unstable();
        positions.dedup();
        let len = positions.len() as u32;
        if len == 0 {
            return BlockSet::List(positions);
        }
        if len == modulus {
            return BlockSet::Range(BlockRange { first: 0, last: modulus - 1, modulus });
        }
        // the first element is the one whose predecessor is absent
        let starts: Vec<u32> = positions
            .iter()
            .copied()
            .filter(|&x| positions.binary_search(&((x + modulus - 1) % modulus)).is_err())
            .collect();
        if starts.len() == 1 {
            let first = starts[0];
            BlockSet::Range(BlockRange { first, last: (first + len - 1) % modulus, modulus })
        } else {
            BlockSet::List(positions)
        }
    }

    pub fn single(position: u32, modulus: u32) -> Self {
        BlockSet::Range(BlockRange { first: position, last: position, modulus })
    }

    pub fn len(&self) -> usize {
        match self {
            BlockSet::Range(r) => r.len() as usize,
            BlockSet::List(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_contiguous(&self) -> bool {
        matches!(self, BlockSet::Range(_))
    }

    pub fn contains(&self, x: u32) -> bool {
        match self {
            BlockSet::Range(r) => r.contains(x),
            BlockSet::List(v) => v.contains(&x),
        }
    }

    pub fn positions(&self) -> Vec<u32> {
        match self {
            BlockSet::Range(r) => r.iter().collect(),
            BlockSet::List(v) => v.clone(),
        }
    }
}

impl fmt::Display for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSet::Range(r) => write!(f, "{}..{}", r.first, r.last),
            BlockSet::List(v) => {
                let parts: Vec<String> = v.iter().map(u32::to_string).collect();
                f.write_str(&parts.join(";"))
            }
        }
    }
}

/// One directed message of a step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TransferRecord", try_from = "TransferRecord")]
pub struct Transfer {
    pub src: Rank,
    pub dst: Rank,
    pub blocks: BlockSet,
    pub block_bytes: u64,
    /// The receiver combines the payload with what it holds.
    pub reduce: bool,
}

impl Transfer {
    pub fn bytes(&self) -> u64 {
        self.blocks.len() as u64 * self.block_bytes
    }
}

#[derive(Serialize, Deserialize)]
struct TransferRecord {
    src: Rank,
    dst: Rank,
    blocks: BlockSet,
    bytes: u64,
    block_bytes: u64,
    reduce: bool,
}

impl From<Transfer> for TransferRecord {
    fn from(t: Transfer) -> Self {
        TransferRecord {
            bytes: t.bytes(),
            src: t.src,
            dst: t.dst,
            blocks: t.blocks,
            block_bytes: t.block_bytes,
            reduce: t.reduce,
        }
    }
}

impl TryFrom<TransferRecord> for Transfer {
    type Error = String;

    fn try_from(r: TransferRecord) -> std::result::Result<Self, String> {
        let t = Transfer {
            src: r.src,
            dst: r.dst,
            blocks: r.blocks,
            block_bytes: r.block_bytes,
            reduce: r.reduce,
        };
        if t.bytes() != r.bytes {
            return Err(format!("transfer {}->{} declares {} bytes, blocks add up to {}", r.src, r.dst, r.bytes, t.bytes()));
        }
        Ok(t)
    }
}

/// Data movement that completes a schedule without being a step of its own.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalPermutation {
    /// Rank `j` hands block `destination[j]` over to rank `destination[j]`.
    Exchange { destination: Vec<Rank> },
    /// Each rank reorders its own buffer; no data crosses ranks.
    LocalReorder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommSchedule {
    pub collective: Collective,
    pub algorithm: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contiguity: Option<Contiguity>,
    pub p: u32,
    /// Vector size in bytes (per-rank send buffer for alltoall).
    pub n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<Rank>,
    /// Number of logical blocks a rank buffer is split into.
    pub blocks: u32,
    pub block_bytes: u64,
    /// `layout[position]` is the logical block stored at `position`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Vec<u32>>,
    pub steps: Vec<Vec<Transfer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_permutation: Option<FinalPermutation>,
    pub single_ported: bool,
}

impl CommSchedule {
    pub fn label(&self) -> String {
        match self.contiguity {
            Some(c) => format!("{}/{}", self.algorithm, c),
            None => self.algorithm.to_string(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn transfers(&self) -> impl Iterator<Item = (usize, &Transfer)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(i, step)| step.iter().map(move |t| (i, t)))
    }

    pub fn total_bytes(&self) -> u64 {
        self.transfers().map(|(_, t)| t.bytes()).sum()
    }

    pub fn sent_bytes_per_rank(&self) -> Vec<u64> {
        let mut out = vec![0; self.p as usize];
        for (_, t) in self.transfers() {
            out[t.src as usize] += t.bytes();
        }
        out
    }

    /// Bytes sent by each rank at each step (`[step][rank]`).
    pub fn sent_bytes_per_step(&self) -> Vec<Vec<u64>> {
        self.steps
            .iter()
            .map(|step| {
                let mut out = vec![0; self.p as usize];
                for t in step {
                    out[t.src as usize] += t.bytes();
                }
                out
            })
            .collect()
    }

    /// Logical block stored at `position`.
    pub fn logical_block(&self, position: u32) -> u32 {
        match &self.layout {
            Some(layout) => layout[position as usize],
            None => position,
        }
    }

    /// Structural checks: ranks in range, non-empty transfers, no self
    /// messages, and (for single-ported schedules) at most one send and one
    /// receive per rank and step.
    pub fn validate(&self) -> Result<()> {
        let defect = |step, transfer, reason: String| Err(Error::ScheduleDefect { step, transfer, reason });
        for (i, step) in self.steps.iter().enumerate() {
            let mut sending = vec![false; self.p as usize];
            let mut receiving = vec![false; self.p as usize];
            for (k, t) in step.iter().enumerate() {
                if t.src >= self.p || t.dst >= self.p {
                    return defect(i, k, format!("rank out of range in {}->{}", t.src, t.dst));
                }
                if t.src == t.dst {
                    return defect(i, k, format!("rank {} sends to itself", t.src));
                }
                if t.blocks.is_empty() {
                    return defect(i, k, "empty block set".into());
                }
                if self.single_ported {
                    if std::mem::replace(&mut sending[t.src as usize], true) {
                        return defect(i, k, format!("rank {} sends twice", t.src));
                    }
                    if std::mem::replace(&mut receiving[t.dst as usize], true) {
                        return defect(i, k, format!("rank {} receives twice", t.dst));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Flat CSV form, one row per transfer.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "src", "dst", "blocks", "bytes", "reduce"])?;
        for (i, t) in self.transfers() {
            w.write_record([
                i.to_string(),
                t.src.to_string(),
                t.dst.to_string(),
                t.blocks.to_string(),
                t.bytes().to_string(),
                t.reduce.to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io { path: "<csv>".into(), source })?;
        Ok(())
    }
}

/// Everything needed to build one schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRequest {
    pub collective: Collective,
    pub variant: Variant,
    pub p: u32,
    pub n: u64,
    pub root: Rank,
    pub contiguity: Contiguity,
}

impl ScheduleRequest {
    pub fn new(collective: Collective, variant: Variant, p: u32, n: u64) -> Self {
        Self {
            collective,
            variant,
            p,
            n,
            root: 0,
            contiguity: Contiguity::Noncontig,
        }
    }

    pub fn root(mut self, root: Rank) -> Self {
        self.root = root;
        self
    }

    pub fn contiguity(mut self, contiguity: Contiguity) -> Self {
        self.contiguity = contiguity;
        self
    }

    pub fn build(&self) -> Result<CommSchedule> {
        match self.collective {
            Collective::Broadcast => build_bcast(self.p, self.root, self.n, self.variant),
            Collective::Reduce => build_reduce(self.p, self.root, self.n, self.variant),
            Collective::Gather => build_gather(self.p, self.root, self.n, self.variant),
            Collective::Scatter => build_scatter(self.p, self.root, self.n, self.variant),
            Collective::ReduceScatter => build_reduce_scatter(self.p, self.n, self.variant, self.contiguity),
            Collective::Allgather => build_allgather(self.p, self.n, self.variant),
            Collective::Allreduce => build_allreduce(self.p, self.n, self.variant),
            Collective::Alltoall => build_alltoall(self.p, self.n, self.variant),
        }
    }
}

fn check_request(collective: Collective, variant: Variant, p: u32, root: Rank) -> Result<()> {
    if !collective.variants().contains(&variant) {
        return Err(Error::Unsupported(format!("{collective} has no variant `{variant}`")));
    }
    if variant.requires_power_of_two() {
        steps_for(p)?;
    } else if p < 2 {
        return Err(Error::UnsupportedRankCount(p));
    }
    if root >= p {
        return Err(Error::RankOutOfRange { rank: root, p });
    }
    Ok(())
}

fn whole_vector_bytes(n: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::VectorTooSmall { n, blocks: 1 });
    }
    Ok(n)
}

/// Bytes per block when `n` bytes are split into `blocks` blocks, padding the
/// last block up.
pub fn block_bytes_for(n: u64, blocks: u32) -> Result<u64> {
    if n < u64::from(blocks) {
        return Err(Error::VectorTooSmall { n, blocks });
    }
    Ok(n.div_ceil(u64::from(blocks)))
}

struct Builder {
    collective: Collective,
    algorithm: Variant,
    p: u32,
    n: u64,
    root: Option<Rank>,
    blocks: u32,
    block_bytes: u64,
}

impl Builder {
    fn finish(self, steps: Vec<Vec<Transfer>>) -> CommSchedule {
        let single_ported = self.algorithm != Variant::Linear;
        let steps = steps
            .into_iter()
            .map(|mut step| {
                step.sort_by_key(|t| (t.src, t.dst));
                step
            })
            .collect();
        CommSchedule {
            collective: self.collective,
            algorithm: self.algorithm,
            contiguity: None,
            p: self.p,
            n: self.n,
            root: self.root,
            blocks: self.blocks,
            block_bytes: self.block_bytes,
            layout: None,
            steps,
            final_permutation: None,
            single_ported,
        }
    }
}

fn whole(src: Rank, dst: Rank, bytes: u64, reduce: bool) -> Transfer {
    Transfer {
        src,
        dst,
        blocks: BlockSet::single(0, 1),
        block_bytes: bytes,
        reduce,
    }
}

/// Broadcast steps along a tree: each parent forwards the whole buffer.
fn tree_bcast_steps(tree: &CommTree, bytes: u64) -> Vec<Vec<Transfer>> {
    (0..tree.steps())
        .map(|i| tree.edges_at(i).map(|e| whole(e.parent, e.child, bytes, false)).collect())
        .collect()
}

/// Reverses a schedule in time, swapping sender and receiver.
fn reversed(steps: Vec<Vec<Transfer>>, reduce: bool) -> Vec<Vec<Transfer>> {
    steps
        .into_iter()
        .rev()
        .map(|step| {
            step.into_iter()
                .map(|t| Transfer {
                    src: t.dst,
                    dst: t.src,
                    reduce,
                    ..t
                })
                .collect()
        })
        .collect()
}

/// Subtree member sets of every rank of `tree`.
fn subtree_sets(tree: &CommTree) -> Vec<Vec<Rank>> {
    let mut sets: Vec<Vec<Rank>> = (0..tree.p()).map(|r| vec![r]).collect();
    let mut edges = tree.edges().to_vec();
    edges.sort_by_key(|e| std::cmp::Reverse(e.step));
    for e in edges {
        let child = std::mem::take(&mut sets[e.child as usize]);
        sets[e.parent as usize].extend_from_slice(&child);
        sets[e.child as usize] = child;
    }
    sets
}

/// Scatter along `tree`: the parent hands each child the blocks destined to
/// that child's subtree. `block_of[x]` is the block that ends at rank `x`.
fn tree_scatter_steps(tree: &CommTree, block_of: &[u32], block_bytes: u64) -> Vec<Vec<Transfer>> {
    let sets = subtree_sets(tree);
    let modulus = block_of.len() as u32;
    (0..tree.steps())
        .map(|i| {
            tree.edges_at(i)
                .map(|e| Transfer {
                    src: e.parent,
                    dst: e.child,
                    blocks: BlockSet::from_positions(
                        sets[e.child as usize].iter().map(|&x| block_of[x as usize]).collect(),
                        modulus,
                    ),
                    block_bytes,
                    reduce: false,
                })
                .collect()
        })
        .collect()
}

/// Vector-halving reduce-scatter over a butterfly. At step `i` rank `r`
/// sends its partner every block whose final owner is still reachable from
/// the partner. `position_of[x]` is the buffer position of rank `x`'s block.
fn butterfly_reduce_scatter_steps(bfly: &Butterfly, position_of: &[u32], block_bytes: u64) -> Vec<Vec<Transfer>> {
    let p = bfly.p();
    (0..bfly.steps())
        .map(|i| {
            (0..p)
                .map(|r| {
                    let q = bfly.partner(r, i);
                    let positions = bfly
                        .reachable(q, i + 1)
                        .into_iter()
                        .map(|x| position_of[x as usize])
                        .collect();
                    Transfer {
                        src: r,
                        dst: q,
                        blocks: BlockSet::from_positions(positions, p),
                        block_bytes,
                        reduce: true,
                    }
                })
                .collect()
        })
        .collect()
}

/// Vector-doubling allgather: at every step each rank forwards everything
/// it has gathered so far. `held[x]` is the block rank `x` starts with;
/// `have`, when given, lists blocks ranks already hold (they are not resent).
fn gathering_steps(
    p: u32,
    steps: u32,
    partner: impl Fn(Rank, u32) -> Rank,
    held: &[u32],
    have: Option<Vec<BitSet>>,
    block_bytes: u64,
) -> Vec<Vec<Transfer>> {
    let mut have = have.unwrap_or_else(|| {
        (0..p)
            .map(|r| {
                let mut set = BitSet::new(p as usize);
                set.insert(held[r as usize]);
                set
            })
            .collect()
    });
    let mut gathered: Vec<Vec<Rank>> = (0..p).map(|r| vec![r]).collect();
    let mut out = Vec::with_capacity(steps as usize);
    for i in 0..steps {
        let mut step = Vec::with_capacity(p as usize);
        let mut next = gathered.clone();
        let mut next_have = have.clone();
        for r in 0..p {
            let q = partner(r, i);
            let missing: Vec<u32> = gathered[r as usize]
                .iter()
                .map(|&x| held[x as usize])
                .filter(|&b| !have[q as usize].contains(b))
                .collect();
            for &b in &missing {
                next_have[q as usize].insert(b);
            }
            if !missing.is_empty() {
                step.push(Transfer {
                    src: r,
                    dst: q,
                    blocks: BlockSet::from_positions(missing, p),
                    block_bytes,
                    reduce: false,
                });
            }
            next[q as usize].extend_from_slice(&gathered[r as usize]);
        }
        gathered = next;
        have = next_have;
        out.push(step);
    }
    out
}

/// Blocks each rank holds after `steps`, starting from `root` holding all.
fn holdings_after(p: u32, root: Rank, steps: &[Vec<Transfer>]) -> Vec<BitSet> {
    let mut have: Vec<BitSet> = (0..p).map(|_| BitSet::new(p as usize)).collect();
    for b in 0..p {
        have[root as usize].insert(b);
    }
    for t in steps.iter().flatten() {
        for b in t.blocks.positions() {
            have[t.dst as usize].insert(b);
        }
    }
    have
}

fn bit_reverse(x: u32, width: u32) -> u32 {
    x.reverse_bits() >> (32 - width)
}

/// Position of rank `x`'s block after moving block `r` to `reverse(ν(r))`.
pub fn reversed_nu_positions(p: u32) -> Result<Vec<u32>> {
    let s = steps_for(p)?;
    let table = NuTable::new(p)?;
    Ok((0..p).map(|x| bit_reverse(table.nu(x), s)).collect())
}

fn invert(permutation: &[u32]) -> Vec<u32> {
    let mut inverse = vec![0; permutation.len()];
    for (i, &x) in permutation.iter().enumerate() {
        inverse[x as usize] = i as u32;
    }
    inverse
}

/// The range `[a, b]` a Bine root holds before the first scatter step, from
/// the alternating-sum rule: even ranks extend `b` by `2^0 + 2^2 + …` and `a`
/// by `−(2^1 + 2^3 + …)`, odd ranks the other way round.
pub fn bine_scatter_initial_range(r: Rank, p: u32) -> Result<BlockRange> {
    let s = steps_for(p)?;
    if r >= p {
        return Err(Error::RankOutOfRange { rank: r, p });
    }
    let even_sum: u64 = (0..s).step_by(2).map(|j| 1u64 << j).sum();
    let odd_sum: u64 = (1..s).step_by(2).map(|j| 1u64 << j).sum();
    let (down, up) = if r % 2 == 0 { (odd_sum, even_sum) } else { (even_sum, odd_sum) };
    let p64 = u64::from(p);
    let a = (u64::from(r) + p64 - down % p64) % p64;
    let b = (u64::from(r) + up) % p64;
    BlockRange::new(a as u32, b as u32, p)
}

pub fn build_bcast(p: u32, root: Rank, n: u64, variant: Variant) -> Result<CommSchedule> {
    check_request(Collective::Broadcast, variant, p, root)?;
    let s = steps_for(p)?;
    let small = |kind| -> Result<CommSchedule> {
        let bytes = whole_vector_bytes(n)?;
        let tree = build_tree(kind, p, root)?;
        Ok(Builder {
            collective: Collective::Broadcast,
            algorithm: variant,
            p,
            n,
            root: Some(root),
            blocks: 1,
            block_bytes: bytes,
        }
        .finish(tree_bcast_steps(&tree, bytes)))
    };
    match variant {
        Variant::BineSmall => small(TreeKind::BineHalving),
        Variant::BinomialDoubling => small(TreeKind::BinomialDoubling),
        Variant::BinomialHalving => small(TreeKind::BinomialHalving),
        Variant::BineLarge => {
            let block_bytes = block_bytes_for(n, p)?;
            let held = reversed_nu_positions(p)?;
            let tree = build_tree(TreeKind::BineDoubling, p, root)?;
            let bfly = Butterfly::new(ButterflyKind::BineHalving, p)?;
            let mut steps = tree_scatter_steps(&tree, &held, block_bytes);
            let have = holdings_after(p, root, &steps);
            steps.extend(gathering_steps(p, s, |r, i| bfly.partner(r, i), &held, Some(have), block_bytes));
            Ok(Builder {
                collective: Collective::Broadcast,
                algorithm: variant,
                p,
                n,
                root: Some(root),
                blocks: p,
                block_bytes,
            }
            .finish(steps))
        }
        Variant::BinomialSag => {
            let block_bytes = block_bytes_for(n, p)?;
            let held: Vec<u32> = (0..p).map(|x| to_virtual(x, root, p)).collect();
            let tree = build_tree(TreeKind::BinomialHalving, p, root)?;
            let mut steps = tree_scatter_steps(&tree, &held, block_bytes);
            let partner = |r, i: u32| from_virtual(to_virtual(r, root, p) ^ (1u32 << i), root, p);
            let have = holdings_after(p, root, &steps);
            steps.extend(gathering_steps(p, s, partner, &held, Some(have), block_bytes));
            Ok(Builder {
                collective: Collective::Broadcast,
                algorithm: variant,
                p,
                n,
                root: Some(root),
                blocks: p,
                block_bytes,
            }
            .finish(steps))
        }
        _ => unreachable!("checked by check_request"),
    }
}

pub fn build_reduce(p: u32, root: Rank, n: u64, variant: Variant) -> Result<CommSchedule> {
    check_request(Collective::Reduce, variant, p, root)?;
    let small = |kind| -> Result<CommSchedule> {
        let bytes = whole_vector_bytes(n)?;
        let tree = build_tree(kind, p, root)?;
        Ok(Builder {
            collective: Collective::Reduce,
            algorithm: variant,
            p,
            n,
            root: Some(root),
            blocks: 1,
            block_bytes: bytes,
        }
        .finish(reversed(tree_bcast_steps(&tree, bytes), true)))
    };
    match variant {
        Variant::BineSmall => small(TreeKind::BineHalving),
        Variant::Binomial => small(TreeKind::BinomialHalving),
        Variant::BineLarge => {
            let block_bytes = block_bytes_for(n, p)?;
            let positions = reversed_nu_positions(p)?;
            let bfly = Butterfly::new(ButterflyKind::BineDoubling, p)?;
            let mut steps = butterfly_reduce_scatter_steps(&bfly, &positions, block_bytes);
            let tree = build_tree(TreeKind::BineHalving, p, root)?;
            steps.extend(reversed(tree_scatter_steps(&tree, &positions, block_bytes), false));
            Ok(Builder {
                collective: Collective::Reduce,
                algorithm: variant,
                p,
                n,
                root: Some(root),
                blocks: p,
                block_bytes,
            }
            .finish(steps))
        }
        _ => unreachable!("checked by check_request"),
    }
}

fn tree_kind_for_blocks(variant: Variant) -> TreeKind {
    match variant {
        Variant::Bine => TreeKind::BineHalving,
        _ => TreeKind::BinomialHalving,
    }
}

pub fn build_gather(p: u32, root: Rank, n: u64, variant: Variant) -> Result<CommSchedule> {
    let mut schedule = build_scatter(p, root, n, variant).map_err(|e| match e {
        Error::Unsupported(msg) => Error::Unsupported(msg.replace("scatter", "gather")),
        other => other,
    })?;
    schedule.collective = Collective::Gather;
    schedule.steps = reversed(std::mem::take(&mut schedule.steps), false);
    for step in &mut schedule.steps {
        step.sort_by_key(|t| (t.src, t.dst));
    }
    Ok(schedule)
}

pub fn build_scatter(p: u32, root: Rank, n: u64, variant: Variant) -> Result<CommSchedule> {
    check_request(Collective::Scatter, variant, p, root)?;
    let block_bytes = block_bytes_for(n, p)?;
    let tree = build_tree(tree_kind_for_blocks(variant), p, root)?;
    let identity: Vec<u32> = (0..p).collect();
    Ok(Builder {
        collective: Collective::Scatter,
        algorithm: variant,
        p,
        n,
        root: Some(root),
        blocks: p,
        block_bytes,
    }
    .finish(tree_scatter_steps(&tree, &identity, block_bytes)))
}

pub fn build_reduce_scatter(p: u32, n: u64, variant: Variant, contiguity: Contiguity) -> Result<CommSchedule> {
    check_request(Collective::ReduceScatter, variant, p, 0)?;
    let block_bytes = block_bytes_for(n, p)?;
    let builder = Builder {
        collective: Collective::ReduceScatter,
        algorithm: variant,
        p,
        n,
        root: None,
        blocks: p,
        block_bytes,
    };
    let identity: Vec<u32> = (0..p).collect();
    match variant {
        Variant::Bine => {
            let bfly = Butterfly::new(ButterflyKind::BineDoubling, p)?;
            let positions = match contiguity {
                Contiguity::Noncontig => identity,
                Contiguity::PrePermute | Contiguity::UnpermutedOutput => reversed_nu_positions(p)?,
            };
            let mut schedule = builder.finish(butterfly_reduce_scatter_steps(&bfly, &positions, block_bytes));
            schedule.contiguity = Some(contiguity);
            match contiguity {
                Contiguity::Noncontig => {}
                Contiguity::PrePermute => schedule.layout = Some(invert(&positions)),
                Contiguity::UnpermutedOutput => {
                    schedule.final_permutation = Some(FinalPermutation::Exchange { destination: positions })
                }
            }
            Ok(schedule)
        }
        Variant::RecursiveHalving => {
            let bfly = Butterfly::new(ButterflyKind::RecursiveDoubling, p)?;
            Ok(builder.finish(butterfly_reduce_scatter_steps(&bfly, &identity, block_bytes)))
        }
        Variant::Ring => Ok(builder.finish(ring_reduce_scatter_steps(p, block_bytes))),
        _ => unreachable!("checked by check_request"),
    }
}

fn ring_reduce_scatter_steps(p: u32, block_bytes: u64) -> Vec<Vec<Transfer>> {
    (0..p - 1)
        .map(|k| {
            (0..p)
                .map(|r| Transfer {
                    src: r,
                    dst: (r + 1) % p,
                    blocks: BlockSet::single((r + 2 * p - k - 1) % p, p),
                    block_bytes,
                    reduce: true,
                })
                .collect()
        })
        .collect()
}

/// Ring allgather where rank `x` starts with block `held[x]`.
fn ring_allgather_steps(p: u32, held: &[u32], block_bytes: u64) -> Vec<Vec<Transfer>> {
    (0..p - 1)
        .map(|k| {
            (0..p)
                .map(|r| Transfer {
                    src: r,
                    dst: (r + 1) % p,
                    blocks: BlockSet::single(held[((r + p - k) % p) as usize], p),
                    block_bytes,
                    reduce: false,
                })
                .collect()
        })
        .collect()
}

pub fn build_allgather(p: u32, n: u64, variant: Variant) -> Result<CommSchedule> {
    check_request(Collective::Allgather, variant, p, 0)?;
    let block_bytes = block_bytes_for(n, p)?;
    let builder = Builder {
        collective: Collective::Allgather,
        algorithm: variant,
        p,
        n,
        root: None,
        blocks: p,
        block_bytes,
    };
    let identity: Vec<u32> = (0..p).collect();
    let butterfly = |kind| -> Result<Vec<Vec<Transfer>>> {
        let bfly = Butterfly::new(kind, p)?;
        Ok(gathering_steps(p, bfly.steps(), |r, i| bfly.partner(r, i), &identity, None, block_bytes))
    };
    let steps = match variant {
        Variant::Bine => butterfly(ButterflyKind::BineHalving)?,
        Variant::RecursiveDoubling => butterfly(ButterflyKind::RecursiveDoubling)?,
        Variant::SparbitLike => butterfly(ButterflyKind::RecursiveHalving)?,
        Variant::Ring => ring_allgather_steps(p, &identity, block_bytes),
        Variant::Bruck => {
            let s = steps_for(p)?;
            (0..s)
                .map(|i| {
                    let count = 1u32 << i;
                    (0..p)
                        .map(|r| Transfer {
                            src: r,
                            dst: (r + p - count) % p,
                            blocks: BlockSet::Range(BlockRange::starting_at(r, count, p).expect("count <= p")),
                            block_bytes,
                            reduce: false,
                        })
                        .collect()
                })
                .collect()
        }
        _ => unreachable!("checked by check_request"),
    };
    Ok(builder.finish(steps))
}

pub fn build_allreduce(p: u32, n: u64, variant: Variant) -> Result<CommSchedule> {
    check_request(Collective::Allreduce, variant, p, 0)?;
    let exchange = |kind| -> Result<CommSchedule> {
        let bytes = whole_vector_bytes(n)?;
        let bfly = Butterfly::new(kind, p)?;
        let steps = (0..bfly.steps())
            .map(|i| (0..p).map(|r| whole(r, bfly.partner(r, i), bytes, true)).collect())
            .collect();
        Ok(Builder {
            collective: Collective::Allreduce,
            algorithm: variant,
            p,
            n,
            root: None,
            blocks: 1,
            block_bytes: bytes,
        }
        .finish(steps))
    };
    let split = |steps: Vec<Vec<Transfer>>, block_bytes| {
        Builder {
            collective: Collective::Allreduce,
            algorithm: variant,
            p,
            n,
            root: None,
            blocks: p,
            block_bytes,
        }
        .finish(steps)
    };
    match variant {
        Variant::BineSmall => exchange(ButterflyKind::BineHalving),
        Variant::RecursiveDoubling => exchange(ButterflyKind::RecursiveDoubling),
        Variant::BineLarge => {
            let block_bytes = block_bytes_for(n, p)?;
            let positions = reversed_nu_positions(p)?;
            let doubling = Butterfly::new(ButterflyKind::BineDoubling, p)?;
            let halving = Butterfly::new(ButterflyKind::BineHalving, p)?;
            let mut steps = butterfly_reduce_scatter_steps(&doubling, &positions, block_bytes);
            steps.extend(gathering_steps(p, halving.steps(), |r, i| halving.partner(r, i), &positions, None, block_bytes));
            Ok(split(steps, block_bytes))
        }
        Variant::RabenseifnerLike => {
            let block_bytes = block_bytes_for(n, p)?;
            let identity: Vec<u32> = (0..p).collect();
            let doubling = Butterfly::new(ButterflyKind::RecursiveDoubling, p)?;
            let halving = Butterfly::new(ButterflyKind::RecursiveHalving, p)?;
            let mut steps = butterfly_reduce_scatter_steps(&doubling, &identity, block_bytes);
            steps.extend(gathering_steps(p, halving.steps(), |r, i| halving.partner(r, i), &identity, None, block_bytes));
            Ok(split(steps, block_bytes))
        }
        Variant::Ring => {
            let block_bytes = block_bytes_for(n, p)?;
            let identity: Vec<u32> = (0..p).collect();
            let mut steps = ring_reduce_scatter_steps(p, block_bytes);
            // after the reduce-scatter rank r owns block r
            steps.extend(ring_allgather_steps(p, &identity, block_bytes));
            Ok(split(steps, block_bytes))
        }
        _ => unreachable!("checked by check_request"),
    }
}

/// Identifier of the alltoall block sent from `src` to `dst`.
pub fn alltoall_item(src: Rank, dst: Rank, p: u32) -> u32 {
    src * p + dst
}

pub fn build_alltoall(p: u32, n: u64, variant: Variant) -> Result<CommSchedule> {
    check_request(Collective::Alltoall, variant, p, 0)?;
    let block_bytes = block_bytes_for(n, p)?;
    let items = p * p;
    let list = |mut v: Vec<u32>| {
        v.sort_unstable();
        BlockSet::List(v)
    };
    let mut final_permutation = None;
    let steps: Vec<Vec<Transfer>> = match variant {
        Variant::Bine | Variant::Bruck => {
            let s = steps_for(p)?;
            let bfly = match variant {
                Variant::Bine => Some(Butterfly::new(ButterflyKind::BineHalving, p)?),
                _ => None,
            };
            // (item, destination) pairs held by each rank
            let mut held: Vec<Vec<(u32, Rank)>> = (0..p)
                .map(|r| (0..p).map(|d| (alltoall_item(r, d, p), d)).collect())
                .collect();
            let mut steps = Vec::with_capacity(s as usize);
            for i in 0..s {
                let mut incoming: Vec<Vec<(u32, Rank)>> = vec![Vec::new(); p as usize];
                let mut step = Vec::with_capacity(p as usize);
                for h in 0..p {
                    let (target, forward): (Rank, Box<dyn Fn(Rank) -> bool>) = match &bfly {
                        Some(b) => {
                            let q = b.partner(h, i);
                            (q, Box::new(move |d| b.reaches(q, i + 1, d)))
                        }
                        None => (
                            (h + p - (1 << i)) % p,
                            Box::new(move |d| ((h + p - d) % p) >> i & 1 == 1),
                        ),
                    };
                    let (send, keep): (Vec<_>, Vec<_>) =
                        std::mem::take(&mut held[h as usize]).into_iter().partition(|&(_, d)| forward(d));
                    held[h as usize] = keep;
                    step.push(Transfer {
                        src: h,
                        dst: target,
                        blocks: list(send.iter().map(|&(item, _)| item).collect()),
                        block_bytes,
                        reduce: false,
                    });
                    incoming[target as usize].extend(send);
                }
                for (h, mut extra) in incoming.into_iter().enumerate() {
                    held[h].append(&mut extra);
                }
                steps.push(step);
            }
            final_permutation = Some(FinalPermutation::LocalReorder);
            steps
        }
        Variant::Pairwise => (1..p)
            .map(|k| {
                (0..p)
                    .map(|r| {
                        let dst = (r + k) % p;
                        Transfer {
                            src: r,
                            dst,
                            blocks: BlockSet::single(alltoall_item(r, dst, p), items),
                            block_bytes,
                            reduce: false,
                        }
                    })
                    .collect()
            })
            .collect(),
        Variant::Linear => vec![(0..p)
            .flat_map(|r| {
                (0..p).filter(move |&d| d != r).map(move |dst| Transfer {
                    src: r,
                    dst,
                    blocks: BlockSet::single(alltoall_item(r, dst, p), items),
                    block_bytes,
                    reduce: false,
                })
            })
            .collect()],
        _ => unreachable!("checked by check_request"),
    };
    let mut schedule = Builder {
        collective: Collective::Alltoall,
        algorithm: variant,
        p,
        n,
        root: None,
        blocks: p,
        block_bytes,
    }
    .finish(steps);
    schedule.final_permutation = final_permutation;
    Ok(schedule)
}

/// Every (variant, contiguity) combination of a collective.
pub fn variant_matrix(collective: Collective) -> Vec<(Variant, Contiguity)> {
    collective
        .variants()
        .iter()
        .flat_map(|&v| {
            if collective == Collective::ReduceScatter && v == Variant::Bine {
                Contiguity::ALL.to_vec()
            } else {
                vec![Contiguity::Noncontig]
            }
            .into_iter()
            .map(move |c| (v, c))
        })
        .collect()
}
