//! Butterfly patterns: every rank exchanges with exactly one partner per step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitset::BitSet;
use crate::{steps_for, Error, Rank, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ButterflyKind {
    BineHalving,
    BineDoubling,
    /// Binary butterfly, partners differ in bit `s - i - 1`.
    RecursiveHalving,
    /// Binary butterfly, partners differ in bit `i`.
    RecursiveDoubling,
}

impl ButterflyKind {
    pub const ALL: [ButterflyKind; 4] = [
        ButterflyKind::BineHalving,
        ButterflyKind::BineDoubling,
        ButterflyKind::RecursiveHalving,
        ButterflyKind::RecursiveDoubling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ButterflyKind::BineHalving => "bine_halving",
            ButterflyKind::BineDoubling => "bine_doubling",
            ButterflyKind::RecursiveHalving => "recursive_halving",
            ButterflyKind::RecursiveDoubling => "recursive_doubling",
        }
    }
}

impl fmt::Display for ButterflyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ButterflyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ButterflyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown butterfly kind `{s}`")))
    }
}

/// Signed offset `(1 − (−2)^k) / 3` between rank 0 and its partner when the
/// `k` lowest negabinary digits are flipped. Always odd.
pub fn bine_offset(k: u32) -> i64 {
    assert!((1..63).contains(&k));
    let power = 1i64 << k;
    if k % 2 == 0 {
        (1 - power) / 3
    } else {
        (1 + power) / 3
    }
}

pub fn butterfly_partner(kind: ButterflyKind, r: Rank, i: u32, p: u32) -> Result<Rank> {
    let s = steps_for(p)?;
    if r >= p {
        return Err(Error::RankOutOfRange { rank: r, p });
    }
    if i >= s {
        return Err(Error::StepOutOfRange { step: i, steps: s });
    }
    Ok(partner_unchecked(kind, r, i, p, s))
}

fn partner_unchecked(kind: ButterflyKind, r: Rank, i: u32, p: u32, s: u32) -> Rank {
    let bine = |k: u32| {
        let offset = bine_offset(k);
        let signed = if r % 2 == 0 { offset } else { -offset };
        (i64::from(r) + signed).rem_euclid(i64::from(p)) as Rank
    };
    match kind {
        ButterflyKind::BineHalving => bine(s - i),
        ButterflyKind::BineDoubling => bine(i + 1),
        ButterflyKind::RecursiveHalving => r ^ (1 << (s - i - 1)),
        ButterflyKind::RecursiveDoubling => r ^ (1 << i),
    }
}

/// A butterfly materialized for one rank count, with the sets of ranks that
/// stay reachable from each rank when only the remaining steps are used.
#[derive(Clone, Debug)]
pub struct Butterfly {
    kind: ButterflyKind,
    p: u32,
    partners: Vec<Vec<Rank>>,
    /// `reach[i][r]`: ranks reachable from `r` using steps `i..s`.
    reach: Vec<Vec<BitSet>>,
}

impl Butterfly {
    pub fn new(kind: ButterflyKind, p: u32) -> Result<Self> {
        let s = steps_for(p)?;
        let partners: Vec<Vec<Rank>> = (0..s)
            .map(|i| (0..p).map(|r| partner_unchecked(kind, r, i, p, s)).collect())
            .collect();
        let mut reach = vec![Vec::new(); s as usize + 1];
        reach[s as usize] = (0..p)
            .map(|r| {
                let mut set = BitSet::new(p as usize);
                set.insert(r);
                set
            })
            .collect();
        for i in (0..s as usize).rev() {
            let later = &reach[i + 1];
            let current = (0..p as usize)
                .map(|r| {
                    let mut set = later[r].clone();
                    set.union_with(&later[partners[i][r] as usize]);
                    set
                })
                .collect();
            reach[i] = current;
        }
        Ok(Self {
            kind,
            p,
            partners,
            reach,
        })
    }

    pub fn kind(&self) -> ButterflyKind {
        self.kind
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn steps(&self) -> u32 {
        self.partners.len() as u32
    }

    pub fn partner(&self, r: Rank, i: u32) -> Rank {
        self.partners[i as usize][r as usize]
    }

    /// Ranks reachable from `r` using steps `from_step..s` (sorted).
    pub fn reachable(&self, r: Rank, from_step: u32) -> Vec<Rank> {
        self.reach[from_step as usize][r as usize].iter().collect()
    }

    pub fn reaches(&self, r: Rank, from_step: u32, target: Rank) -> bool {
        self.reach[from_step as usize][r as usize].contains(target)
    }

    #[cfg(test)]
    fn reach_size(&self, r: Rank, from_step: u32) -> usize {
        self.reach[from_step as usize][r as usize].len()
    }
}
