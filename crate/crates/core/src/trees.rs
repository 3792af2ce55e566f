//! Broadcast trees: distance-halving and distance-doubling Bine trees and
//! the two binomial orientations they are compared against.
//!
//! All trees are described for root 0 over *virtual* ranks and relabeled by
//! adding the root modulo `p`, so every query takes the real root and rank.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::negabinary::{nb2rank, rank2nb, trailing_equal_bits};
use crate::{steps_for, Error, Rank, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    BineHalving,
    BineDoubling,
    BinomialHalving,
    BinomialDoubling,
}

impl TreeKind {
    pub const ALL: [TreeKind; 4] = [
        TreeKind::BineHalving,
        TreeKind::BineDoubling,
        TreeKind::BinomialHalving,
        TreeKind::BinomialDoubling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TreeKind::BineHalving => "bine_halving",
            TreeKind::BineDoubling => "bine_doubling",
            TreeKind::BinomialHalving => "binomial_halving",
            TreeKind::BinomialDoubling => "binomial_doubling",
        }
    }
}

impl fmt::Display for TreeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TreeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TreeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown tree kind `{s}`")))
    }
}

/// One parent/child link, active at `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeEdge {
    pub child: Rank,
    pub parent: Rank,
    pub step: u32,
}

/// A materialized spanning tree, with edges sorted by step and then parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTree {
    kind: TreeKind,
    p: u32,
    root: Rank,
    edges: Vec<TreeEdge>,
}

impl CommTree {
    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn root(&self) -> Rank {
        self.root
    }

    pub fn steps(&self) -> u32 {
        self.p.trailing_zeros()
    }

    pub fn edges(&self) -> &[TreeEdge] {
        &self.edges
    }

    pub fn edges_at(&self, step: u32) -> impl Iterator<Item = &TreeEdge> {
        self.edges.iter().filter(move |e| e.step == step)
    }

    pub fn parent(&self, r: Rank) -> Option<&TreeEdge> {
        self.edges.iter().find(|e| e.child == r)
    }

    pub fn children(&self, r: Rank) -> Vec<Rank> {
        self.edges
            .iter()
            .filter(|e| e.parent == r)
            .map(|e| e.child)
            .collect()
    }

    /// Descendants of `r` (including `r`) found by walking the edges.
    pub fn subtree(&self, r: Rank) -> Vec<Rank> {
        let mut out = vec![r];
        let mut next = 0;
        while next < out.len() {
            let current = out[next];
            out.extend(self.children(current));
            next += 1;
        }
        out.sort_unstable();
        out
    }

    /// Checks that the edges form a spanning tree in which every rank is
    /// busy with at most one edge per step and every step index is valid.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Unsupported(format!("malformed tree: {msg}")));
        let p = self.p as usize;
        if self.edges.len() != p - 1 {
            return bad(format!("{} edges for {} ranks", self.edges.len(), p));
        }
        let mut parent = vec![None; p];
        for e in &self.edges {
            if e.step >= self.steps() {
                return bad(format!("step {} out of range", e.step));
            }
            if e.child == self.root || parent[e.child as usize].is_some() {
                return bad(format!("rank {} has two parents", e.child));
            }
            parent[e.child as usize] = Some((e.parent, e.step));
        }
        for step in 0..self.steps() {
            let mut busy = vec![false; p];
            for e in self.edges_at(step) {
                for r in [e.child, e.parent] {
                    if std::mem::replace(&mut busy[r as usize], true) {
                        return bad(format!("rank {r} used twice at step {step}"));
                    }
                }
            }
        }
        // Data must reach the parent strictly before it is forwarded.
        for r in 0..p {
            let mut current = r;
            let mut hops = 0;
            while let Some((up, step)) = parent[current] {
                if let Some((_, up_step)) = parent[up as usize] {
                    if up_step >= step {
                        return bad(format!("rank {up} forwards before it receives"));
                    }
                }
                current = up as usize;
                hops += 1;
                if hops > p {
                    return bad("cycle".into());
                }
            }
            if current != self.root as usize {
                return bad(format!("rank {r} not connected to the root"));
            }
        }
        Ok(())
    }
}

/// The ν representation of a rank, used by distance-doubling Bine trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NuCode {
    pub value: u64,
    pub width: u32,
    pub odd: bool,
}

impl fmt::Display for NuCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.value, width = self.width as usize)
    }
}

fn check_rank(r: Rank, p: u32) -> Result<()> {
    if r < p {
        Ok(())
    } else {
        Err(Error::RankOutOfRange { rank: r, p })
    }
}

fn check_step(i: u32, s: u32) -> Result<()> {
    if i < s {
        Ok(())
    } else {
        Err(Error::StepOutOfRange { step: i, steps: s })
    }
}

pub(crate) fn to_virtual(r: Rank, root: Rank, p: u32) -> Rank {
    (r + p - root) % p
}

pub(crate) fn from_virtual(v: Rank, root: Rank, p: u32) -> Rank {
    (v + root) % p
}

pub fn nu(r: Rank, p: u32) -> Result<NuCode> {
    let width = steps_for(p)?;
    check_rank(r, p)?;
    let h = if r % 2 == 0 {
        rank2nb((p - r) % p, p)?
    } else {
        rank2nb(r, p)?
    }
    .bits();
    Ok(NuCode {
        value: h ^ (h >> 1),
        width,
        odd: r % 2 == 1,
    })
}

/// ν for every rank of a `p`-rank collective, together with its inverse.
#[derive(Clone, Debug)]
pub struct NuTable {
    forward: Vec<u32>,
    inverse: Vec<Rank>,
}

impl NuTable {
    pub fn new(p: u32) -> Result<Self> {
        steps_for(p)?;
        let forward = (0..p)
            .map(|r| nu(r, p).map(|c| c.value as u32))
            .collect::<Result<Vec<_>>>()?;
        let mut inverse = vec![Rank::MAX; p as usize];
        for (r, &pattern) in forward.iter().enumerate() {
            if inverse[pattern as usize] != Rank::MAX {
                return Err(Error::Unsupported(format!(
                    "nu is not a bijection for p = {p} (pattern {pattern:b})"
                )));
            }
            inverse[pattern as usize] = r as Rank;
        }
        Ok(Self { forward, inverse })
    }

    pub fn nu(&self, r: Rank) -> u32 {
        self.forward[r as usize]
    }

    pub fn rank_with(&self, pattern: u32) -> Rank {
        self.inverse[pattern as usize]
    }

    /// Partner of virtual rank `v` at step `i` (flip bit `i` of ν).
    pub fn partner(&self, v: Rank, i: u32) -> Rank {
        self.rank_with(self.nu(v) ^ (1 << i))
    }
}

/// Partner at step `i` in the distance-halving Bine tree rooted at `root`:
/// the rank whose negabinary code differs in the `s - i` lowest digits.
pub fn halving_partner(r: Rank, i: u32, p: u32, root: Rank) -> Result<Rank> {
    let s = steps_for(p)?;
    check_rank(r, p)?;
    check_rank(root, p)?;
    check_step(i, s)?;
    let code = rank2nb(to_virtual(r, root, p), p)?;
    let q = nb2rank(code.flip_low(s - i), p)?;
    Ok(from_virtual(q, root, p))
}

/// Step at which `r` receives from its parent in the distance-halving Bine
/// tree.
pub fn halving_join_step(r: Rank, p: u32, root: Rank) -> Result<u32> {
    let s = steps_for(p)?;
    check_rank(r, p)?;
    check_rank(root, p)?;
    if r == root {
        return Err(Error::RootHasNoParent(r));
    }
    let code = rank2nb(to_virtual(r, root, p), p)?;
    Ok(s - trailing_equal_bits(code))
}

pub fn doubling_partner(r: Rank, i: u32, p: u32, root: Rank) -> Result<Rank> {
    let s = steps_for(p)?;
    check_rank(r, p)?;
    check_rank(root, p)?;
    check_step(i, s)?;
    let table = NuTable::new(p)?;
    Ok(from_virtual(table.partner(to_virtual(r, root, p), i), root, p))
}

/// Step at which `r` receives in the distance-doubling Bine tree: the
/// position of the highest set bit of ν.
pub fn doubling_join_step(r: Rank, p: u32, root: Rank) -> Result<u32> {
    steps_for(p)?;
    check_rank(r, p)?;
    check_rank(root, p)?;
    if r == root {
        return Err(Error::RootHasNoParent(r));
    }
    let code = nu(to_virtual(r, root, p), p)?;
    Ok(63 - code.value.leading_zeros())
}

/// Join step and parent of virtual rank `v` (not the root).
fn virtual_parent(kind: TreeKind, v: Rank, p: u32, s: u32, nu: Option<&NuTable>) -> Result<(Rank, u32)> {
    debug_assert!(v != 0);
    Ok(match kind {
        TreeKind::BineHalving => {
            let code = rank2nb(v, p)?;
            let step = s - trailing_equal_bits(code);
            (nb2rank(code.flip_low(s - step), p)?, step)
        }
        TreeKind::BineDoubling => {
            let table = nu.expect("nu table for doubling trees");
            let pattern = table.nu(v);
            let step = 31 - pattern.leading_zeros();
            (table.rank_with(pattern ^ (1 << step)), step)
        }
        TreeKind::BinomialHalving => {
            let low = v.trailing_zeros();
            (v & (v - 1), s - 1 - low)
        }
        TreeKind::BinomialDoubling => {
            let high = 31 - v.leading_zeros();
            (v ^ (1 << high), high)
        }
    })
}

/// Members of the subtree rooted at `r` (including `r`), sorted.
///
/// Uses the digit characterization of each kind: halving Bine subtrees share
/// the leading `i + 1` negabinary digits, doubling Bine subtrees share the
/// trailing `i + 1` bits of ν, where `i` is the join step of `r`.
pub fn subtree_members(r: Rank, kind: TreeKind, p: u32, root: Rank) -> Result<Vec<Rank>> {
    let s = steps_for(p)?;
    check_rank(r, p)?;
    check_rank(root, p)?;
    if r == root {
        return Ok((0..p).collect());
    }
    let v = to_virtual(r, root, p);
    let mut members: Vec<Rank> = match kind {
        TreeKind::BineHalving => {
            let step = halving_join_step(r, p, root)?;
            let prefix = rank2nb(v, p)?.high_digits(step + 1);
            let mut out = Vec::new();
            for w in 0..p {
                if rank2nb(w, p)?.high_digits(step + 1) == prefix {
                    out.push(w);
                }
            }
            out
        }
        TreeKind::BineDoubling => {
            let table = NuTable::new(p)?;
            let pattern = table.nu(v);
            let step = 31 - pattern.leading_zeros();
            let mask = (1u32 << (step + 1)) - 1;
            (0..p).filter(|&w| table.nu(w) & mask == pattern & mask).collect()
        }
        TreeKind::BinomialHalving => {
            let size = 1u32 << v.trailing_zeros();
            (v..v + size).collect()
        }
        TreeKind::BinomialDoubling => {
            let high = 31 - v.leading_zeros();
            let modulus = 1u32 << (high + 1);
            (0..p).filter(|&w| w % modulus == v).collect()
        }
    }
    .into_iter()
    .map(|w| from_virtual(w, root, p))
    .collect();
    debug_assert!(members.len() <= (p >> 1) as usize || s == 0);
    members.sort_unstable();
    Ok(members)
}

pub fn build_tree(kind: TreeKind, p: u32, root: Rank) -> Result<CommTree> {
    let s = steps_for(p)?;
    check_rank(root, p)?;
    let table = match kind {
        TreeKind::BineDoubling => Some(NuTable::new(p)?),
        _ => None,
    };
    let mut edges = Vec::with_capacity(p as usize - 1);
    for v in 1..p {
        let (parent, step) = virtual_parent(kind, v, p, s, table.as_ref())?;
        edges.push(TreeEdge {
            child: from_virtual(v, root, p),
            parent: from_virtual(parent, root, p),
            step,
        });
    }
    edges.sort_by_key(|e| (e.step, e.parent, e.child));
    Ok(CommTree {
        kind,
        p,
        root,
        edges,
    })
}

/// Modulo distance covered at step `i` of an `s`-step distance-halving Bine
/// tree: `|Σ_{j<s-i} (−2)^j| = (2^{s-i} − (−1)^{s-i}) / 3`.
pub fn bine_distance(i: u32, s: u32) -> u64 {
    assert!(i < s && s < 64, "step {i} out of range for {s} steps");
    let k = s - i;
    let power = 1u64 << k;
    if k % 2 == 0 {
        (power - 1) / 3
    } else {
        (power + 1) / 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulo_distance;

    #[test]
    fn halving_partner_examples() {
        assert_eq!(halving_partner(8, 2, 16, 0).unwrap(), 7);
        assert_eq!(halving_partner(0, 1, 16, 0).unwrap(), 3);
        assert_eq!(halving_partner(3, 2, 16, 0).unwrap(), 4);
        for r in 0..16 {
            for i in 0..4 {
                let q = halving_partner(r, i, 16, 0).unwrap();
                assert_eq!(halving_partner(q, i, 16, 0).unwrap(), r);
            }
        }
    }

    #[test]
    fn halving_join_step_examples() {
        assert_eq!(halving_join_step(8, 16, 0).unwrap(), 1);
        assert_eq!(halving_join_step(3, 16, 0).unwrap(), 1);
        assert!(matches!(halving_join_step(5, 16, 5), Err(Error::RootHasNoParent(5))));
        for root in 0..16 {
            for r in (0..16).filter(|&r| r != root) {
                assert_eq!(
                    halving_join_step(r, 16, root).unwrap(),
                    halving_join_step((r + 16 - root) % 16, 16, 0).unwrap()
                );
            }
        }
    }

    #[test]
    fn nu_examples() {
        assert_eq!(nu(2, 8).unwrap().to_string(), "011");
        assert_eq!(nu(5, 8).unwrap().to_string(), "111");
        assert_eq!(nu(1, 8).unwrap().value & 1, 1);
        assert!(nu(1, 8).unwrap().odd);
    }

    #[test]
    fn doubling_examples() {
        assert_eq!(doubling_partner(2, 2, 8, 0).unwrap(), 5);
        assert_eq!(doubling_partner(0, 0, 8, 0).unwrap(), 1);
        assert_eq!(doubling_join_step(2, 8, 0).unwrap(), 1);
        assert_eq!(doubling_join_step(1, 8, 0).unwrap(), 0);
        assert_eq!(doubling_join_step(5, 8, 0).unwrap(), 2);
        for r in 0..8 {
            for i in 0..3 {
                let q = doubling_partner(r, i, 8, 0).unwrap();
                assert_eq!(doubling_partner(q, i, 8, 0).unwrap(), r);
            }
        }
    }

    #[test]
    fn step_out_of_range() {
        assert!(matches!(halving_partner(0, 3, 8, 0), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(doubling_partner(0, 4, 8, 0), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(build_tree(TreeKind::BineHalving, 12, 0), Err(Error::UnsupportedRankCount(12))));
    }

    #[test]
    fn subtree_examples() {
        assert_eq!(subtree_members(8, TreeKind::BineHalving, 16, 0).unwrap(), vec![6, 7, 8, 9]);
        assert_eq!(subtree_members(3, TreeKind::BineHalving, 16, 3).unwrap().len(), 16);
        // rank 1 joins at step 3 = s - 1 in the 16-rank halving tree
        assert_eq!(halving_join_step(1, 16, 0).unwrap(), 3);
        assert_eq!(subtree_members(1, TreeKind::BineHalving, 16, 0).unwrap(), vec![1]);
    }

    #[test]
    fn binomial_trees_match_motivating_figure() {
        let doubling = build_tree(TreeKind::BinomialDoubling, 8, 0).unwrap();
        let pairs = |t: &CommTree, step| {
            t.edges_at(step).map(|e| (e.parent, e.child)).collect::<Vec<_>>()
        };
        assert_eq!(pairs(&doubling, 0), vec![(0, 1)]);
        assert_eq!(pairs(&doubling, 1), vec![(0, 2), (1, 3)]);
        assert_eq!(pairs(&doubling, 2), vec![(0, 4), (1, 5), (2, 6), (3, 7)]);
        let halving = build_tree(TreeKind::BinomialHalving, 8, 0).unwrap();
        assert_eq!(pairs(&halving, 0), vec![(0, 4)]);
        assert_eq!(pairs(&halving, 1), vec![(0, 2), (4, 6)]);
        let bine = build_tree(TreeKind::BineHalving, 16, 0).unwrap();
        assert!(bine.edges().contains(&TreeEdge { child: 3, parent: 0, step: 1 }));
        assert!(bine.edges().contains(&TreeEdge { child: 4, parent: 3, step: 2 }));
    }

    #[test]
    fn bine_distance_values() {
        assert_eq!(bine_distance(0, 3), 3);
        assert_eq!(bine_distance(2, 3), 1);
        assert_eq!(bine_distance(1, 4), 3);
        for s in 1..=20u32 {
            for i in 0..s {
                let direct: i64 = (0..s - i).map(|j| (-2i64).pow(j)).sum();
                assert_eq!(bine_distance(i, s), direct.unsigned_abs());
            }
        }
    }

    #[test]
    fn trees_are_valid_and_edges_have_expected_distances() {
        for s in 1..=10u32 {
            let p = 1u32 << s;
            let roots = [0, p / 2, p - 1, 1 % p];
            for kind in TreeKind::ALL {
                for &root in &roots {
                    let tree = build_tree(kind, p, root).unwrap();
                    tree.validate().unwrap();
                    for e in tree.edges() {
                        let d = u64::from(modulo_distance(e.child, e.parent, p));
                        let expected = match kind {
                            TreeKind::BineHalving => bine_distance(e.step, s),
                            TreeKind::BineDoubling => bine_distance(s - 1 - e.step, s),
                            TreeKind::BinomialHalving => 1 << (s - e.step - 1),
                            TreeKind::BinomialDoubling => 1 << e.step,
                        };
                        // binomial distances are plain differences, which never exceed p/2
                        assert_eq!(d, expected, "{kind} p={p} root={root} {e:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn nu_is_a_bijection() {
        for s in 1..=14u32 {
            NuTable::new(1 << s).unwrap();
        }
    }

    #[test]
    fn doubling_tree_mirrors_halving_distances() {
        for s in 1..=10u32 {
            let p = 1u32 << s;
            let profile = |kind| {
                let tree = build_tree(kind, p, 0).unwrap();
                (0..s)
                    .map(|step| {
                        let mut d: Vec<u32> = tree
                            .edges_at(step)
                            .map(|e| modulo_distance(e.child, e.parent, p))
                            .collect();
                        d.sort_unstable();
                        d
                    })
                    .collect::<Vec<_>>()
            };
            let mut halving = profile(TreeKind::BineHalving);
            halving.reverse();
            // the number of edges differs per step, so compare the distance values only
            let doubling = profile(TreeKind::BineDoubling);
            for (step, (h, d)) in halving.iter().zip(&doubling).enumerate() {
                let hd: std::collections::BTreeSet<_> = h.iter().collect();
                let dd: std::collections::BTreeSet<_> = d.iter().collect();
                assert_eq!(hd, dd, "p={p} step={step}");
            }
        }
    }

    #[test]
    fn subtree_digit_rule_matches_edge_walk() {
        for s in 1..=10u32 {
            let p = 1u32 << s;
            for kind in TreeKind::ALL {
                for root in [0, p - 1] {
                    let tree = build_tree(kind, p, root).unwrap();
                    let step = if p > 64 { p / 64 } else { 1 };
                    for r in (0..p).step_by(step as usize) {
                        assert_eq!(
                            subtree_members(r, kind, p, root).unwrap(),
                            tree.subtree(r),
                            "{kind} p={p} root={root} r={r}"
                        );
                    }
                }
            }
        }
    }
}
