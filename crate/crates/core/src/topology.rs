//! Rank to group assignments.
//!
//! A group is a set of densely connected nodes (a Dragonfly group, a fat-tree
//! leaf switch); traffic between different groups crosses global links.
//! Assignments come from contiguous blocks, explicit lists, or allocation
//! files with the header `job,node,group` (rows in rank order within a job).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Error, Rank, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GroupSource {
    Block { group_size: u32 },
    File { path: String, job: String },
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupMap {
    group_of: Vec<u32>,
    source: GroupSource,
}

impl GroupMap {
    /// Checks that the mapping is total and its ids dense from zero.
    pub fn new(group_of: Vec<u32>, source: GroupSource) -> Result<Self> {
        if group_of.is_empty() {
            return Err(Error::InvalidGroupMap("no ranks".into()));
        }
        let groups = group_of.iter().max().map_or(0, |&g| g as usize + 1);
        let mut used = vec![false; groups];
        for &g in &group_of {
            used[g as usize] = true;
        }
        if let Some(missing) = used.iter().position(|&u| !u) {
            return Err(Error::InvalidGroupMap(format!("group id {missing} is unused; ids must be dense")));
        }
        Ok(Self { group_of, source })
    }

    /// Relabels arbitrary group labels densely in order of first appearance.
    pub fn from_labels<T: Eq + std::hash::Hash>(labels: &[T], source: GroupSource) -> Result<Self> {
        let mut ids = HashMap::new();
        let group_of = labels
            .iter()
            .map(|l| {
                let next = ids.len() as u32;
                *ids.entry(l).or_insert(next)
            })
            .collect();
        Self::new(group_of, source)
    }

    pub fn p(&self) -> u32 {
        self.group_of.len() as u32
    }

    pub fn group_of(&self, r: Rank) -> u32 {
        self.group_of[r as usize]
    }

    pub fn groups(&self) -> u32 {
        self.group_of.iter().max().map_or(0, |&g| g + 1)
    }

    pub fn assignment(&self) -> &[u32] {
        &self.group_of
    }

    pub fn source(&self) -> &GroupSource {
        &self.source
    }

    pub fn same_group(&self, a: Rank, b: Rank) -> bool {
        self.group_of(a) == self.group_of(b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("group maps always serialize")
    }
}

/// Ranks placed linearly, `group_size` per group: `group_of(r) = r / group_size`.
pub fn block_groups(p: u32, group_size: u32) -> Result<GroupMap> {
    if group_size == 0 {
        return Err(Error::InvalidGroupMap("group size must be at least 1".into()));
    }
    GroupMap::new((0..p).map(|r| r / group_size).collect(), GroupSource::Block { group_size })
}

/// One job of an allocation file: nodes in rank order and their groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AllocationRecord {
    pub job: String,
    pub nodes: Vec<String>,
    pub groups: Vec<String>,
}

impl AllocationRecord {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Group map of the first `ranks` nodes (all of them when `None`).
    pub fn group_map(&self, ranks: Option<usize>, path: &str) -> Result<GroupMap> {
        let take = ranks.unwrap_or(self.groups.len()).min(self.groups.len());
        GroupMap::from_labels(
            &self.groups[..take],
            GroupSource::File {
                path: path.to_string(),
                job: self.job.clone(),
            },
        )
    }
}

#[derive(serde::Deserialize)]
struct AllocationRow {
    job: String,
    node: String,
    group: String,
}

/// Parses allocation CSV text. Jobs keep the order of their first row; jobs
/// with fewer than two nodes are skipped with a warning.
pub fn parse_allocation<R: Read>(input: R) -> Result<Vec<AllocationRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["job", "node", "group"] {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header `job,node,group`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut records: Vec<AllocationRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(String, String), u64> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let parsed: AllocationRow = row.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        if parsed.job.is_empty() || parsed.node.is_empty() || parsed.group.is_empty() {
            return Err(Error::Parse { line, reason: "empty field".into() });
        }
        if let Some(first) = seen.insert((parsed.job.clone(), parsed.node.clone()), line) {
            return Err(Error::Parse {
                line,
                reason: format!("node `{}` of job `{}` already listed on line {first}", parsed.node, parsed.job),
            });
        }
        let k = *index.entry(parsed.job.clone()).or_insert_with(|| {
            records.push(AllocationRecord {
                job: parsed.job.clone(),
                nodes: Vec::new(),
                groups: Vec::new(),
            });
            records.len() - 1
        });
        records[k].nodes.push(parsed.node);
        records[k].groups.push(parsed.group);
    }
    records.retain(|r| {
        if r.len() < 2 {
            log::warn!("skipping job `{}`: {} node(s)", r.job, r.len());
        }
        r.len() >= 2
    });
    Ok(records)
}

pub fn load_allocation(path: &Path) -> Result<Vec<AllocationRecord>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_allocation(std::io::BufReader::new(file))
}

pub fn write_allocation<W: Write>(records: &[AllocationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["job", "node", "group"])?;
    for r in records {
        for (node, group) in r.nodes.iter().zip(&r.groups) {
            w.write_record([r.job.as_str(), node, group])?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: "<csv>".into(), source })?;
    Ok(())
}

/// Allocation record reproducing `block_groups(p, group_size)`.
pub fn block_record(job: &str, p: u32, group_size: u32) -> AllocationRecord {
    AllocationRecord {
        job: job.to_string(),
        nodes: (0..p).map(|r| format!("n{r}")).collect(),
        groups: (0..p).map(|r| (r / group_size.max(1)).to_string()).collect(),
    }
}

/// How synthetic jobs are laid out over groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Contiguous nodes, `g` per group, starting at a group boundary.
    Block,
    /// Contiguous nodes, but each group contributes a random number of
    /// nodes in `1..=g`, as left behind by earlier jobs.
    Fragmented,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Placement::Block),
            "fragmented" => Ok(Placement::Fragmented),
            other => Err(Error::Unsupported(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTrace {
    pub seed: u64,
    pub sizes: Vec<u32>,
    pub jobs_per_size: usize,
    pub min_group: u32,
    pub max_group: u32,
    pub placement: Placement,
}

impl SyntheticTrace {
    /// Deterministic for a given seed. Group sizes are drawn uniformly from
    /// `min_group..=max_group`.
    pub fn generate(&self) -> Result<Vec<AllocationRecord>> {
        if self.min_group == 0 || self.min_group > self.max_group {
            return Err(Error::InvalidGroupMap(format!(
                "group size range {}..={} is empty",
                self.min_group, self.max_group
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut records = Vec::new();
        for &p in &self.sizes {
            for k in 0..self.jobs_per_size {
                let g = rng.gen_range(self.min_group..=self.max_group);
                let groups = match self.placement {
                    Placement::Block => (0..p).map(|r| r / g).collect::<Vec<_>>(),
                    Placement::Fragmented => {
                        let mut out = Vec::with_capacity(p as usize);
                        let mut group = 0;
                        while out.len() < p as usize {
                            let chunk = rng.gen_range(1..=g) as usize;
                            out.extend(std::iter::repeat(group).take(chunk.min(p as usize - out.len())));
                            group += 1;
                        }
                        out
                    }
                };
                records.push(AllocationRecord {
                    job: format!("p{p}-{k}"),
                    nodes: (0..p).map(|r| format!("p{p}-{k}-n{r}")).collect(),
                    groups: groups.iter().map(u32::to_string).collect(),
                });
            }
        }
        Ok(records)
    }
}

/// Row-major mapping between ranks and torus coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TorusCoords {
    dims: Vec<u32>,
}

pub fn torus_coords(p: u32, dims: &[u32]) -> Result<TorusCoords> {
    let product = dims.iter().try_fold(1u64, |acc, &d| (d > 0).then_some(acc * u64::from(d)));
    if product != Some(u64::from(p)) {
        return Err(Error::Unsupported(format!("dimensions {dims:?} do not multiply to {p}")));
    }
    Ok(TorusCoords { dims: dims.to_vec() })
}

impl TorusCoords {
    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn coords(&self, r: Rank) -> Vec<u32> {
        let mut rest = r;
        let mut out = vec![0; self.dims.len()];
        for (k, &d) in self.dims.iter().enumerate().rev() {
            out[k] = rest % d;
            rest /= d;
        }
        out
    }

    pub fn rank(&self, coords: &[u32]) -> Rank {
        coords.iter().zip(&self.dims).fold(0, |acc, (&c, &d)| acc * d + c)
    }

    /// Sum over dimensions of the wrap-around distance.
    pub fn hops(&self, a: Rank, b: Rank) -> u32 {
        self.coords(a)
            .iter()
            .zip(self.coords(b))
            .zip(&self.dims)
            .map(|((&x, y), &d)| {
                let forward = (x + d - y) % d;
                forward.min(d - forward)
            })
            .sum()
    }
}
