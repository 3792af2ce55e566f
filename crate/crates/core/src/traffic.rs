//! Byte accounting of schedules against a group map.
//!
//! A transfer is global when its endpoints sit in different groups; with
//! minimal routing it crosses exactly one group boundary, so the global byte
//! counts are lower bounds on real global-link traffic.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::schedules::{Collective, CommSchedule, ScheduleRequest, Variant};
use crate::topology::{AllocationRecord, GroupMap};
use crate::{modulo_distance, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StepTraffic {
    pub total: u64,
    pub global: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TrafficReport {
    pub collective: Collective,
    pub algorithm: String,
    pub p: u32,
    pub n: u64,
    pub total_bytes: u64,
    pub global_bytes: u64,
    pub per_step: Vec<StepTraffic>,
    /// Modulo distance between endpoints → number of transfers.
    pub distance_histogram: BTreeMap<u32, u64>,
}

fn check_ranks(schedule: &CommSchedule, groups: &GroupMap) -> Result<()> {
    if schedule.p != groups.p() {
        return Err(Error::RankCountMismatch {
            schedule: schedule.p,
            groups: groups.p(),
        });
    }
    Ok(())
}

pub fn account(schedule: &CommSchedule, groups: &GroupMap) -> Result<TrafficReport> {
    check_ranks(schedule, groups)?;
    let mut report = TrafficReport {
        collective: schedule.collective,
        algorithm: schedule.label(),
        p: schedule.p,
        n: schedule.n,
        total_bytes: 0,
        global_bytes: 0,
        per_step: vec![StepTraffic::default(); schedule.steps.len()],
        distance_histogram: BTreeMap::new(),
    };
    for (i, t) in schedule.transfers() {
        let bytes = t.bytes();
        let step = &mut report.per_step[i];
        step.total += bytes;
        if !groups.same_group(t.src, t.dst) {
            step.global += bytes;
        }
        *report.distance_histogram.entry(modulo_distance(t.src, t.dst, schedule.p)).or_default() += 1;
    }
    report.total_bytes = report.per_step.iter().map(|s| s.total).sum();
    report.global_bytes = report.per_step.iter().map(|s| s.global).sum();
    Ok(report)
}

/// Per-transfer CSV: `step,src,dst,bytes,global`.
pub fn write_transfer_csv<W: Write>(schedule: &CommSchedule, groups: &GroupMap, out: W) -> Result<()> {
    check_ranks(schedule, groups)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "src", "dst", "bytes", "global"])?;
    for (i, t) in schedule.transfers() {
        w.write_record([
            i.to_string(),
            t.src.to_string(),
            t.dst.to_string(),
            t.bytes().to_string(),
            (!groups.same_group(t.src, t.dst)).to_string(),
        ])?;
    }
    w.flush().map_err(|source| Error::Io { path: "<csv>".into(), source })?;
    Ok(())
}

/// Modulo distances of the transfers of each step.
pub fn distance_profile(schedule: &CommSchedule) -> Vec<BTreeMap<u32, u64>> {
    schedule
        .steps
        .iter()
        .map(|step| {
            let mut hist = BTreeMap::new();
            for t in step {
                *hist.entry(modulo_distance(t.src, t.dst, schedule.p)).or_default() += 1;
            }
            hist
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionStat {
    pub baseline: String,
    pub candidate: String,
    pub baseline_global: u64,
    pub candidate_global: u64,
    /// `1 − candidate/baseline`; `None` when the baseline has no global
    /// traffic and the pair is incomparable.
    pub reduction: Option<f64>,
}

impl ReductionStat {
    pub fn from_globals(baseline: String, candidate: String, baseline_global: u64, candidate_global: u64) -> Self {
        let reduction = (baseline_global > 0).then(|| 1.0 - candidate_global as f64 / baseline_global as f64);
        Self {
            baseline,
            candidate,
            baseline_global,
            candidate_global,
            reduction,
        }
    }

    pub fn is_comparable(&self) -> bool {
        self.reduction.is_some()
    }
}

pub fn compare(baseline: &CommSchedule, candidate: &CommSchedule, groups: &GroupMap) -> Result<ReductionStat> {
    if baseline.collective != candidate.collective || baseline.p != candidate.p || baseline.n != candidate.n {
        return Err(Error::NotComparable(format!(
            "{} {} p={} n={} vs {} {} p={} n={}",
            baseline.collective,
            baseline.label(),
            baseline.p,
            baseline.n,
            candidate.collective,
            candidate.label(),
            candidate.p,
            candidate.n
        )));
    }
    let b = account(baseline, groups)?;
    let c = account(candidate, groups)?;
    Ok(ReductionStat::from_globals(b.algorithm, c.algorithm, b.global_bytes, c.global_bytes))
}

/// The non-Bine schedule a Bine variant is measured against: same volume,
/// same step structure, binary instead of negabinary partners.
pub fn default_baseline(collective: Collective, candidate: Variant) -> Option<Variant> {
    use Variant::*;
    Some(match (collective, candidate) {
        (Collective::Broadcast, BineSmall) => BinomialHalving,
        (Collective::Broadcast, BineLarge) => BinomialSag,
        (Collective::Reduce, BineSmall | BineLarge) => Binomial,
        (Collective::Gather | Collective::Scatter, Bine) => Binomial,
        (Collective::ReduceScatter, Bine) => RecursiveHalving,
        (Collective::Allgather, Bine) => SparbitLike,
        (Collective::Allreduce, BineSmall) => RecursiveDoubling,
        (Collective::Allreduce, BineLarge) => RabenseifnerLike,
        (Collective::Alltoall, Bine) => Bruck,
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepConfig {
    pub collective: Collective,
    pub baseline: Variant,
    pub candidate: Variant,
    /// Vector bytes; must be at least the largest job size for block variants.
    pub n: u64,
    /// Use the first `2^k` nodes of jobs whose size is not a power of two
    /// instead of skipping them.
    pub truncate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub job: String,
    pub p: u32,
    pub groups: u32,
    pub baseline_global: u64,
    pub bine_global: u64,
    pub reduction: Option<f64>,
    pub variant: String,
}

/// Schedules built once per job size so that jobs can be accounted
/// independently (and in parallel).
pub struct SweepPlan {
    config: SweepConfig,
    schedules: BTreeMap<u32, (CommSchedule, CommSchedule)>,
}

fn usable_ranks(len: usize, truncate: bool) -> Option<u32> {
    let len = u32::try_from(len).ok()?;
    if len >= 2 && len.is_power_of_two() {
        Some(len)
    } else if truncate && len >= 2 {
        Some(1 << (31 - len.leading_zeros()))
    } else {
        None
    }
}

impl SweepPlan {
    pub fn new(config: SweepConfig, records: &[AllocationRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("no allocation records".into()));
        }
        let mut schedules = BTreeMap::new();
        for r in records {
            if let Some(p) = usable_ranks(r.len(), config.truncate) {
                if schedules.contains_key(&p) {
                    continue;
                }
                let build = |v| ScheduleRequest::new(config.collective, v, p, config.n).build();
                schedules.insert(p, (build(config.baseline)?, build(config.candidate)?));
            }
        }
        Ok(Self { config, schedules })
    }

    pub fn config(&self) -> &SweepConfig {
        &self.config
    }

    /// Row for one job; `None` (with a warning) when the job size is unusable.
    pub fn row(&self, record: &AllocationRecord, path: &str) -> Result<Option<SweepRow>> {
        let Some(p) = usable_ranks(record.len(), self.config.truncate) else {
            log::warn!("skipping job `{}`: {} nodes is not a power of two", record.job, record.len());
            return Ok(None);
        };
        let groups = record.group_map(Some(p as usize), path)?;
        let (baseline, candidate) = &self.schedules[&p];
        let stat = compare(baseline, candidate, &groups)?;
        Ok(Some(SweepRow {
            job: record.job.clone(),
            p,
            groups: groups.groups(),
            baseline_global: stat.baseline_global,
            bine_global: stat.candidate_global,
            reduction: stat.reduction,
            variant: self.config.candidate.to_string(),
        }))
    }
}

pub fn allocation_sweep(records: &[AllocationRecord], config: SweepConfig, path: &str) -> Result<Vec<SweepRow>> {
    let plan = SweepPlan::new(config, records)?;
    let mut rows = Vec::new();
    for r in records {
        rows.extend(plan.row(r, path)?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub jobs: usize,
    pub comparable: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// (percent, value) with linear interpolation between order statistics.
    pub percentiles: Vec<(u32, f64)>,
}

pub const SUMMARY_PERCENTILES: [u32; 5] = [5, 25, 50, 75, 95];

/// Arithmetic-mean summary of the comparable rows; `None` when there are none.
pub fn summarize(rows: &[SweepRow]) -> Option<SweepSummary> {
    let mut values: Vec<f64> = rows.iter().filter_map(|r| r.reduction).collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let at = |pct: u32| {
        let pos = f64::from(pct) / 100.0 * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
    };
    Some(SweepSummary {
        jobs: rows.len(),
        comparable: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        min: values[0],
        max: values[values.len() - 1],
        percentiles: SUMMARY_PERCENTILES.iter().map(|&q| (q, at(q))).collect(),
    })
}

/// Summaries keyed by job size.
pub fn summarize_by_p(rows: &[SweepRow]) -> BTreeMap<u32, SweepSummary> {
    let mut by_p: BTreeMap<u32, Vec<SweepRow>> = BTreeMap::new();
    for r in rows {
        by_p.entry(r.p).or_default().push(r.clone());
    }
    by_p.into_iter().filter_map(|(p, rows)| summarize(&rows).map(|s| (p, s))).collect()
}

/// Sweep CSV: `job,p,groups,baseline_global,bine_global,reduction,variant`;
/// incomparable rows leave `reduction` empty.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["job", "p", "groups", "baseline_global", "bine_global", "reduction", "variant"])?;
    for r in rows {
        w.write_record([
            r.job.clone(),
            r.p.to_string(),
            r.groups.to_string(),
            r.baseline_global.to_string(),
            r.bine_global.to_string(),
            r.reduction.map_or_else(String::new, |x| format!("{x:.6}")),
            r.variant.clone(),
        ])?;
    }
    w.flush().map_err(|source| Error::Io { path: "<csv>".into(), source })?;
    Ok(())
}
