//! `bine`: build, verify and measure collective schedules.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use bine_core::schedules::{variant_matrix, Collective, CommSchedule, Contiguity, ScheduleRequest, Variant};
use bine_core::simulator::{verify, verify_numeric, VerifyReport};
use bine_core::topology::{self, block_groups, GroupMap, Placement, SyntheticTrace};
use bine_core::traffic::{self, default_baseline, SweepConfig, SweepPlan, SweepRow};
use bine_core::trees::{build_tree, TreeKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

/// Non-normative switch point between small- and large-vector Bine variants.
const DEFAULT_CUTOVER: u64 = 1 << 20;

#[derive(Parser)]
#[command(name = "bine", version, about = "Bine tree and butterfly collective schedules")]
struct Cli {
    /// Worker threads for sweeps (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate schedules and compare them with the collective's definition.
    Verify(VerifyArgs),
    /// Dump one schedule as JSON or CSV.
    Schedule(ScheduleArgs),
    /// Compare global (inter-group) traffic of a baseline and a candidate.
    Traffic(TrafficArgs),
    /// Per-job reduction of global traffic over an allocation file.
    AllocAnalyze(AllocArgs),
    /// Write a synthetic allocation file.
    SynthAlloc(SynthArgs),
    /// Dump a communication tree as JSON.
    Tree(TreeArgs),
    /// Echo a group map as JSON.
    Groups(GroupsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct VerifyArgs {
    /// Collective to verify (all when omitted).
    #[arg(long)]
    collective: Option<String>,
    /// Variant to verify (all of the collective when omitted).
    #[arg(long)]
    variant: Option<String>,
    /// Rank counts: a list like `4,8,16` and/or power-of-two ranges like `4..1024`.
    #[arg(long, default_value = "2..64")]
    p: String,
    #[arg(long, default_value_t = 0)]
    root: u32,
    /// Elements per block; the vector size is `p * elements` bytes.
    #[arg(long, default_value_t = 1)]
    elements: u64,
    /// Also run the 32-bit integer cross-check.
    #[arg(long)]
    numeric: bool,
    #[arg(long)]
    contiguity: Option<String>,
    #[arg(long, default_value_t = DEFAULT_CUTOVER)]
    cutover: u64,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    collective: String,
    #[arg(long)]
    variant: String,
    #[arg(long)]
    p: u32,
    /// Vector bytes.
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 0)]
    root: u32,
    #[arg(long, default_value = "noncontig")]
    contiguity: String,
    #[arg(long, default_value_t = DEFAULT_CUTOVER)]
    cutover: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrafficArgs {
    #[arg(long)]
    collective: String,
    /// Candidate variant.
    #[arg(long, default_value = "bine")]
    candidate: String,
    /// Baseline variant (the matching non-Bine schedule when omitted).
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    p: String,
    /// Vector sizes in bytes, comma separated (defaults to `p * 8`).
    #[arg(long)]
    n: Option<String>,
    #[arg(long, default_value_t = 0)]
    root: u32,
    /// `block:<group size>` (several sizes allowed: `block:2,4,8`) or `file:<path>`.
    #[arg(long)]
    groups: String,
    /// Instead of the comparison, dump every candidate transfer (`step,src,dst,bytes,global`).
    #[arg(long)]
    transfers: bool,
    #[arg(long, default_value = "noncontig")]
    contiguity: String,
    #[arg(long, default_value_t = DEFAULT_CUTOVER)]
    cutover: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AllocArgs {
    /// Allocation CSV with header `job,node,group`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "allreduce")]
    collective: String,
    /// Candidate variants (both allreduce variants by default).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Vector bytes (defaults to 4 bytes per rank of the largest job).
    #[arg(long)]
    n: Option<u64>,
    /// Analyze the first 2^k nodes of jobs whose size is not a power of two.
    #[arg(long)]
    truncate: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Where to write the JSON summary grouped by job size (stderr when omitted).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Block,
    Fragmented,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "64..1024")]
    sizes: String,
    #[arg(long, default_value_t = 32)]
    jobs_per_size: usize,
    #[arg(long, default_value_t = 4)]
    min_group: u32,
    #[arg(long, default_value_t = 128)]
    max_group: u32,
    #[arg(long, value_enum, default_value = "block")]
    placement: PlacementArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TreeArgs {
    #[arg(long, default_value = "bine_halving")]
    kind: String,
    #[arg(long)]
    p: u32,
    #[arg(long, default_value_t = 0)]
    root: u32,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GroupsArgs {
    /// `block:<group size>` or `file:<path>`.
    #[arg(long)]
    groups: String,
    /// Rank count for block maps.
    #[arg(long)]
    p: Option<u32>,
    /// Job to echo from an allocation file (the first when omitted).
    #[arg(long)]
    job: Option<String>,
}

/// Configuration problems map to exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

fn parse<T: std::str::FromStr<Err = bine_core::Error>>(text: &str) -> anyhow::Result<T> {
    text.parse::<T>().map_err(|e: bine_core::Error| Usage(e.to_string()).into())
}

/// `4,8,16` or `4..1024` (powers of two) or a mix of both.
fn parse_list(text: &str) -> anyhow::Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u32, u32) = match (a.trim().parse::<u32>(), b.trim().parse::<u32>()) {
                (Ok(a), Ok(b)) if a >= 1 && a <= b && a.is_power_of_two() => (a, b),
                _ => return usage(format!("bad range `{part}` (expected powers of two like 4..1024)")),
            };
            let mut x = a;
            while x <= b {
                out.push(x);
                x *= 2;
            }
        } else {
            match part.parse() {
                Ok(x) => out.push(x),
                Err(_) => return usage(format!("bad number `{part}`")),
            }
        }
    }
    if out.is_empty() {
        return usage("empty list");
    }
    Ok(out)
}

/// `bine` picks the small or large variant by vector size where both exist.
fn resolve_variant(collective: Collective, name: &str, n: u64, cutover: u64) -> anyhow::Result<Variant> {
    let variant: Variant = parse(name)?;
    let resolved = if variant == Variant::Bine && !collective.variants().contains(&Variant::Bine) {
        if n < cutover {
            Variant::BineSmall
        } else {
            Variant::BineLarge
        }
    } else {
        variant
    };
    if !collective.variants().contains(&resolved) {
        let valid: Vec<&str> = collective.variants().iter().map(|v| v.name()).collect();
        return usage(format!("{collective} has no variant `{name}` (valid: {})", valid.join(", ")));
    }
    Ok(resolved)
}

fn build(req: ScheduleRequest) -> anyhow::Result<CommSchedule> {
    req.build().map_err(|e| match e {
        bine_core::Error::Io { .. } => anyhow!(e),
        other => Usage(other.to_string()).into(),
    })
}

fn open_output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

enum GroupSpec {
    Block(Vec<u32>),
    File(PathBuf),
}

fn parse_groups(text: &str) -> anyhow::Result<GroupSpec> {
    match text.split_once(':') {
        Some(("block", sizes)) => Ok(GroupSpec::Block(parse_list(sizes)?)),
        Some(("file", path)) if !path.is_empty() => Ok(GroupSpec::File(PathBuf::from(path))),
        _ => usage(format!("bad group spec `{text}` (expected block:<size> or file:<path>)")),
    }
}

fn load_records(path: &Path) -> anyhow::Result<Vec<topology::AllocationRecord>> {
    topology::load_allocation(path).map_err(|e| Usage(e.to_string()).into())
}

fn verify_cmd(args: VerifyArgs) -> anyhow::Result<bool> {
    let collectives = match &args.collective {
        Some(c) => vec![parse::<Collective>(c)?],
        None => Collective::ALL.to_vec(),
    };
    let ps = parse_list(&args.p)?;
    let mut configs = Vec::new();
    for &c in &collectives {
        for &p in &ps {
            let n = u64::from(p) * args.elements.max(1);
            let combos = match (&args.variant, &args.contiguity) {
                (Some(v), k) => {
                    let variant = resolve_variant(c, v, n, args.cutover)?;
                    let k = match k {
                        Some(k) => parse::<Contiguity>(k)?,
                        None => Contiguity::Noncontig,
                    };
                    vec![(variant, k)]
                }
                (None, _) => variant_matrix(c),
            };
            for (v, k) in combos {
                if args.root >= p && c.is_rooted() {
                    return usage(format!("root {} out of range for p = {p}", args.root));
                }
                let root = if c.is_rooted() { args.root } else { 0 };
                configs.push(ScheduleRequest::new(c, v, p, n).root(root).contiguity(k));
            }
        }
    }
    let schedules = configs.into_iter().map(build).collect::<anyhow::Result<Vec<_>>>()?;
    let elements = args.elements.max(1) as usize;
    let reports: Vec<VerifyReport> = schedules
        .par_iter()
        .flat_map_iter(|s| {
            let mut out = vec![verify(s)];
            if args.numeric {
                out.push(verify_numeric(s, elements));
            }
            out
        })
        .collect();
    let mut out = open_output(args.output.as_deref())?;
    match args.format {
        Format::Json => {
            for r in &reports {
                writeln!(out, "{}", r.to_json())?;
            }
        }
        Format::Csv => {
            writeln!(out, "collective,algorithm,p,root,mode,pass,detail")?;
            for r in &reports {
                let detail = r
                    .defect
                    .clone()
                    .or_else(|| r.divergence.as_ref().map(|d| format!("rank {} slot {}", d.rank, d.slot)))
                    .unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},\"{}\"",
                    r.collective,
                    r.algorithm,
                    r.p,
                    r.root.map_or(String::new(), |x| x.to_string()),
                    r.mode,
                    r.pass,
                    detail.replace('"', "'")
                )?;
            }
        }
    }
    out.flush()?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    log::info!("{} of {} verifications passed", reports.len() - failed, reports.len());
    if failed > 0 {
        eprintln!("{failed} of {} verifications failed", reports.len());
    }
    Ok(failed == 0)
}

fn schedule_cmd(args: ScheduleArgs) -> anyhow::Result<()> {
    let c: Collective = parse(&args.collective)?;
    let v = resolve_variant(c, &args.variant, args.n, args.cutover)?;
    let k: Contiguity = parse(&args.contiguity)?;
    let s = build(ScheduleRequest::new(c, v, args.p, args.n).root(args.root).contiguity(k))?;
    let mut out = open_output(args.output.as_deref())?;
    match args.format {
        Format::Json => writeln!(out, "{}", s.to_json()?)?,
        Format::Csv => s.write_csv(&mut out)?,
    }
    out.flush()?;
    Ok(())
}

#[derive(serde::Serialize)]
struct TrafficRow {
    collective: Collective,
    p: u32,
    n: u64,
    groups: String,
    group_count: u32,
    baseline: String,
    candidate: String,
    baseline_total: u64,
    candidate_total: u64,
    baseline_global: u64,
    candidate_global: u64,
    reduction: Option<f64>,
}

fn traffic_cmd(args: TrafficArgs) -> anyhow::Result<()> {
    let c: Collective = parse(&args.collective)?;
    let k: Contiguity = parse(&args.contiguity)?;
    let spec = parse_groups(&args.groups)?;
    let records = match &spec {
        GroupSpec::File(path) => load_records(path)?,
        GroupSpec::Block(_) => Vec::new(),
    };
    let mut out = open_output(args.output.as_deref())?;
    let mut rows = Vec::new();
    for p in parse_list(&args.p)? {
        let sizes = match &args.n {
            Some(list) => list
                .split(',')
                .map(|x| x.trim().parse::<u64>().map_err(|_| Usage(format!("bad size `{x}`")).into()))
                .collect::<anyhow::Result<Vec<_>>>()?,
            None => vec![u64::from(p) * 8],
        };
        let maps: Vec<(String, GroupMap)> = match &spec {
            GroupSpec::Block(gs) => gs
                .iter()
                .map(|&g| Ok((format!("block:{g}"), block_groups(p, g).map_err(|e| Usage(e.to_string()))?)))
                .collect::<anyhow::Result<_>>()?,
            GroupSpec::File(path) => records
                .iter()
                .filter(|r| r.len() == p as usize)
                .map(|r| Ok((format!("{}#{}", path.display(), r.job), r.group_map(None, &path.display().to_string())?)))
                .collect::<anyhow::Result<_>>()?,
        };
        for n in sizes {
            let candidate = resolve_variant(c, &args.candidate, n, args.cutover)?;
            let cand = build(ScheduleRequest::new(c, candidate, p, n).root(args.root).contiguity(k))?;
            if args.transfers {
                for (label, groups) in &maps {
                    log::info!("transfers of {} on {label}", cand.label());
                    traffic::write_transfer_csv(&cand, groups, &mut out)?;
                }
                continue;
            }
            let baseline = match &args.baseline {
                Some(b) => resolve_variant(c, b, n, args.cutover)?,
                None => match default_baseline(c, candidate) {
                    Some(b) => b,
                    None => return usage(format!("no default baseline for {c} {candidate}; pass --baseline")),
                },
            };
            let base = build(ScheduleRequest::new(c, baseline, p, n).root(args.root))?;
            for (label, groups) in &maps {
                let b = traffic::account(&base, groups)?;
                let x = traffic::account(&cand, groups)?;
                let stat = traffic::compare(&base, &cand, groups)?;
                rows.push(TrafficRow {
                    collective: c,
                    p,
                    n,
                    groups: label.clone(),
                    group_count: groups.groups(),
                    baseline: b.algorithm,
                    candidate: x.algorithm,
                    baseline_total: b.total_bytes,
                    candidate_total: x.total_bytes,
                    baseline_global: b.global_bytes,
                    candidate_global: x.global_bytes,
                    reduction: stat.reduction,
                });
            }
        }
    }
    if !args.transfers {
        match args.format {
            Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?,
            Format::Csv => {
                writeln!(
                    out,
                    "collective,p,n,groups,group_count,baseline,candidate,baseline_total,candidate_total,baseline_global,candidate_global,reduction,comparable"
                )?;
                for r in &rows {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        r.collective,
                        r.p,
                        r.n,
                        r.groups,
                        r.group_count,
                        r.baseline,
                        r.candidate,
                        r.baseline_total,
                        r.candidate_total,
                        r.baseline_global,
                        r.candidate_global,
                        r.reduction.map_or(String::new(), |x| format!("{x:.6}")),
                        r.reduction.is_some()
                    )?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn alloc_cmd(args: AllocArgs) -> anyhow::Result<()> {
    let c: Collective = parse(&args.collective)?;
    let records = load_records(&args.input)?;
    if records.is_empty() {
        return usage(format!("{}: no usable jobs", args.input.display()));
    }
    let largest = records.iter().map(|r| r.len()).max().unwrap_or(0) as u64;
    let n = args.n.unwrap_or(largest.next_power_of_two() * 4);
    let names = args.variants.clone().unwrap_or_else(|| match c {
        Collective::Allreduce | Collective::Broadcast | Collective::Reduce => {
            vec!["bine_small".into(), "bine_large".into()]
        }
        _ => vec!["bine".into()],
    });
    let path = args.input.display().to_string();
    let mut rows: Vec<SweepRow> = Vec::new();
    for name in names {
        let candidate: Variant = parse(&name)?;
        let Some(baseline) = default_baseline(c, candidate) else {
            return usage(format!("no baseline for {c} {candidate}"));
        };
        let config = SweepConfig {
            collective: c,
            baseline,
            candidate,
            n,
            truncate: args.truncate,
        };
        let plan = SweepPlan::new(config, &records).map_err(|e| Usage(e.to_string()))?;
        let part = records
            .par_iter()
            .map(|r| plan.row(r, &path))
            .collect::<Result<Vec<_>, _>>()?;
        rows.extend(part.into_iter().flatten());
    }
    let mut out = open_output(args.output.as_deref())?;
    traffic::write_sweep_csv(&rows, &mut out)?;
    out.flush()?;
    let mut summaries = serde_json::Map::new();
    let mut variants: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
    variants.dedup();
    for v in variants {
        let subset: Vec<SweepRow> = rows.iter().filter(|r| r.variant == v).cloned().collect();
        let by_p: Vec<serde_json::Value> = traffic::summarize_by_p(&subset)
            .into_iter()
            .map(|(p, s)| serde_json::json!({ "p": p, "summary": s }))
            .collect();
        summaries.insert(
            v,
            serde_json::json!({
                "overall": traffic::summarize(&subset),
                "by_p": by_p,
                "incomparable": subset.iter().filter(|r| r.reduction.is_none()).count(),
            }),
        );
    }
    let text = serde_json::to_string_pretty(&summaries)?;
    match &args.summary {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("cannot write {}", p.display()))?,
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn synth_cmd(args: SynthArgs) -> anyhow::Result<()> {
    let trace = SyntheticTrace {
        seed: args.seed,
        sizes: parse_list(&args.sizes)?,
        jobs_per_size: args.jobs_per_size,
        min_group: args.min_group,
        max_group: args.max_group,
        placement: match args.placement {
            PlacementArg::Block => Placement::Block,
            PlacementArg::Fragmented => Placement::Fragmented,
        },
    };
    let records = trace.generate().map_err(|e| Usage(e.to_string()))?;
    let mut out = open_output(args.output.as_deref())?;
    topology::write_allocation(&records, &mut out)?;
    out.flush()?;
    Ok(())
}

fn tree_cmd(args: TreeArgs) -> anyhow::Result<()> {
    let kind: TreeKind = parse(&args.kind)?;
    let tree = build_tree(kind, args.p, args.root).map_err(|e| Usage(e.to_string()))?;
    let mut out = open_output(args.output.as_deref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&tree)?)?;
    out.flush()?;
    Ok(())
}

fn groups_cmd(args: GroupsArgs) -> anyhow::Result<()> {
    let map = match parse_groups(&args.groups)? {
        GroupSpec::Block(sizes) => {
            let Some(p) = args.p else { return usage("--p is required for block groups") };
            if sizes.len() != 1 {
                return usage("give exactly one group size");
            }
            block_groups(p, sizes[0]).map_err(|e| Usage(e.to_string()))?
        }
        GroupSpec::File(path) => {
            let records = load_records(&path)?;
            let record = match &args.job {
                Some(job) => records.iter().find(|r| &r.job == job),
                None => records.first(),
            };
            let Some(record) = record else { bail!("{}: job not found", path.display()) };
            record.group_map(None, &path.display().to_string())?
        }
    };
    println!("{}", map.to_json());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("ignoring --jobs: {e}");
        }
    }
    let result = match cli.command {
        Command::Verify(a) => verify_cmd(a).map(|ok| if ok { 0 } else { 1 }),
        Command::Schedule(a) => schedule_cmd(a).map(|_| 0),
        Command::Traffic(a) => traffic_cmd(a).map(|_| 0),
        Command::AllocAnalyze(a) => alloc_cmd(a).map(|_| 0),
        Command::SynthAlloc(a) => synth_cmd(a).map(|_| 0),
        Command::Tree(a) => tree_cmd(a).map(|_| 0),
        Command::Groups(a) => groups_cmd(a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage_error = e.chain().any(|c| c.is::<Usage>());
            ExitCode::from(if usage_error { 2 } else { 1 })
        }
    }
}
