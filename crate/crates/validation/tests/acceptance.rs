//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use bine_core::negabinary::{max_positive, rank2nb};
use bine_core::schedules::{
    bine_scatter_initial_range, build_allreduce, build_alltoall, build_bcast, build_gather, build_reduce_scatter,
    variant_matrix, BlockRange, BlockSet, Collective, CommSchedule, Contiguity, ScheduleRequest, Transfer, Variant,
};
use bine_core::simulator::{verify, verify_numeric};
use bine_core::topology::{block_groups, GroupMap};
use bine_core::traffic::{account, compare};
use bine_core::trees::{bine_distance, build_tree, doubling_partner, halving_join_step, halving_partner, nu, TreeKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn powers(from: u32, to: u32) -> impl Iterator<Item = u32> {
    (from..=to).map(|s| 1u32 << s)
}

fn fig1() -> Outcome {
    let n = 8 * 1024;
    let groups = block_groups(8, 2).unwrap();
    let global = |v| account(&build_bcast(8, 0, n, v).unwrap(), &groups).unwrap().global_bytes;
    let doubling = global(Variant::BinomialDoubling);
    let halving = global(Variant::BinomialHalving);
    let bine = global(Variant::BineSmall);
    outcome(
        doubling == 6 * n && halving == 3 * n,
        format!(
            "binomial doubling {}n, binomial halving {}n (bine {}n)",
            doubling / n,
            halving / n,
            bine / n
        ),
    )
}

fn worked_examples() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("rank2nb(2,8)", rank2nb(2, 8).unwrap().to_string() == "110");
    check("rank2nb(6,8)", rank2nb(6, 8).unwrap().to_string() == "010");
    check("max_positive(6)", max_positive(6) == 21);
    check("halving_join_step(8,16,0)", halving_join_step(8, 16, 0).unwrap() == 1);
    check("halving_partner(8,2,16,0)", halving_partner(8, 2, 16, 0).unwrap() == 7);
    let tree = build_tree(TreeKind::BineHalving, 16, 0).unwrap();
    let route = tree.parent(3).map(|e| e.parent) == Some(0) && tree.parent(4).map(|e| e.parent) == Some(3);
    check("route 0->3->4", route);
    check("nu(2,8)", nu(2, 8).unwrap().to_string() == "011");
    check("doubling_partner(2,2,8,0)", doubling_partner(2, 2, 8, 0).unwrap() == 5);
    let gather = build_gather(8, 0, 8, Variant::Bine).unwrap();
    let into_zero = |step: usize| gather.steps[step].iter().find(|t| t.dst == 0).cloned();
    let range = |a, b| BlockSet::Range(BlockRange::new(a, b, 8).unwrap());
    let step0 = into_zero(0).map(|t| t.blocks);
    let step1 = into_zero(1).map(|t| (t.src, t.blocks));
    check("gather [0,1] + [6,7]", step0 == Some(range(1, 1)) && step1 == Some((7, range(6, 7))));
    check("scatter initial [6,5]", bine_scatter_initial_range(0, 8).unwrap() == BlockRange::new(6, 5, 8).unwrap());
    outcome(failures.is_empty(), if failures.is_empty() { "10 examples".into() } else { failures.join(", ") })
}

fn distance_ratio() -> Outcome {
    let mut worst_far = 0.0f64;
    for s in 1..=20u32 {
        for i in 0..s {
            let k = s - i;
            let direct = (0..k).map(|j| (-2i64).pow(j)).sum::<i64>().unsigned_abs();
            let d = bine_distance(i, s);
            // ratio = (2/3)(1 − (−1)^k 2^−k)  ⇔  3·d = 2^k − (−1)^k
            let sign: i64 = if k % 2 == 0 { 1 } else { -1 };
            let exact = 3 * d as i64 == (1i64 << k) - sign;
            let ratio = d as f64 / (1u64 << (k - 1)) as f64;
            if d != direct || !exact || ratio > 1.0 {
                return outcome(false, format!("s={s} i={i}: distance {d}, direct {direct}"));
            }
            if k >= 7 {
                worst_far = worst_far.max((ratio - 2.0 / 3.0).abs() / (2.0 / 3.0));
            }
        }
    }
    outcome(worst_far < 0.01, format!("exact for s<=20; worst deviation from 2/3 at s-i>=7: {:.4}%", worst_far * 100.0))
}

fn roots_for(c: Collective, p: u32) -> Vec<u32> {
    if c.is_rooted() {
        let mut r = vec![0, p / 2, p - 1];
        r.dedup();
        r
    } else {
        vec![0]
    }
}

fn mutate(schedule: &CommSchedule, rng: &mut ChaCha8Rng) -> (CommSchedule, String) {
    let mut m = schedule.clone();
    let positions: Vec<(usize, usize)> = m
        .steps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.len()).map(move |k| (i, k)))
        .collect();
    let &(i, k) = positions.choose(rng).unwrap();
    if rng.gen_bool(0.5) {
        let t: Transfer = m.steps[i].remove(k);
        (m, format!("remove step {i} {}->{}", t.src, t.dst))
    } else {
        let t = &mut m.steps[i][k];
        let old = t.dst;
        let choices: Vec<u32> = (0..m.p).filter(|&r| r != t.src && r != old).collect();
        t.dst = *choices.choose(rng).unwrap();
        (m.clone(), format!("retarget step {i} {}->{old} to {}", m.steps[i][k].src, m.steps[i][k].dst))
    }
}

fn semantics() -> Outcome {
    let mut runs = 0;
    for p in powers(1, 10) {
        for c in Collective::ALL {
            for (v, k) in variant_matrix(c) {
                for root in roots_for(c, p) {
                    for elements in [1u64, 3, 16] {
                        let n = u64::from(p) * elements;
                        let s = ScheduleRequest::new(c, v, p, n).root(root).contiguity(k).build().unwrap();
                        let symbolic = if elements == 1 { Some(verify(&s)) } else { None };
                        let numeric = verify_numeric(&s, elements as usize);
                        for report in symbolic.iter().chain(std::iter::once(&numeric)) {
                            runs += 1;
                            if !report.pass {
                                return outcome(false, format!("{c} {} p={p} root={root}: {}", s.label(), report.to_json()));
                            }
                        }
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1E);
    let mut caught = 0;
    for c in Collective::ALL {
        let matrix = variant_matrix(c);
        for _ in 0..120 {
            let &(v, k) = matrix.choose(&mut rng).unwrap();
            let root = *roots_for(c, 16).choose(&mut rng).unwrap();
            let s = ScheduleRequest::new(c, v, 16, 16 * 4).root(root).contiguity(k).build().unwrap();
            let (mutant, what) = mutate(&s, &mut rng);
            if verify(&mutant).pass {
                return outcome(false, format!("undetected mutation of {c} {}: {what}", s.label()));
            }
            caught += 1;
        }
    }
    outcome(true, format!("{runs} verifications, {caught}/{caught} mutations detected"))
}

fn volumes() -> Outcome {
    for p in powers(1, 10) {
        let p64 = u64::from(p);
        for elements in [1u64, 3, 16] {
            let n = p64 * elements * 4;
            for c in Contiguity::ALL {
                let rs = build_reduce_scatter(p, n, Variant::Bine, c).unwrap();
                if rs.sent_bytes_per_rank().iter().any(|&b| b != n * (p64 - 1) / p64) {
                    return outcome(false, format!("reduce-scatter {c} p={p}"));
                }
            }
            let ar = build_allreduce(p, n, Variant::BineLarge).unwrap();
            if ar.sent_bytes_per_rank().iter().any(|&b| b != 2 * n * (p64 - 1) / p64) {
                return outcome(false, format!("allreduce p={p}"));
            }
            let a2a = build_alltoall(p, n, Variant::Bine).unwrap();
            let half = (p / 2) as usize;
            let ok = a2a.steps.iter().all(|step| {
                let mut per_rank = vec![0usize; p as usize];
                for t in step {
                    per_rank[t.src as usize] += t.blocks.len();
                }
                per_rank.iter().all(|&b| b == half)
            });
            if !ok {
                return outcome(false, format!("alltoall p={p}"));
            }
        }
    }
    outcome(true, "p = 2..1024, three block sizes")
}

struct Pair {
    label: &'static str,
    /// Same step structure and orientation as the Bine schedule, so the
    /// distance bound applies; other pairs are shown for information.
    bounded: bool,
    collective: Collective,
    baseline: Variant,
    candidate: Variant,
}

const BOUND_PAIRS: [Pair; 4] = [
    Pair { label: "allreduce small", bounded: true, collective: Collective::Allreduce, baseline: Variant::RecursiveDoubling, candidate: Variant::BineSmall },
    Pair { label: "allreduce large", bounded: true, collective: Collective::Allreduce, baseline: Variant::RabenseifnerLike, candidate: Variant::BineLarge },
    Pair { label: "broadcast small", bounded: true, collective: Collective::Broadcast, baseline: Variant::BinomialHalving, candidate: Variant::BineSmall },
    Pair { label: "broadcast large", bounded: false, collective: Collective::Broadcast, baseline: Variant::BinomialSag, candidate: Variant::BineLarge },
];

fn pair_schedules(pair: &Pair, p: u32) -> (CommSchedule, CommSchedule) {
    let n = u64::from(p) * 4;
    let build = |v| ScheduleRequest::new(pair.collective, v, p, n).build().unwrap();
    (build(pair.baseline), build(pair.candidate))
}

fn reduction(baseline: &CommSchedule, candidate: &CommSchedule, groups: &GroupMap) -> Option<f64> {
    compare(baseline, candidate, groups).unwrap().reduction
}

fn traffic_bound() -> Outcome {
    let configs: Vec<(u32, u32)> = powers(2, 10).flat_map(|p| (2..=256.min(p - 1)).map(move |g| (p, g))).collect();
    let mut lines = Vec::new();
    let mut pass = true;
    for pair in &BOUND_PAIRS {
        let mut worst = (f64::NEG_INFINITY, 0, 0);
        let mut above = 0;
        for p in powers(2, 10) {
            let (baseline, candidate) = pair_schedules(pair, p);
            for &(_, g) in configs.iter().filter(|c| c.0 == p) {
                if let Some(r) = reduction(&baseline, &candidate, &block_groups(p, g).unwrap()) {
                    if r > worst.0 {
                        worst = (r, p, g);
                    }
                    if r > 0.334 {
                        above += 1;
                    }
                }
            }
        }
        pass &= above == 0 || !pair.bounded;
        let note = if pair.bounded { "" } else { " [informational, scatter+allgather baseline]" };
        lines.push(format!("{}{note} max {:.3} at p={} g={} ({} above 0.334)", pair.label, worst.0, worst.1, worst.2, above));
    }
    outcome(pass, format!("{} block configurations; {}", configs.len(), lines.join("; ")))
}

fn trend() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for pair in &BOUND_PAIRS[..2] {
        let mut means = Vec::new();
        let mut worst = f64::INFINITY;
        for p in powers(6, 10) {
            let (baseline, candidate) = pair_schedules(pair, p);
            let values: Vec<f64> = (4..=128)
                .filter_map(|g| reduction(&baseline, &candidate, &block_groups(p, g).unwrap()))
                .collect();
            worst = worst.min(values.iter().copied().fold(f64::INFINITY, f64::min));
            means.push(values.iter().sum::<f64>() / values.len() as f64);
        }
        let positive = means.iter().all(|&m| m > 0.0);
        let monotone = means.windows(2).all(|w| w[1] >= w[0]);
        pass &= positive && monotone && worst >= 0.0;
        let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
        lines.push(format!(
            "{} means p=64..1024 [{}] positive={positive} non-decreasing={monotone} min={worst:.3}",
            pair.label,
            shown.join(", ")
        ));
    }
    outcome(pass, lines.join("; "))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome, Duration); 7] = [
        (1, "motivating broadcast traffic", fig1, Duration::from_secs(1)),
        (2, "worked examples", worked_examples, Duration::from_secs(1)),
        (3, "distance ratio law", distance_ratio, Duration::from_secs(1)),
        (4, "semantic correctness and mutation detection", semantics, Duration::from_secs(300)),
        (5, "volume contracts", volumes, Duration::from_secs(30)),
        (6, "global traffic reduction bound", traffic_bound, Duration::from_secs(300)),
        (7, "reduction trend over allocation size", trend, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (k, name, run, budget) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {k} {}: {name}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 7 criteria pass", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
