use std::io::Write;

use bine_core::butterflies::{Butterfly, ButterflyKind};
use bine_core::modulo_distance;
use bine_core::schedules::{
    build_gather, build_scatter, variant_matrix, BlockSet, Collective, CommSchedule, ScheduleRequest, Variant,
};
use bine_core::topology::{block_groups, block_record, load_allocation, write_allocation};
use bine_core::traffic::{account, default_baseline};
use bine_core::trees::bine_distance;

#[test]
fn bine_butterfly_transfers_cover_bine_distances() {
    for s in 1..=10u32 {
        let p = 1u32 << s;
        let n = u64::from(p) * 2;
        let small = ScheduleRequest::new(Collective::Allreduce, Variant::BineSmall, p, n).build().unwrap();
        for (i, t) in small.transfers() {
            assert_eq!(u64::from(modulo_distance(t.src, t.dst, p)), bine_distance(i as u32, s));
        }
        let large = ScheduleRequest::new(Collective::Allreduce, Variant::BineLarge, p, n).build().unwrap();
        for (i, t) in large.transfers() {
            // reduce-scatter doubles the distance, allgather halves it again
            let k = if i < s as usize { s - 1 - i as u32 } else { i as u32 - s };
            assert_eq!(u64::from(modulo_distance(t.src, t.dst, p)), bine_distance(k, s), "p={p} step {i}");
        }
    }
}

#[test]
fn bine_and_baselines_move_the_same_volume() {
    for s in 1..=9u32 {
        let p = 1u32 << s;
        let n = u64::from(p) * 8;
        for c in Collective::ALL {
            for (v, k) in variant_matrix(c) {
                let Some(base) = default_baseline(c, v) else { continue };
                // the large reduce is measured against the binomial tree, a
                // different algorithm with a different volume
                if (c, v) == (Collective::Reduce, Variant::BineLarge) {
                    continue;
                }
                let bine = ScheduleRequest::new(c, v, p, n).contiguity(k).build().unwrap();
                let other = ScheduleRequest::new(c, base, p, n).build().unwrap();
                assert_eq!(bine.total_bytes(), other.total_bytes(), "{c} {v} vs {base} p={p}");
                assert_eq!(bine.step_count(), other.step_count(), "{c} {v} vs {base} p={p}");
            }
        }
        for v in [Variant::BineSmall, Variant::BinomialHalving, Variant::BinomialDoubling] {
            let b = ScheduleRequest::new(Collective::Broadcast, v, p, n).build().unwrap();
            assert_eq!(b.total_bytes(), u64::from(p - 1) * n);
        }
        let sag = ScheduleRequest::new(Collective::Broadcast, Variant::BinomialSag, p, n).build().unwrap();
        let bine = ScheduleRequest::new(Collective::Broadcast, Variant::BineLarge, p, n).build().unwrap();
        assert_eq!(sag.total_bytes(), bine.total_bytes());
    }
}

#[test]
fn gather_and_scatter_are_mirror_images() {
    for s in 1..=8u32 {
        let p = 1u32 << s;
        for root in [0, 1, p / 2, p - 1] {
            let root = root % p;
            let scatter = build_scatter(p, root, u64::from(p), Variant::Bine).unwrap();
            let gather = build_gather(p, root, u64::from(p), Variant::Bine).unwrap();
            let mut mirrored: Vec<Vec<_>> = gather
                .steps
                .iter()
                .rev()
                .map(|step| {
                    let mut v: Vec<_> = step.iter().map(|t| (t.dst, t.src, t.blocks.clone())).collect();
                    v.sort_by_key(|x| (x.0, x.1));
                    v
                })
                .collect();
            let plain: Vec<Vec<_>> = scatter
                .steps
                .iter()
                .map(|step| step.iter().map(|t| (t.src, t.dst, t.blocks.clone())).collect())
                .collect();
            assert_eq!(plain, std::mem::take(&mut mirrored));
        }
    }
}

#[test]
fn gather_senders_always_send_contiguous_ranges() {
    for s in 1..=10u32 {
        let p = 1u32 << s;
        let g = build_gather(p, 0, u64::from(p), Variant::Bine).unwrap();
        assert!(g.transfers().all(|(_, t)| matches!(t.blocks, BlockSet::Range(_))));
    }
}

#[test]
fn halving_butterfly_reach_sets_are_contiguous() {
    for s in 1..=9u32 {
        let p = 1u32 << s;
        let b = Butterfly::new(ButterflyKind::BineHalving, p).unwrap();
        for r in 0..p {
            for i in 0..=s {
                let set = BlockSet::from_positions(b.reachable(r, i), p);
                assert!(set.is_contiguous(), "p={p} r={r} step={i}");
            }
        }
    }
}

#[test]
fn schedule_json_round_trip_keeps_accounting() {
    let groups = block_groups(64, 6).unwrap();
    for c in Collective::ALL {
        for (v, k) in variant_matrix(c) {
            let s = ScheduleRequest::new(c, v, 64, 64 * 4).root(5).contiguity(k).build().unwrap();
            let back = CommSchedule::from_json(&s.to_json().unwrap()).unwrap();
            assert_eq!(account(&s, &groups).unwrap(), account(&back, &groups).unwrap());
        }
    }
}

#[test]
fn allocation_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alloc.csv");
    let records = vec![block_record("a", 16, 4), block_record("b", 32, 3)];
    write_allocation(&records, std::fs::File::create(&path).unwrap()).unwrap();
    let back = load_allocation(&path).unwrap();
    assert_eq!(back, records);
    for (r, g) in back.iter().zip([4, 3]) {
        let m = r.group_map(None, "alloc.csv").unwrap();
        assert_eq!(m.assignment(), block_groups(r.len() as u32, g).unwrap().assignment());
    }
    let missing = dir.path().join("missing.csv");
    let err = load_allocation(&missing).unwrap_err().to_string();
    assert!(err.contains("missing.csv"), "{err}");
    let mut bad = std::fs::File::create(dir.path().join("bad.csv")).unwrap();
    writeln!(bad, "job,node,group\nx,a,0\nx,a,0").unwrap();
    assert!(load_allocation(&dir.path().join("bad.csv")).is_err());
}
