use std::collections::{HashMap, HashSet};

use poolcomm::bench::payload;
use poolcomm::collectives::{
    expected_recv, run_threads, verify, CommOptions, Communicator, Element, Queue, TraceKind, Tolerance,
};
use poolcomm::placement::{size_pool, CallPlan, Layout};
use poolcomm::pool::{map_pool, Backend};
use poolcomm::request::{CollectiveKind, CollectiveRequest, ElemType, ReduceOp};
use proptest::prelude::*;

fn sends_for<T: Element>(req: &CollectiveRequest, seed: u64) -> Vec<Vec<T>> {
    (0..req.nranks).map(|r| payload(seed, r, req.send_len(r))).collect()
}

fn run<T: Element>(req: &CollectiveRequest, nd: usize, opts: &CommOptions, seed: u64) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let pool = map_pool(size_pool(req, nd).unwrap()).unwrap();
    let sends = sends_for(req, seed);
    let (recvs, _) = run_threads(&pool, req, &sends, opts).unwrap();
    (sends, recvs)
}

#[test]
fn every_kind_every_type() {
    for kind in CollectiveKind::ALL {
        for elem in [ElemType::I32, ElemType::I64, ElemType::F32, ElemType::F64] {
            let req = CollectiveRequest::new(kind, 0, 4, 96).with_elem(elem).with_chunks(3);
            let opts = CommOptions::default();
            let ok = match elem {
                ElemType::I32 => { let (s, r) = run::<i32>(&req, 6, &opts, 3); verify(&req, &s, &r, Tolerance::Exact) }
                ElemType::I64 => { let (s, r) = run::<i64>(&req, 6, &opts, 3); verify(&req, &s, &r, Tolerance::Exact) }
                ElemType::F32 => { let (s, r) = run::<f32>(&req, 6, &opts, 3); verify(&req, &s, &r, Tolerance::Exact) }
                ElemType::F64 => { let (s, r) = run::<f64>(&req, 6, &opts, 3); verify(&req, &s, &r, Tolerance::Exact) }
            };
            assert!(ok.passed(), "{kind} {elem:?}: {ok:?}");
        }
    }
}

#[test]
fn max_and_min_reductions() {
    for op in [ReduceOp::Max, ReduceOp::Min] {
        for kind in [CollectiveKind::AllReduce, CollectiveKind::Reduce, CollectiveKind::ReduceScatter] {
            let req = CollectiveRequest::new(kind, 0, 3, 300).with_op(op).with_chunks(4).with_root(1);
            let (s, r) = run::<i32>(&req, 6, &CommOptions::default(), 9);
            assert!(verify(&req, &s, &r, Tolerance::Exact).passed(), "{kind} {op:?}");
        }
    }
}

#[test]
fn root_invariance() {
    for kind in CollectiveKind::ALL.into_iter().filter(|k| k.is_rooted()) {
        for root in 0..5 {
            let req = CollectiveRequest::new(kind, 0, 5, 40).with_root(root).with_chunks(2);
            let (s, r) = run::<i32>(&req, 6, &CommOptions::default(), 11);
            assert!(verify(&req, &s, &r, Tolerance::Exact).passed(), "{kind} root {root}");
        }
    }
}

#[test]
fn chunk_count_does_not_change_results() {
    for kind in CollectiveKind::ALL {
        let base = CollectiveRequest::new(kind, 0, 4, 1000).with_root(2);
        let (_, want) = run::<i32>(&base.clone().with_chunks(1), 6, &CommOptions::default(), 5);
        for c in [2, 3, 7, 16] {
            let (_, got) = run::<i32>(&base.clone().with_chunks(c), 6, &CommOptions::default(), 5);
            assert_eq!(got, want, "{kind} with {c} chunks");
        }
    }
}

#[test]
fn layouts_and_overlap_agree() {
    for kind in CollectiveKind::ALL {
        let req = CollectiveRequest::new(kind, 0, 3, 999).with_chunks(4);
        let mut results = Vec::new();
        for layout in [Layout::Interleaved, Layout::Sequential] {
            for overlap in [true, false] {
                let opts = CommOptions { layout, overlap, ..Default::default() };
                let cfg = poolcomm::bench::pool_for(&req, 6, layout).unwrap();
                let pool = map_pool(cfg).unwrap();
                let sends = sends_for::<i32>(&req, 2);
                results.push(run_threads(&pool, &req, &sends, &opts).unwrap().0);
            }
        }
        assert!(results.windows(2).all(|w| w[0] == w[1]), "{kind}");
    }
}

#[test]
fn repeated_calls_are_deterministic() {
    let req = CollectiveRequest::new(CollectiveKind::AllReduce, 0, 4, 4096)
        .with_elem(ElemType::F32)
        .with_chunks(8);
    let pool = map_pool(size_pool(&req, 6).unwrap()).unwrap();
    let sends = sends_for::<f32>(&req, 77);
    let first = run_threads(&pool, &req, &sends, &CommOptions::default()).unwrap().0;
    for _ in 0..5 {
        let again = run_threads(&pool, &req, &sends, &CommOptions::default()).unwrap().0;
        let bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&again), bits(&first));
    }
}

#[test]
fn communicator_survives_many_epochs() {
    let req = CollectiveRequest::new(CollectiveKind::AllGather, 0, 3, 64).with_elem(ElemType::I64).with_chunks(2);
    let pool = map_pool(size_pool(&req, 6).unwrap()).unwrap();
    let sends = sends_for::<i64>(&req, 4);
    std::thread::scope(|s| {
        for r in 0..3 {
            let (pool, sends, req) = (pool.clone(), &sends, req.for_rank(r));
            s.spawn(move || {
                let mut comm = Communicator::new(pool, r, 3, CommOptions::default()).unwrap();
                let mut recv = vec![0i64; req.recv_len(r)];
                for _ in 0..50 {
                    recv.fill(0);
                    comm.run_collective(&req, &sends[r], &mut recv).unwrap();
                    assert_eq!(recv, expected_recv(&req, sends, r));
                }
                assert_eq!(comm.epoch(), 50);
            });
        }
    });
}

/// Every consumer's wait returns only after the producer rang that doorbell.
#[test]
fn trace_rings_before_waits_return() {
    for kind in CollectiveKind::ALL {
        let req = CollectiveRequest::new(kind, 0, 4, 4096).with_chunks(4);
        let pool = map_pool(size_pool(&req, 6).unwrap()).unwrap();
        let sends = sends_for::<i32>(&req, 1);
        let opts = CommOptions { trace: true, ..Default::default() };
        let (_, trace) = run_threads(&pool, &req, &sends, &opts).unwrap();
        let rings: HashMap<u64, u64> = trace
            .iter()
            .filter(|e| e.kind == TraceKind::Ring)
            .map(|e| (e.doorbell, e.t_ns))
            .collect();
        let mut waits = 0;
        for e in trace.iter().filter(|e| e.kind == TraceKind::WaitReturn) {
            let rung = rings.get(&e.doorbell).unwrap_or_else(|| panic!("{kind}: doorbell {} never rung", e.doorbell));
            assert!(*rung <= e.t_ns, "{kind}: wait on {} returned before ring", e.doorbell);
            waits += 1;
        }
        assert!(waits > 0);
        // Each rank publishes on the write queue only and retrieves on the read queue only.
        assert!(trace.iter().all(|e| match e.kind {
            TraceKind::PublishStart | TraceKind::Ring => e.queue == Queue::Write,
            _ => e.queue == Queue::Read,
        }));
    }
}

#[test]
fn reducescatter_publish_devices_are_disjoint() {
    let req = CollectiveRequest::new(CollectiveKind::ReduceScatter, 0, 4, 8 * 1024).with_chunks(4);
    let cfg = size_pool(&req, 8).unwrap();
    let call = CallPlan::build(&req, &cfg, Layout::Interleaved, 0).unwrap();
    let sets: Vec<HashSet<usize>> = call
        .publish
        .iter()
        .map(|p| p.entries.iter().map(|e| e.device_index).collect())
        .collect();
    for (a, sa) in sets.iter().enumerate() {
        assert_eq!(sa.len(), 2, "rank {a} should own two of eight devices");
        for sb in &sets[a + 1..] {
            assert!(sa.is_disjoint(sb));
        }
    }
}

#[test]
fn file_backend_shares_bytes_between_handles() {
    let dir = tempfile::tempdir().unwrap();
    let req = CollectiveRequest::new(CollectiveKind::AllToAll, 0, 3, 300).with_chunks(2);
    let cfg = size_pool(&req, 6).unwrap().with_backend(Backend::FileMapped(dir.path().join("pool")));
    let sends = sends_for::<i32>(&req, 8);
    // Each rank maps the file separately, as separate processes would.
    let recvs: Vec<Vec<i32>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..3)
            .map(|r| {
                let (cfg, sends, req) = (cfg.clone(), &sends, req.for_rank(r));
                s.spawn(move || {
                    let pool = map_pool(cfg).unwrap();
                    let mut comm = Communicator::new(pool, r, 3, CommOptions::default()).unwrap();
                    let mut recv = vec![0i32; req.recv_len(r)];
                    comm.run_collective(&req, &sends[r], &mut recv).unwrap();
                    recv
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(verify(&req, &sends, &recvs, Tolerance::Exact).passed());
}

#[test]
fn mismatched_buffers_are_rejected() {
    let req = CollectiveRequest::new(CollectiveKind::AllGather, 0, 2, 8);
    let pool = map_pool(size_pool(&req, 2).unwrap()).unwrap();
    let mut comm = Communicator::new(pool, 0, 2, CommOptions::default()).unwrap();
    let mut short = vec![0i32; 8];
    assert!(comm.run_collective(&req, &[0i32; 8], &mut short).is_err());
    let mut recv = vec![0f32; 16];
    assert!(comm.run_collective(&req, &[0f32; 8], &mut recv).is_err());
}

fn kind_strategy() -> impl Strategy<Value = CollectiveKind> {
    (0..8usize).prop_map(|i| CollectiveKind::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_geometry_matches_oracle(
        kind in kind_strategy(),
        p in 1usize..7,
        per in 1usize..200,
        chunks in 1usize..9,
        nd in 1usize..9,
        root_pick in 0usize..7,
        seed in any::<u64>(),
    ) {
        let count = if kind.needs_divisible_count() { per * p } else { per };
        let req = CollectiveRequest::new(kind, 0, p, count)
            .with_chunks(chunks)
            .with_root(root_pick % p);
        let (s, r) = run::<i32>(&req, nd, &CommOptions::default(), seed);
        let verdict = verify(&req, &s, &r, Tolerance::Exact);
        prop_assert!(verdict.passed(), "{:?}", verdict);
    }
}
