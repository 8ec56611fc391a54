use poolcomm::collectives::{run_threads, CommOptions, Queue};
use poolcomm::emulator::{
    predict, scenario_request, simulate, workload, write_csv, BandwidthModel, Op, RankWork, Scenario,
    SimEventKind, Simulator, SweepKind, Variant, Workload, DEFAULT_PEAK,
};
use poolcomm::placement::size_pool;
use poolcomm::pool::{map_pool, GIB, KIB, MIB};
use poolcomm::request::{CollectiveKind, CollectiveRequest};

fn op(chunk: u64, device: usize, bytes: u64) -> Op {
    Op { device, bytes, chunk, reduce: false, after: None }
}

fn writers(devices: &[usize], bytes: u64) -> Workload {
    Workload {
        num_devices: 4,
        overlap: true,
        ranks: devices
            .iter()
            .enumerate()
            .map(|(i, &d)| RankWork { publish: vec![op(i as u64, d, bytes)], retrieve: vec![] })
            .collect(),
    }
}

#[test]
fn k_sharers_each_get_a_kth() {
    let model = BandwidthModel::constant(DEFAULT_PEAK);
    for k in 1..=5 {
        let rep = Simulator::new(model.clone())
            .record_rates(true)
            .run(&writers(&vec![2; k], GIB))
            .unwrap();
        for seg in &rep.rates {
            assert_eq!(seg.sharers, k);
            assert!((seg.rate * k as f64 / DEFAULT_PEAK - 1.0).abs() < 1e-12);
        }
        let solo = GIB as f64 / DEFAULT_PEAK;
        assert!((rep.total_latency / solo - k as f64).abs() < 1e-9);
    }
}

#[test]
fn distinct_devices_do_not_interfere() {
    let model = BandwidthModel::default();
    let solo = simulate(&writers(&[0], GIB), &model).unwrap().total_latency;
    let four = simulate(&writers(&[0, 1, 2, 3], GIB), &model).unwrap();
    for t in four.rank_completion {
        assert!((t / solo - 1.0).abs() < 1e-9);
    }
}

#[test]
fn latency_grows_with_message_size() {
    let model = BandwidthModel::default();
    for kind in CollectiveKind::ALL {
        let mut last = 0.0;
        for msg in [64 * KIB, MIB, 16 * MIB, 256 * MIB] {
            let t = predict(&scenario_request(kind, 4, msg, 4), 6, Variant::All, &model).unwrap().total_latency;
            assert!(t > last, "{kind} at {msg}: {t} <= {last}");
            last = t;
        }
    }
}

#[test]
fn interleaving_beats_sequential_for_large_messages() {
    let model = BandwidthModel::default();
    for kind in [CollectiveKind::AllGather, CollectiveKind::Broadcast, CollectiveKind::AllToAll, CollectiveKind::Gather] {
        let req = scenario_request(kind, 4, 256 * MIB, 8);
        let all = predict(&req, 6, Variant::All, &model).unwrap().total_latency;
        let naive = predict(&req, 6, Variant::Naive, &model).unwrap().total_latency;
        assert!(all < naive, "{kind}: all {all} naive {naive}");
    }
}

#[test]
fn without_overlap_reads_follow_writes() {
    let req = scenario_request(CollectiveKind::AllGather, 3, 64 * MIB, 4);
    let work = workload(&req, 6, Variant::Aggregate).unwrap();
    assert!(!work.overlap);
    let rep = simulate(&work, &BandwidthModel::default()).unwrap();
    for r in 0..3 {
        let last_write = rep.last(r, Queue::Write, SimEventKind::End).unwrap().t;
        let first_read = rep.first(r, Queue::Read, SimEventKind::Start).unwrap().t;
        assert!(first_read >= last_write);
    }
}

#[test]
fn every_retrieve_starts_after_its_publish() {
    let req = scenario_request(CollectiveKind::AllReduce, 4, 32 * MIB, 4);
    let rep = simulate(&workload(&req, 6, Variant::All).unwrap(), &BandwidthModel::default()).unwrap();
    for e in rep.events.iter().filter(|e| e.queue == Queue::Read && e.kind == SimEventKind::Start) {
        let published = rep
            .events
            .iter()
            .find(|p| p.queue == Queue::Write && p.kind == SimEventKind::End && p.chunk == e.chunk)
            .unwrap();
        assert!(published.t <= e.t);
    }
}

/// A workload rebuilt from the executor's trace moves the same bytes as the
/// plan it executed and simulates cleanly.
#[test]
fn executor_trace_replays() {
    for kind in CollectiveKind::ALL {
        let req = CollectiveRequest::new(kind, 0, 4, 8192).with_chunks(4);
        let pool = map_pool(size_pool(&req, 6).unwrap()).unwrap();
        let sends: Vec<Vec<i32>> = (0..4).map(|r| vec![r as i32; req.send_len(r)]).collect();
        let opts = CommOptions { trace: true, ..Default::default() };
        let (_, trace) = run_threads(&pool, &req, &sends, &opts).unwrap();
        let replay = Workload::from_trace(&trace, 6, true).unwrap();
        let planned = workload(&req, 6, Variant::All).unwrap();
        assert_eq!(replay.total_bytes(), planned.total_bytes(), "{kind}");
        let rep = simulate(&replay, &BandwidthModel::default()).unwrap();
        assert!(rep.total_latency > 0.0);
    }
}

#[test]
fn scenario_files_parse_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("s.toml");
    std::fs::write(
        &toml_path,
        "kind = \"alltoall\"\nnranks = [3, 6]\nmsg_bytes = [134217728]\n",
    )
    .unwrap();
    let s = Scenario::load(&toml_path).unwrap();
    assert_eq!((s.num_devices, s.sweep, s.chunks.clone()), (6, SweepKind::Scale, vec![8]));
    let rows = s.run().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].ratio_vs_3, Some(1.0));

    let json_path = dir.path().join("s.json");
    std::fs::write(
        &json_path,
        r#"{"kind":"allgather","sweep":"chunks","nranks":[3],"msg_bytes":[268435456],"chunks":[1,4,16]}"#,
    )
    .unwrap();
    let rows = Scenario::load(&json_path).unwrap().run().unwrap();
    assert_eq!(rows.iter().map(|r| r.chunks).collect::<Vec<_>>(), vec![1, 4, 16]);
    let mut out = Vec::new();
    write_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("kind,nranks,msg_bytes,chunks,latency_s,ratio_vs_3\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn unsatisfied_and_cyclic_workloads_fail() {
    let mut w = writers(&[0], MIB);
    w.ranks[0].retrieve.push(op(99, 1, MIB));
    assert!(simulate(&w, &BandwidthModel::default()).is_err());

    // Each rank's only write waits on the other's.
    let mut a = op(0, 0, MIB);
    a.after = Some(1);
    let mut b = op(1, 1, MIB);
    b.after = Some(0);
    let w = Workload {
        num_devices: 2,
        overlap: true,
        ranks: vec![
            RankWork { publish: vec![a], retrieve: vec![] },
            RankWork { publish: vec![b], retrieve: vec![] },
        ],
    };
    assert!(simulate(&w, &BandwidthModel::default()).is_err());
}
