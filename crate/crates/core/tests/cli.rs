use std::process::Command;

use poolcomm::bench::read_report;

fn poolbench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_poolbench"))
}

#[test]
fn smoke_sweep_writes_verified_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ag.csv");
    let status = poolbench()
        .args(["--kind", "allgather", "--minbytes", "1M", "--maxbytes", "4M", "--nranks", "3", "--iters", "2"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = read_report(&out).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.verified == Some(true) && r.median_s <= r.p95_s));
}

#[test]
fn compare_reports_speedups() {
    let dir = tempfile::tempdir().unwrap();
    let run = |placement: &str| {
        let out = dir.path().join(format!("{placement}.csv"));
        let status = poolbench()
            .args(["--backend", "emulator", "--kind", "broadcast,alltoall", "--minbytes", "16M", "--maxbytes", "64M"])
            .args(["--stepfactor", "4", "--nranks", "4", "--placement", placement])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        out
    };
    let (all, naive) = (run("all"), run("naive"));
    let out = poolbench().arg("compare").arg(&all).arg(&naive).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,nranks,nd,msg_bytes,a_median_s,b_median_s,speedup");
    assert_eq!(lines.len(), 5);
}

#[test]
fn mismatched_reports_fail_to_compare() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str, max: &str| {
        let out = dir.path().join(name);
        poolbench()
            .args(["--backend", "emulator", "--minbytes", "1M", "--maxbytes", max])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        out
    };
    let a = mk("a.csv", "1M");
    let b = mk("b.csv", "4M");
    let st = poolbench().arg("compare").arg(&a).arg(&b).status().unwrap();
    assert!(!st.success());
}

#[test]
fn scenario_flag_emits_ratio_table() {
    let scenario = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/scale_alltoall.toml");
    let out = poolbench().args(["--scenario", scenario]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("kind,nranks,msg_bytes,chunks,latency_s,ratio_vs_3"));
    assert!(text.lines().skip(1).any(|l| l.starts_with("alltoall,12,")));
}

#[test]
fn invalid_arguments_exit_nonzero() {
    for args in [
        vec!["--stepfactor", "1"],
        vec!["--warmup", "0"],
        vec!["--minbytes", "4M", "--maxbytes", "1M"],
        vec!["--kind", "allwhatever"],
    ] {
        let st = poolbench().args(&args).status().unwrap();
        assert!(!st.success(), "{args:?}");
    }
}

#[test]
fn plans_dump_as_json_lines() {
    let out = poolbench()
        .args(["--backend", "emulator", "--kind", "scatter", "--minbytes", "4K", "--maxbytes", "4K", "--nranks", "2", "--dump-plans"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let json: Vec<&str> = err.lines().filter(|l| l.starts_with('{')).collect();
    assert!(!json.is_empty());
    for l in json {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v.get("pool_address").is_some());
    }
}
