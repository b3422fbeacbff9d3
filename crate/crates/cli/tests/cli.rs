use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn vaipho(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaipho"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn block<'a>(out: &'a str, title: &str) -> Vec<&'a str> {
    out.lines().skip_while(|l| *l != title).skip(1).take(6).collect()
}

#[test]
fn zkp_demo_prints_the_worked_example() {
    let o = vaipho(&[
        "zkp-demo",
        "--key",
        "12869",
        "--flips",
        "4,5,8,11,14",
        "--perm",
        "6,5,3,4,2,1",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(
        block(&out, "starting graph:"),
        [
            "0 0 1 1 0 0",
            "0 0 1 0 0 1",
            "1 1 0 0 0 0",
            "1 0 0 0 1 0",
            "0 0 0 1 0 1",
            "0 1 0 0 1 0"
        ]
    );
    assert!(out.contains("transformed key: 0 1 1 1 1 1 0 1 1 0 1 0 1 1 1\n"));
    assert_eq!(
        block(&out, "transformed graph:"),
        [
            "0 0 1 1 1 1",
            "0 0 1 0 1 1",
            "1 1 0 0 1 0",
            "1 0 0 0 1 1",
            "1 1 1 1 0 1",
            "1 1 0 1 1 0"
        ]
    );
    assert_eq!(
        block(&out, "isomorphic graph:"),
        [
            "1 1 0 1 1 0",
            "1 1 1 1 0 1",
            "1 1 0 0 1 0",
            "1 0 0 0 1 1",
            "0 0 1 0 1 1",
            "0 0 1 1 1 1"
        ]
    );
}

#[test]
fn zkp_demo_without_changes_repeats_the_start() {
    let out = stdout(&vaipho(&["zkp-demo", "--key", "12869"]));
    let start = block(&out, "starting graph:");
    assert_eq!(block(&out, "transformed graph:"), start);
    assert_eq!(block(&out, "isomorphic graph:"), start);
}

#[test]
fn zkp_demo_rejects_non_cycle_keys() {
    let o = vaipho(&["zkp-demo", "--key", "12870"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid key"));
}

#[test]
fn two_node_run_ends_done_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.trace");
    let b = dir.path().join("b.trace");
    let scn = scenario("two_node_auth.scn");
    for p in [&a, &b] {
        let o = vaipho(&["run", &scn, "--seed", "7", "--trace", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = fs::read(&a).unwrap();
    assert_eq!(ta, fs::read(&b).unwrap());
    let text = String::from_utf8(ta).unwrap();
    let finals: Vec<&str> = text.lines().filter(|l| l.contains("reason=final")).collect();
    assert_eq!(finals.len(), 2);
    assert!(finals.iter().all(|l| l.contains(" state=Done ")));
}

#[test]
fn run_to_stdout_matches_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.trace");
    let scn = scenario("two_node_auth.scn");
    let file = vaipho(&["run", &scn, "--trace", p.to_str().unwrap(), "--until", "5"]);
    assert!(file.status.success());
    let out = vaipho(&["run", &scn, "--until", "5"]);
    assert_eq!(out.stdout, fs::read(&p).unwrap());
}

#[test]
fn missing_track_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.scn");
    fs::write(&p, "[node 1]\nreal_id = 1\n\n[node 2]\n[track 2]\n0 0 0 urban\n").unwrap();
    let before = fs::read(&p).unwrap();
    let o = vaipho(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 1"), "{err}");
    assert!(err.contains("track"), "{err}");
    assert_eq!(fs::read(&p).unwrap(), before);
}

#[test]
fn events_lists_the_single_live_parking_spot() {
    let scn = scenario("parking_handoff.scn");
    let o = vaipho(&["events", &scn, "--node", "2", "--at", "599", "--parking"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 1, "{out}");
    assert!(rows[0].starts_with("kind=parking x=100.000 y=50.000 det=0.000 exp=600.000"));
    let gone = vaipho(&["events", &scn, "--node", "2", "--at", "600", "--parking"]);
    assert_eq!(stdout(&gone), "");
}

#[test]
fn events_shows_both_tables() {
    let out = stdout(&vaipho(&[
        "events",
        &scenario("parking_handoff.scn"),
        "--node",
        "2",
        "--at",
        "300",
    ]));
    assert!(out.starts_with("# confirmed\n"));
    assert!(out.contains("# possible\n"));
}

#[test]
fn events_rejects_unknown_node_and_late_time() {
    let scn = scenario("parking_handoff.scn");
    assert_eq!(
        vaipho(&["events", &scn, "--node", "9", "--at", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        vaipho(&["events", &scn, "--node", "1", "--at", "701"]).status.code(),
        Some(2)
    );
}

#[test]
fn shipped_scenarios_verify_clean() {
    let dir = tempfile::tempdir().unwrap();
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let scn = entry.unwrap().path();
        let t = dir.path().join("t.trace");
        let run = vaipho(&["run", scn.to_str().unwrap(), "--trace", t.to_str().unwrap()]);
        assert!(
            run.status.success(),
            "{}: {}",
            scn.display(),
            String::from_utf8_lossy(&run.stderr)
        );
        let v = vaipho(&["verify-trace", t.to_str().unwrap()]);
        assert_eq!(stdout(&v), "ok\n", "{}", scn.display());
        n += 1;
    }
    assert!(n >= 6);
}

#[test]
fn verify_trace_flags_delivery_before_send() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.trace");
    assert!(
        vaipho(&["run", &scenario("two_node_auth.scn"), "--trace", t.to_str().unwrap()])
            .status
            .success()
    );
    let text = fs::read_to_string(&t).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let send = lines
        .iter()
        .position(|l| l.contains("kind=send") && l.contains("hdr=D1"))
        .unwrap();
    let recv = lines
        .iter()
        .position(|l| l.contains("kind=recv") && l.contains("hdr=D1"))
        .unwrap();
    let moved = lines.remove(send);
    lines.insert(recv, moved);
    fs::write(&t, lines.join("\n")).unwrap();
    let o = vaipho(&["verify-trace", t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("never sent"), "{}", stdout(&o));
}

#[test]
fn golden_traces_are_reproduced_byte_for_byte() {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let dir = tempfile::tempdir().unwrap();
    for (scn, seed) in [("two_node_auth", "7"), ("forged_witness", "5")] {
        let want = golden.join(format!("{scn}.seed{seed}.trace"));
        assert_eq!(stdout(&vaipho(&["verify-trace", want.to_str().unwrap()])), "ok\n");
        let got = dir.path().join("t.trace");
        let run = vaipho(&[
            "run",
            &scenario(&format!("{scn}.scn")),
            "--seed",
            seed,
            "--trace",
            got.to_str().unwrap(),
        ]);
        assert!(run.status.success());
        assert!(
            fs::read(&got).unwrap() == fs::read(&want).unwrap(),
            "{scn} drifted from its golden trace"
        );
    }
}
