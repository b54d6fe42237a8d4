use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ecp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecp"))
        .args(args)
        .output()
        .expect("spawn ecp")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 36x24 bright square drifting right, with a timestamp sidecar.
fn frames_dir(root: &Path) -> PathBuf {
    let dir = root.join("frames");
    fs::create_dir_all(&dir).unwrap();
    let (w, h) = (36usize, 24usize);
    let mut ts = String::new();
    for k in 0..12usize {
        let mut px = vec![20u8; w * h];
        for y in 6..18 {
            for x in (2 + 2 * k)..(10 + 2 * k).min(w) {
                px[y * w + x] = 220;
            }
        }
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(px);
        fs::write(dir.join(format!("f{k:03}.pgm")), bytes).unwrap();
        ts.push_str(&format!("{}\n", k * 33_333));
    }
    fs::write(dir.join("timestamps.txt"), ts).unwrap();
    dir
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn printed_config_parses_back() {
    let o = ecp(&["--print-config"]);
    assert_ok(&o);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, &o.stdout).unwrap();
    let out = dir.path().join("out");
    let o = ecp(&["--config", s(&path), "--out", s(&out), "flops"]);
    assert_ok(&o);
    assert!(out.join("efficiency.json").exists());
}

#[test]
fn run_output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let frames = frames_dir(dir.path());
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    for (out, threads) in [(&one, "1"), (&four, "4")] {
        let o = ecp(&[
            "--threads",
            threads,
            "--out",
            s(out),
            "run",
            "--frames",
            s(&frames),
        ]);
        assert_ok(&o);
    }
    let a = listing(&one);
    assert!(a.iter().any(|(n, _)| n == "prune_result.json"));
    assert!(a.iter().any(|(n, _)| n == "events.bin"));
    assert_eq!(a, listing(&four));
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let frames = frames_dir(dir.path());
    let ev = dir.path().join("ev");
    assert_ok(&ecp(&[
        "--out",
        s(&ev),
        "simulate-events",
        "--frames",
        s(&frames),
    ]));
    let events = ev.join("events.bin");
    let sal = dir.path().join("sal");
    assert_ok(&ecp(&[
        "--out",
        s(&sal),
        "saliency",
        "--events",
        s(&events),
        "--width",
        "36",
        "--height",
        "24",
        "--frames",
        s(&frames),
    ]));
    assert!(sal.join("emsf_retained.json").exists());
    let pr = dir.path().join("pr");
    assert_ok(&ecp(&["--out", s(&pr), "prune", "--saliency-dir", s(&sal)]));
    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(pr.join("prune_result.json")).unwrap()).unwrap();
    assert!(result["achieved_final_ratio"].as_f64().unwrap() <= 0.2 + 1e-12);

    let attn = dir.path().join("attn");
    assert_ok(&ecp(&[
        "--out",
        s(&attn),
        "synth-attn",
        "--layers",
        "6",
        "--frames",
        "2",
    ]));
    let bias = dir.path().join("bias");
    let pattern = format!("{}/attention_l*.bin", s(&attn));
    assert_ok(&ecp(&[
        "--out",
        s(&bias),
        "analyze-bias",
        "--attention",
        &pattern,
    ]));
    let csv = fs::read_to_string(bias.join("bias.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn exit_codes_separate_config_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.bin");

    let o = ecp(&["--out", s(&out), "--final-ratio", "2", "flops"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ecp(&["--out", s(&out), "--threads", "0", "flops"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ecp(&["--out", s(&out), "no-such-command"]);
    assert_eq!(o.status.code(), Some(2));

    let o = ecp(&["--out", s(&out), "run", "--events", s(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "10,40,3,1\n").unwrap();
    let o = ecp(&[
        "--out",
        s(&out),
        "run",
        "--events",
        s(&bad),
        "--width",
        "36",
        "--height",
        "24",
    ]);
    assert_eq!(o.status.code(), Some(3));
}
