//! Whole pipelines through the `latmap` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use latmap_core::store::{load_decoder, load_token, Precision};
use latmap_core::LatentMap;
use serde_json::Value;
use tempfile::TempDir;

fn latmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latmap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = latmap(args);
    assert!(
        out.status.success(),
        "latmap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the stderr line of a failing run.
fn fails(args: &[&str]) -> (i32, String) {
    let out = latmap(args);
    let err = String::from_utf8(out.stderr).unwrap();
    (out.status.code().unwrap(), err.trim_end().to_string())
}

/// Argument form of a path; leaked so argument lists can be built inline.
fn s(p: impl AsRef<Path>) -> &'static str {
    Box::leak(p.as_ref().to_str().unwrap().to_owned().into_boxed_str())
}

/// A small synthetic scene and a map built from it, shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn scene(&self) -> PathBuf {
        self.dir.path().join("scene")
    }

    fn map(&self) -> PathBuf {
        self.dir.path().join("map.lmap")
    }

    fn oracle(&self) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.scene().join("oracle.json")).unwrap()).unwrap()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "synth",
            "-o",
            s(f.scene()),
            "--frames",
            "12",
            "--heldout",
            "2",
            "--relocate",
            "1@6",
        ]);
        let summary = ok(&["build", s(f.scene()), "-o", s(f.map()), "--steps", "300"]);
        assert!(summary.contains("heldout_cosine="), "{summary}");
        f
    })
}

fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<f64>>) {
    let text: String = rows
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

fn vec_of(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn region_centers_decode_to_their_prototypes() {
    let f = fixture();
    let oracle = f.oracle();
    let regions = oracle["regions"].as_array().unwrap();
    let work = tempfile::tempdir().unwrap();
    let (pts, refs) = (work.path().join("pts.txt"), work.path().join("ref.txt"));
    write_rows(&pts, regions.iter().map(|r| vec_of(&r["center"])));
    write_rows(&refs, regions.iter().map(|r| vec_of(&r["prototype"])));

    let out: Value = serde_json::from_str(&ok(&["query", s(f.map()), s(&pts), "--reference", s(&refs)])).unwrap();
    let points = out["points"].as_array().unwrap();
    assert_eq!(points.len(), regions.len());
    for (i, p) in points.iter().enumerate() {
        let cos = p["cosine"].as_f64().unwrap();
        assert!(cos >= 0.99, "region {i}: cosine {cos}");
        assert_eq!(p["feature"].as_array().unwrap().len(), 64);
    }
    assert!(out["mean_cosine"].as_f64().unwrap() >= 0.99);
}

#[test]
fn query_without_reference_omits_cosines() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let pts = work.path().join("pts.txt");
    std::fs::write(&pts, "# one point\n0.9 0.9 0.1\n\n").unwrap();
    let json = work.path().join("out.json");
    ok(&["query", s(f.map()), s(&pts), "-o", s(&json)]);
    let out: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(out["points"].as_array().unwrap().len(), 1);
    assert!(out.get("mean_cosine").is_none());
    assert!(out["points"][0].get("cosine").is_none());
}

#[test]
fn empty_stream_leaves_the_map_unchanged() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let stream = f.scene().join("stream.json");
    let mut manifest: Value = serde_json::from_str(&std::fs::read_to_string(&stream).unwrap()).unwrap();
    manifest["steps"] = Value::Array(vec![]);
    let empty = f.scene().join("empty-stream.json");
    std::fs::write(&empty, manifest.to_string()).unwrap();

    // the output keeps whatever precision the input was stored with
    let wide = work.path().join("wide.lmap");
    LatentMap::load(f.map()).unwrap().save(&wide, Precision::F64).unwrap();
    for input in [f.map(), wide] {
        let out = work.path().join("same.lmap");
        let summary = ok(&["replay", s(&input), s(&empty), "-o", s(&out)]);
        assert_eq!(summary.trim(), "steps=0 updates=0");
        assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
    }
}

#[test]
fn replay_updates_on_schedule_and_logs_every_step() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let (out, csv) = (work.path().join("re.lmap"), work.path().join("report.csv"));
    let stream = f.scene().join("stream.json");
    let summary = ok(&[
        "replay",
        s(f.map()),
        s(&stream),
        "-o",
        s(&out),
        "--report",
        s(&csv),
        "--t-update",
        "3",
        "--k-update",
        "2",
    ]);
    assert_eq!(summary.trim(), "steps=12 updates=4");
    let report = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    for (i, r) in rows.iter().enumerate() {
        let tau = i + 1;
        assert_eq!(r[0], tau.to_string());
        let updated = tau % 3 == 0;
        assert_eq!(r[3], if updated { "1" } else { "0" }, "tau {tau}");
        assert_eq!(r[9], if updated { "2" } else { "0" }, "tau {tau}");
    }
    assert_ne!(std::fs::read(&out).unwrap(), std::fs::read(f.map()).unwrap());
}

#[test]
fn token_formats_agree_and_weights_round_trip() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let p = |n: &str| work.path().join(n);
    ok(&[
        "token",
        s(f.map()),
        "-o",
        s(p("t.bin")),
        "--save-weights",
        s(p("agg.lmag")),
    ]);
    ok(&[
        "token",
        s(f.map()),
        "-o",
        s(p("t.txt")),
        "--format",
        "text",
        "--weights",
        s(p("agg.lmag")),
    ]);
    let (bin, text) = (load_token(p("t.bin")).unwrap(), load_token(p("t.txt")).unwrap());
    assert_eq!(bin.len(), 256);
    for (a, b) in bin.iter().zip(&text) {
        // binary stores f32
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }

    ok(&["token", s(f.map()), "-o", s(p("other.bin")), "--seed", "5"]);
    assert_ne!(load_token(p("other.bin")).unwrap(), bin);
}

#[test]
fn export_writes_one_vertex_per_occupied_point() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let ply = work.path().join("cloud.ply");
    let summary = ok(&["export", s(f.map()), "-o", s(&ply)]);
    let n: usize = summary.trim().strip_prefix("points=").unwrap().parse().unwrap();
    assert!(n > 0);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.contains(&format!("element vertex {n}\n")));
    let body = text.split("end_header\n").nth(1).unwrap();
    assert_eq!(body.lines().count(), n);
}

#[test]
fn pretrained_decoder_stays_frozen_in_build() {
    let work = tempfile::tempdir().unwrap();
    let p = |n: &str| work.path().join(n);
    for seed in ["1", "2"] {
        ok(&[
            "synth",
            "-o",
            s(p(seed)),
            "--frames",
            "6",
            "--heldout",
            "0",
            "--seed",
            seed,
        ]);
    }
    let summary = ok(&[
        "pretrain",
        s(p("1")),
        s(p("2")),
        "-o",
        s(p("dec.lmdc")),
        "--steps",
        "40",
    ]);
    assert!(summary.contains("scene1_cosine="), "{summary}");
    ok(&[
        "build",
        s(p("1")),
        "-o",
        s(p("m.lmap")),
        "--decoder",
        s(p("dec.lmdc")),
        "--freeze-decoder",
        "--steps",
        "20",
    ]);
    let map = LatentMap::load(p("m.lmap")).unwrap();
    assert_eq!(map.decoder, load_decoder(p("dec.lmdc")).unwrap());
}

#[test]
fn builds_are_reproducible_for_a_seed() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let p = |n: &str| work.path().join(n);
    let scene = s(f.scene());
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        ok(&["build", scene, "-o", s(p(name)), "--steps", "20", "--seed", seed]);
    }
    let read = |n: &str| std::fs::read(p(n)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn synth_is_reproducible_for_a_seed() {
    let work = tempfile::tempdir().unwrap();
    let p = |n: &str| work.path().join(n);
    for n in ["a", "b"] {
        ok(&[
            "synth",
            "-o",
            s(p(n)),
            "--frames",
            "3",
            "--heldout",
            "1",
            "--seed",
            "7",
            "--dynamic-arm",
        ]);
    }
    for file in [
        "dataset.json",
        "oracle.json",
        "stream.json",
        "frames/t001.feat",
        "frames/t001.mask",
    ] {
        assert_eq!(
            std::fs::read(p("a").join(file)).unwrap(),
            std::fs::read(p("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn relocation_moves_the_region_in_the_oracle() {
    let oracle = fixture().oracle();
    assert_eq!(oracle["phase"], 1);
    assert_eq!(oracle["spec"]["relocation"]["at_frame"], 6);
    // the moved cube sits in the one slot no other region uses, in a row of its own
    let centers: Vec<Vec<f64>> = oracle["regions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| vec_of(&r["center"]))
        .collect();
    let moved = &centers[1];
    assert!(centers.iter().enumerate().all(|(i, c)| i == 1 || c != moved));
}

#[test]
fn gradcheck_passes_with_the_default_seed() {
    let summary = ok(&["gradcheck"]);
    assert!(summary.starts_with("cases=100 "), "{summary}");
}

#[test]
fn failures_exit_with_one_parseable_line() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let p = |n: &str| work.path().join(n);
    let map = s(f.map());

    let corrupt = p("corrupt.lmap");
    let mut bytes = std::fs::read(f.map()).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&corrupt, bytes).unwrap();
    std::fs::write(p("bad.json"), r#"{"online": {"k_update": 0}}"#).unwrap();
    std::fs::write(p("unknown.json"), r#"{"colour": 1}"#).unwrap();
    std::fs::write(p("pts.txt"), "0.1 0.2\n").unwrap();
    std::fs::write(p("far.txt"), "9 9 9\n").unwrap();

    let cases: Vec<(Vec<&str>, i32, &str)> = vec![
        (vec!["build"], 2, "usage"),
        (vec!["frobnicate"], 2, "usage"),
        (vec!["export", map, "-o", "x.ply", "--bogus"], 2, "usage"),
        (vec!["token", map, "-o", "t", "--format", "yaml"], 2, "usage"),
        (vec!["synth", "-o", s(p("s")), "--relocate", "two@3"], 2, "usage"),
        (vec!["--config", s(p("unknown.json")), "gradcheck"], 2, "invalid_config"),
        (
            vec![
                "--config",
                s(p("bad.json")),
                "replay",
                map,
                s(f.scene().join("stream.json")),
                "-o",
                s(p("o")),
            ],
            2,
            "invalid_config",
        ),
        (vec!["synth", "-o", s(p("s")), "--regions", "9"], 2, "invalid_config"),
        (vec!["export", s(p("missing.lmap")), "-o", s(p("x.ply"))], 3, "io"),
        (vec!["export", s(&corrupt), "-o", s(p("x.ply"))], 3, "checksum"),
        (vec!["query", map, s(p("pts.txt"))], 3, "parse"),
        (vec!["query", map, s(p("far.txt"))], 3, "out_of_bounds"),
        (vec!["build", s(p("pts.txt")), "-o", s(p("m"))], 3, "parse"),
    ];
    for (args, code, kind) in cases {
        let (got, err) = fails(&args);
        assert_eq!(got, code, "{args:?}: {err}");
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with(&format!("error: kind={kind} msg=")), "{args:?}: {err}");
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_latmap"))
        .args(["gradcheck", "--cases", "1"])
        .env("LMAP_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let ok = Command::new(env!("CARGO_BIN_EXE_latmap"))
        .args(["gradcheck", "--cases", "1"])
        .env("LMAP_THREADS", "2")
        .output()
        .unwrap();
    assert!(ok.status.success());
}
