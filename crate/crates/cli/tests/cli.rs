//! End-to-end runs of the `vreid` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vreid")).args(args).output().expect("spawn vreid")
}

fn ok(args: &[&str]) -> String {
    let out = vreid(args);
    assert!(
        out.status.success(),
        "vreid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vreid(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SYNTH: &str = r#"{
  "sources": [
    {"identities": 12, "images": 120, "tail_exponent": 0.0, "cameras": 4},
    {"identities": 10, "images": 80, "tail_exponent": 0.0, "cameras": 3}
  ],
  "feature_dim": 16,
  "identity_dim": 8,
  "seed": 3
}"#;

const TRAIN: &str = r#"{
  "head": {"embed_dim": 16},
  "stage1": {"epochs": 4, "batch_size": 16},
  "stage2": {"epochs": 3, "batch_size": 16}
}"#;

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Data {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn synth(holdout: &str) -> Data {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("synth.json"), SYNTH).unwrap();
    fs::write(root.join("train.json"), TRAIN).unwrap();
    ok(&[
        "synth",
        "--config",
        p(&root.join("synth.json")),
        "--holdout",
        holdout,
        "--out",
        p(&root.join("data")),
    ]);
    Data { _dir: dir, root }
}

fn train(d: &Data, stage: &str, resume: Option<&Path>, out: &Path) -> String {
    let (m1, m2) = (d.path("data/source1.jsonl"), d.path("data/source2.jsonl"));
    let (f1, f2) = (d.path("data/source1.rfeb"), d.path("data/source2.rfeb"));
    let cfg = d.path("train.json");
    let mut args = vec!["train", "--stage", stage, "--config", p(&cfg), "--out", p(out)];
    if stage == "1" {
        args.extend(["--manifest", p(&m1), "--features", p(&f1), "--manifest", p(&m2), "--features", p(&f2)]);
    } else {
        args.extend(["--manifest", p(&m1), "--features", p(&f1)]);
    }
    if let Some(r) = resume {
        args.extend(["--resume", p(r)]);
    }
    ok(&args)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let d = synth("4");
    let inputs = snapshot(&d.path("data"));

    let out = ok(&[
        "merge",
        "--manifest",
        p(&d.path("data/source1.jsonl")),
        "--manifest",
        p(&d.path("data/source2.jsonl")),
        "--out",
        p(&d.path("space.json")),
    ]);
    assert!(out.contains("2 sources"));

    let s1 = d.path("s1.rfhd");
    let msg = train(&d, "1", None, &s1);
    assert!(msg.contains("stage 1 trained 4 epochs"), "{msg}");
    let s2 = d.path("s2.rfhd");
    let msg = train(&d, "2", Some(&s1), &s2);
    assert!(msg.contains("stage 2 trained 3 epochs"), "{msg}");
    let log = fs::read_to_string(d.path("s2.rfhd.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // training is deterministic byte for byte
    let again = d.path("s2b.rfhd");
    let s1b = d.path("s1b.rfhd");
    train(&d, "1", None, &s1b);
    train(&d, "2", Some(&s1b), &again);
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s1b).unwrap());
    assert_eq!(fs::read(&s2).unwrap(), fs::read(&again).unwrap());

    let (m1, f1) = (d.path("data/source1.jsonl"), d.path("data/source1.rfeb"));
    for split in ["query", "gallery"] {
        ok(&[
            "embed",
            "--manifest",
            p(&m1),
            "--features",
            p(&f1),
            "--ckpt",
            p(&s2),
            "--split",
            split,
            "--out",
            p(&d.path(&format!("{split}.rfeb"))),
        ]);
        assert!(d.path(&format!("{split}.rfeb.meta.jsonl")).is_file());
    }
    let (q, g) = (d.path("query.rfeb"), d.path("gallery.rfeb"));
    ok(&["rank", "--query", p(&q), "--gallery", p(&g), "--out", p(&d.path("rank.jsonl"))]);

    // the manifest and the sidecars describe the same query/gallery split
    let by_manifest = ok(&["eval", "--ranking", p(&d.path("rank.jsonl")), "--manifest", p(&m1)]);
    let by_meta = ok(&[
        "eval",
        "--ranking",
        p(&d.path("rank.jsonl")),
        "--query-meta",
        p(&d.path("query.rfeb.meta.jsonl")),
        "--gallery-meta",
        p(&d.path("gallery.rfeb.meta.jsonl")),
        "--per-query",
        p(&d.path("per_query.csv")),
    ]);
    assert_eq!(by_manifest, by_meta);
    let report: serde_json::Value = serde_json::from_str(&by_meta).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map) && map > 0.3, "mAP {map}");
    let per_query = fs::read_to_string(d.path("per_query.csv")).unwrap();
    assert_eq!(per_query.lines().next(), Some("query,ap,skipped"));

    // camera clusters: every gallery image in cluster 0 except the first
    let meta = fs::read_to_string(d.path("gallery.rfeb.meta.jsonl")).unwrap();
    let clusters: String = meta
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            format!("{{\"image_id\":{},\"cluster\":{}}}\n", v["image_id"], usize::from(i == 0))
        })
        .collect();
    fs::write(d.path("clusters.jsonl"), clusters).unwrap();
    let post_args = |out: &str, report: &str| -> Vec<String> {
        [
            "post",
            "--query",
            p(&q),
            "--gallery",
            p(&g),
            "--steps",
            "qe,camver,rerank",
            "--k1",
            "6",
            "--k2",
            "2",
            "--cam-clusters",
            p(&d.path("clusters.jsonl")),
            "--evaluate",
            "--out",
            p(&d.path(out)),
            "--report",
            p(&d.path(report)),
        ]
        .map(String::from)
        .to_vec()
    };
    let a = post_args("post.jsonl", "post.json");
    let stdout = ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(stdout.contains("rerank"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.path("post.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 3);
    let b = post_args("post2.jsonl", "post2.json");
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(d.path("post.jsonl")).unwrap(), fs::read(d.path("post2.jsonl")).unwrap());
    ok(&["eval", "--ranking", p(&d.path("post.jsonl")), "--manifest", p(&m1), "--protocol", "cross-camera"]);

    assert_eq!(snapshot(&d.path("data")), inputs, "inputs were modified");
}

#[test]
fn synth_output_is_byte_identical_across_runs() {
    let a = synth("3");
    let b = synth("3");
    assert_eq!(snapshot(&a.path("data")), snapshot(&b.path("data")));
    let names: Vec<String> = snapshot(&a.path("data")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["source1.jsonl", "source1.rfeb", "source2.jsonl", "source2.rfeb", "synth_config.json"]
    );
    let m = fs::read_to_string(a.path("data/source1.jsonl")).unwrap();
    assert!(m.contains("\"split\":\"query\"") && m.contains("\"split\":\"gallery\""));
    let other = synth("0");
    assert!(!fs::read_to_string(other.path("data/source1.jsonl")).unwrap().contains("\"query\""));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let d = synth("0");
    let missing = d.path("nope.jsonl");
    assert_eq!(code(&["merge", "--manifest", p(&missing), "--out", p(&d.path("x.json"))]), 3);

    // stage 2 without a checkpoint is a configuration error
    let status = code(&[
        "train",
        "--stage",
        "2",
        "--manifest",
        p(&d.path("data/source1.jsonl")),
        "--features",
        p(&d.path("data/source1.rfeb")),
        "--out",
        p(&d.path("h.rfhd")),
    ]);
    assert_eq!(status, 2);

    fs::write(d.path("bad.json"), "{not json").unwrap();
    assert_eq!(code(&["synth", "--config", p(&d.path("bad.json")), "--out", p(&d.path("o"))]), 2);

    // manifest/features row mismatch is a data error
    let status = code(&[
        "train",
        "--stage",
        "1",
        "--manifest",
        p(&d.path("data/source1.jsonl")),
        "--features",
        p(&d.path("data/source2.rfeb")),
        "--out",
        p(&d.path("h.rfhd")),
    ]);
    assert_eq!(status, 3);

    // an absurd learning rate makes the loss diverge
    fs::write(
        d.path("hot.json"),
        r#"{"head":{"embed_dim":8},"stage1":{"epochs":5,"schedule":{"base_lr":1e200,"milestones":[],"factor":1.0}}}"#,
    )
    .unwrap();
    let status = code(&[
        "train",
        "--stage",
        "1",
        "--config",
        p(&d.path("hot.json")),
        "--manifest",
        p(&d.path("data/source1.jsonl")),
        "--features",
        p(&d.path("data/source1.rfeb")),
        "--out",
        p(&d.path("h.rfhd")),
    ]);
    assert_eq!(status, 4);
}

#[test]
fn version_names_the_file_formats() {
    let out = ok(&["version"]);
    assert!(out.contains("RFEB") && out.contains("RFHD"), "{out}");
}

#[test]
fn ablation_without_arms_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"arms": [], "seeds": [0]}"#).unwrap();
    let out_dir = dir.path().join("report");
    let md = ok(&["ablate", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert!(md.starts_with("# Ablation report"));
    assert!(!md.contains("## Runs"));
    assert_eq!(fs::read_to_string(out_dir.join("report.md")).unwrap(), md);
    assert!(out_dir.join("resolved_config.json").is_file());
    assert_eq!(code(&["ablate", "--config", p(&cfg)]), 2);
}
