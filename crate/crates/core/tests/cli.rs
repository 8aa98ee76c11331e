use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use maskclip::cli::run;
use maskclip::data::{load_dataset, SyntheticDatasetSpec};
use maskclip::infer::{write_proposals, GeneratorScores, MaskProposalSet};
use maskclip::train::read_manifest;
use serde_json::Value;

fn call(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(
        std::iter::once("maskclip").chain(args.iter().copied()),
        &mut out,
    );
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text.trim()).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

/// A 16-pixel dataset and a matching small-encoder config.
fn fixture(steps: usize) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let spec = SyntheticDatasetSpec {
        image_size: 16,
        ..SyntheticDatasetSpec::four_category(12, 6, 1)
    };
    let spec_path = root.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = root.join("data");
    assert_eq!(
        call(&["gen-data", "--spec", s(&spec_path), "--out", s(&data)]).0,
        0
    );
    let config = root.join("config.json");
    write_config(&config, steps);
    Fixture {
        _tmp: tmp,
        root,
        data,
        config,
    }
}

fn write_config(path: &Path, steps: usize) {
    let cfg = serde_json::json!({
        "total_steps": steps,
        "eval_every": 5,
        "psm_dim": 16,
        "encoder": {"layers": 3, "extractor_layers": 1, "width": 16, "embed_dim": 8,
                    "heads": 2, "grid": 4, "patch": 4},
    });
    std::fs::write(path, cfg.to_string()).unwrap();
}

#[test]
fn gen_data_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _) = call(&[
        "gen-data",
        "--spec",
        s(&tmp.path().join("nope.json")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code, 2);

    let spec = tmp.path().join("spec.json");
    std::fs::write(
        &spec,
        serde_json::to_string(&SyntheticDatasetSpec::four_category(4, 4, 0)).unwrap(),
    )
    .unwrap();
    let out = tmp.path().join("dry");
    let (code, text) = call(&[
        "gen-data",
        "--spec",
        s(&spec),
        "--out",
        s(&out),
        "--dry-run",
    ]);
    assert_eq!(code, 0);
    assert!(!out.exists());
    let plan = json(&text);
    assert_eq!(plan["categories"].as_array().unwrap().len(), 4);
    assert_eq!(plan["train"], 4);

    std::fs::write(&spec, r#"{"n_train": 1}"#).unwrap();
    assert_eq!(
        call(&["gen-data", "--spec", s(&spec), "--out", s(&out)]).0,
        2
    );
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(call(&["frobnicate"]).0, 2);
    assert_eq!(call(&["demo-inconsistency", "--theta", "diagonal"]).0, 2);
    let f = fixture(5);
    let ck = f.root.join("ck");
    assert_eq!(
        call(&[
            "train",
            "--config",
            s(&f.config),
            "--data",
            s(&f.data),
            "--out",
            s(&ck)
        ])
        .0,
        0
    );
    let base = ["eval", "--ckpt", s(&ck), "--data", s(&f.data)];
    assert_eq!(call(&[&base[..], &["--gamma", "1.5"]].concat()).0, 2);
    assert_eq!(call(&[&base[..], &["--mode", "miou"]].concat()).0, 2);
    assert_eq!(
        call(&[&base[..], &["--candidates", "purple disk"]].concat()).0,
        2
    );
    assert_eq!(
        call(&[
            "eval",
            "--ckpt",
            s(&f.root.join("none")),
            "--data",
            s(&f.data)
        ])
        .0,
        2
    );
}

#[test]
fn train_writes_metrics_and_resumes() {
    let f = fixture(10);
    let ck = f.root.join("ck");
    let (code, text) = call(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&ck),
    ]);
    assert_eq!(code, 0, "{text}");
    let summary = json(&text);
    assert_eq!(summary["step"], 10);
    assert_eq!(summary["stop"], "completed");
    let csv = std::fs::read_to_string(ck.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,loss,val_maskAcc");
    assert_eq!(lines.len(), 11);

    // extend the schedule and continue from step 10
    let longer = f.root.join("longer.json");
    write_config(&longer, 15);
    let ck2 = f.root.join("ck2");
    let args = [
        "train",
        "--config",
        s(&longer),
        "--data",
        s(&f.data),
        "--out",
        s(&ck2),
        "--resume",
        s(&ck),
    ];
    assert_eq!(call(&args).0, 1, "digest mismatch must be refused");
    let (code, text) = call(&[&args[..], &["--force"]].concat());
    assert_eq!(code, 0, "{text}");
    assert_eq!(json(&text)["step"], 15);
    let csv = std::fs::read_to_string(ck2.join("metrics.csv")).unwrap();
    let steps: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=15).collect::<Vec<_>>());
    assert_eq!(read_manifest(&ck2).unwrap().step, 15);
}

#[test]
fn psm_flag_selects_the_variant() {
    let f = fixture(2);
    for (flag, name) in [
        ("embed_left", "embed_left"),
        ("embed_right", "embed_right"),
        ("sim_affine", "sim_affine"),
    ] {
        let ck = f.root.join(flag);
        let args = [
            "train",
            "--config",
            s(&f.config),
            "--data",
            s(&f.data),
            "--out",
            s(&ck),
            "--psm",
            flag,
        ];
        assert_eq!(call(&args).0, 0);
        assert_eq!(
            serde_json::to_value(read_manifest(&ck).unwrap().psm).unwrap(),
            name
        );
    }
}

#[test]
fn eval_modes() {
    let f = fixture(5);
    let ck = f.root.join("ck");
    assert_eq!(
        call(&[
            "train",
            "--config",
            s(&f.config),
            "--data",
            s(&f.data),
            "--out",
            s(&ck)
        ])
        .0,
        0
    );
    let base = ["eval", "--ckpt", s(&ck), "--data", s(&f.data)];

    let (code, on) = call(&[&base[..], &["--use-psm", "on"]].concat());
    assert_eq!(code, 0);
    let (_, off) = call(&[&base[..], &["--use-psm", "off"]].concat());
    let (on, off) = (json(&on), json(&off));
    assert_eq!(on["mode"], "maskacc");
    // a positive-slope affine head cannot change any argmax
    assert_eq!(on["mask_acc"], off["mask_acc"]);
    assert_eq!(on["masks"], off["masks"]);

    let (code, gt) = call(&[&base[..], &["--mode", "miou", "--gt-masks"]].concat());
    assert_eq!(code, 0);
    let gt = json(&gt);

    // proposals = GT masks with generator scores; γ = 0 ignores the generator
    let ds = load_dataset(&f.data).unwrap();
    let props = f.root.join("props");
    let vocab: Vec<String> = ds.vocab.names().to_vec();
    for smp in ds.split("val") {
        let q = smp.masks.len();
        let gen = GeneratorScores {
            gen_vocab: vocab.clone(),
            gen_scores: (0..q)
                .map(|i| {
                    (0..vocab.len())
                        .map(|k| if k == i % vocab.len() { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
            in_vocab_map: vocab
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect::<BTreeMap<_, _>>(),
        };
        write_proposals(
            &props,
            &smp.id,
            &MaskProposalSet {
                masks: smp.masks.clone(),
                generator: Some(gen),
            },
        )
        .unwrap();
    }
    let (code, g0) = call(
        &[
            &base[..],
            &["--mode", "miou", "--proposals", s(&props), "--gamma", "0"],
        ]
        .concat(),
    );
    assert_eq!(code, 0);
    assert_eq!(json(&g0)["miou"], gt["miou"]);
}

#[test]
fn oracle_with_mislabeled_perfect_masks() {
    let f = fixture(1);
    let ds = load_dataset(&f.data).unwrap();
    let k = ds.vocab.len();
    let vocab: Vec<String> = ds.vocab.names().to_vec();
    let props = f.root.join("props");
    for smp in ds.split("val") {
        let gen = GeneratorScores {
            gen_vocab: vocab.clone(),
            // every label shifted to a wrong category
            gen_scores: smp
                .labels
                .iter()
                .map(|&l| {
                    (0..k)
                        .map(|j| if j == (l + 1) % k { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
            in_vocab_map: vocab
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        };
        write_proposals(
            &props,
            &smp.id,
            &MaskProposalSet {
                masks: smp.masks.clone(),
                generator: Some(gen),
            },
        )
        .unwrap();
    }
    let (code, text) = call(&["oracle", "--proposals", s(&props), "--data", s(&f.data)]);
    assert_eq!(code, 0, "{text}");
    let r = json(&text);
    assert_eq!(r["oracle_miou"], 1.0);
    assert_eq!(r["generator_miou"], 0.0);
    assert_eq!(r["gap"], 1.0);
}

#[test]
fn demo_csv() {
    let (code, text) = call(&["demo-inconsistency"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,s1,s2,r1,r2,s_rank_correct,r_rank_correct");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].ends_with(",false,true"), "{}", lines[2]);
    assert!(lines[1].ends_with(",true,false"), "{}", lines[1]);

    let (_, text) = call(&["demo-inconsistency", "--lr", "0"]);
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1)
        .collect();
    assert_eq!(rows[0], rows[1]);

    let (_, text) = call(&["demo-inconsistency", "--theta", "identity", "--steps", "3"]);
    for l in text.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!((f[1], f[2]), (f[3], f[4]));
    }

    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("demo.csv");
    assert_eq!(call(&["demo-inconsistency", "--out", s(&p)]).0, 0);
    assert_eq!(
        std::fs::read_to_string(&p).unwrap(),
        call(&["demo-inconsistency"]).1
    );
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_maskclip");
    let st = Command::new(bin)
        .args([
            "gen-data",
            "--spec",
            "/nonexistent/spec.json",
            "--out",
            "/tmp/x",
        ])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = Command::new(bin)
        .arg("demo-inconsistency")
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&st.stdout).starts_with("step,"));
}
