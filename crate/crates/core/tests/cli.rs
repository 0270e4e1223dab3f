//! End-to-end checks of the command-line subcommands, run in-process.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use promptir::cli::run_with_args;
use promptir::io::{
    self, load_checkpoint, load_dataset, save_checkpoint, Checkpoint, MANIFEST_FILE,
};
use promptir::network::{ModelConfig, PromptIr};
use promptir::prompt::PgmMode;
use promptir::train::TrainConfig;
use promptir::Tensor;

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_with_args(
        std::iter::once("promptir").chain(args.iter().copied()),
        &mut out,
    );
    (code, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out) = cli(args);
    assert_eq!(code, 0, "{args:?}\n{out}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A checkpoint whose output conv is zero, so the network is the identity.
fn identity_checkpoint(dir: &Path, mode: PgmMode) {
    let cfg = ModelConfig {
        pgm_mode: mode,
        ..ModelConfig::default()
    };
    let mut model = PromptIr::new(cfg, 3).unwrap();
    let conv = model.output_conv().clone();
    for id in std::iter::once(conv.weight).chain(conv.bias) {
        let t = model.params_mut().get_mut(id);
        *t = Tensor::zeros(t.shape());
    }
    save_checkpoint(&Checkpoint::initial(model, TrainConfig::default()), dir).unwrap();
}

#[test]
fn zero_sigma_degrade_copies_the_clean_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("set");
    ok(&[
        "degrade",
        "--task",
        "gaussian",
        "--sigma",
        "0",
        "--count",
        "4",
        "--size",
        "24",
        "--out",
        s(&out),
    ]);
    for i in 0..4 {
        let clean = fs::read(out.join(format!("clean/{i:05}.ppm"))).unwrap();
        let degraded = fs::read(out.join(format!("degraded/{i:05}.ppm"))).unwrap();
        assert_eq!(clean, degraded);
    }
}

#[test]
fn degrade_is_seeded_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&[
            "degrade",
            "--count",
            "300",
            "--size",
            "16",
            "--seed",
            seed,
            "--out",
            s(&out),
        ]);
        out
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    let manifest = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    assert_ne!(manifest(&a), manifest(&c));

    let (m, _) = load_dataset(&a).unwrap();
    let mut counts = BTreeMap::new();
    for e in &m.samples {
        *counts.entry(e.task.as_str()).or_insert(0) += 1;
    }
    assert_eq!(
        counts.values().copied().collect::<Vec<_>>(),
        vec![100, 100, 100]
    );
}

#[test]
fn zero_step_training_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--all-in-one",
        "--steps",
        "0",
        "--seed",
        "4",
        "--set",
        "samples_per_task=4",
        "--out",
        s(&out),
    ]);
    let ckpt = load_checkpoint(out.join("final")).unwrap();
    let init = PromptIr::new(ModelConfig::default(), 4).unwrap();
    assert_eq!(ckpt.step, 0);
    for ((na, a), (nb, b)) in ckpt.model.params().iter().zip(init.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data(), "{na}");
    }
}

#[test]
fn infer_keeps_odd_sizes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(
        &Checkpoint::initial(
            PromptIr::new(ModelConfig::default(), 1).unwrap(),
            TrainConfig::default(),
        ),
        &ckpt,
    )
    .unwrap();
    let input = dir.path().join("odd.ppm");
    io::save_image(&promptir::degrade::procedural_image(13, 19, 2), &input).unwrap();

    let restore = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "infer",
            "--ckpt",
            s(&ckpt),
            "--in",
            s(&input),
            "--out",
            s(&out),
        ]);
        fs::read(out.join("odd.ppm")).unwrap()
    };
    let first = restore("a");
    assert_eq!(io::decode_ppm(&first, "odd").unwrap().shape(), &[3, 13, 19]);
    assert_eq!(first, restore("b"));
}

#[test]
fn identity_network_reproduces_inputs_and_scores_clean_pairs_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    identity_checkpoint(&ckpt, PgmMode::Dynamic);
    let set = dir.path().join("set");
    ok(&[
        "degrade",
        "--task",
        "gaussian",
        "--sigma",
        "0",
        "--count",
        "3",
        "--size",
        "24",
        "--out",
        s(&set),
    ]);

    let restored = dir.path().join("restored");
    ok(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&set.join("degraded")),
        "--out",
        s(&restored),
    ]);
    for i in 0..3 {
        let name = format!("{i:05}.ppm");
        assert_eq!(
            fs::read(set.join("degraded").join(&name)).unwrap(),
            fs::read(restored.join(&name)).unwrap()
        );
    }

    let report = dir.path().join("report.txt");
    ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--testset",
        s(&set),
        "--report",
        s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let average = text.lines().find(|l| l.starts_with("average")).unwrap();
    assert!(average.ends_with("100.00/1.000"), "{average}");
}

#[test]
fn prompt_dump_rows_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    ok(&["degrade", "--count", "6", "--size", "16", "--out", s(&set)]);
    for mode in [PgmMode::Dynamic, PgmMode::Fixed] {
        let ckpt = dir.path().join(format!("{mode}"));
        identity_checkpoint(&ckpt, mode);
        let csv = dir.path().join(format!("{mode}.csv"));
        ok(&[
            "dump-prompts",
            "--ckpt",
            s(&ckpt),
            "--testset",
            s(&set),
            "--out",
            s(&csv),
        ]);
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("image,task,level,w0"));
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').skip(3).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 6 * 3);
        for w in &rows {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x >= 0.0));
            if mode == PgmMode::Fixed {
                assert!(w.iter().all(|&x| (x - 1.0 / w.len() as f64).abs() < 1e-12));
            }
        }
    }
}

#[test]
fn sweep_plans_list_every_run() {
    let dir = tempfile::tempdir().unwrap();
    for (axis, runs) in [("pgm-mode", 2), ("prompt-levels", 3), ("task-mix", 7)] {
        let out = ok(&["sweep", "--axis", axis, "--dry-run", "--out", s(dir.path())]);
        assert!(out.contains(&format!("axis {axis}: {runs} runs")), "{out}");
    }
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(
        cli(&[
            "train",
            "--all-in-one",
            "--set",
            "learning_rate=1",
            "--out",
            out
        ])
        .0,
        1
    );
    assert_eq!(
        cli(&["train", "--all-in-one", "--set", "lr=-1", "--out", out]).0,
        1
    );
    assert_eq!(cli(&["degrade", "--sigma", "-3", "--out", out]).0, 1);
    let missing = dir.path().join("nope");
    assert_eq!(
        cli(&["infer", "--ckpt", s(&missing), "--in", out, "--out", out]).0,
        2
    );
}
