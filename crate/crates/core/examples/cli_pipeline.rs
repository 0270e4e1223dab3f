//! Drives the command-line interface in-process: generate a test set,
//! train for a few steps, evaluate on an unseen noise level and dump the
//! prompt weights.

use promptir::cli::run_with_args;

fn main() {
    let root = std::env::temp_dir().join("promptir_cli_demo");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let mut out = std::io::stdout();
    let steps: [&[&str]; 4] = [
        &[
            "degrade",
            "--task",
            "gaussian,rain,haze",
            "--count",
            "9",
            "--size",
            "32",
            "--out",
            &p("testset"),
        ],
        &[
            "train",
            "--all-in-one",
            "--steps",
            "20",
            "--set",
            "samples_per_task=10",
            "--set",
            "batch_size=4",
            "--out",
            &p("run"),
        ],
        &[
            "eval",
            "--ckpt",
            &p("run/final"),
            "--testset",
            &p("testset"),
            "--sigma",
            "100",
            "--report",
            &p("sigma100.txt"),
        ],
        &[
            "dump-prompts",
            "--ckpt",
            &p("run/final"),
            "--testset",
            &p("testset"),
            "--out",
            &p("prompts.csv"),
        ],
    ];
    for args in steps {
        let code = run_with_args(
            std::iter::once("promptir").chain(args.iter().copied()),
            &mut out,
        );
        assert_eq!(code, 0, "{args:?}");
    }
}
