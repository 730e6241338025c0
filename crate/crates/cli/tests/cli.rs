use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zmred(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zmred"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_models_names_the_zoo() {
    let dir = tempfile::tempdir().unwrap();
    let o = zmred(&["list-models"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for id in ["bistable", "tetrastable", "repressilator", "neuraltube"] {
        assert!(
            text.lines().any(|l| l.starts_with(id)),
            "{id} missing from\n{text}"
        );
    }
}

#[test]
fn simulate_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = zmred(
        &[
            "simulate", "--model", "bistable", "--method", "zms", "--ic", "x1=1.4", "--t-end", "5",
            "--out", "run.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x1,x2,m_x2");
    let first: Vec<f64> = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(first[0], 0.0);
    assert!((first[1] - 1.4).abs() < 1e-12);
    let manifest = fs::read_to_string(dir.path().join("run.csv.manifest")).unwrap();
    for key in [
        "subcommand = simulate",
        "model = bistable",
        "method = zms",
        "outputs = run.csv",
    ] {
        assert!(manifest.contains(key), "{key} missing from\n{manifest}");
    }
}

#[test]
fn simulate_without_out_prints_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let o = zmred(
        &["simulate", "--model", "bistable", "--t-end", "1"],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("t,x1,x2\n"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn text_models_load_from_a_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("switch.zm"),
        "[species]\nx1, x2\n[subnetwork]\nx1\n[params]\na = 4\nn = 2\n[equations]\nx1 = a/(1 + x2^n) - x1\nx2 = a/(1 + x1^n) - x2\n",
    )
    .unwrap();
    let run = |model: &str| {
        let o = zmred(
            &[
                "simulate", "--model", model, "--method", "qss", "--ic", "x1=2", "--t-end", "3",
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let (file, zoo) = (run("switch.zm"), run("bistable"));
    let last = |s: &str| -> Vec<f64> {
        s.lines()
            .last()
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect()
    };
    for (a, b) in last(&file).iter().zip(last(&zoo)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn usage_errors_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &[
            "simulate",
            "--model",
            "nosuchmodel",
            "--t-end",
            "1",
            "--out",
            "x.csv",
        ],
        &[
            "simulate", "--model", "bistable", "--ic", "x2=1", "--t-end", "1", "--out", "x.csv",
        ],
        &[
            "simulate", "--model", "bistable", "--param", "zz=1", "--t-end", "1", "--out", "x.csv",
        ],
        &[
            "simulate",
            "--model",
            "bistable",
            "--subnetwork",
            "x1,x2",
            "--t-end",
            "1",
            "--out",
            "x.csv",
        ],
        &["basins", "--model", "bistable", "--out", "x.csv"],
    ];
    for args in cases {
        let o = zmred(args, dir.path());
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
        assert!(!dir.path().join("x.csv").exists());
    }
}

#[test]
fn kernel_variants_share_the_tau_grid() {
    let dir = tempfile::tempdir().unwrap();
    for (variant, header) in [
        ("zmn", "tau,M_x1"),
        ("gqss", "tau,M_x1"),
        ("gouasmi", "tau,M_x1"),
        ("linear", "tau,K_x1_x1"),
    ] {
        let o = zmred(
            // The symmetric fixed point, so the linear variant has a state to expand about.
            &[
                "kernel",
                "--model",
                "bistable",
                "--variant",
                variant,
                "--state",
                "1.378796700129551",
                "--tau-max",
                "2",
                "--tau-steps",
                "10",
            ],
            dir.path(),
        );
        assert!(
            o.status.success(),
            "{variant}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let text = stdout(&o);
        assert_eq!(text.lines().next().unwrap(), header);
        assert_eq!(text.lines().count(), 12, "{variant}");
    }
}
