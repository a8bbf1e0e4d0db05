use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dmis::costcal::ReferenceTable;

fn dmis(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmis"))
        .args(args)
        .current_dir(dir)
        .env_remove("DMIS_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn report_reproduces_bundled_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmis(&["report", "--reference", "bundled", "--out-dir", "out"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 15);
    assert!(lines[0].starts_with("method,n,elapsed_s"));

    let bundled = ReferenceTable::bundled();
    for row in bundled.rows() {
        for m in [&row.data_parallel, &row.experiment_parallel] {
            let hit = lines.iter().any(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f[1] == row.n.to_string()
                    && f[2].parse::<u64>().ok() == Some(m.elapsed_s)
                    && f[4].parse::<f64>().ok() == Some(m.speedup)
            });
            assert!(hit, "missing n={} {m:?}", row.n);
        }
    }

    let speedup = fs::read_to_string(dir.path().join("out/speedup.csv")).unwrap();
    assert_eq!(speedup.lines().next(), Some("n,data_parallel,experiment_parallel"));
    assert!(speedup.lines().any(|l| l == "32,13.18,15.19"));
    for f in ["elapsed.csv", "elapsed.svg", "speedup.svg"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
}

#[test]
fn usage_and_domain_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dmis(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(dmis(&["arch", "--format", "yaml"], dir.path()).status.code(), Some(2));

    fs::write(
        dir.path().join("s.csv"),
        "experiment,gpus,start_s,duration_s\n0,n0g0,0,10\n1,n0g0;n0g1,5,10\n",
    )
    .unwrap();
    let o = dmis(&["simulate", "--schedule", "s.csv", "--out-dir", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: simulate: ScheduleConflict"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    fs::write(dir.path().join("bad.toml"), "[training]\nepoch = 3\n").unwrap();
    let o = dmis(&["simulate", "--config", "bad.toml", "--out-dir", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: simulate:"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [["a"], ["b"]].map(|[d]| {
        assert!(dmis(&["simulate", "--nodes", "2", "--out-dir", d], dir.path())
            .status
            .success());
        assert!(dmis(
            &[
                "pack",
                "--count",
                "6",
                "--dims",
                "8,8,12",
                "--workers",
                "3",
                "--out-dir",
                d
            ],
            dir.path()
        )
        .status
        .success());
        d
    });
    for f in [
        "makespan_data_parallel.csv",
        "makespan_experiment_parallel.csv",
        "trace_experiment_parallel.csv",
        "dataset.dmis",
        "dataset.manifest.json",
    ] {
        let a = fs::read(dir.path().join(runs[0]).join(f)).unwrap();
        let b = fs::read(dir.path().join(runs[1]).join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn out_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dmis"));
        c.args(args).current_dir(dir.path()).env_remove("DMIS_OUT_DIR");
        if let Some(e) = env {
            c.env("DMIS_OUT_DIR", e);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(&["report"], Some("from-env"));
    assert!(dir.path().join("from-env/report.csv").is_file());
    run(&["report", "--out-dir", "from-flag"], Some("from-env2"));
    assert!(dir.path().join("from-flag/report.csv").is_file());
    assert!(!dir.path().join("from-env2").exists());
    fs::write(dir.path().join("c.toml"), "[output]\ndir = \"from-config\"\n").unwrap();
    run(&["simulate", "--config", "c.toml"], Some("from-env3"));
    assert!(dir.path().join("from-config/makespan_data_parallel.csv").is_file());
    run(&["report"], None);
    assert!(dir.path().join("dmis-out/report.csv").is_file());
}
