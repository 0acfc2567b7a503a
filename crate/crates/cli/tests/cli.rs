use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use gradsep_cli::config::Method;
use gradsep_cli::run::{read_ledger, ExperimentResult, SplitInfo};
use gradsep_cli::table::{average_table, domain_tables, render_domain_tables};
use gradsep_core::data::read_embeddings;
use gradsep_core::encoder::EncoderKind;
use gradsep_core::metrics::MetricTriple;

fn gradsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradsep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(task: &str, method: Method, seed: u64, m: [f64; 3]) -> ExperimentResult {
    ExperimentResult {
        task: task.into(),
        method,
        ablation: None,
        seed,
        fingerprint: format!("{seed:064x}"),
        metrics: MetricTriple {
            ccr_at_fpr10: m[0],
            fpr95: m[1],
            auroc: m[2],
        },
        threshold: None,
        temperature: 0.01,
        encoder: EncoderKind::Attention,
        split: SplitInfo {
            known_classes: vec!["a".into(), "b".into()],
            num_unknown: 1,
        },
    }
}

fn write_ledger(dir: &Path, results: &[ExperimentResult]) -> std::path::PathBuf {
    let path = dir.join("results.jsonl");
    let body: String = results
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn single_result_table_reports_its_values_verbatim() {
    let r = fixture("Ar→Cl", Method::Proposed, 0, [61.25, 40.5, 88.125]);
    let tables = domain_tables(std::slice::from_ref(&r)).unwrap();
    assert_eq!(tables.len(), 1);
    assert_eq!(tables[0].source, "Ar");
    let cell = tables[0].rows[0].cells[0].as_ref().unwrap();
    assert_eq!(cell.metrics, r.metrics);
    assert_eq!(cell.runs, 1);

    let dir = tempfile::tempdir().unwrap();
    let path = write_ledger(dir.path(), std::slice::from_ref(&r));
    let out = gradsep(&["table", "--json", path.to_str().unwrap()]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let m = &json[0]["rows"][0]["cells"][0]["metrics"];
    assert_eq!(m["ccr_at_fpr10"], 61.25);
    assert_eq!(m["fpr95"], 40.5);
    assert_eq!(m["auroc"], 88.125);
}

#[test]
fn best_marks_follow_each_metric_direction() {
    let results = vec![
        fixture("Ar→Cl", Method::Zeroshot, 0, [50.0, 30.0, 80.0]),
        fixture("Ar→Cl", Method::Proposed, 0, [60.0, 35.0, 80.0]),
        fixture("Ar→Pr", Method::Zeroshot, 0, [70.0, 20.0, 85.0]),
        fixture("Ar→Pr", Method::Proposed, 0, [65.0, 25.0, 90.0]),
    ];
    let tables = domain_tables(&results).unwrap();
    let rows = &tables[0].rows;
    let best = |row: usize, task: usize| rows[row].cells[task].as_ref().unwrap().best;
    // Task Ar→Cl: CCR higher is better, FPR lower, AUROC tie marks both.
    assert!(!best(0, 0).ccr_at_fpr10 && best(1, 0).ccr_at_fpr10);
    assert!(best(0, 0).fpr95 && !best(1, 0).fpr95);
    assert!(best(0, 0).auroc && best(1, 0).auroc);
    // Task Ar→Pr.
    assert!(best(0, 1).ccr_at_fpr10 && !best(1, 1).ccr_at_fpr10);
    assert!(best(0, 1).fpr95 && !best(1, 1).fpr95);
    assert!(!best(0, 1).auroc && best(1, 1).auroc);

    let text = render_domain_tables(&tables);
    assert!(text.contains("Source domain: Ar"));
    assert!(text.contains("60.00*"));
    assert!(text.contains("20.00*"));
}

#[test]
fn average_over_twelve_tasks_is_the_plain_mean() {
    let domains = ["Ar", "Cl", "Pr", "Rw"];
    let mut results = Vec::new();
    let mut expected = [0.0; 3];
    let mut i = 0.0;
    for s in domains {
        for t in domains.iter().filter(|t| **t != s) {
            let m = [40.0 + i * 1.5, 60.0 - i * 0.75, 80.0 + i * 0.3];
            for (e, v) in expected.iter_mut().zip(m) {
                *e += v / 12.0;
            }
            results.push(fixture(&format!("{s}→{t}"), Method::Proposed, 0, m));
            i += 1.0;
        }
    }
    let avg = average_table(&results).unwrap();
    assert_eq!(avg.tasks.len(), 12);
    let m = avg.rows[0].cells[0].as_ref().unwrap().metrics;
    assert!((m.ccr_at_fpr10 - expected[0]).abs() < 1e-9);
    assert!((m.fpr95 - expected[1]).abs() < 1e-9);
    assert!((m.auroc - expected[2]).abs() < 1e-9);
    assert_eq!(domain_tables(&results).unwrap().len(), 4);
}

#[test]
fn seeds_of_one_task_are_averaged_into_one_cell() {
    let results = vec![
        fixture("A→B", Method::Proposed, 0, [10.0, 20.0, 30.0]),
        fixture("A→B", Method::Proposed, 1, [20.0, 40.0, 50.0]),
    ];
    let cell = domain_tables(&results).unwrap()[0].rows[0].cells[0]
        .clone()
        .unwrap();
    assert_eq!(cell.runs, 2);
    assert_eq!(
        cell.metrics,
        MetricTriple {
            ccr_at_fpr10: 15.0,
            fpr95: 30.0,
            auroc: 40.0
        }
    );
}

#[test]
fn averaging_inconsistent_task_sets_fails() {
    let results = vec![
        fixture("A→B", Method::Zeroshot, 0, [1.0, 2.0, 3.0]),
        fixture("A→C", Method::Zeroshot, 0, [1.0, 2.0, 3.0]),
        fixture("A→B", Method::Proposed, 0, [1.0, 2.0, 3.0]),
    ];
    assert!(average_table(&results).is_err());
    assert!(domain_tables(&results).is_ok());

    let dir = tempfile::tempdir().unwrap();
    let path = write_ledger(dir.path(), &results);
    let out = gradsep(&["table", "--average", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_writes_readable_files_and_seed_changes_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(gradsep(&["synth", "--out", a.to_str().unwrap()])
        .status
        .success());
    assert!(
        gradsep(&["synth", "--out", b.to_str().unwrap(), "--seed", "9"])
            .status
            .success()
    );
    let src = read_embeddings(a.join("source.osde")).unwrap();
    assert_eq!((src.feature_dim, src.records.len()), (64, 500));
    assert_eq!(
        read_embeddings(a.join("target.osde"))
            .unwrap()
            .records
            .len(),
        750
    );
    assert_eq!(
        read_embeddings(a.join("text.osde")).unwrap().records.len(),
        10
    );
    assert!(a.join("classes.toml").exists());
    assert_ne!(
        fs::read(a.join("source.osde")).unwrap(),
        fs::read(b.join("source.osde")).unwrap()
    );
}

fn write_file_config(dir: &Path, data: &Path, method: &str, out: &Path) -> std::path::PathBuf {
    let cfg = format!(
        "method = \"{method}\"\nseed = 0\noutput_dir = \"{}\"\n\n[data]\nsource = \"{d}/source.osde\"\ntarget = \"{d}/target.osde\"\ntext = \"{d}/text.osde\"\nmanifest = \"{d}/classes.toml\"\n",
        out.display(),
        d = data.display()
    );
    let path = dir.join(format!("{method}.toml"));
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn zeroshot_round_trip_through_files() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("results");
    assert!(gradsep(&["synth", "--out", data.to_str().unwrap()])
        .status
        .success());
    let cfg = write_file_config(dir.path(), &data, "zeroshot", &out);
    let run = gradsep(&["run", cfg.to_str().unwrap()]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let printed: ExperimentResult = serde_json::from_str(stdout(&run).trim()).unwrap();
    let ledger = read_ledger(&out.join("results.jsonl")).unwrap();
    assert_eq!(ledger, vec![printed.clone()]);
    assert_eq!(printed.task, "source→target");
    assert!(printed.metrics.auroc >= 95.0);
    assert!(printed.threshold.is_none());
    let table = gradsep(&["table", out.join("results.jsonl").to_str().unwrap()]);
    assert!(stdout(&table).contains("zeroshot"));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "method = \"proposed\"\n[synth]\n[hyperparams]\nlr = -1.0\n",
    )
    .unwrap();
    assert_eq!(
        gradsep(&["run", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );

    fs::write(&bad, "method = \"nonsense\"\n[synth]\n").unwrap();
    assert_eq!(
        gradsep(&["run", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let missing = write_file_config(
        dir.path(),
        &dir.path().join("nowhere"),
        "zeroshot",
        dir.path(),
    );
    assert_eq!(
        gradsep(&["run", missing.to_str().unwrap()]).status.code(),
        Some(3)
    );

    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(
        gradsep(&["table", garbage.to_str().unwrap()]).status.code(),
        Some(3)
    );

    let check = gradsep(&["check", "--cases", "5"]);
    assert!(check.status.success());
    assert!(stdout(&check).lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn seeded_cli_runs_write_identical_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.toml");
    fs::write(
        &cfg,
        "method = \"proposed\"\nseed = 2\n[synth]\nnum_known_classes = 4\nnum_unknown_classes = 2\nsamples_per_class = 20\nfeature_dim = 16\n[hyperparams]\nepochs = 2\n",
    )
    .unwrap();
    let ledger = |name: &str| {
        let out = dir.path().join(name);
        let run = gradsep(&[
            "run",
            cfg.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert!(
            run.status.success(),
            "{}",
            String::from_utf8_lossy(&run.stderr)
        );
        fs::read(out.join("results.jsonl")).unwrap()
    };
    assert_eq!(ledger("one"), ledger("two"));
}
