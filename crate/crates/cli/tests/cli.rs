use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biaxis::synth::{generate_planted, write_instance, PlantedParams};
use biaxis::{EmbeddingTable, Matrix};

fn biaxis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biaxis"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_params() -> PlantedParams {
    PlantedParams {
        n_nodes: 16,
        d: 6,
        k: 2,
        n_concepts: 10,
        p_in: 0.7,
        p_out: 0.05,
        ..PlantedParams::default()
    }
}

const FAST_TRAIN: &str = "[train]\nsuperepochs = 3\nlearning_rates = [0.01]\nlambda_o = [0.01]\nlambda_s = [0.01, 0.02]\nh1 = 4\nh2 = 4\n";

/// Planted instance plus a run manifest with a tiny grid.
fn setup(dir: &Path, extra_inputs: &str, extra: &str) -> PathBuf {
    let inst = generate_planted(&small_params(), 5).unwrap();
    write_instance(&inst, dir).unwrap();
    let manifest = dir.join("run.toml");
    fs::write(
        &manifest,
        format!(
            "seed = 5\nout = \"run\"\ncurve_max = 6\n{extra}\n[inputs]\nedges = \"edges.tsv\"\nembeddings = \"embeddings.toml\"\npartition = \"partition.tsv\"\nplanted = \"planted.toml\"\n{extra_inputs}\n{FAST_TRAIN}"
        ),
    )
    .unwrap();
    manifest
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn pipeline_writes_primary_outputs_and_skips_absent_probes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "", "");
    let o = biaxis(&["pipeline", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    for f in [
        "trials.csv",
        "results.jsonl",
        "curve.csv",
        "projector.bin",
        "concepts.csv",
        "dispersion_ols.csv",
        "comparison.csv",
        "pca_full.csv",
        "pca_subspace.csv",
        "pca_full.svg",
        "recovery.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    for f in [
        "probe_report.csv",
        "axis_scores.csv",
        "semantic_report.csv",
        "FAILED",
    ] {
        assert!(!run.join(f).exists(), "unexpected {f}");
    }
    for (name, bytes) in csv_files(&run) {
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# seed=5"), "{name}");
        assert!(
            lines.next().is_some_and(|h| h.contains(',')),
            "{name} header"
        );
    }
    let trials = fs::read_to_string(run.join("trials.csv")).unwrap();
    assert_eq!(
        trials
            .lines()
            .filter(|l| l.starts_with("subspace,"))
            .count(),
        2
    );
    assert_eq!(
        trials
            .lines()
            .filter(|l| l.starts_with("baseline,"))
            .count(),
        1
    );
}

#[test]
fn rerun_reproduces_csv_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "labels = \"partition.tsv\"", "");
    let m = manifest.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = biaxis(&["pipeline", "--manifest", m, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert!(fa.iter().any(|(n, _)| n == "probe_report.csv"));
    assert_eq!(fa, fb);
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "", "baseline = false");
    let m = manifest.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(
        biaxis(&["grid", "--manifest", m, "--out", a.to_str().unwrap()])
            .status
            .success()
    );
    let o = biaxis(&[
        "grid",
        "--manifest",
        m,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(o.status.success());
    let ta = fs::read_to_string(a.join("trials.csv")).unwrap();
    let tb = fs::read_to_string(b.join("trials.csv")).unwrap();
    assert!(tb.starts_with("# seed=9\n"));
    assert_ne!(ta.lines().nth(2), tb.lines().nth(2));
}

#[test]
fn staged_commands_match_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "labels = \"partition.tsv\"", "");
    let m = manifest.to_str().unwrap();
    let staged = tmp.path().join("staged");
    let s = staged.to_str().unwrap();
    for cmd in ["grid", "stats", "curve", "project", "probe-indexical"] {
        let o = biaxis(&[cmd, "--manifest", m, "--out", s, "--jobs", "2"]);
        assert!(
            o.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let full = tmp.path().join("full");
    assert!(
        biaxis(&["pipeline", "--manifest", m, "--out", full.to_str().unwrap()])
            .status
            .success()
    );
    assert_eq!(csv_files(&staged), csv_files(&full));
}

#[test]
fn train_writes_one_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "", "");
    let o = biaxis(&["train", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("run/trial.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("run/trial.bin").is_file());
}

#[test]
fn semantic_probe_reports_scores_and_ratings() {
    let tmp = tempfile::tempdir().unwrap();
    let d = small_params().d;
    // Six well-separated antonym pairs; each word's partner is its closest vector.
    let mut words = Vec::new();
    let mut rows = Vec::new();
    let mut axis = String::new();
    let mut ratings = String::new();
    for p in 0..6 {
        let mut base = vec![0.0; d];
        base[p % d] = 1.0;
        base[(p + 1) % d] = if p < d { 0.0 } else { 1.0 };
        for (side, off) in [("p", 0.05), ("q", -0.05)] {
            let mut v = base.clone();
            v[(p + 2) % d] += off;
            words.push(format!("{side}{p}"));
            rows.push(v);
            ratings.push_str(&format!("{side}{p}\t{}\n", p as f64 * 0.1));
        }
        axis.push_str(&format!("{p}\tp{p}\tq{p}\t500\t400\n"));
    }
    let table = EmbeddingTable::new(
        d,
        words,
        vec!["all".into()],
        vec![Matrix::from_rows(&rows).unwrap()],
    )
    .unwrap();
    table.save(&tmp.path().join("words.toml")).unwrap();
    fs::write(tmp.path().join("axis.tsv"), axis).unwrap();
    fs::write(tmp.path().join("concreteness.tsv"), ratings).unwrap();
    let manifest = setup(
        tmp.path(),
        "axis = \"axis.tsv\"\naxis_embeddings = \"words.toml\"\nratings = { concreteness = \"concreteness.tsv\" }",
        "",
    );
    let text = fs::read_to_string(&manifest).unwrap() + "\n[probe]\ntop_n = 2\n";
    fs::write(&manifest, text).unwrap();
    let o = biaxis(&["pipeline", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scores = fs::read_to_string(tmp.path().join("run/axis_scores.csv")).unwrap();
    assert_eq!(scores.lines().filter(|l| !l.starts_with('#')).count(), 7);
    let report = fs::read_to_string(tmp.path().join("run/semantic_report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("concreteness,2,6,")));
}

#[test]
fn missing_input_exits_with_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "", "");
    fs::remove_file(tmp.path().join("edges.tsv")).unwrap();
    let o = biaxis(&["pipeline", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("edges.tsv"));
}

#[test]
fn later_stage_without_checkpoint_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "", "");
    let o = biaxis(&["curve", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("biaxis grid"));
}

#[test]
fn failing_stage_leaves_marker_and_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), "", "pca_concept = \"no-such-concept\"");
    let o = biaxis(&["pipeline", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let run = tmp.path().join("run");
    let marker = fs::read_to_string(run.join("FAILED")).unwrap();
    assert!(marker.starts_with("stage=pca\n"), "{marker}");
    assert!(run.join("trials.csv").is_file());
    assert!(run.join("curve.csv").is_file());
}

#[test]
fn synth_writes_a_runnable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let params = tmp.path().join("params.toml");
    fs::write(&params, "n_nodes = 12\nd = 4\nk = 1\nn_concepts = 10\n").unwrap();
    let inst = tmp.path().join("inst");
    let o = biaxis(&[
        "synth",
        "--manifest",
        params.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        inst.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(inst.join("run.toml")).unwrap();
    assert!(text.contains("labels = \"partition.tsv\""));
    let m = biaxis::pipeline::RunManifest::load(&inst.join("run.toml")).unwrap();
    assert_eq!(m.seed, 2);
    assert_eq!(m.train.superepochs, 300);
}

#[test]
fn bad_planted_params_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let params = tmp.path().join("params.toml");
    fs::write(&params, "p_in = 0.1\np_out = 0.5\n").unwrap();
    let o = biaxis(&[
        "synth",
        "--manifest",
        params.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
