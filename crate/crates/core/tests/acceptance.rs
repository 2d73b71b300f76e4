//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criteria that need the planted benchmark share one set
//! of trained runs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use biaxis::graph::{normalized_adjacency, Graph};
use biaxis::knee::knee_select;
use biaxis::model::{backward, forward, loss, LinkTarget, ModelConfig, RotationGAE};
use biaxis::optim::{prox_row, prox_row_weighted};
use biaxis::pipeline::{
    concept_rows, indexical_probe, run_pipeline, select_subspace, IndexicalMode, IndexicalReport,
    RunManifest, Space,
};
use biaxis::probe::{mcnemar, ols_r2, welch_t, LogRegOptions};
use biaxis::synth::{
    generate_planted, recovered_basis, subspace_affinity, write_instance, PlantedParams,
};
use biaxis::train::{auc, grid_search, Dataset, TrainConfig};
use biaxis::Matrix;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn parameter_accounting() -> Verdict {
    let base = ModelConfig::baseline(768);
    let full = ModelConfig::new(768);
    let (b, f) = (base.parameter_count(), full.parameter_count());
    let model = RotationGAE::init(&full, 0).unwrap();
    let counted: usize = model.tensors().iter().map(|t| t.len()).sum();
    verdict(
        b == 7_800 && f == 597_624 && counted == f,
        format!("baseline {b}, rotating {f}, tensor entries {counted}"),
    )
}

// ---------------------------------------------------------------- 2

fn gradient_check() -> Verdict {
    let (n, d, h) = (8, 12, 5);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for instance in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + instance);
        let mut g = Graph::with_nodes(n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    g.add_edge(i, j).unwrap();
                }
            }
        }
        if g.edge_count() == 0 {
            g.add_edge(0, 1).unwrap();
        }
        let cfg = ModelConfig {
            d,
            h1: h,
            h2: h,
            lambda_o: 0.3,
            lambda_s: 0.0,
            rotate: true,
            use_bias: true,
        };
        let mut m = RotationGAE::init(&cfg, instance).unwrap();
        for v in m.r.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
        for v in m.b0.iter_mut() {
            *v += 0.3;
        }
        let x = Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let a = normalized_adjacency(&g);
        let t = LinkTarget::from_graph(&g);
        let objective = |m: &RotationGAE| {
            let (logits, _) = forward(m, &a, &x).unwrap();
            let parts = loss(&logits, &t, m, &cfg).unwrap();
            parts.prediction + cfg.lambda_o * parts.orthogonality
        };
        let (_, cache) = forward(&m, &a, &x).unwrap();
        let grads = backward(&cache, &a, &t, &m, &cfg).unwrap();
        for k in 0..5 {
            for i in 0..m.tensors()[k].len() {
                let mut p = m.clone();
                p.tensors_mut()[k][i] += step;
                let mut q = m.clone();
                q.tensors_mut()[k][i] -= step;
                let numeric = (objective(&p) - objective(&q)) / (2.0 * step);
                let analytic = grads.tensors()[k][i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    verdict(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 5 instances"),
    )
}

// ---------------------------------------------------------------- 3

/// Weighted prox through the variational form of the norm: for a fixed
/// `θ = ‖x‖` the optimal `x` is explicit, leaving a convex profile in `θ`.
/// The profile is minimized on a grid that is refined around the first
/// point where its slope turns non-negative.
fn weighted_prox_oracle(v: &[f64], metric: &[f64], tau: f64) -> Vec<f64> {
    let slope = |theta: f64| -> f64 {
        0.5 * tau
            - v.iter()
                .zip(metric)
                .map(|(x, d)| 0.5 * d * d * x * x * tau / (d * theta + tau).powi(2))
                .sum::<f64>()
    };
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if slope(0.0) >= 0.0 {
        return vec![0.0; v.len()];
    }
    let (mut lo, mut hi) = (0.0, v_norm);
    let pts = 100;
    for _ in 0..40 {
        let width = (hi - lo) / pts as f64;
        let first = (1..=pts)
            .find(|&i| slope(lo + i as f64 * width) >= 0.0)
            .unwrap_or(pts);
        hi = lo + first as f64 * width;
        lo = hi - width;
        if width <= f64::EPSILON * v_norm {
            break;
        }
    }
    let theta = 0.5 * (lo + hi);
    v.iter()
        .zip(metric)
        .map(|(x, d)| d * x * theta / (d * theta + tau))
        .collect()
}

fn prox_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let (mut closed_ok, mut worst_grid, mut worst_uniform) = (true, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let len = rng.random_range(1..=8);
        let v: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        let metric: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..10.0)).collect();
        let tau = rng.random_range(0.0..5.0);

        let x = prox_row(&v, tau);
        let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let xn = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if vn <= tau {
            closed_ok &= x.iter().all(|&a| a == 0.0);
        } else {
            let shrink = 1.0 - tau / vn;
            closed_ok &= x.iter().zip(&v).all(|(a, b)| *a == shrink * b);
            closed_ok &= (xn - (vn - tau)).abs() <= 1e-12 * vn.max(1.0);
        }

        let w = prox_row_weighted(&v, &metric, tau, 1e-14, 200).unwrap();
        let oracle = weighted_prox_oracle(&v, &metric, tau);
        for (a, b) in w.iter().zip(&oracle) {
            worst_grid = worst_grid.max((a - b).abs());
        }

        let c = rng.random_range(0.1..10.0);
        let u = prox_row_weighted(&v, &vec![c; len], tau, 1e-14, 200).unwrap();
        for (a, b) in u.iter().zip(prox_row(&v, tau / c)) {
            worst_uniform = worst_uniform.max((a - b).abs());
        }
    }
    verdict(
        closed_ok && worst_grid <= 1e-8 && worst_uniform <= 1e-10,
        format!(
            "closed form exact: {closed_ok}, weighted vs grid {worst_grid:.2e}, uniform vs closed {worst_uniform:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 4, 5, 9

struct SeedRun {
    seed: u64,
    test_mauc: f64,
    baseline_test_mauc: f64,
    knee: Option<usize>,
    selected: usize,
    affinity: f64,
    indexical: IndexicalReport,
}

fn planted_data(params: &PlantedParams, seed: u64) -> (biaxis::synth::PlantedInstance, Dataset) {
    let inst = generate_planted(params, seed).unwrap();
    let data = Dataset::new(inst.graph.clone(), inst.embeddings.clone(), seed).unwrap();
    (inst, data)
}

fn benchmark_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::benchmark()
    }
}

fn planted_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let (inst, data) = planted_data(&PlantedParams::default(), seed);
                let config = benchmark_config(seed);
                let grid = grid_search(&data, &config).unwrap();
                let baseline = grid_search(&data, &config.baseline()).unwrap();
                let best = grid.best();
                let sel = select_subspace(&best.model, best.d_star, &data, 100).unwrap();
                let affinity = subspace_affinity(
                    &recovered_basis(&sel.projector).unwrap(),
                    &inst.planted_basis(),
                )
                .unwrap();
                let labels: Vec<(usize, bool)> = inst
                    .communities
                    .iter()
                    .map(|&g| g == 1)
                    .enumerate()
                    .collect();
                let indexical = indexical_probe(
                    &data,
                    &sel.projector,
                    &labels,
                    &data.concepts.test,
                    IndexicalMode::PerConcept,
                    LogRegOptions::default(),
                    seed,
                )
                .unwrap();
                SeedRun {
                    seed,
                    test_mauc: best.test_mauc,
                    baseline_test_mauc: baseline.best().test_mauc,
                    knee: sel.knee.map(|k| sel.curve[k.index].size),
                    selected: sel.size,
                    affinity,
                    indexical,
                }
            })
            .collect()
    })
}

fn planted_recovery() -> Verdict {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in planted_runs() {
        let knee_ok = r.knee.is_some_and(|k| (2..=8).contains(&k));
        let pass = r.test_mauc >= 0.85 && knee_ok && r.affinity >= 0.8;
        ok += usize::from(pass);
        parts.push(format!(
            "seed {}: test {:.3} knee {} affinity {:.3}",
            r.seed,
            r.test_mauc,
            r.knee.map_or("none".to_string(), |k| k.to_string()),
            r.affinity
        ));
    }
    verdict(ok >= 4, format!("{ok}/5 seeds pass; {}", parts.join("; ")))
}

fn baseline_parity() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in planted_runs() {
        let gap = (r.test_mauc - r.baseline_test_mauc).abs();
        pass &= gap <= 0.05;
        parts.push(format!(
            "seed {}: |{:.3} - {:.3}| = {gap:.3}",
            r.seed, r.test_mauc, r.baseline_test_mauc
        ));
    }
    verdict(pass, parts.join("; "))
}

fn indexical_property() -> Verdict {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in planted_runs() {
        let sub = r.indexical.space(Space::Subspace).test;
        let comp = r.indexical.space(Space::Complement).test;
        let pass = sub >= 0.9 && sub - comp >= 0.15;
        ok += usize::from(pass);
        parts.push(format!(
            "seed {}: subspace {sub:.3} complement {comp:.3} (d* {})",
            r.seed, r.selected
        ));
    }
    verdict(ok >= 4, format!("{ok}/5 seeds pass; {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 6

fn null_control() -> Verdict {
    let params = PlantedParams {
        k: 0,
        ..PlantedParams::default()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (_, data) = planted_data(&params, seed);
        let grid = grid_search(&data, &benchmark_config(seed)).unwrap();
        let m = grid.best().test_mauc;
        pass &= (0.45..=0.65).contains(&m);
        parts.push(format!("seed {seed}: {m:.3}"));
    }
    verdict(pass, format!("test MAUC {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 7

fn knee_detection() -> Verdict {
    let f = |x: f64| -1.0 / x + 5.0;
    let xs: Vec<f64> = (1..=10).map(f64::from).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let knee = knee_select(&xs, &ys).unwrap();

    let (ymin, ymax) = (f(1.0), f(10.0));
    let points = 10_000;
    let brute = (0..points)
        .map(|i| 1.0 + 9.0 * i as f64 / (points - 1) as f64)
        .max_by(|a, b| {
            let da = (f(*a) - ymin) / (ymax - ymin) - (a - 1.0) / 9.0;
            let db = (f(*b) - ymin) / (ymax - ymin) - (b - 1.0) / 9.0;
            da.total_cmp(&db)
        })
        .unwrap();
    let nearest = xs
        .iter()
        .copied()
        .min_by(|a, b| (a - brute).abs().total_cmp(&(b - brute).abs()))
        .unwrap();
    let linear: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
    let none_for_linear = knee_select(&xs, &linear).unwrap().is_none();
    let pass = knee.is_some_and(|k| k.x == nearest) && none_for_linear;
    verdict(
        pass,
        format!(
            "knee {:?}, continuous maximum at {brute:.4} (nearest sample {nearest}), linear gives none: {none_for_linear}",
            knee.map(|k| k.x)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn exhaustive_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn statistics_oracles() -> Verdict {
    // Every assignment of three levels to up to six scores per side.
    let mut auc_ok = true;
    let mut configs = 0usize;
    for np in 1..=6u32 {
        for nn in 1..=6u32 {
            for code in 0..3usize.pow(np + nn) {
                let mut c = code;
                let mut digits = Vec::with_capacity((np + nn) as usize);
                for _ in 0..np + nn {
                    digits.push((c % 3) as f64);
                    c /= 3;
                }
                let (pos, neg) = digits.split_at(np as usize);
                auc_ok &= auc(pos, neg).unwrap() == exhaustive_auc(pos, neg);
                configs += 1;
            }
        }
    }
    let m = mcnemar(10, 2).unwrap();
    let mc_ok = (m.statistic - 4.0833).abs() <= 1e-4 && (m.p_value - 0.0433).abs() <= 1e-3;
    let w = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
    let welch_ok = (w.t + 2.0).abs() <= 1e-9
        && (w.df - 8.0).abs() <= 1e-9
        && (w.p_value - 0.0805).abs() <= 1e-3;
    let o = ols_r2(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 4.0]).unwrap();
    let ols_ok = (o.r2 - 0.81).abs() <= 1e-10;
    verdict(
        auc_ok && mc_ok && welch_ok && ols_ok,
        format!(
            "auc exhaustive over {configs} configurations: {auc_ok}; mcnemar chi2 {:.4} p {:.4}: {mc_ok}; welch t {} df {} p {:.4}: {welch_ok}; ols r2 {:.6} (expected 0.81): {ols_ok}",
            m.statistic, m.p_value, w.t, w.df, w.p_value, o.r2
        ),
    )
}

// ---------------------------------------------------------------- 10

fn dispersion_property() -> Verdict {
    let params = PlantedParams {
        signal_schedule: vec![0.0, 0.5, 1.0, 2.0],
        ..PlantedParams::default()
    };
    let (_, data) = planted_data(&params, 0);
    let grid = grid_search(&data, &benchmark_config(0)).unwrap();
    let best = grid.best();
    let sel = select_subspace(&best.model, best.d_star, &data, 100).unwrap();
    let rows = concept_rows(&best.model, &sel.projector, &data).unwrap();
    let x: Vec<f64> = rows.iter().map(|r| r.dispersion).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.auc).collect();
    let o = ols_r2(&x, &y).unwrap();
    verdict(
        o.slope > 0.0 && o.p_value < 0.01,
        format!(
            "{} concepts, d* {}: slope {:.4}, R2 {:.3}, F {:.2}, p {:.2e}",
            rows.len(),
            sel.size,
            o.slope,
            o.r2,
            o.f_stat,
            o.p_value
        ),
    )
}

// ---------------------------------------------------------------- 11

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let inst = generate_planted(&PlantedParams::default(), 0).unwrap();
    write_instance(&inst, tmp.path()).unwrap();
    let train = toml::to_string(&benchmark_config(0)).unwrap();
    std::fs::write(
        tmp.path().join("run.toml"),
        format!(
            "seed = 0\n[inputs]\nedges = \"edges.tsv\"\nembeddings = \"embeddings.toml\"\npartition = \"partition.tsv\"\nlabels = \"partition.tsv\"\nplanted = \"planted.toml\"\n[train]\n{train}"
        ),
    )
    .unwrap();
    let mut m = RunManifest::load(&tmp.path().join("run.toml")).unwrap();
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        m.out = tmp.path().join(run);
        run_pipeline(&m).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&m.out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    verdict(
        same && !outputs[0].is_empty(),
        format!("{} CSV files, identical: {same}", outputs[0].len()),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let only: Option<String> = std::env::var("ACCEPTANCE_ONLY").ok();
    let criteria: [Criterion; 11] = [
        ("1 parameter accounting", parameter_accounting),
        ("2 gradient correctness", gradient_check),
        ("3 prox oracles", prox_oracles),
        ("4 planted-subspace recovery", planted_recovery),
        ("5 baseline parity", baseline_parity),
        ("6 null control", null_control),
        ("7 knee detection", knee_detection),
        ("8 statistics oracles", statistics_oracles),
        ("9 indexical probe", indexical_property),
        ("10 dispersion property", dispersion_property),
        ("11 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_ref().is_some_and(|o| !name.starts_with(o.as_str())) {
            continue;
        }
        let start = std::time::Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {name}: {} ({:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} of 11 criteria pass", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
