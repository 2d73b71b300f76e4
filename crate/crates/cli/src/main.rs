use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biaxis::exec::with_jobs;
use biaxis::model::{load_checkpoint, save_checkpoint};
use biaxis::pipeline::{
    load_inputs, run_pipeline, stage_compare, stage_concepts, stage_curve, stage_grid,
    stage_indexical, stage_pca, stage_recovery, stage_semantic, trials_rows, Loaded, PipelineError,
    RunManifest, Stage, BASELINE_CHECKPOINT, BEST_CHECKPOINT, PROJECTOR_CHECKPOINT, TRIALS_HEADER,
};
use biaxis::synth::{
    generate_planted, write_instance, PlantedParams, EDGES_FILE, EMBEDDINGS_FILE, PARTITION_FILE,
    PLANTED_FILE,
};
use biaxis::train::{evaluate_mauc, train_trial, GridOutcome, TrainConfig, Which};
use biaxis::{Error, RotationGAE, SubspaceProjector};

#[derive(Parser)]
#[command(
    name = "biaxis",
    version,
    about = "Bias-subspace detection with a rotating graph auto-encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the manifest output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for grid trials and probe repetitions.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted benchmark instance and a run manifest for it.
    Synth {
        /// Planted parameters (TOML); defaults when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "planted")]
        out: PathBuf,
    },
    /// Train the first grid point only.
    Train(Common),
    /// Grid search for the subspace model and the baseline.
    Grid(Common),
    /// Truncation curve and knee from the grid's best model.
    Curve(Common),
    /// Concept dispersion, PCA views and recovery from the selected subspace.
    Project(Common),
    /// Semantic-axis scores and rating comparisons.
    ProbeSemantic(Common),
    /// Predict node labels from full, subspace and complement coordinates.
    ProbeIndexical(Common),
    /// Compare per-concept test AUCs of the best subspace model and baseline.
    Stats(Common),
    /// Every stage in order.
    Pipeline(Common),
}

type Outcome = Result<(), PipelineError>;

fn load_error(error: Error) -> PipelineError {
    PipelineError {
        stage: Stage::Load,
        error,
    }
}

fn manifest(c: &Common) -> Result<RunManifest, PipelineError> {
    let mut m = RunManifest::load(&c.manifest).map_err(load_error)?;
    let seed = c.seed.unwrap_or(m.seed);
    m.set_seed(seed);
    if let Some(out) = &c.out {
        m.out = out.clone();
    }
    std::fs::create_dir_all(&m.out).map_err(|e| {
        load_error(Error::InvalidInput(format!(
            "cannot create {}: {e}",
            m.out.display()
        )))
    })?;
    Ok(m)
}

fn checkpoint(out: &Path, name: &str, producer: &str) -> Result<RotationGAE, PipelineError> {
    let path = out.join(name);
    if !path.is_file() {
        return Err(load_error(Error::InvalidInput(format!(
            "{} not found; run `biaxis {producer}` first",
            path.display()
        ))));
    }
    load_checkpoint(&path).map_err(load_error)
}

fn loaded(m: &RunManifest) -> Result<Loaded, PipelineError> {
    load_inputs(m).map_err(load_error)
}

fn synth(params_path: Option<&Path>, seed: u64, out: &Path) -> Outcome {
    let params: PlantedParams = match params_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| load_error(Error::InvalidInput(format!("{}: {e}", p.display()))))?;
            toml::from_str(&text)
                .map_err(|e| load_error(Error::InvalidInput(format!("{}: {e}", p.display()))))?
        }
        None => PlantedParams::default(),
    };
    let inst = generate_planted(&params, seed).map_err(load_error)?;
    write_instance(&inst, out).map_err(load_error)?;
    if !inst.connected {
        log::warn!(
            "sampled graph is disconnected ({} isolated nodes)",
            inst.isolated_nodes
        );
    }
    let labels = if params.n_blocks == 2 {
        format!("labels = \"{PARTITION_FILE}\"\n")
    } else {
        String::new()
    };
    let train = toml::to_string(&TrainConfig {
        seed,
        ..TrainConfig::benchmark()
    })
    .map_err(|e| load_error(Error::InvalidInput(e.to_string())))?;
    let text = format!(
        "version = 1\nseed = {seed}\nout = \"run\"\n\n[inputs]\nedges = \"{EDGES_FILE}\"\nembeddings = \"{EMBEDDINGS_FILE}\"\npartition = \"{PARTITION_FILE}\"\nplanted = \"{PLANTED_FILE}\"\n{labels}\n[train]\n{train}"
    );
    let path = out.join("run.toml");
    std::fs::write(&path, text)
        .map_err(|e| load_error(Error::InvalidInput(format!("{}: {e}", path.display()))))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train(m: &RunManifest) -> Outcome {
    let data = loaded(m)?.data;
    let points = m.train.grid();
    if points.len() > 1 {
        log::warn!("grid has {} points; training only the first", points.len());
    }
    let at = |error| PipelineError {
        stage: Stage::Grid,
        error,
    };
    let t = train_trial(&data, &m.train, &points[0], m.seed).map_err(at)?;
    println!(
        "dev MAUC {:.4}  test MAUC {:.4}  d_star {}",
        t.dev_mauc, t.test_mauc, t.d_star
    );
    save_checkpoint(&t.model, &m.out.join("trial.bin")).map_err(at)?;
    let outcome = GridOutcome {
        trials: vec![t],
        failures: Vec::new(),
        best: 0,
    };
    let mut csv = biaxis::io::CsvWriter::new(m.seed, &TRIALS_HEADER);
    trials_rows(
        &mut csv,
        if m.train.rotate {
            "subspace"
        } else {
            "baseline"
        },
        &outcome,
    );
    csv.write(&m.out.join("trial.csv")).map_err(at)
}

fn grid(m: &RunManifest) -> Outcome {
    let data = loaded(m)?.data;
    let (grid, baseline) = stage_grid(m, &data, &m.out)?;
    let best = grid.best();
    println!(
        "best of {} trials: r={} lambda_o={} lambda_s={}  dev {:.4}  test {:.4}  d_star {}",
        grid.trials.len(),
        best.point.learning_rate,
        best.point.lambda_o,
        best.point.lambda_s,
        best.dev_mauc,
        best.test_mauc,
        best.d_star
    );
    if let Some(b) = baseline {
        println!(
            "baseline: dev {:.4}  test {:.4}",
            b.best().dev_mauc,
            b.best().test_mauc
        );
    }
    Ok(())
}

fn curve(m: &RunManifest) -> Outcome {
    let data = loaded(m)?.data;
    let best = checkpoint(&m.out, BEST_CHECKPOINT, "grid")?;
    let sel = stage_curve(m, &data, &best, &m.out)?;
    match &sel.knee {
        Some(k) => println!("knee at d_star = {}", sel.curve[k.index].size),
        None => println!("no knee; keeping {} dimensions", sel.size),
    }
    Ok(())
}

fn project(m: &RunManifest) -> Outcome {
    let l = loaded(m)?;
    let best = checkpoint(&m.out, BEST_CHECKPOINT, "grid")?;
    let projector =
        SubspaceProjector::from_model(&checkpoint(&m.out, PROJECTOR_CHECKPOINT, "curve")?);
    if let Some(ols) = stage_concepts(m.seed, &l.data, &best, &projector, &m.out)? {
        println!(
            "AUC on dispersion: slope {:.4}  R2 {:.4}  p {:.3e}",
            ols.slope, ols.r2, ols.p_value
        );
    }
    stage_pca(m, &l, &projector, &m.out)?;
    if let Some(truth) = &l.truth {
        let r = stage_recovery(m.seed, truth, &best, &projector, &m.out)?;
        println!("affinity with the planted subspace: {:.4}", r.affinity);
    }
    Ok(())
}

fn probe_semantic(m: &RunManifest) -> Outcome {
    let l = loaded(m)?;
    let Some(pairs) = &l.axis_pairs else {
        return Err(load_error(Error::InvalidInput(
            "manifest has no axis/axis_embeddings inputs".into(),
        )));
    };
    let projector =
        SubspaceProjector::from_model(&checkpoint(&m.out, PROJECTOR_CHECKPOINT, "curve")?);
    let rep = stage_semantic(m, pairs, &l.ratings, &projector, &m.out)?;
    println!("kept {} of {} pairs", rep.kept.len(), pairs.len());
    Ok(())
}

fn probe_indexical(m: &RunManifest) -> Outcome {
    let l = loaded(m)?;
    let Some(labels) = &l.labels else {
        return Err(load_error(Error::InvalidInput(
            "manifest has no labels input".into(),
        )));
    };
    let projector =
        SubspaceProjector::from_model(&checkpoint(&m.out, PROJECTOR_CHECKPOINT, "curve")?);
    let rep = stage_indexical(m, &l.data, labels, &projector, &m.out)?;
    for s in &rep.spaces {
        println!("{:<10} dev {:.4}  test {:.4}", s.space.tag(), s.dev, s.test);
    }
    Ok(())
}

fn stats(m: &RunManifest) -> Outcome {
    let data = loaded(m)?.data;
    let best = checkpoint(&m.out, BEST_CHECKPOINT, "grid")?;
    let base = checkpoint(&m.out, BASELINE_CHECKPOINT, "grid")?;
    let at = |error| PipelineError {
        stage: Stage::Baseline,
        error,
    };
    let (_, a) = evaluate_mauc(&best, &data, Which::Test).map_err(at)?;
    let (_, b) = evaluate_mauc(&base, &data, Which::Test).map_err(at)?;
    let w = stage_compare(m.seed, &a, &b, &m.out)?;
    println!("t = {:.4}  df = {:.2}  p = {:.4}", w.t, w.df, w.p_value);
    Ok(())
}

fn pipeline(m: &RunManifest) -> Outcome {
    let r = run_pipeline(m)?;
    println!(
        "test MAUC {:.4} (d_star {}), selected {} dimensions{}",
        r.best_test_mauc,
        r.best_d_star,
        r.selected_size,
        r.knee.map_or(" (no knee)".to_string(), |_| String::new())
    );
    if let Some(b) = r.baseline_test_mauc {
        println!("baseline test MAUC {b:.4}");
    }
    if let Some(rec) = r.recovery {
        println!("affinity with the planted subspace: {:.4}", rec.affinity);
    }
    println!("outputs in {}", r.out.display());
    Ok(())
}

fn dispatch(command: Command) -> Outcome {
    let run = |c: Common, f: fn(&RunManifest) -> Outcome| -> Outcome {
        let m = manifest(&c)?;
        with_jobs(c.jobs, || f(&m))
    };
    match command {
        Command::Synth {
            manifest,
            seed,
            out,
        } => synth(manifest.as_deref(), seed, &out),
        Command::Train(c) => run(c, train),
        Command::Grid(c) => run(c, grid),
        Command::Curve(c) => run(c, curve),
        Command::Project(c) => run(c, project),
        Command::ProbeSemantic(c) => run(c, probe_semantic),
        Command::ProbeIndexical(c) => run(c, probe_indexical),
        Command::Stats(c) => run(c, stats),
        Command::Pipeline(c) => run(c, pipeline),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
