use crate::config::{DataSource, RawConfig, RunConfig};
use alphadist::data::{load_idx_with_classes, synth_blobs, DataError, LabeledDataset};
use alphadist::divergence::{alpha_divergence, sweep_alphas, write_alpha_sweep_csv};
use alphadist::nn::{Checkpoint, Mlp, NnError};
use alphadist::search::{
    estimate_cost, evolutionary_search, pareto_front, write_points_csv, ParetoPoint, SearchError,
};
use alphadist::supernet::{
    evaluate_accuracy, new_student, train_epoch, train_student_epoch, write_metrics_csv, EpochMetrics, SearchSpace,
    StudentMetrics, SupernetError, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Spaces up to this size are evaluated exhaustively by `eval`.
pub const EVAL_ALL_LIMIT: u64 = 4096;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; exit code 2.
    Config(String),
    /// Training or evaluation produced NaN/∞; exit code 3.
    Numeric(String),
    /// I/O, missing or corrupt files; exit code 1.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical abort: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<SupernetError> for CliError {
    fn from(e: SupernetError) -> Self {
        match e {
            SupernetError::NonFinite { .. } | SupernetError::Nn(NnError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            SupernetError::Config(_) | SupernetError::Space(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Supernet(inner) => inner.into(),
            SearchError::Budget(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        SupernetError::from(e).into()
    }
}

fn io_err(path: &Path, e: impl Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Io { .. } => CliError::Other(e.to_string()),
        other => CliError::Config(format!("dataset: {other}")),
    }
}

fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let ds = match &cfg.data {
        DataSource::Blobs { per_class, classes, dim, spread, seed } => {
            synth_blobs(*per_class, *classes, *dim, *spread, *seed).map_err(data_err)?
        }
        DataSource::Idx { images, labels, classes } => load_idx_with_classes(images, labels, *classes).map_err(data_err)?,
    };
    ds.split(cfg.train_frac, cfg.split_seed).map_err(data_err)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Other(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|e| io_err(path, e))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("bin.tmp");
    ck.save(&tmp).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn ensure_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))
}

fn check_dims(space: &SearchSpace, data: &LabeledDataset) -> Result<(), CliError> {
    if space.input_dim() != data.dim() || space.classes() != data.classes() {
        return Err(CliError::Config(format!(
            "network expects {} features / {} classes, dataset has {} / {}",
            space.input_dim(),
            space.classes(),
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Other(e.to_string()))
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| io_err(path, e))
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<(), CliError> {
    write_metrics_csv(rows, create(path)?, true).map_err(|e| io_err(path, e))
}

pub fn train(raw: &RawConfig, cfg: &RunConfig) -> Result<(), CliError> {
    let (train, val) = load_data(cfg)?;
    let space = SearchSpace::uniform(train.dim(), cfg.hidden.clone(), &cfg.width_multipliers, train.classes())?;
    ensure_out(cfg)?;
    let ck_path = cfg.out_file("checkpoint.bin");
    let metrics_path = cfg.out_file("metrics.csv");

    let (mut state, mut rows) = if cfg.resume && ck_path.exists() {
        let (saved, state) = TrainState::from_checkpoint(&load_checkpoint(&ck_path)?)?;
        if saved != space {
            return Err(CliError::Config(format!(
                "{} was trained on a different search space; set resume = false or pick another out",
                ck_path.display()
            )));
        }
        let mut rows = read_metrics(&metrics_path)?;
        rows.truncate(state.epochs_done as usize);
        eprintln!("resuming from epoch {}", state.epochs_done);
        (state, rows)
    } else {
        (TrainState::new(&space, cfg.train.seed)?, Vec::new())
    };
    fs::write(cfg.out_file("run.cfg"), raw.render()).map_err(|e| io_err(&cfg.out, e))?;
    write_metrics(&metrics_path, &rows)?;

    while state.epochs_done < cfg.train.epochs {
        let m = train_epoch(&mut state, &space, &train, &val, &cfg.train)?;
        println!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  kd {:.4}  minus {:.3}  acc largest {:.4}  smallest {:.4}",
            m.epoch, m.lr, m.supernet_loss, m.kd_loss_mean, m.branch_minus_fraction, m.val_acc_largest, m.val_acc_smallest
        );
        rows.push(m);
        save_checkpoint(&state.to_checkpoint(&space), &ck_path)?;
        write_metrics(&metrics_path, &rows)?;
    }
    Ok(())
}

fn load_supernet(path: &Path) -> Result<(SearchSpace, TrainState), CliError> {
    Ok(TrainState::from_checkpoint(&load_checkpoint(path)?)?)
}

pub fn search(cfg: &RunConfig) -> Result<(), CliError> {
    let (space, state) = load_supernet(&cfg.checkpoint_path())?;
    let (_, val) = load_data(cfg)?;
    check_dims(&space, &val)?;
    ensure_out(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let result = pool(cfg.train.workers)?
        .install(|| evolutionary_search(&state.mlp, &space, &val, &cfg.budget, cfg.mutation_rate, &mut rng))?;
    let front = pareto_front(&result.points);
    for (name, points) in [("search_points.csv", &result.points), ("search_front.csv", &front)] {
        let path = cfg.out_file(name);
        write_points_csv(&space, points, create(&path)?).map_err(|e| io_err(&path, e))?;
    }
    println!(
        "evaluated {} unique configs ({} requested over {} rounds); front has {} points",
        result.unique_evaluations(),
        result.requested_evaluations,
        cfg.budget.rounds,
        front.len()
    );
    for p in &front {
        println!("  {:<16} cost {:>8}  acc {:.4}", p.config.label(&space), p.cost, p.accuracy);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let (space, state) = load_supernet(&cfg.checkpoint_path())?;
    let (_, val) = load_data(cfg)?;
    check_dims(&space, &val)?;
    ensure_out(cfg)?;
    let configs = if space.size() <= EVAL_ALL_LIMIT {
        space.enumerate(EVAL_ALL_LIMIT)?
    } else {
        vec![space.largest(), space.smallest()]
    };
    let points = pool(cfg.train.workers)?.install(|| {
        use rayon::prelude::*;
        configs
            .into_par_iter()
            .map(|config| {
                let accuracy = evaluate_accuracy(&state.mlp, &space, &config, &val)?;
                Ok(ParetoPoint { cost: estimate_cost(&space, &config), config, accuracy, generation: 0 })
            })
            .collect::<Result<Vec<_>, SupernetError>>()
    })?;
    let path = cfg.out_file("eval.csv");
    write_points_csv(&space, &points, create(&path)?).map_err(|e| io_err(&path, e))?;
    for (what, c) in [("largest", space.largest()), ("smallest", space.smallest())] {
        let p = points.iter().find(|p| p.config == c).expect("largest and smallest are always evaluated");
        println!("{what:<8} {:<16} cost {:>8}  acc {:.4}", c.label(&space), p.cost, p.accuracy);
    }
    println!("wrote {} rows to {}", points.len(), path.display());
    Ok(())
}

fn write_student(path: &Path, mlp: &Mlp, rows: &[StudentMetrics]) -> Result<(), CliError> {
    let mut ck = Checkpoint { arrays: mlp.to_arrays(), ..Checkpoint::default() };
    ck.meta.insert("input_dim".into(), mlp.input_dim().into());
    ck.meta.insert("hidden".into(), mlp.hidden().to_vec().into());
    ck.meta.insert("classes".into(), mlp.classes().into());
    ck.meta.insert("epochs_done".into(), (rows.len() as u64).into());
    save_checkpoint(&ck, path)
}

pub fn kd_single(cfg: &RunConfig) -> Result<(), CliError> {
    let teacher_path: PathBuf =
        cfg.teacher.clone().ok_or_else(|| CliError::Config("kd-single needs teacher = <checkpoint>".into()))?;
    let (space, teacher) = load_supernet(&teacher_path)?;
    let (train, val) = load_data(cfg)?;
    check_dims(&space, &val)?;
    ensure_out(cfg)?;
    let teacher_widths = space.largest().widths(&space);
    let teacher_acc = teacher.mlp.accuracy(&teacher_widths, val.features(), val.labels())?;
    println!("teacher {} val acc {teacher_acc:.4}", space.largest().label(&space));

    let mut student = new_student(train.dim(), &cfg.student_hidden, train.classes(), cfg.train.seed)?;
    let mut rows = Vec::new();
    pool(cfg.train.workers)?.install(|| -> Result<(), CliError> {
        while student.epochs_done < cfg.train.epochs {
            let m = train_student_epoch(&mut student, &teacher.mlp, &teacher_widths, &train, &val, &cfg.train)?;
            println!(
                "epoch {:>3}  lr {:.5}  loss {:.4}  minus {:.3}  acc {:.4}",
                m.epoch, m.lr, m.loss, m.branch_minus_fraction, m.val_acc
            );
            rows.push(m);
        }
        Ok(())
    })?;
    let path = cfg.out_file("kd_metrics.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    write_student(&cfg.out_file("student.bin"), &student.mlp, &rows)?;
    let last = rows.last().map_or(0.0, |r| r.val_acc);
    println!("final student val acc {last:.4} ({})", cfg.train.divergence.kind);
    Ok(())
}

pub fn divergence_demo(cfg: &RunConfig) -> Result<(), CliError> {
    ensure_out(cfg)?;
    let path = cfg.out_file("alpha_sweep.csv");
    write_alpha_sweep_csv(create(&path)?).map_err(|e| io_err(&path, e))?;
    println!("wrote {}", path.display());

    let path = cfg.out_file("pairs_sweep.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["pair", "alpha", "divergence"]).map_err(|e| io_err(&path, e))?;
    for (i, (p, q)) in cfg.pairs.iter().enumerate() {
        for a in sweep_alphas() {
            let d = alpha_divergence(p, q, a).map_err(|e| CliError::Config(format!("pair {i}: {e}")))?;
            w.write_record([i.to_string(), format!("{a:.1}"), format!("{d:.17e}")]).map_err(|e| io_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("wrote {} ({} pairs)", path.display(), cfg.pairs.len());
    Ok(())
}
