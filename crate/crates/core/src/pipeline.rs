//! File-level pipeline stages shared by the command-line tool and the
//! end-to-end tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::data::{
    derive_seed, generate_sources, make_eval_sets, make_pair_dataset, read_dataset, read_eval_set,
    write_dataset, write_eval_set, EvalDataset, RankedPairInstance,
};
use crate::distill::{distill_train, DistillRecord};
use crate::error::{Error, Result};
use crate::eval::{compare_models, evaluate_model, Comparison, EvalReport};
use crate::net::checkpoint::Checkpoint;
use crate::net::{count_flops, count_params, hex, NetworkSpec, ParameterSet};
use crate::optim::AdaMaxState;
use crate::pruning::{build_pruning_plan, compute_density, prune_network, validate_structure, DensityReport, PruningPlan};
use crate::train::{train_sparse, train_teacher, EpochRecord, TrainState};

pub const TRAIN_FILE: &str = "train.pairs";
pub const VAL_FILE: &str = "val.pairs";
pub const TEST_FILE: &str = "test.pairs";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the effective configuration into `dir`.
pub fn echo_config(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_text())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Files written by [`gen_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub eval: Vec<PathBuf>,
    pub manifest: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusFiles {
            train: dir.join(TRAIN_FILE),
            val: dir.join(VAL_FILE),
            test: dir.join(TEST_FILE),
            eval: crate::data::DistortionKind::ALL
                .iter()
                .map(|k| dir.join(format!("eval-{}.eval", k.name())))
                .collect(),
            manifest: dir.join(MANIFEST_FILE),
        }
    }
}

/// Generates the ranked-pair splits and the evaluation sets into `dir`.
pub fn gen_data(cfg: &PipelineConfig, dir: &Path) -> Result<CorpusFiles> {
    cfg.validate()?;
    ensure_dir(dir)?;
    let spec = cfg.net_config().spec()?;
    let files = CorpusFiles::in_dir(dir);
    let splits = [
        (&files.train, cfg.train_sources, 1u64),
        (&files.val, cfg.val_sources, 2),
        (&files.test, cfg.test_sources, 3),
    ];
    let mut manifest = String::from("# generated corpus\n");
    for (path, n, id) in splits {
        let instances = if n == 0 {
            Vec::new()
        } else {
            let sources = generate_sources(n, spec.patch, derive_seed(cfg.seed, &[id, 0]))?;
            make_pair_dataset(&sources, cfg.pair_options(), derive_seed(cfg.seed, &[id, 1]))?
        };
        write_dataset(path, spec.patch, &instances)?;
        let _ = writeln!(
            manifest,
            "pairs {} count={} geometry={} sources={n} sha256={}",
            path.file_name().expect("file").to_string_lossy(),
            instances.len(),
            spec.patch,
            file_digest(path)?
        );
    }
    let sets = make_eval_sets(
        cfg.eval_geometry(),
        cfg.eval_sources,
        cfg.eval_options(),
        derive_seed(cfg.seed, &[4, 0]),
    )?;
    for (set, path) in sets.iter().zip(&files.eval) {
        write_eval_set(path, set)?;
        let _ = writeln!(
            manifest,
            "eval {} items={} frames={} geometry={} sha256={}",
            path.file_name().expect("file").to_string_lossy(),
            set.items.len(),
            cfg.frames,
            cfg.eval_geometry(),
            file_digest(path)?
        );
    }
    let _ = writeln!(
        manifest,
        "generators filtered-noise,gradient,jittered-checkerboard,smooth-blobs levels={} cross_content={} seed={}",
        cfg.levels, cfg.cross_content, cfg.seed
    );
    write_text(&files.manifest, &manifest)?;
    echo_config(dir, cfg)?;
    Ok(files)
}

pub fn load_pairs(path: &Path, spec: &NetworkSpec) -> Result<Vec<RankedPairInstance>> {
    let (g, data) = read_dataset(path)?;
    if g != spec.patch {
        return Err(Error::data(format!(
            "{} holds {g} patches, the network expects {}",
            path.display(),
            spec.patch
        )));
    }
    Ok(data)
}

pub fn load_eval_sets(paths: &[PathBuf]) -> Result<Vec<EvalDataset>> {
    paths.iter().map(read_eval_set).collect()
}

fn state_checkpoint(spec: &NetworkSpec, state: &TrainState, role: &str, cfg: &PipelineConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(spec.clone(), state.params.clone())
        .with_meta("role", role)
        .with_meta("epoch", state.epoch)
        .with_meta("seed", cfg.seed);
    ck.extra = state.optimizer.to_extra();
    ck
}

fn partial_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".partial");
    PathBuf::from(p)
}

/// Runs `body`; on a numerical failure the last finished epoch is written
/// next to `out` before the error propagates.
fn with_last_good<R>(
    out: &Path,
    body: impl FnOnce(&mut Option<Checkpoint>) -> Result<R>,
) -> Result<R> {
    let mut last = None;
    let result = body(&mut last);
    if let (Err(Error::Numerical(_)), Some(ck)) = (&result, &last) {
        let p = partial_path(out);
        ck.write(&p)?;
        log::error!("training diverged; last good epoch saved to {}", p.display());
    }
    result
}

/// Dense ranking training. With `resume`, parameters, optimizer moments and
/// the epoch counter come from that checkpoint.
pub fn train_teacher_stage(
    cfg: &PipelineConfig,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    resume: Option<&Checkpoint>,
    out: &Path,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let (spec, init) = crate::net::build_teacher::<f32>(&cfg.net_config())?;
    let mut state = match resume {
        Some(ck) => {
            guard_teacher_shape(&spec, ck)?;
            TrainState {
                params: ck.params.clone(),
                optimizer: AdaMaxState::from_extra(&ck.extra, &ck.params)?,
                epoch: ck
                    .meta_u64("epoch")
                    .ok_or_else(|| Error::data("checkpoint has no epoch counter"))?
                    as usize,
            }
        }
        None => TrainState::fresh(init),
    };
    let log = with_last_good(out, |last| {
        train_teacher(&spec, &mut state, train, held_out, &cfg.teacher_optimizer(), |_, s| {
            *last = Some(state_checkpoint(&spec, s, "teacher", cfg));
            Ok(())
        })
    })?;
    let ck = state_checkpoint(&spec, &state, "teacher", cfg);
    ck.write(out)?;
    Ok((ck, log))
}

/// Rejects checkpoints whose architecture differs from the configured teacher.
pub fn guard_teacher_shape(spec: &NetworkSpec, ck: &Checkpoint) -> Result<()> {
    if ck.spec != *spec {
        let role = ck.meta.get("role").map_or("unknown", String::as_str);
        return Err(Error::Structure(format!(
            "checkpoint ({role}) is not teacher-shaped: expected {}, found {}",
            describe(spec),
            describe(&ck.spec)
        )));
    }
    Ok(())
}

fn describe(spec: &NetworkSpec) -> String {
    spec.layers
        .iter()
        .map(|l| format!("{}:{}->{}", l.name, l.in_channels, l.out_channels))
        .collect::<Vec<_>>()
        .join(" ")
}

/// ℓ1-sparsified fine-tuning of the teacher (or of a fresh initialization
/// when `sparse_from_scratch` is set).
pub fn sparsify_stage(
    cfg: &PipelineConfig,
    teacher: &Checkpoint,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    out: &Path,
) -> Result<(Checkpoint, Vec<EpochRecord>, DensityReport)> {
    let (spec, init) = crate::net::build_teacher::<f32>(&cfg.net_config())?;
    guard_teacher_shape(&spec, teacher)?;
    let start = if cfg.sparse_from_scratch {
        init
    } else {
        teacher.params.clone()
    };
    let mut state = TrainState::fresh(start);
    let opt = cfg.sparse_optimizer();
    let log = with_last_good(out, |last| {
        train_sparse(&spec, &mut state, train, held_out, &opt, |_, s| {
            *last = Some(state_checkpoint(&spec, s, "sparse", cfg));
            Ok(())
        })
    })?;
    let report = compute_density(&state.params);
    let ck = Checkpoint::new(spec, state.params)
        .with_meta("role", "sparse")
        .with_meta("epoch", state.epoch)
        .with_meta("seed", cfg.seed)
        .with_meta("lambda", opt.lambda);
    ck.write(out)?;
    Ok((ck, log, report))
}

/// Outcome of [`prune_stage`].
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub student: Checkpoint,
    pub plan: PruningPlan,
    pub report: DensityReport,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// Density-driven structured pruning of a sparse checkpoint.
pub fn prune_stage(sparse: &Checkpoint, out: &Path) -> Result<PruneOutcome> {
    let report = compute_density(&sparse.params);
    let plan = build_pruning_plan(&sparse.spec, &sparse.params, &report)?;
    let (spec, params) = prune_network(&sparse.spec, &sparse.params, &plan)?;
    let violations = validate_structure(&spec, &params);
    if !violations.is_empty() {
        return Err(Error::Structure(violations.join("; ")));
    }
    let mut student = Checkpoint::new(spec.clone(), params).with_meta("role", "student");
    if let Some(seed) = sparse.meta.get("seed") {
        student = student.with_meta("seed", seed);
    }
    student.write(out)?;
    Ok(PruneOutcome {
        params_before: count_params(&sparse.params, false),
        params_after: count_params(&student.params, false),
        flops_before: count_flops(&sparse.spec)?,
        flops_after: count_flops(&spec)?,
        student,
        plan,
        report,
    })
}

/// Multi-level distillation of `student` from the frozen `teacher`.
/// With `freeze_check`, the teacher digest is compared before and after.
pub fn distill_stage(
    cfg: &PipelineConfig,
    teacher: &Checkpoint,
    student: &Checkpoint,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    freeze_check: bool,
    out: &Path,
) -> Result<(Checkpoint, Vec<DistillRecord>)> {
    if teacher.spec.patch != student.spec.patch {
        return Err(Error::shape(format!(
            "teacher geometry {} differs from student geometry {}",
            teacher.spec.patch, student.spec.patch
        )));
    }
    let before = teacher.params.digest();
    let mut state = TrainState::fresh(student.params.clone());
    let dc = cfg.distill_config();
    let log = with_last_good(out, |last| {
        distill_train(
            &teacher.spec,
            &teacher.params,
            &student.spec,
            &mut state,
            train,
            held_out,
            &dc,
            |_, s| {
                *last = Some(state_checkpoint(&student.spec, s, "distilled", cfg));
                Ok(())
            },
        )
    })?;
    if freeze_check {
        let after = teacher.params.digest();
        if after != before {
            return Err(Error::Structure(format!(
                "teacher digest changed from {before} to {after}"
            )));
        }
        log::info!("teacher digest unchanged: {after}");
    }
    let ck = Checkpoint::new(student.spec.clone(), state.params)
        .with_meta("role", "distilled")
        .with_meta("epoch", state.epoch)
        .with_meta("seed", cfg.seed)
        .with_meta("teacher_sha256", before);
    ck.write(out)?;
    Ok((ck, log))
}

/// Trains an architecture from a fresh seeded initialization on the
/// ranking loss alone, with the distillation budget.
pub fn scratch_stage(
    cfg: &PipelineConfig,
    spec: &NetworkSpec,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
) -> Result<(ParameterSet<f32>, Vec<EpochRecord>)> {
    let mut state = TrainState::fresh(ParameterSet::init(spec, cfg.seed));
    let opt = cfg.distill_config().optimizer;
    let log = train_teacher(spec, &mut state, train, held_out, &opt, |_, _| Ok(()))?;
    Ok((state.params, log))
}

/// Evaluates every model and compares each against the first.
pub fn eval_stage(
    models: &[(String, Checkpoint)],
    datasets: &[EvalDataset],
) -> Result<(Vec<EvalReport>, Vec<Comparison>)> {
    let reports = models
        .iter()
        .map(|(name, ck)| evaluate_model(name, &ck.spec, &ck.params, datasets))
        .collect::<Result<Vec<_>>>()?;
    let comparisons = reports
        .iter()
        .skip(1)
        .map(|r| compare_models(&reports[0], r))
        .collect::<Result<Vec<_>>>()?;
    Ok((reports, comparisons))
}
