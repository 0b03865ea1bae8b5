use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use dvqa_mini::config::PipelineConfig;
use dvqa_mini::distill::write_distill_log;
use dvqa_mini::eval::{comparison_csv, comparison_table, percent, report_table};
use dvqa_mini::net::checkpoint::Checkpoint;
use dvqa_mini::pipeline::{
    distill_stage, echo_config, ensure_dir, eval_stage, gen_data, load_eval_sets, load_pairs,
    prune_stage, sparsify_stage, train_teacher_stage, write_text, CorpusFiles, TRAIN_FILE, VAL_FILE,
};
use dvqa_mini::train::write_train_log;
use dvqa_mini::Error;

/// Sparsify, prune and distill a ranking-based full-reference quality network.
#[derive(Parser)]
#[command(name = "dvqa-mini", version)]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Configuration override, e.g. `--set seed=3`; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ranked-pair splits and evaluation sets.
    GenData {
        /// Output directory (default: data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the dense teacher on the ranking loss.
    TrainTeacher {
        /// Corpus directory (default: data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write (default: run_dir/teacher.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint's epoch counter and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// l1-sparsify a teacher checkpoint and report layer densities.
    Sparsify {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the configured lambda.
        #[arg(long)]
        lambda: Option<f64>,
        /// Checkpoint to write (default: run_dir/sparse.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove channels according to layer densities.
    Prune {
        #[arg(long)]
        sparse: PathBuf,
        /// Checkpoint to write (default: run_dir/student.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plan table to write (default: next to the checkpoint).
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Train a pruned student against the frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Verify the teacher digest is unchanged after training.
        #[arg(long)]
        freeze_check: bool,
        /// Checkpoint to write (default: run_dir/distilled.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints on pseudo-MOS datasets; later models are
    /// compared against the first.
    Eval {
        /// Checkpoints, optionally named as NAME=PATH.
        #[arg(required = true)]
        models: Vec<String>,
        /// Evaluation set files (default: every eval-*.eval in data_dir).
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Report directory (default: run_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

fn read_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("loading {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn with_ext(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    parent_dir(path).join(format!("{stem}{suffix}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Command::Sparsify {
        lambda: Some(l), ..
    } = &cli.command
    {
        cfg.lambda = *l;
    }
    cfg.validate()?;
    let spec = cfg.net_config().spec()?;
    let splits = |data: &Option<PathBuf>| -> anyhow::Result<_> {
        let dir = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
        let train = load_pairs(&dir.join(TRAIN_FILE), &spec)?;
        let val = load_pairs(&dir.join(VAL_FILE), &spec)?;
        Ok((train, val))
    };
    let out_or = |out: &Option<PathBuf>, name: &str| {
        out.clone().unwrap_or_else(|| cfg.run_dir.join(name))
    };

    match &cli.command {
        Command::GenData { out } => {
            let dir = out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let files = gen_data(&cfg, &dir)?;
            println!("corpus written; manifest at {}", files.manifest.display());
        }
        Command::TrainTeacher { data, out, resume } => {
            let (train, val) = splits(data)?;
            let out = out_or(out, "teacher.ckpt");
            ensure_dir(&parent_dir(&out))?;
            let resume = resume.as_deref().map(read_ckpt).transpose()?;
            let (ck, log) = train_teacher_stage(&cfg, &train, &val, resume.as_ref(), &out)?;
            write_train_log(with_ext(&out, "_log.csv"), &log)?;
            echo_config(&parent_dir(&out), &cfg)?;
            let acc = log.last().map_or(f64::NAN, |r| r.accuracy);
            println!(
                "teacher at epoch {} written to {} (held-out accuracy {acc:.4})",
                ck.meta_u64("epoch").unwrap_or(0),
                out.display()
            );
        }
        Command::Sparsify {
            teacher, data, out, ..
        } => {
            let teacher = read_ckpt(teacher)?;
            let (train, val) = splits(data)?;
            let out = out_or(out, "sparse.ckpt");
            ensure_dir(&parent_dir(&out))?;
            let (_, log, report) = sparsify_stage(&cfg, &teacher, &train, &val, &out)?;
            write_train_log(with_ext(&out, "_log.csv"), &log)?;
            let density = with_ext(&out, "_density.txt");
            write_text(&density, &report.to_table())?;
            echo_config(&parent_dir(&out), &cfg)?;
            print!("{}", report.to_table());
            println!("sparse checkpoint written to {}", out.display());
        }
        Command::Prune { sparse, out, plan } => {
            let sparse = read_ckpt(sparse)?;
            let out = out_or(out, "student.ckpt");
            ensure_dir(&parent_dir(&out))?;
            let o = prune_stage(&sparse, &out)?;
            let plan_path = plan.clone().unwrap_or_else(|| with_ext(&out, "_plan.txt"));
            o.plan.write(&plan_path)?;
            write_text(&with_ext(&out, "_density.txt"), &o.report.to_table())?;
            echo_config(&parent_dir(&out), &cfg)?;
            print!("{}", o.plan.to_table());
            println!(
                "params {} -> {} ({} retained), flops {} -> {} ({} retained)",
                o.params_before,
                o.params_after,
                percent(o.params_after as f64 / o.params_before as f64),
                o.flops_before,
                o.flops_after,
                percent(o.flops_after as f64 / o.flops_before as f64)
            );
        }
        Command::Distill {
            teacher,
            student,
            data,
            freeze_check,
            out,
        } => {
            let teacher = read_ckpt(teacher)?;
            let student = read_ckpt(student)?;
            let (train, val) = splits(data)?;
            let out = out_or(out, "distilled.ckpt");
            ensure_dir(&parent_dir(&out))?;
            let (_, log) = distill_stage(&cfg, &teacher, &student, &train, &val, *freeze_check, &out)?;
            write_distill_log(with_ext(&out, "_log.csv"), &log)?;
            echo_config(&parent_dir(&out), &cfg)?;
            let acc = log.last().map_or(f64::NAN, |r| r.accuracy);
            println!("distilled student written to {} (held-out accuracy {acc:.4})", out.display());
        }
        Command::Eval {
            models,
            datasets,
            format,
            out,
        } => {
            let models = models
                .iter()
                .map(|m| {
                    let (name, path) = match m.split_once('=') {
                        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                        None => {
                            let p = PathBuf::from(m);
                            let n = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                            (n, p)
                        }
                    };
                    Ok((name, read_ckpt(&path)?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let paths = if datasets.is_empty() {
                CorpusFiles::in_dir(&cfg.data_dir).eval
            } else {
                datasets.clone()
            };
            let sets = load_eval_sets(&paths)?;
            let (reports, comparisons) = eval_stage(&models, &sets)?;
            let dir = out.clone().unwrap_or_else(|| cfg.run_dir.clone());
            ensure_dir(&dir)?;
            let mut csv = String::new();
            let mut table = String::new();
            for r in &reports {
                csv += &r.to_csv();
                table += &format!("== {} ==\n{}\n", r.model, report_table(r));
            }
            for c in &comparisons {
                csv += &comparison_csv(c);
                table += &comparison_table(c);
            }
            write_text(&dir.join("eval_report.csv"), &csv)?;
            write_text(&dir.join("eval_report.txt"), &table)?;
            echo_config(&dir, &cfg)?;
            match format {
                Format::Csv => print!("{csv}"),
                Format::Table => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
