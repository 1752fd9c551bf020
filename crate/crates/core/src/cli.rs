//! Experiment driver behind the command-line interface: dataset
//! materialization, staged pipeline runs with idempotent markers,
//! report assembly and embedding export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, ModelTag};
use crate::nets::TapDepth;
use crate::report;
use crate::rundir::RunDir;
use crate::synthdata;
use crate::train::{self, DomainData, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Baseline,
    Multihead,
    Teacher,
    Joint,
    Distill,
    Full,
}

/// Materialize every domain of the experiment as a dataset directory.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: Option<&Path>, force: bool) -> Result<Vec<PathBuf>> {
    let root = cfg.resolve_out_root(out).join("datasets");
    let mut dirs = Vec::new();
    let mut specs = vec![cfg.run.target.clone()];
    specs.extend(cfg.run.sources.iter().cloned());
    for spec in &specs {
        let dir = root.join(&spec.name);
        if dir.exists() && dir.join("manifest.json").exists() && !force {
            return Err(Error::Other(format!(
                "dataset directory {} already exists (use --force to overwrite)",
                dir.display()
            )));
        }
        let data = DomainData::generate(spec, cfg.run.samples_per_domain, cfg.run.split_ratios)?;
        synthdata::save_dataset(&dir, spec, &data.samples, &data.split)?;
        log::info!("wrote dataset {}", dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

fn generate_group(run: &RunConfig) -> Result<(DomainData, Vec<DomainData>)> {
    let target = DomainData::generate(&run.target, run.samples_per_domain, run.split_ratios)?;
    let sources = run
        .sources
        .iter()
        .map(|s| DomainData::generate(s, run.samples_per_domain, run.split_ratios))
        .collect::<Result<Vec<_>>>()?;
    Ok((target, sources))
}

struct StagePaths {
    teacher: PathBuf,
    sources: Vec<PathBuf>,
    joint: PathBuf,
    student: PathBuf,
    baseline: PathBuf,
    multihead: PathBuf,
}

fn stage_paths(rd: &RunDir, seed: u64, n_sources: usize) -> StagePaths {
    StagePaths {
        teacher: rd.checkpoint_path(&format!("teacher-target-seed{seed}")),
        sources: (0..n_sources)
            .map(|k| rd.checkpoint_path(&format!("teacher-source{k}-seed{seed}")))
            .collect(),
        joint: rd.checkpoint_path(&format!("joint-seed{seed}")),
        student: rd.checkpoint_path(&format!("student-seed{seed}")),
        baseline: rd.checkpoint_path(&format!("baseline-seed{seed}")),
        multihead: rd.checkpoint_path(&format!("multihead-seed{seed}")),
    }
}

fn teacher_ckpts(paths: &StagePaths) -> Vec<PathBuf> {
    let mut v = vec![paths.teacher.clone()];
    v.extend(paths.sources.iter().cloned());
    v
}

/// Execute one pipeline for every configured seed inside a single run
/// directory. Completed stages are skipped unless `force`. The metrics
/// report is rebuilt from the checkpoints present after training.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    pipeline: Pipeline,
    seed_override: Option<u64>,
    out: Option<&Path>,
    force: bool,
) -> Result<PathBuf> {
    let root = cfg.resolve_out_root(out).join(&cfg.name);
    let rd = RunDir::open(&root)?;
    rd.write_config_snapshot(&cfg.to_toml()?)?;
    if force {
        rd.clear_markers()?;
    }
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };

    for &seed in &seeds {
        let mut run = cfg.run.clone();
        run.seed = seed;
        let (target, sources) = generate_group(&run)?;
        let paths = stage_paths(&rd, seed, run.sources.len());
        run_pipeline(&rd, &run, pipeline, seed, &target, &sources, &paths)?;
    }

    // rebuild the report from every artifact present
    let mut report = MetricsReport::default();
    for &seed in &seeds {
        let mut run = cfg.run.clone();
        run.seed = seed;
        let (target, _) = generate_group(&run)?;
        let paths = stage_paths(&rd, seed, run.sources.len());
        evaluate_artifacts(&run, &target, &paths, &mut report)?;
    }
    let csv = report.to_csv();
    std::fs::write(rd.report_path(), &csv).map_err(|e| Error::io(rd.report_path(), e))?;
    Ok(root)
}

#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    rd: &RunDir,
    run: &RunConfig,
    pipeline: Pipeline,
    seed: u64,
    target: &DomainData,
    sources: &[DomainData],
    paths: &StagePaths,
) -> Result<()> {
    let want_teacher = matches!(pipeline, Pipeline::Teacher | Pipeline::Joint | Pipeline::Distill | Pipeline::Full);
    let want_joint = matches!(pipeline, Pipeline::Joint | Pipeline::Distill | Pipeline::Full);
    let want_student = matches!(pipeline, Pipeline::Distill | Pipeline::Full);
    let want_baseline = matches!(pipeline, Pipeline::Baseline | Pipeline::Full);
    let want_multihead = matches!(pipeline, Pipeline::Multihead | Pipeline::Full);

    // with `joint`/`distill` alone, earlier stages must already exist
    let build_teachers = matches!(pipeline, Pipeline::Teacher | Pipeline::Full);
    let build_joint = matches!(pipeline, Pipeline::Joint | Pipeline::Full);

    if want_teacher {
        let marker = format!("teacher-seed{seed}");
        if build_teachers {
            if !rd.is_done(&marker) {
                let summary = train::stage1_target(run, target, &paths.teacher)?;
                rd.write_log(&format!("teacher-target-seed{seed}"), &summary.log)?;
                for (k, source) in sources.iter().enumerate() {
                    let summary = train::stage1_source(run, k, source, target, &paths.sources[k])?;
                    rd.write_log(&format!("teacher-source{k}-seed{seed}"), &summary.log)?;
                }
                rd.mark_done(&marker, "teachers trained")?;
            } else {
                log::info!("teachers for seed {seed} already trained, skipping");
            }
        } else if !paths.teacher.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "teacher checkpoint {}",
                paths.teacher.display()
            )));
        }
    }

    if want_joint {
        let marker = format!("joint-seed{seed}");
        if build_joint || matches!(pipeline, Pipeline::Distill) {
            if matches!(pipeline, Pipeline::Distill) && !paths.joint.exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "joint checkpoint {}",
                    paths.joint.display()
                )));
            }
            if build_joint {
                if !rd.is_done(&marker) {
                    let summary = train::stage2_joint(run, target, &teacher_ckpts(paths), &paths.joint)?;
                    rd.write_log(&format!("joint-seed{seed}"), &summary.log)?;
                    rd.mark_done(&marker, "joint trained")?;
                } else {
                    log::info!("joint teacher for seed {seed} already trained, skipping");
                }
            }
        }
    }

    if want_student {
        let marker = format!("student-seed{seed}");
        if !rd.is_done(&marker) {
            let summary = train::stage3_distill(
                run,
                target,
                &teacher_ckpts(paths),
                &paths.joint,
                &paths.student,
            )?;
            rd.write_log(&format!("student-seed{seed}"), &summary.log)?;
            rd.mark_done(&marker, "student trained")?;
        } else {
            log::info!("student for seed {seed} already trained, skipping");
        }
    }

    if want_baseline {
        let marker = format!("baseline-seed{seed}");
        if !rd.is_done(&marker) {
            let summary = train::train_baseline(run, target, &paths.baseline)?;
            rd.write_log(&format!("baseline-seed{seed}"), &summary.log)?;
            rd.mark_done(&marker, "baseline trained")?;
        }
    }

    if want_multihead {
        let marker = format!("multihead-seed{seed}");
        if !rd.is_done(&marker) {
            let mut domains = vec![target.clone()];
            domains.extend(sources.iter().cloned());
            let summary = train::train_multihead(run, &domains, &paths.multihead)?;
            rd.write_log(&format!("multihead-seed{seed}"), &summary.log)?;
            rd.mark_done(&marker, "multihead trained")?;
        }
    }
    Ok(())
}

fn evaluate_artifacts(
    run: &RunConfig,
    target: &DomainData,
    paths: &StagePaths,
    report: &mut MetricsReport,
) -> Result<()> {
    let test = &target.split.test;
    if paths.teacher.exists() {
        train::evaluate_checkpoint(
            run,
            &run.teacher_model,
            &paths.teacher,
            target,
            test,
            ModelTag::Teacher,
            report,
        )?;
    }
    if paths.joint.exists() && paths.teacher.exists() && paths.sources.iter().all(|p| p.exists()) {
        train::evaluate_joint(run, &teacher_ckpts(paths), &paths.joint, target, test, report)?;
    }
    if paths.student.exists() {
        train::evaluate_checkpoint(
            run,
            &run.student_model,
            &paths.student,
            target,
            test,
            ModelTag::Student,
            report,
        )?;
    }
    if paths.baseline.exists() {
        train::evaluate_checkpoint(
            run,
            &run.student_model,
            &paths.baseline,
            target,
            test,
            ModelTag::DatasetSpecific,
            report,
        )?;
    }
    if paths.multihead.exists() {
        train::evaluate_multihead(
            run,
            &paths.multihead,
            run.sources.len() + 1,
            target,
            test,
            report,
        )?;
    }
    Ok(())
}

/// Merge run reports and render comparison tables. Returns the rendered
/// text; when `out` is given the aggregate CSV is written next to it.
pub fn cmd_report(run_dirs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let dirs: Vec<&Path> = run_dirs.iter().map(|p| p.as_path()).collect();
    let merged = report::merge_reports(&dirs)?;
    let text = report::render_tables(&merged);
    if let Some(path) = out {
        std::fs::write(path, report::aggregate_csv(&merged)).map_err(|e| Error::io(path, e))?;
    }
    Ok(text)
}

/// Export embeddings from a checkpoint over a chosen split.
pub fn cmd_export_embeddings(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    split: &str,
    tap: TapDepth,
    out_file: &Path,
) -> Result<usize> {
    if !ckpt.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint {}",
            ckpt.display()
        )));
    }
    let run = &cfg.run;
    let (target, _) = generate_group(run)?;
    let idx = match split {
        "train" => &target.split.train,
        "val" => &target.split.val,
        "test" => &target.split.test,
        other => {
            return Err(Error::validation("split", format!("unknown split {other}")));
        }
    };
    // the checkpoint decides which architecture it belongs to
    let meta = crate::checkpoint::read_meta(ckpt)?;
    let model_cfg = if meta.config_hash == run.student_model.config_hash(run.task) {
        run.student_model.clone()
    } else {
        run.teacher_model.clone()
    };
    train::export_embeddings(run, &model_cfg, ckpt, &target, idx, tap, out_file)
}
