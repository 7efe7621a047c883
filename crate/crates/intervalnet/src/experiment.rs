//! Full experiment orchestration: drives the trainer over a configured task
//! stream, writes run artifacts (per-iteration log, accuracy matrix,
//! checkpoints, summary), and returns the headline numbers. The CLI `train`
//! subcommand and the acceptance tests both run through here.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{self, AccuracyMatrix, EvalContext, Summary};
use crate::hypernet::Mode;
use crate::report;
use crate::trainer::{BatchProvider, Trainer};

/// Outcome of one completed run.
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub matrix: AccuracyMatrix,
    pub summary: Summary,
    /// Universal-embedding per-task accuracies (domain-incremental runs with
    /// a nonempty intersection).
    pub universal_accs: Option<Vec<f64>>,
    /// Entropy-inferred accuracy (class-incremental runs).
    pub cil_accuracy: Option<f64>,
}

/// Runs one experiment to completion, writing artifacts into
/// `cfg.output_dir`. `quiet` suppresses progress lines.
pub fn run_experiment(cfg: &ExperimentConfig, quiet: bool) -> Result<RunArtifacts> {
    cfg.validate()?;
    let bench = cfg.build_benchmark()?;
    let arch = cfg.target_arch(&bench);
    let train_cfg = cfg.train_config()?;
    let mode = train_cfg.mode;

    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("effective_config.toml"), cfg.to_toml())?;

    let mut trainer = Trainer::new(train_cfg, arch.clone(), &cfg.hnet_hidden);
    let mut log = String::from(
        "task,iteration,l_current,l_output,kappa,eff_radius_scale,train_accuracy\n",
    );
    let mut matrix = AccuracyMatrix::new();

    for task in 0..bench.num_tasks() {
        let t0 = std::time::Instant::now();
        let summary = trainer.train_task(&bench.tasks[task].train, |it| {
            let _ = writeln!(
                log,
                "{task},{},{:.9},{:.9},{:.6},{:.6},{:.4}",
                it.iteration,
                it.l_current,
                it.l_output,
                it.kappa,
                it.eff_radius_scale,
                it.batch_accuracy
            );
        })?;

        // Row `task`: known-identity accuracy of every task trained so far.
        let hnet = trainer.hypernet();
        let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &trainer.states };
        let mut row = Vec::with_capacity(task + 1);
        for col in 0..=task {
            row.push(eval::eval_til(&ctx, col, &bench.tasks[col].test)?);
        }
        if !quiet {
            println!(
                "task {task}: {} iters in {:.1}s, final L_current {:.4}, row {:?}",
                summary.iterations,
                t0.elapsed().as_secs_f64(),
                summary.final_l_current,
                row.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
            );
        }
        matrix.push_row(row);

        if cfg.checkpoint_every_task {
            checkpoint::save_trainer(
                &cfg.output_dir.join(format!("checkpoint_task{task}.bin")),
                &trainer,
            )?;
        }
    }

    checkpoint::save_trainer(&cfg.output_dir.join("checkpoint_final.bin"), &trainer)?;
    fs::write(cfg.output_dir.join("train_log.csv"), log)?;
    fs::write(cfg.output_dir.join("accuracy_matrix.csv"), matrix.to_csv())?;

    let summary = eval::summarize(&matrix)?;
    let mut extra: Vec<(String, String)> = Vec::new();
    let hnet = trainer.hypernet();
    let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &trainer.states };
    let providers: Vec<&dyn BatchProvider> =
        bench.tasks.iter().map(|t| &t.test as &dyn BatchProvider).collect();

    let mut universal_accs = None;
    let mut cil_accuracy = None;
    match mode {
        Mode::Dil => match eval::eval_universal(&ctx, &providers) {
            Ok((accs, _)) => {
                let avg = accs.iter().sum::<f64>() / accs.len() as f64;
                extra.push(("universal_avg".into(), format!("{avg:.6}")));
                for (t, a) in accs.iter().enumerate() {
                    extra.push((format!("universal_task_{t}"), format!("{a:.6}")));
                }
                universal_accs = Some(accs);
            }
            Err(Error::EmptyIntersection { coords }) => {
                extra.push((
                    "universal_empty_coordinates".into(),
                    coords.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
                ));
            }
            Err(e) => return Err(e),
        },
        Mode::Cil => {
            let acc = eval::eval_cil(&ctx, &providers)?;
            extra.push(("cil_accuracy".into(), format!("{acc:.6}")));
            cil_accuracy = Some(acc);
        }
        Mode::Til => {}
    }
    fs::write(
        cfg.output_dir.join("summary.txt"),
        report::summary_text(Some(&summary), None, &extra),
    )?;
    if !quiet {
        println!(
            "done: avg_after_all {:.4}, artifacts in {}",
            summary.avg_after_all,
            cfg.output_dir.display()
        );
    }
    Ok(RunArtifacts {
        output_dir: cfg.output_dir.clone(),
        matrix,
        summary,
        universal_accs,
        cil_accuracy,
    })
}
