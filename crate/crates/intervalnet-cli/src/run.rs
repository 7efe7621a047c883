//! Implementations of the train / report / export subcommands.

use std::fs;
use std::path::Path;

use ndarray::Array1;

use intervalnet::checkpoint;
use intervalnet::config::ExperimentConfig;
use intervalnet::data::ContinualBenchmark;
use intervalnet::embedding;
use intervalnet::error::{Error, Result};
use intervalnet::eval::{self, AccuracyMatrix};
use intervalnet::report;
use intervalnet::trainer::BatchProvider;

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    cfg.validate()?;

    match (&cfg.sweep_key, &cfg.sweep_values) {
        (Some(key), Some(values)) => {
            for &v in values {
                let mut sub = cfg.clone();
                sub.sweep_key = None;
                sub.sweep_values = None;
                match key.as_str() {
                    "beta" => sub.beta = v,
                    "gamma" => sub.gamma = v,
                    "lr" => sub.lr = v,
                    _ => unreachable!("validated"),
                }
                sub.output_dir = cfg.output_dir.join(format!("sweep_{key}_{v}"));
                println!("== sweep {key} = {v} -> {}", sub.output_dir.display());
                run_single(&sub)?;
            }
            Ok(())
        }
        _ => run_single(&cfg),
    }
}

fn run_single(cfg: &ExperimentConfig) -> Result<()> {
    intervalnet::experiment::run_experiment(cfg, false)?;
    Ok(())
}

/// Loads the pieces of a completed run directory.
fn load_run(run: &Path) -> Result<(ExperimentConfig, ContinualBenchmark, checkpoint::LoadedRun)> {
    let cfg_path = run.join("effective_config.toml");
    if !cfg_path.exists() {
        return Err(Error::IncompleteRun(cfg_path.display().to_string()));
    }
    let cfg = ExperimentConfig::from_path(&cfg_path)?;
    let ck_path = run.join("checkpoint_final.bin");
    if !ck_path.exists() {
        return Err(Error::IncompleteRun(ck_path.display().to_string()));
    }
    let loaded = checkpoint::load_trainer(&ck_path)?;
    let bench = cfg.build_benchmark()?;
    Ok((cfg, bench, loaded))
}

pub fn cmd_report(run: &Path) -> Result<()> {
    let (cfg, _bench, loaded) = load_run(run)?;
    let rep = report::interval_length_report(&loaded.hnet, &loaded.states)?;
    fs::write(run.join("hist_interval_lengths.csv"), report::report_to_csv(&rep))?;

    // Zero-width collapse is reported as a warning, not a failure: the
    // qualitative expectation is a zero count, but it is seed-sensitive.
    for ctx in &rep.contexts {
        if ctx.name == "universal" && ctx.zero_width > 0 {
            eprintln!(
                "warning: {} universal weight coordinates have zero width",
                ctx.zero_width
            );
        }
    }

    let matrix_path = run.join("accuracy_matrix.csv");
    let summary = if matrix_path.exists() {
        let m = AccuracyMatrix::from_csv(&fs::read_to_string(&matrix_path)?)?;
        Some(eval::summarize(&m)?)
    } else {
        None
    };
    let text = report::summary_text(summary.as_ref(), Some(&rep), &[]);
    fs::write(run.join("summary.txt"), &text)?;
    println!("report written to {}", run.display());
    print!("{text}");
    let _ = cfg;
    Ok(())
}

pub fn cmd_export_universal(run: &Path, out: &Path) -> Result<()> {
    let (cfg, bench, loaded) = load_run(run)?;
    let arch = cfg.target_arch(&bench);
    let intervals: Vec<_> = loaded
        .states
        .iter()
        .map(|s| embedding::materialize(s, s.gamma))
        .collect();
    let universal = match embedding::universal_embedding(&intervals) {
        Ok(u) => u,
        Err(Error::EmptyIntersection { coords }) => {
            // Trainable-radius runs are not guaranteed a universal embedding.
            return Err(Error::EmptyIntersection { coords });
        }
        Err(e) => return Err(e),
    };
    let center = universal.mid_rad().mid;
    let cflat: Array1<f64> = center.iter().cloned().collect();
    let theta = loaded.hnet.forward_point(cflat.view())?;
    checkpoint::save_universal(out, &arch, &theta)?;
    println!(
        "universal weights ({} coordinates) written to {}",
        theta.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_eval_universal(run: &Path, ck: &Path) -> Result<()> {
    // Standalone evaluation: only the exported weights and the benchmark
    // config are used, no hypernetwork.
    let cfg_path = run.join("effective_config.toml");
    if !cfg_path.exists() {
        return Err(Error::IncompleteRun(cfg_path.display().to_string()));
    }
    let cfg = ExperimentConfig::from_path(&cfg_path)?;
    let bench = cfg.build_benchmark()?;
    let (arch, theta) = checkpoint::load_universal(ck)?;
    let providers: Vec<&dyn BatchProvider> =
        bench.tasks.iter().map(|t| &t.test as &dyn BatchProvider).collect();
    let accs = eval::eval_point_theta(&arch, theta.view(), &providers)?;
    for (t, a) in accs.iter().enumerate() {
        println!("task_{t}_accuracy={a:.6}");
    }
    println!(
        "average_accuracy={:.6}",
        accs.iter().sum::<f64>() / accs.len() as f64
    );
    Ok(())
}

