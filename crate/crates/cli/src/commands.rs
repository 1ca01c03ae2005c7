//! The subcommand implementations. Each takes an already-validated config
//! (overrides applied) and works strictly under the configured output
//! directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gradcil_core::datagen::{
    load_idx, make_profile_counts, make_synthetic_gaussian_with_test, write_idx, LongTailDataset,
    SplitTag,
};
use gradcil_core::protocol::build_schedule;
use gradcil_core::trainer::{ExperimentRun, Method, MethodSpec, TraceRecord};
use gradcil_core::{Error, Result};
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};

pub fn method_name(method: Method) -> &'static str {
    match method {
        Method::Ours => "ours",
        Method::Finetune => "finetune",
        Method::KdOnly => "kd_only",
    }
}

/// Train/test pair according to the dataset section.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(LongTailDataset, LongTailDataset)> {
    let d = &config.dataset;
    match d.source {
        DataSource::Synthetic => {
            let counts = make_profile_counts(&config.imbalance_profile())?;
            make_synthetic_gaussian_with_test(
                d.num_classes,
                d.d_in,
                &counts,
                d.separation,
                d.test_per_class,
                config.protocol.seed,
            )
        }
        DataSource::Idx => {
            let train = load_idx(
                d.images.as_ref().expect("validated"),
                d.labels.as_ref().expect("validated"),
                SplitTag::Train,
            )?;
            let test = load_idx(
                d.test_images.as_ref().expect("validated"),
                d.test_labels.as_ref().expect("validated"),
                SplitTag::Test,
            )?;
            let train = widen_to(train, d.num_classes, SplitTag::Train)?;
            let test = widen_to(test, d.num_classes, SplitTag::Test)?;
            Ok((train, test))
        }
    }
}

/// Re-wrap a loaded dataset to the configured class count. IDX files only
/// reveal the largest label actually present, so a split that happens to
/// miss the last classes is widened; data with out-of-range labels is
/// rejected against the config.
fn widen_to(data: LongTailDataset, num_classes: usize, split: SplitTag) -> Result<LongTailDataset> {
    if data.num_classes() > num_classes {
        return Err(Error::parameter(format!(
            "data contains class {} but dataset.num_classes is {num_classes}",
            data.num_classes() - 1
        )));
    }
    if data.num_classes() == num_classes {
        return Ok(data);
    }
    LongTailDataset::new(
        data.features().clone(),
        data.labels().to_vec(),
        num_classes,
        split,
    )
}

/// Assemble a ready-to-run experiment from a config, with an explicit
/// method-switch set (the named method's switches for single runs, a
/// variant's for ablations).
pub fn build_experiment(
    config: &ExperimentConfig,
    spec: MethodSpec,
    trace: bool,
) -> Result<ExperimentRun> {
    let (train, test) = build_datasets(config)?;
    let schedule = build_schedule(
        config.dataset.num_classes,
        config.protocol_enum(),
        config.protocol.n_tasks,
        config.order_enum(),
        train.class_counts(),
        config.protocol.seed,
    )?;
    let run = ExperimentRun::new(
        config.to_train_config(None),
        spec,
        schedule,
        train,
        test,
        config.memory_regime(),
    )?;
    Ok(if trace { run.with_trace() } else { run })
}

/// `gen-data`: write the synthetic dataset as IDX file pairs plus a JSON
/// sidecar describing what was generated.
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if config.dataset.source != DataSource::Synthetic {
        return Err(Error::parameter(
            "gen-data requires dataset.source = \"synthetic\"; idx data already exists on disk",
        ));
    }
    let out = &config.output.dir;
    std::fs::create_dir_all(out)?;
    let (train, test) = build_datasets(config)?;

    let paths = [
        out.join("train-images.idx"),
        out.join("train-labels.idx"),
        out.join("test-images.idx"),
        out.join("test-labels.idx"),
    ];
    write_idx(&train, &paths[0], &paths[1])?;
    write_idx(&test, &paths[2], &paths[3])?;

    #[derive(Serialize)]
    struct DatasetSidecar<'a> {
        num_classes: usize,
        d_in: usize,
        seed: u64,
        class_counts: &'a [usize],
        train_rows: usize,
        test_rows: usize,
    }
    let sidecar = serde_json::to_string_pretty(&DatasetSidecar {
        num_classes: train.num_classes(),
        d_in: train.dim(),
        seed: config.protocol.seed,
        class_counts: train.class_counts(),
        train_rows: train.len(),
        test_rows: test.len(),
    })
    .map_err(|e| Error::parameter(format!("sidecar serialization failed: {e}")))?;
    let sidecar_path = out.join("dataset.json");
    std::fs::write(&sidecar_path, sidecar)?;

    let mut written = paths.to_vec();
    written.push(sidecar_path);
    Ok(written)
}

#[derive(Debug, Serialize)]
struct ManifestPhase {
    phase: usize,
    task_acc: Vec<f64>,
    seen_acc: f64,
}

#[derive(Debug, Serialize)]
struct ManifestSummary {
    average_accuracy: f64,
    forgetting: Option<f64>,
    final_seen_accuracy: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    label: String,
    seed: u64,
    config: &'a ExperimentConfig,
    phases: Vec<ManifestPhase>,
    summary: ManifestSummary,
    exemplars_stored: usize,
    wall_clock_seconds: f64,
}

/// What `run` left on disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub trace: Option<PathBuf>,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
}

/// `run`: execute one experiment and write manifest.json, metrics.csv, and
/// (when tracing) trace.csv under the output directory.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    let spec = MethodSpec::from_config(&config.to_train_config(None));
    let mut run = build_experiment(config, spec, config.output.trace)?;
    run.run()?;

    let out = &config.output.dir;
    std::fs::create_dir_all(out)?;

    let metrics_path = out.join("metrics.csv");
    std::fs::write(&metrics_path, run.metrics().to_csv())?;

    let trace_path = match run.trace() {
        Some(records) => {
            let path = out.join("trace.csv");
            std::fs::write(&path, render_trace_csv(records, run.learner().column_classes()))?;
            Some(path)
        }
        None => None,
    };

    let acc = run.metrics().acc();
    let phases: Vec<ManifestPhase> = (0..run.metrics().num_phases())
        .map(|t| {
            Ok(ManifestPhase {
                phase: t,
                task_acc: (0..=t)
                    .map(|u| {
                        acc.task_accuracy(t, u).ok_or_else(|| {
                            Error::parameter(format!("missing accuracy entry ({t}, {u})"))
                        })
                    })
                    .collect::<Result<_>>()?,
                seen_acc: acc.seen_accuracy()[t],
            })
        })
        .collect::<Result<_>>()?;
    let average_accuracy = acc.average_accuracy()?;
    let forgetting = acc.forgetting().ok();
    let summary = ManifestSummary {
        average_accuracy,
        forgetting,
        final_seen_accuracy: *acc.seen_accuracy().last().ok_or_else(|| {
            Error::parameter("run produced no phases")
        })?,
    };
    let manifest = Manifest {
        label: format!("{}-s{}", method_name(config.train.method), config.protocol.seed),
        seed: config.protocol.seed,
        config,
        phases,
        summary,
        exemplars_stored: run.store().total_stored(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_path = out.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::parameter(format!("manifest serialization failed: {e}")))?,
    )?;

    Ok(RunArtifacts {
        manifest: manifest_path,
        metrics: metrics_path,
        trace: trace_path,
        average_accuracy,
        forgetting,
    })
}

/// Long-form CSV of the per-iteration correction factors. Vector
/// quantities get one row per class; scalars leave the key empty.
fn render_trace_csv(records: &[TraceRecord], column_classes: &[usize]) -> String {
    let mut out = String::from("phase,epoch,iteration,quantity,key,value\n");
    for rec in records {
        let scalar_rows = [
            ("beta", rec.beta),
            ("ce_reweighted_norm", rec.ce_reweighted_norm),
            ("kd_scaled_norm", rec.kd_scaled_norm),
            ("loss_total", rec.loss_total),
        ];
        for (name, value) in scalar_rows {
            out.push_str(&format!(
                "{},{},{},{name},,{value}\n",
                rec.phase, rec.epoch, rec.iteration
            ));
        }
        let vector_rows = [("alpha", &rec.alpha), ("r", &rec.r), ("phi", &rec.phi)];
        for (name, values) in vector_rows {
            for (j, value) in values.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{name},{},{value}\n",
                    rec.phase, rec.epoch, rec.iteration, column_classes[j]
                ));
            }
        }
    }
    out
}

/// The ablation ladder: both baselines, then the method's pieces stacked
/// one at a time, the full method, and the deliberately wrong variant that
/// also rescales distillation gradients per class.
pub fn ablation_variants() -> Vec<(&'static str, MethodSpec)> {
    let gr = MethodSpec {
        reweight: true,
        dgr: false,
        distill: true,
        dakd: false,
        rs: false,
        reweight_kd: false,
    };
    vec![
        ("finetune", MethodSpec::finetune()),
        ("kd_only", MethodSpec::kd_only()),
        ("gr", gr),
        ("dgr", MethodSpec { dgr: true, ..gr }),
        (
            "dakd",
            MethodSpec {
                dgr: true,
                dakd: true,
                ..gr
            },
        ),
        ("full", MethodSpec::ours(true)),
        (
            "reweight_kd",
            MethodSpec {
                reweight_kd: true,
                ..MethodSpec::ours(true)
            },
        ),
    ]
}

/// One ablation row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub final_seen_accuracy: f64,
}

/// `ablate`: run every variant on the same data and seed, write
/// ablation.csv, and return a human-readable comparison table.
pub fn cmd_ablate(config: &ExperimentConfig) -> Result<String> {
    let mut rows = Vec::new();
    for (name, spec) in ablation_variants() {
        let mut run = build_experiment(config, spec, false)?;
        run.run()?;
        let acc = run.metrics().acc();
        rows.push(AblationRow {
            variant: name.to_string(),
            average_accuracy: acc.average_accuracy()?,
            forgetting: acc.forgetting().ok(),
            final_seen_accuracy: *acc
                .seen_accuracy()
                .last()
                .ok_or_else(|| Error::parameter("variant run produced no phases"))?,
        });
    }

    let out = &config.output.dir;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("variant,average_accuracy,forgetting,final_seen_accuracy\n");
    for row in &rows {
        let forgetting = row
            .forgetting
            .map(|f| f.to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{forgetting},{}\n",
            row.variant, row.average_accuracy, row.final_seen_accuracy
        ));
    }
    std::fs::write(out.join("ablation.csv"), csv)?;

    let mut table = format!(
        "{:<12} {:>10} {:>12} {:>12}\n",
        "variant", "avg acc", "forgetting", "final seen"
    );
    for row in &rows {
        let forgetting = row
            .forgetting
            .map(|f| format!("{f:.4}"))
            .unwrap_or_else(|| "-".to_string());
        table.push_str(&format!(
            "{:<12} {:>10.4} {:>12} {:>12.4}\n",
            row.variant, row.average_accuracy, forgetting, row.final_seen_accuracy
        ));
    }
    Ok(table)
}

/// Read the legend label for a metrics CSV from its sibling manifest.json,
/// falling back to the parent directory name.
pub fn plot_label(csv_path: &Path) -> String {
    let fallback = || {
        csv_path
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| csv_path.display().to_string())
    };
    let manifest = match csv_path.parent() {
        Some(dir) => dir.join("manifest.json"),
        None => return fallback(),
    };
    let Ok(text) = std::fs::read_to_string(manifest) else {
        return fallback();
    };
    match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v) => v
            .get("label")
            .and_then(|l| l.as_str())
            .map(str::to_string)
            .unwrap_or_else(fallback),
        Err(_) => fallback(),
    }
}
