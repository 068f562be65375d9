//! Subcommand implementations. Every artifact is written atomically and the
//! manifest goes last.

use std::path::{Path, PathBuf};

use poseidon::catalog::{filter_quality, parse_catalog, write_catalog, Catalog, ColumnMapping};
use poseidon::config::RunConfig;
use poseidon::dataset::{prepare, Dataset};
use poseidon::eval::{energy_separation, roc_auc, write_roc, DEFAULT_ENERGY_THRESHOLD};
use poseidon::features::{write_features, FeatureConfig};
use poseidon::gridenc::{build_multiscale, write_pgrd, GridSpec};
use poseidon::labeling::{prevalence, write_samples, LabelConfig, Sample};
use poseidon::losses::SampleOutput;
use poseidon::model::{init_params, load_checkpoint, write_checkpoint, Checkpoint};
use poseidon::synthgen::generate_catalog;
use poseidon::train::{predict_outputs, task_report, train_two_stage};
use poseidon::Error;
use serde::{Deserialize, Serialize};

use crate::manifest::{write_atomic, ManifestBuilder};
use crate::report::{
    nearest_neighbour_clusters, parentage_clusters, physics_report, to_toml, Attribution,
    EvalReport,
};
use crate::{resolve_config, sidecar, CliResult, Command, Split};

/// Settings a checkpoint needs to rebuild its inputs from a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub completeness: f64,
    pub grid: GridSpec,
    pub labels: LabelConfig,
    pub features: FeatureConfig,
    pub validation_fraction: f64,
    pub threshold: f64,
}

impl Pipeline {
    pub fn to_table(&self) -> CliResult<toml::Table> {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => Ok(t),
            Ok(_) => unreachable!("a struct serializes to a table"),
            Err(e) => Err(Error::Parse(format!("serialising pipeline: {e}")).into()),
        }
    }

    pub fn from_table(table: &toml::Table) -> CliResult<Self> {
        toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e| Error::Parse(format!("checkpoint pipeline section: {e}")).into())
    }
}

pub fn dispatch(cmd: &Command) -> CliResult<()> {
    let common = cmd.common();
    let mut cfg = resolve_config(common)?;
    if let Command::Synth {
        b,
        p,
        c,
        bath_dm,
        mainshocks,
        ..
    } = cmd
    {
        let s = &mut cfg.synth;
        s.b_true = b.unwrap_or(s.b_true);
        s.p_true = p.unwrap_or(s.p_true);
        s.c_true = c.unwrap_or(s.c_true);
        s.bath_dm = bath_dm.unwrap_or(s.bath_dm);
        s.n_mainshocks = mainshocks.unwrap_or(s.n_mainshocks);
    }
    cfg.validate()?;
    let manifest = ManifestBuilder::start(cmd.name(), common.config.as_deref(), cfg.seed);
    match cmd {
        Command::Ingest { input, out, .. } => ingest(&cfg, input, out, manifest),
        Command::Synth { out, .. } => synth(&cfg, out, manifest),
        Command::Label {
            catalog,
            out,
            grids,
            ..
        } => label(&cfg, catalog, out, *grids, manifest),
        Command::Train { data, out, .. } => train(&cfg, data.as_deref(), out, manifest),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            ..
        } => eval(checkpoint, data, *split, out.as_deref(), manifest),
        Command::FitPhysics {
            catalog,
            parents,
            out,
            ..
        } => fit_physics(&cfg, catalog, parents.as_deref(), out.as_deref(), manifest),
        Command::ExportRoc {
            checkpoint,
            data,
            split,
            out,
            ..
        } => export_roc(checkpoint, data, *split, out, manifest),
        Command::ExportHistory { history, out, .. } => export_history(history, out, manifest),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn parent_dir(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Renders into memory with `render`, then writes atomically and records
/// the output.
fn emit(
    manifest: &mut ManifestBuilder,
    path: &Path,
    render: impl FnOnce(&mut Vec<u8>) -> poseidon::Result<()>,
) -> CliResult<()> {
    let mut buf = Vec::new();
    render(&mut buf)?;
    write_atomic(path, &buf)?;
    manifest.output(path);
    Ok(())
}

/// Reads a normalized catalog and resolves its completeness magnitude.
fn read_normalized(path: &Path, cfg: &RunConfig) -> CliResult<Catalog> {
    let (cat, report) = parse_catalog(path, &ColumnMapping::default())?;
    if report.rows_dropped > 0 {
        log::warn!(
            "{}: dropped {} malformed rows",
            path.display(),
            report.rows_dropped
        );
    }
    Ok(cfg.resolve_completeness(cat))
}

fn ingest(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    mut manifest: ManifestBuilder,
) -> CliResult<()> {
    manifest.input(input);
    let (raw, parsed) = parse_catalog(input, &cfg.columns)?;
    let (cat, filtered) = filter_quality(&raw, &cfg.quality);
    parent_dir(out)?;
    emit(&mut manifest, out, |b| write_catalog(&cat, b))?;
    println!(
        "read {} rows: {} dropped, {} duplicate ids, {} failed quality, {} kept",
        parsed.rows_read,
        parsed.rows_dropped,
        parsed.duplicate_ids,
        filtered.failed,
        cat.len()
    );
    manifest.finish(&sidecar(out, "manifest.toml"))?;
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, mut manifest: ManifestBuilder) -> CliResult<()> {
    let (cat, log) = generate_catalog(&cfg.synth)?;
    parent_dir(out)?;
    emit(&mut manifest, out, |b| write_catalog(&cat, b))?;
    emit(&mut manifest, &sidecar(out, "parents.csv"), |b| {
        log.write_csv(b)
    })?;
    println!(
        "{} events ({} mainshocks, {} aftershocks)",
        cat.len(),
        log.mainshock_ids.len(),
        log.aftershocks.len()
    );
    manifest.finish(&sidecar(out, "manifest.toml"))?;
    Ok(())
}

fn label(
    cfg: &RunConfig,
    catalog: &Path,
    out: &Path,
    grids: bool,
    mut manifest: ManifestBuilder,
) -> CliResult<()> {
    manifest.input(catalog);
    let cat = read_normalized(catalog, cfg)?;
    let grid = cfg.grid.resolve(&cat)?;
    let ds = prepare(&cat, &cfg.labels, &cfg.features, &grid)?;
    let samples: Vec<Sample> = ds.samples.iter().map(|s| s.sample.clone()).collect();
    let features: Vec<_> = ds.samples.iter().map(|s| s.features).collect();
    create_dir(out)?;
    emit(&mut manifest, &out.join("samples.csv"), |b| {
        write_samples(&samples, b)
    })?;
    emit(&mut manifest, &out.join("features.csv"), |b| {
        write_features(&features, b)
    })?;
    let prev = prevalence(&samples);
    let summary = format!(
        "samples = {}\naftershock = {}\nforeshock = {}\ntsunami = {}\n",
        prev.n, prev.aftershock, prev.foreshock, prev.tsunami
    );
    emit(&mut manifest, &out.join("prevalence.toml"), |b| {
        b.extend_from_slice(summary.as_bytes());
        Ok(())
    })?;
    if grids {
        let dir = out.join("grids");
        create_dir(&dir)?;
        for s in &samples {
            let g = build_multiscale(&cat, s.trigger.time, &grid)?;
            let path = dir.join(format!("{}.pgrd", s.trigger.id));
            let mut buf = Vec::new();
            write_pgrd(&g, &mut buf).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            write_atomic(&path, &buf)?;
        }
        manifest.output(dir);
    }
    println!(
        "{} samples: aftershock {:.1}%, foreshock {:.1}%, tsunami {:.2}%",
        prev.n,
        100.0 * prev.aftershock,
        100.0 * prev.foreshock,
        100.0 * prev.tsunami
    );
    manifest.finish(&out.join("manifest.toml"))?;
    Ok(())
}

fn train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    mut manifest: ManifestBuilder,
) -> CliResult<()> {
    create_dir(out)?;
    let cat = match data {
        Some(path) => {
            manifest.input(path);
            read_normalized(path, cfg)?
        }
        None => {
            let (cat, _) = generate_catalog(&cfg.synth)?;
            emit(&mut manifest, &out.join("catalog.csv"), |b| {
                write_catalog(&cat, b)
            })?;
            cat
        }
    };
    let grid = cfg.grid.resolve(&cat)?;
    let ds = prepare(&cat, &cfg.labels, &cfg.features, &grid)?;
    let (train_idx, val_idx) = ds.time_split(cfg.train.validation_fraction)?;
    log::info!(
        "{} samples on a {}x{} grid; {} train, {} validation",
        ds.len(),
        grid.height(),
        grid.width(),
        train_idx.len(),
        val_idx.len()
    );
    let init = init_params(&cfg.model, cfg.seed)?;
    let outcome = train_two_stage(
        &ds,
        &train_idx,
        &val_idx,
        init,
        &cfg.train,
        &cfg.losses,
        |_| {},
    )?;

    let pipeline = Pipeline {
        completeness: cat.magnitude_completeness(),
        grid,
        labels: cfg.labels.clone(),
        features: cfg.features,
        validation_fraction: cfg.train.validation_fraction,
        threshold: cfg.train.threshold,
    };
    let ckpt = Checkpoint {
        params: outcome.params,
        pipeline: pipeline.to_table()?,
    };
    emit(&mut manifest, &out.join("model.ckpt"), |b| {
        write_checkpoint(&ckpt, b)
    })?;
    emit(&mut manifest, &out.join("history.csv"), |b| {
        outcome.history.write_csv(b)
    })?;
    emit(&mut manifest, &out.join("split.csv"), |b| {
        let mut rows = String::from("id,split\n");
        let mut tagged: Vec<(usize, &str)> = train_idx.iter().map(|&i| (i, "train")).collect();
        tagged.extend(val_idx.iter().map(|&i| (i, "validation")));
        tagged.sort_unstable();
        for (i, split) in tagged {
            rows.push_str(&format!("{},{split}\n", ds.samples[i].sample.trigger.id));
        }
        b.extend_from_slice(rows.as_bytes());
        Ok(())
    })?;
    let config_text = cfg.to_toml()?;
    emit(&mut manifest, &out.join("config.toml"), |b| {
        b.extend_from_slice(config_text.as_bytes());
        Ok(())
    })?;
    if let Some(last) = outcome.history.records.last() {
        let v = last.validation.as_ref();
        println!(
            "trained {} epochs: loss {:.5}; validation AUC aftershock {}, tsunami {}, foreshock {}",
            last.epoch,
            last.train.total,
            fmt_auc(v.and_then(|r| r.aftershock.auc)),
            fmt_auc(v.and_then(|r| r.tsunami.auc)),
            fmt_auc(v.and_then(|r| r.foreshock.auc)),
        );
    }
    manifest.finish(&out.join("manifest.toml"))?;
    Ok(())
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "n/a".into(), |a| format!("{a:.3}"))
}

/// A checkpoint's predictions on the chosen split of a catalog.
struct Scored {
    ckpt: Checkpoint,
    dataset: Dataset,
    indices: Vec<usize>,
    outputs: Vec<SampleOutput>,
    threshold: f64,
}

fn score(checkpoint: &Path, data: &Path, split: Split) -> CliResult<Scored> {
    let ckpt = load_checkpoint(checkpoint)?;
    let pipe = Pipeline::from_table(&ckpt.pipeline)?;
    let (cat, report) = parse_catalog(data, &ColumnMapping::default())?;
    if report.rows_dropped > 0 {
        log::warn!(
            "{}: dropped {} malformed rows",
            data.display(),
            report.rows_dropped
        );
    }
    let cat = cat.with_completeness(pipe.completeness);
    let dataset = prepare(&cat, &pipe.labels, &pipe.features, &pipe.grid)?;
    let (train_idx, val_idx) = dataset.time_split(pipe.validation_fraction)?;
    let indices = match split {
        Split::All => (0..dataset.len()).collect(),
        Split::Train => train_idx,
        Split::Validation => val_idx,
    };
    if indices.is_empty() {
        return Err(
            Error::InvalidInput(format!("no samples in the {} split", split.name())).into(),
        );
    }
    let outputs = predict_outputs(&ckpt.params, &dataset, &indices, None)?;
    Ok(Scored {
        ckpt,
        dataset,
        indices,
        outputs,
        threshold: pipe.threshold,
    })
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: Option<&Path>,
    mut manifest: ManifestBuilder,
) -> CliResult<()> {
    manifest.input(checkpoint);
    manifest.input(data);
    let s = score(checkpoint, data, split)?;
    let labels: Vec<_> = s
        .indices
        .iter()
        .map(|&i| s.dataset.samples[i].labels())
        .collect();
    let tasks = task_report(&s.outputs, &labels, s.threshold)?;
    let energies: Vec<f64> = s.outputs.iter().map(|o| o.energy).collect();
    let anomalous: Vec<bool> = labels.iter().map(|l| l.tsunami).collect();
    let report = EvalReport {
        split: split.name().into(),
        samples: s.indices.len(),
        aftershock: tasks.aftershock,
        tsunami: tasks.tsunami,
        foreshock: tasks.foreshock,
        energy: energy_separation(&energies, &anomalous, DEFAULT_ENERGY_THRESHOLD)?,
        physics: s.ckpt.params.physics().derive(),
    };
    let text = to_toml(&report)?;
    print!("{text}");
    if let Some(out) = out {
        parent_dir(out)?;
        emit(&mut manifest, out, |b| {
            b.extend_from_slice(text.as_bytes());
            Ok(())
        })?;
        manifest.finish(&sidecar(out, "manifest.toml"))?;
    }
    Ok(())
}

fn fit_physics(
    cfg: &RunConfig,
    catalog: &Path,
    parents: Option<&Path>,
    out: Option<&Path>,
    mut manifest: ManifestBuilder,
) -> CliResult<()> {
    manifest.input(catalog);
    let cat = read_normalized(catalog, cfg)?;
    let beside = sidecar(catalog, "parents.csv");
    let parents = parents
        .map(Path::to_path_buf)
        .or_else(|| beside.is_file().then_some(beside));
    let (clusters, attribution) = match parents {
        Some(path) => {
            log::info!("attributing aftershocks from {}", path.display());
            manifest.input(&path);
            let file = std::fs::File::open(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            (parentage_clusters(&cat, file)?, Attribution::Parentage)
        }
        None => (
            nearest_neighbour_clusters(&cat, &cfg.labels),
            Attribution::NearestNeighbour,
        ),
    };
    let report = physics_report(&cat, &clusters, attribution, cfg.labels.sequence_window)?;
    let text = to_toml(&report)?;
    print!("{text}");
    if let Some(out) = out {
        parent_dir(out)?;
        emit(&mut manifest, out, |b| {
            b.extend_from_slice(text.as_bytes());
            Ok(())
        })?;
        manifest.finish(&sidecar(out, "manifest.toml"))?;
    }
    Ok(())
}

type RocTask = (&'static str, fn(&SampleOutput) -> f64, fn(&Sample) -> bool);

fn export_roc(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: &Path,
    mut manifest: ManifestBuilder,
) -> CliResult<()> {
    manifest.input(checkpoint);
    manifest.input(data);
    let s = score(checkpoint, data, split)?;
    create_dir(out)?;
    let tasks: [RocTask; 3] = [
        ("aftershock", |o| o.p_aftershock, |s| s.label_aftershock),
        ("tsunami", |o| o.p_tsunami, |s| s.label_tsunami),
        ("foreshock", |o| o.p_foreshock, |s| s.label_foreshock),
    ];
    for (name, score_of, label_of) in tasks {
        let scores: Vec<f64> = s.outputs.iter().map(score_of).collect();
        let labels: Vec<bool> = s
            .indices
            .iter()
            .map(|&i| label_of(&s.dataset.samples[i].sample))
            .collect();
        match roc_auc(&scores, &labels) {
            Ok(roc) => {
                emit(&mut manifest, &out.join(format!("roc_{name}.csv")), |b| {
                    write_roc(&roc, b)
                })?;
                println!("{name}: AUC {:.4} over {} samples", roc.auc, scores.len());
            }
            Err(Error::Estimation(msg)) => log::warn!("{name}: no ROC curve ({msg})"),
            Err(e) => return Err(e.into()),
        }
    }
    manifest.finish(&out.join("manifest.toml"))?;
    Ok(())
}

/// Column groups of the exported history tables.
pub const HISTORY_TABLES: [(&str, &[&str]); 3] = [
    (
        "losses.csv",
        &[
            "epoch",
            "stage",
            "stage_epoch",
            "lr",
            "task_aftershock",
            "task_tsunami",
            "task_foreshock",
            "gr",
            "omori",
            "bath",
            "contrastive",
            "energy_reg",
            "total",
            "batch_loss",
        ],
    ),
    ("physics.csv", &["epoch", "stage", "b", "p", "c", "delta_m"]),
    (
        "validation.csv",
        &[
            "epoch",
            "stage",
            "val_auc_aftershock",
            "val_auc_tsunami",
            "val_auc_foreshock",
            "val_f1_aftershock",
            "val_f1_tsunami",
            "val_f1_foreshock",
            "val_precision_tsunami",
            "val_recall_tsunami",
            "threshold",
        ],
    ),
];

fn export_history(history: &Path, out: &Path, mut manifest: ManifestBuilder) -> CliResult<()> {
    let path: PathBuf = if history.is_dir() {
        history.join("history.csv")
    } else {
        history.to_path_buf()
    };
    manifest.input(&path);
    let parse = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.clone(),
            source,
        },
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    })?;
    let header = rdr.headers().map_err(parse)?.clone();
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>().map_err(parse)?;
    create_dir(out)?;
    for (name, columns) in HISTORY_TABLES {
        let idx = columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == *c)
                    .ok_or_else(|| Error::Schema {
                        column: (*c).to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        emit(&mut manifest, &out.join(name), |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(columns).map_err(parse)?;
            for row in &rows {
                w.write_record(idx.iter().map(|&i| row.get(i).unwrap_or("")))
                    .map_err(parse)?;
            }
            w.flush().map_err(|e| Error::Parse(e.to_string()))
        })?;
    }
    println!("{} epochs exported", rows.len());
    manifest.finish(&out.join("manifest.toml"))?;
    Ok(())
}
