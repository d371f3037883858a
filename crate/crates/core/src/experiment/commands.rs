use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifact::{prepare_output, write_file, write_json, Manifest};
use super::config::ExperimentConfig;
use crate::checkpoint::{save_model, Trajectory};
use crate::data::{normalize, split, Dataset, Partition, PreparedData};
use crate::error::{Error, Result};
use crate::hpo::{apply_params, run_study, ModelRunner, RandomSampler, StudyResult};
use crate::landscape::{grid_2d, interpolate_1d, pca_directions, write_points_csv, Evaluator};
use crate::metrics::{
    evaluate, kendall_tau, rank_vs_baseline, CellMetrics, Metrics, MetricsReport, RankTable, ResultEntry,
};
use crate::noise::{init_model, train, TrainRun};
use crate::ood::{calibrate_scaling, generate, Calibration, CorruptionSet};

#[derive(Clone, Debug)]
pub struct OutputOptions {
    pub out: PathBuf,
    pub force: bool,
}

/// Summary returned by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Corruption settings recorded next to a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRecord {
    pub scaling_factor: f64,
    pub seed: u64,
    pub calibrated: bool,
}

pub struct Loaded {
    pub dataset: Dataset,
    pub data: PreparedData,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Loaded> {
    let dataset = cfg.load_dataset()?;
    let data = normalize(&dataset, &split(dataset.len(), cfg.split_seed)?)?;
    Ok(Loaded { dataset, data })
}

/// Scaling factor from the config, or calibrated on the prepared split.
pub fn resolve_scaling(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(OodRecord, Option<Calibration>)> {
    match cfg.ood.scaling_factor {
        Some(s) => Ok((
            OodRecord {
                scaling_factor: s,
                seed: cfg.ood.seed,
                calibrated: false,
            },
            None,
        )),
        None => {
            let cal = calibrate_scaling(&data.train, &data.test, cfg.ood.seed)?;
            Ok((
                OodRecord {
                    scaling_factor: cal.scaling_factor,
                    seed: cfg.ood.seed,
                    calibrated: true,
                },
                Some(cal),
            ))
        }
    }
}

/// Corrupted test partitions named `family/severity`.
pub fn ood_partitions(set: &CorruptionSet, test: &Partition) -> Result<Vec<(String, Partition)>> {
    set.cells
        .iter()
        .map(|c| {
            Ok((
                format!("{}/{}", c.family.name(), c.severity),
                Partition::new(c.features.clone(), test.targets.clone())?,
            ))
        })
        .collect()
}

fn report(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    run: &TrainRun,
    seed: u64,
    ood: &[(String, Partition)],
) -> Result<MetricsReport> {
    let m = &run.model;
    let cells = ood
        .iter()
        .map(|(name, p)| {
            let (family, severity) = name.split_once('/').expect("family/severity");
            Ok(CellMetrics {
                family: family.to_string(),
                severity: severity.parse().expect("numeric severity"),
                metrics: evaluate(m, &p.features, &p.targets)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport {
        dataset: data.name.clone(),
        method: cfg.method_name(),
        seed,
        task: data.task,
        val: evaluate(m, &data.val.features, &data.val.targets)?,
        test: evaluate(m, &data.test.features, &data.test.targets)?,
        ood: Vec::new(),
        ood_mean: None,
    }
    .with_ood(cells)
}

fn history_log(run: &TrainRun) -> String {
    let mut s = String::new();
    for r in &run.history {
        s.push_str(&format!(
            "epoch {} lr {:.6e} train_loss {:.6e}{}{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val.map(|m| format!(" val_nll {:.6e}", m.nll)).unwrap_or_default(),
            if r.model_noise { " model_noise" } else { "" }
        ));
    }
    s
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Trains every configured seed and writes checkpoints, histories and
/// metrics reports.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &OutputOptions) -> Result<RunArtifact> {
    cfg.validate()?;
    prepare_output(&opts.out, opts.force)?;
    let Loaded { dataset, data } = load_data(cfg)?;
    let mut files = Vec::new();

    let ood = if cfg.ood.enabled {
        let (record, _) = resolve_scaling(cfg, &data)?;
        let set = generate(&dataset.name, &data.test.features, record.scaling_factor, record.seed)?;
        files.push(write_json(&opts.out, "ood.json", &record)?);
        ood_partitions(&set, &data.test)?
    } else {
        Vec::new()
    };

    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let model = init_model(data.train.features.cols(), &cfg.hidden, data.task, seed)?;
            let run = train(model, &data, &cfg.train_config(data.task, seed))?;
            let rep = report(cfg, &data, &run, seed, &ood)?;
            Ok((seed, run, rep))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for (seed, run, rep) in runs {
        let dir = seed_dir(seed);
        std::fs::create_dir_all(opts.out.join(&dir)).map_err(|e| Error::io(format!("creating {dir}"), e))?;
        let model_path = format!("{dir}/model.nbck");
        save_model(&opts.out.join(&model_path), &run.model)?;
        files.push(model_path);
        if cfg.train.snapshot_every_epoch {
            let path = format!("{dir}/trajectory.nbck");
            Trajectory::new(
                run.model.task(),
                run.model.manifest(),
                run.initial.clone(),
                run.snapshots.clone(),
            )?
            .save(&opts.out.join(&path))?;
            files.push(path);
        }
        files.push(write_json(&opts.out, &format!("{dir}/history.json"), &run.history)?);
        files.push(write_file(
            &opts.out,
            &format!("{dir}/train.log"),
            history_log(&run).as_bytes(),
        )?);
        reports.push(rep);
    }
    files.push(write_json(&opts.out, "reports.json", &reports)?);
    let mut csv = Vec::new();
    MetricsReport::write_csv(&reports, &mut csv)?;
    files.push(write_file(&opts.out, "metrics.csv", &csv)?);
    finish(cfg, "train", &opts.out, files)
}

fn finish(cfg: &ExperimentConfig, command: &str, out: &Path, mut files: Vec<String>) -> Result<RunArtifact> {
    files.push(write_json(out, "config.json", cfg)?);
    let manifest = Manifest::build(command, cfg.hash()?, out, files)?;
    write_json(out, "manifest.json", &manifest)?;
    Ok(RunArtifact {
        dir: out.to_path_buf(),
        manifest,
    })
}

pub const STUDY_FILE: &str = "study.json";

/// Runs a hyperparameter study and writes the study record plus a config
/// with the best values applied. With `resume`, finished trials recorded in
/// an existing study file are reused.
pub fn cmd_hpo(cfg: &ExperimentConfig, opts: &OutputOptions, resume: bool) -> Result<(RunArtifact, StudyResult)> {
    cfg.validate()?;
    let study_path = opts.out.join(STUDY_FILE);
    let previous: Option<StudyResult> = if resume && study_path.exists() {
        let text = std::fs::read_to_string(&study_path).map_err(|e| Error::io("reading study", e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        prepare_output(&opts.out, opts.force)?;
        None
    };
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io("creating output directory", e))?;
    let Loaded { data, .. } = load_data(cfg)?;
    let base = cfg.train_config(data.task, cfg.hpo.seed);
    let runner = ModelRunner {
        data: &data,
        hidden: cfg.hidden.clone(),
        base: base.clone(),
    };
    let space = cfg.search_space(data.task);
    let out = opts.out.clone();
    let mut save = |r: &StudyResult| write_json(&out, STUDY_FILE, r).map(|_| ());
    let study = run_study(
        &runner,
        &space,
        &cfg.study_config(),
        &RandomSampler,
        previous.as_ref(),
        &mut save,
    )?;
    let mut files = vec![STUDY_FILE.to_string()];
    if let Some(best) = &study.best_params {
        let tuned = cfg.with_train_config(&apply_params(&base, best)?);
        files.push(write_json(&opts.out, "best_config.json", &tuned)?);
    }
    let artifact = finish(cfg, "hpo", &opts.out, files)?;
    Ok((artifact, study))
}

/// Calibrates (unless a factor is configured) and writes the 25 corrupted
/// copies of the test split.
pub fn cmd_ood(cfg: &ExperimentConfig, opts: &OutputOptions) -> Result<RunArtifact> {
    cfg.validate()?;
    prepare_output(&opts.out, opts.force)?;
    let Loaded { dataset, data } = load_data(cfg)?;
    let (record, calibration) = resolve_scaling(cfg, &data)?;
    let set = generate(&dataset.name, &data.test.features, record.scaling_factor, record.seed)?;
    let manifest = set.write_dir(&opts.out, &dataset.feature_names)?;
    let mut files: Vec<String> = manifest.cells.iter().map(|c| c.file.clone()).collect();
    files.push("corruptions.json".into());
    if let Some(cal) = calibration {
        files.push(write_json(&opts.out, "calibration.json", &cal)?);
    }
    files.push(write_json(&opts.out, "ood.json", &record)?);
    finish(cfg, "ood", &opts.out, files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallRow {
    pub metric: String,
    pub methods: usize,
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOutput {
    pub table: RankTable,
    pub kendall: Vec<KendallRow>,
}

/// Seed-averaged test and corrupted-test metrics per (dataset, method) as
/// rank entries. Metric names are `{task}/{id|ood}_{metric}`.
pub fn rank_entries(reports: &[MetricsReport]) -> Result<Vec<ResultEntry>> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.dataset.clone(), r.method.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((dataset, method), rs) in groups {
        let task = rs[0].task;
        if rs.iter().any(|r| r.task != task) {
            return Err(Error::Validation(format!("{dataset}/{method} mixes tasks")));
        }
        let id = Metrics::mean(&rs.iter().map(|r| r.test).collect::<Vec<_>>())?;
        let ood: Option<Vec<Metrics>> = rs.iter().map(|r| r.ood_mean).collect();
        let ood = ood.map(|v| Metrics::mean(&v)).transpose()?;
        for &name in Metrics::names(task) {
            for (split, m) in [("id", Some(id)), ("ood", ood)] {
                if let Some(value) = m.and_then(|m| m.get(name)) {
                    out.push(ResultEntry {
                        dataset: dataset.clone(),
                        metric: format!("{}/{split}_{name}", task.name()),
                        method: method.clone(),
                        value,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Kendall tau between mean ID ranks and mean OOD ranks for each metric.
pub fn kendall_rows(table: &RankTable) -> Vec<KendallRow> {
    let mut by_metric: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for a in &table.averages {
        by_metric
            .entry(a.metric.clone())
            .or_default()
            .insert(a.method.clone(), a.mean_rank);
    }
    let mut out = Vec::new();
    for (metric, id) in &by_metric {
        let Some(ood_metric) = metric.contains("/id_").then(|| metric.replacen("/id_", "/ood_", 1)) else {
            continue;
        };
        let Some(ood) = by_metric.get(&ood_metric) else {
            continue;
        };
        let methods: Vec<&String> = id.keys().filter(|m| ood.contains_key(*m)).collect();
        let a: Vec<f64> = methods.iter().map(|m| id[*m]).collect();
        let b: Vec<f64> = methods.iter().map(|m| ood[*m]).collect();
        out.push(KendallRow {
            metric: metric.replacen("/id_", "/", 1),
            methods: methods.len(),
            tau: kendall_tau(&a, &b).ok(),
        });
    }
    out
}

/// Reads `reports.json` files matched by the glob patterns and writes rank
/// tables against `baseline`.
pub fn cmd_rank(patterns: &[String], baseline: &str, opts: &OutputOptions) -> Result<RankOutput> {
    let mut paths = Vec::new();
    for p in patterns {
        let matches = glob::glob(p).map_err(|e| Error::Usage(format!("bad glob `{p}`: {e}")))?;
        for m in matches {
            paths.push(m.map_err(|e| Error::io("expanding glob", e.into()))?);
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return Err(Error::Usage("no result files matched".into()));
    }
    let mut reports = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let rs: Vec<MetricsReport> = serde_json::from_str(&text)?;
        reports.extend(rs);
    }
    let entries = rank_entries(&reports)?;
    let table = rank_vs_baseline(&entries, baseline, true)?;
    let kendall = kendall_rows(&table);
    prepare_output(&opts.out, opts.force)?;
    let mut rows = Vec::new();
    table.write_rows_csv(&mut rows)?;
    let mut avgs = Vec::new();
    table.write_averages_csv(&mut avgs)?;
    let mut kcsv = csv::Writer::from_writer(Vec::new());
    kcsv.write_record(["metric", "methods", "tau"])?;
    for k in &kendall {
        kcsv.write_record([
            k.metric.clone(),
            k.methods.to_string(),
            k.tau.map(|t| format!("{t}")).unwrap_or_default(),
        ])?;
    }
    let kbytes = kcsv
        .into_inner()
        .map_err(|e| Error::io("writing kendall CSV", e.into_error()))?;
    let files = vec![
        write_file(&opts.out, "rank_rows.csv", &rows)?,
        write_file(&opts.out, "rank_averages.csv", &avgs)?,
        write_file(&opts.out, "kendall.csv", &kbytes)?,
    ];
    let inputs: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let hash = super::config::sha256_hex(&serde_json::to_vec(&(baseline, &inputs))?);
    let manifest = Manifest::build("rank", hash, &opts.out, files)?;
    write_json(&opts.out, "manifest.json", &manifest)?;
    Ok(RankOutput { table, kendall })
}

/// Loads a training artifact's resolved config.
pub fn load_run_config(run: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(run.join("config.json"))
        .map_err(|e| Error::io(format!("reading {}/config.json", run.display()), e))?;
    ExperimentConfig::from_json_str(&text)
}

/// 1-D interpolation and 2-D PCA grids around one seed of a training run.
pub fn cmd_landscape(run: &Path, seed: Option<u64>, opts: &OutputOptions) -> Result<RunArtifact> {
    let cfg = load_run_config(run)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let traj_path = run.join(seed_dir(seed)).join("trajectory.nbck");
    if !traj_path.exists() {
        return Err(Error::InsufficientData(format!(
            "{} has no per-epoch snapshots (train with snapshot_every_epoch)",
            run.join(seed_dir(seed)).display()
        )));
    }
    let trajectory = Trajectory::load(&traj_path)?;
    prepare_output(&opts.out, opts.force)?;
    let Loaded { dataset, data } = load_data(&cfg)?;
    let ood_record: Option<OodRecord> = match std::fs::read_to_string(run.join("ood.json")) {
        Ok(t) => Some(serde_json::from_str(&t)?),
        Err(_) => None,
    };
    let ood = match &ood_record {
        Some(r) => ood_partitions(
            &generate(&dataset.name, &data.test.features, r.scaling_factor, r.seed)?,
            &data.test,
        )?,
        None => Vec::new(),
    };
    let evaluator = Evaluator {
        task: trajectory.task,
        manifest: &trajectory.manifest,
        id: &data.test,
        ood,
    };
    let final_params = trajectory.final_params().to_vec();
    let line = interpolate_1d(&final_params, &trajectory.initial, &evaluator, cfg.landscape.points_1d)?;
    let pca = pca_directions(&trajectory)?;
    let grid = grid_2d(&final_params, &pca, &evaluator, &cfg.landscape.grid())?;

    let mut files = Vec::new();
    let mut buf = Vec::new();
    write_points_csv(&line, &mut buf)?;
    files.push(write_file(&opts.out, "landscape_1d.csv", &buf)?);
    buf.clear();
    write_points_csv(&grid, &mut buf)?;
    files.push(write_file(&opts.out, "landscape_2d.csv", &buf)?);
    let mut proj = csv::Writer::from_writer(Vec::new());
    proj.write_record(["epoch", "alpha", "beta"])?;
    for (e, (a, b)) in pca.projections.iter().enumerate() {
        proj.write_record([e.to_string(), format!("{a}"), format!("{b}")])?;
    }
    let proj = proj
        .into_inner()
        .map_err(|e| Error::io("writing projections", e.into_error()))?;
    files.push(write_file(&opts.out, "trajectory_projection.csv", &proj)?);
    files.push(write_json(&opts.out, "singular_values.json", &pca.singular_values)?);
    let hash = super::config::sha256_hex(&serde_json::to_vec(&(cfg.hash()?, seed))?);
    let manifest = Manifest::build("landscape", hash, &opts.out, files)?;
    write_json(&opts.out, "manifest.json", &manifest)?;
    Ok(RunArtifact {
        dir: opts.out.clone(),
        manifest,
    })
}
