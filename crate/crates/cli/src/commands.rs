//! Command implementations. Each command is a pure function of its config
//! (plus the artifacts it references), so reruns with identical inputs
//! produce identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use glioma25d::atlas::{build_atlas, Atlas};
use glioma25d::cohort::{
    cohort_labels, generate_case, load_case, read_manifest, split_cohort, CaseRecord,
    CohortWriter, Manifest, ManifestCase, Split, SplitAssignment, Task,
};
use glioma25d::error::{CoreError, Result};
use glioma25d::eval::BootstrapConfig;
use glioma25d::infer::{
    aggregate_views_with, planar_final, predict_plane, read_predictions_csv, tally_plane,
    write_predictions_csv, PlanarPrediction, PredictionRow,
};
use glioma25d::net::model::{load_checkpoint, save_checkpoint, Model};
use glioma25d::net::FusionMode;
use glioma25d::plots;
use glioma25d::preprocess::{
    extract_location_features, normalize_intensities, phantom_brain_mask, standardize_priors,
    FeatureStats, PriorFeatures,
};
use glioma25d::report::{
    ablation_table, compare_runs, evaluate_predictions, summary_text, write_ablation_csv,
    write_comparison_csv, Evaluation,
};
use glioma25d::rng::derive_seed;
use glioma25d::slicing::{assemble_training_samples, TrainingSample};
use glioma25d::survival::{compare_groups, who2016_subtype};
use glioma25d::train::{
    class_weights_from, random_search, stratified_folds, two_stage_train, write_search_table,
    EpochRecord, SearchSpace,
};
use glioma25d::volume::Plane;

use crate::config::{save_json, ExperimentConfig, GenerateConfig, View};

/// Generates a phantom cohort on disk and returns its manifest.
pub fn cmd_generate(cfg: &GenerateConfig) -> Result<Manifest> {
    cfg.validate()?;
    let labels = cohort_labels(&cfg.fractions, cfg.n_cases)?;
    let mut writer = CohortWriter::new(&cfg.output_dir)?;
    // stream cases so a large cohort never sits in memory whole
    for (i, &l) in labels.iter().enumerate() {
        let case = generate_case(
            &cfg.spec,
            l,
            derive_seed(cfg.seed, "case", i as u64),
            &format!("case{i:04}"),
        )?;
        writer.add_case(&case)?;
        log::info!("generated {}/{}", i + 1, labels.len());
    }
    let manifest = writer.finish()?;
    save_json(&cfg.output_dir.join("generate_config.json"), cfg)?;
    Ok(manifest)
}

/// Normalizes every volume of a cohort into a new cohort directory.
pub fn cmd_preprocess(input_dir: &Path, output_dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(&input_dir.join("manifest.json"))?;
    let mut writer = CohortWriter::new(output_dir)?;
    for entry in &manifest.cases {
        let mut case = load_case(input_dir, entry)?;
        let shape = case.mask.shape();
        let brain = phantom_brain_mask(shape);
        for vol in case.modalities.values_mut() {
            *vol = normalize_intensities(vol, &brain)?;
        }
        writer.add_case(&case)?;
    }
    writer.finish()
}

fn run_config_path(run_dir: &Path) -> PathBuf {
    run_dir.join("config.json")
}

pub fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = crate::config::load_json(&run_config_path(run_dir))?;
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(run_dir: &Path, plane: Plane) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{}.json", plane.name()))
}

/// Case priors (standardized age + location probabilities) for one case.
fn case_priors(case: &CaseRecord, atlas: &Atlas, stats: &FeatureStats) -> Result<PriorFeatures> {
    let loc = extract_location_features(&case.mask, atlas)?;
    standardize_priors(case.meta.age_years, loc, stats)
}

struct TrainData {
    /// Per-plane training samples, indexed like `View::MultiView.planes()`.
    by_plane: [Vec<TrainingSample>; 3],
    /// One class label per training case.
    case_classes: Vec<usize>,
    stats: FeatureStats,
}

/// Streams the train-split cases into per-plane sample sets.
fn assemble_train_data(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    split: &SplitAssignment,
) -> Result<TrainData> {
    let train_idx = split.indices(Split::Train);
    let ages: Vec<f64> =
        train_idx.iter().map(|&i| manifest.cases[i].meta.age_years).collect();
    let stats = FeatureStats::fit(&ages)?;
    let mut by_plane: [Vec<TrainingSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut case_classes = Vec::with_capacity(train_idx.len());
    let mut atlas: Option<Atlas> = None;
    for &i in &train_idx {
        let case = load_case(&cfg.cohort_dir, &manifest.cases[i])?;
        let atlas = match &mut atlas {
            Some(a) => a,
            None => atlas.insert(build_atlas(case.mask.shape())?),
        };
        let priors = case_priors(&case, atlas, &stats)?;
        case_classes.push(cfg.task.class_of(&case.meta).ok_or_else(|| {
            CoreError::Stratification(format!(
                "case {} lacks the {} label",
                case.meta.case_id,
                cfg.task.name()
            ))
        })?);
        for (p, plane) in Plane::ALL.iter().enumerate() {
            by_plane[p].extend(assemble_training_samples(&case, *plane, cfg.task, priors)?);
        }
    }
    Ok(TrainData { by_plane, case_classes, stats })
}

fn plane_slot(plane: Plane) -> usize {
    match plane {
        Plane::Axial => 0,
        Plane::Coronal => 1,
        Plane::Sagittal => 2,
    }
}

/// Trains one model per view plane and returns its epoch history.
fn train_planes(
    cfg: &ExperimentConfig,
    data: &TrainData,
    run_dir: &Path,
    save: bool,
) -> Result<Vec<(Plane, Vec<EpochRecord>)>> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.class_weights = class_weights_from(&data.case_classes)?;
    let mut histories = Vec::new();
    for &plane in cfg.view.planes() {
        let slot = plane_slot(plane);
        let mut model = Model::build(
            model_cfg.clone(),
            cfg.fusion,
            derive_seed(cfg.seed, "plane-model", slot as u64),
        )?;
        let history = two_stage_train(
            &mut model,
            &data.by_plane[slot],
            &cfg.schedule,
            derive_seed(cfg.seed, "plane-train", slot as u64),
        )?;
        if save {
            save_checkpoint(&checkpoint_path(run_dir, plane), &mut model, cfg.task, data.stats)?;
        }
        log::info!("trained {} model ({} samples)", plane.name(), data.by_plane[slot].len());
        histories.push((plane, history));
    }
    Ok(histories)
}

fn write_history(path: &Path, histories: &[(Plane, Vec<EpochRecord>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot write history: {e}")))?;
    w.write_record([
        "plane", "epoch", "stage", "rpn_objectness", "rpn_box", "head_class", "head_box",
        "head_mask", "total", "max_clip_norm",
    ])
    .map_err(|e| CoreError::Data(e.to_string()))?;
    for (plane, history) in histories {
        for r in history {
            let l = &r.mean_loss;
            w.write_record([
                plane.name().to_string(),
                r.epoch.to_string(),
                r.stage.to_string(),
                format!("{:.6}", l.rpn_objectness),
                format!("{:.6}", l.rpn_box),
                format!("{:.6}", l.head_class),
                format!("{:.6}", l.head_box),
                format!("{:.6}", l.head_mask),
                format!("{:.6}", l.total),
                format!("{:.6}", r.max_clip_norm),
            ])
            .map_err(|e| CoreError::Data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    Ok(())
}

/// Mean held-out AUROC of a hyperparameter setting, one value per fold.
/// Folds are over training cases; each fold trains the view's planes on the
/// remaining cases and scores the held-out ones.
fn cv_fold_aucs(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    split: &SplitAssignment,
    data: &TrainData,
    folds: &[usize],
) -> Result<Vec<f64>> {
    let train_idx = split.indices(Split::Train);
    let k = *folds.iter().max().unwrap() + 1;
    let mut aucs = Vec::with_capacity(k);
    for fold in 0..k {
        let keep: Vec<usize> =
            (0..train_idx.len()).filter(|&c| folds[c] != fold).collect();
        let held: Vec<usize> =
            (0..train_idx.len()).filter(|&c| folds[c] == fold).collect();
        // samples are reassembled per fold so held-out cases never leak
        let mut by_plane: [Vec<TrainingSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut atlas: Option<Atlas> = None;
        for &c in &keep {
            let case = load_case(&cfg.cohort_dir, &manifest.cases[train_idx[c]])?;
            let atlas = match &mut atlas {
                Some(a) => a,
                None => atlas.insert(build_atlas(case.mask.shape())?),
            };
            let priors = case_priors(&case, atlas, &data.stats)?;
            for &plane in cfg.view.planes() {
                by_plane[plane_slot(plane)]
                    .extend(assemble_training_samples(&case, plane, cfg.task, priors)?);
            }
        }
        let fold_data = TrainData {
            by_plane,
            case_classes: keep.iter().map(|&c| data.case_classes[c]).collect(),
            stats: data.stats,
        };
        let mut models: Vec<(Plane, Model)> = Vec::new();
        {
            let mut model_cfg = cfg.model.clone();
            model_cfg.class_weights = class_weights_from(&fold_data.case_classes)?;
            for &plane in cfg.view.planes() {
                let slot = plane_slot(plane);
                let mut model = Model::build(
                    model_cfg.clone(),
                    cfg.fusion,
                    derive_seed(cfg.seed, "cv-model", (fold * 3 + slot) as u64),
                )?;
                two_stage_train(
                    &mut model,
                    &fold_data.by_plane[slot],
                    &cfg.schedule,
                    derive_seed(cfg.seed, "cv-train", (fold * 3 + slot) as u64),
                )?;
                models.push((plane, model));
            }
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut atlas: Option<Atlas> = None;
        for &c in &held {
            let case = load_case(&cfg.cohort_dir, &manifest.cases[train_idx[c]])?;
            let atlas = match &mut atlas {
                Some(a) => a,
                None => atlas.insert(build_atlas(case.mask.shape())?),
            };
            let priors = case_priors(&case, atlas, &data.stats)?;
            let fp = predict_case(&mut models, cfg.view, &case, cfg.task, &priors, cfg.bg_score)?.1;
            scores.push(fp.score);
            labels.push(data.case_classes[c]);
        }
        let (_, auc) = glioma25d::eval::roc_auc(&scores, &labels)?;
        aucs.push(auc);
    }
    Ok(aucs)
}

/// Runs one case through the view's models and aggregates.
fn predict_case(
    models: &mut [(Plane, Model)],
    view: View,
    case: &CaseRecord,
    task: Task,
    priors: &PriorFeatures,
    bg_score: f64,
) -> Result<([PlanarPrediction; 3], glioma25d::infer::FinalPrediction)> {
    let mut planes: [PlanarPrediction; 3] = [
        tally_plane(Plane::Axial, &[]),
        tally_plane(Plane::Coronal, &[]),
        tally_plane(Plane::Sagittal, &[]),
    ];
    for (plane, model) in models.iter_mut() {
        planes[plane_slot(*plane)] = predict_plane(model, case, *plane, task, priors)?;
    }
    let fp = match view {
        View::MultiView => aggregate_views_with(&planes, bg_score),
        _ => planar_final(&planes[plane_slot(view.planes()[0])], bg_score),
    };
    Ok((planes, fp))
}

/// Full training command: split, optional hyperparameter search, train the
/// view's planar models, persist checkpoints and history.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.clone();
    fs::create_dir_all(run_dir.join("checkpoints"))
        .map_err(|e| CoreError::io(run_dir.display().to_string(), e))?;
    let manifest = read_manifest(&cfg.cohort_dir.join("manifest.json"))?;
    let metas: Vec<_> = manifest.cases.iter().map(|c| c.meta.clone()).collect();
    let split = split_cohort(&metas, cfg.split_fractions, cfg.task, derive_seed(cfg.seed, "split", 0))?;
    save_json(&run_config_path(&run_dir), cfg)?;
    save_json(&run_dir.join("folds.json"), &split)?;
    let data = assemble_train_data(cfg, &manifest, &split)?;

    let mut tuned = cfg.clone();
    if cfg.search_budget > 0 {
        let folds = stratified_folds(&data.case_classes, cfg.cv_folds, derive_seed(cfg.seed, "cv-folds", 0))?;
        let space = SearchSpace::default();
        let (best, table) = random_search(
            &space,
            cfg.search_budget,
            derive_seed(cfg.seed, "search", 0),
            |hp| {
                let mut trial = cfg.clone();
                trial.schedule.learning_rate = hp.learning_rate;
                trial.model.fusion_hidden = hp.fusion_hidden;
                trial.model.score_threshold = hp.score_threshold;
                cv_fold_aucs(&trial, &manifest, &split, &data, &folds)
            },
        )?;
        write_search_table(&run_dir.join("search_table.csv"), &table)?;
        tuned.schedule.learning_rate = best.learning_rate;
        tuned.model.fusion_hidden = best.fusion_hidden;
        tuned.model.score_threshold = best.score_threshold;
        save_json(&run_dir.join("selected_params.json"), &best)?;
    }

    // final models are retrained on the full training split
    let histories = train_planes(&tuned, &data, &run_dir, true)?;
    write_history(&run_dir.join("history.csv"), &histories)?;
    Ok(())
}

/// Runs inference on one split and writes `predictions_<split>.csv`.
pub fn cmd_predict(run_dir: &Path, split: Split) -> Result<PathBuf> {
    let cfg = load_run_config(run_dir)?;
    let manifest = read_manifest(&cfg.cohort_dir.join("manifest.json"))?;
    let assignment: SplitAssignment = crate::config::load_json(&run_dir.join("folds.json"))?;
    let mut models = Vec::new();
    let mut stats = None;
    for &plane in cfg.view.planes() {
        let path = checkpoint_path(run_dir, plane);
        if !path.exists() {
            return Err(CoreError::Data(format!(
                "missing checkpoint {} — run `train` first",
                path.display()
            )));
        }
        let (model, ckpt) = load_checkpoint(&path)?;
        if ckpt.task != cfg.task {
            return Err(CoreError::Config(format!(
                "checkpoint {} was trained for task {}",
                path.display(),
                ckpt.task.name()
            )));
        }
        stats = Some(ckpt.feature_stats);
        models.push((plane, model));
    }
    let stats = stats.expect("view has at least one plane");
    let mut rows = Vec::new();
    let mut atlas: Option<Atlas> = None;
    for &i in &assignment.indices(split) {
        let case = load_case(&cfg.cohort_dir, &manifest.cases[i])?;
        let atlas = match &mut atlas {
            Some(a) => a,
            None => atlas.insert(build_atlas(case.mask.shape())?),
        };
        let priors = case_priors(&case, atlas, &stats)?;
        let (planes, fp) =
            predict_case(&mut models, cfg.view, &case, cfg.task, &priors, cfg.bg_score)?;
        let truth = cfg.task.class_of(&case.meta);
        rows.push(PredictionRow::new(&case.meta.case_id, cfg.task, &planes, &fp, truth));
    }
    let path = run_dir.join(format!("predictions_{}.csv", split.name()));
    write_predictions_csv(&path, &rows)?;
    Ok(path)
}

/// Metrics, confusion table, curves, and a text summary for one split.
/// Deterministic: identical inputs give byte-identical outputs.
pub fn cmd_evaluate(run_dir: &Path, split: Split) -> Result<Evaluation> {
    let cfg = load_run_config(run_dir)?;
    let rows = read_predictions_csv(&run_dir.join(format!("predictions_{}.csv", split.name())))?;
    let bootstrap = BootstrapConfig {
        n_resamples: cfg.bootstrap_resamples,
        seed: derive_seed(cfg.seed, "bootstrap", 0),
        wide: false,
    };
    let eval = evaluate_predictions(&rows, bootstrap)?;
    save_json(&run_dir.join(format!("metrics_{}.json", split.name())), &eval)?;
    write_confusion_csv(&run_dir.join(format!("confusion_{}.csv", split.name())), &eval.confusion)?;
    plots::roc_plot(&run_dir.join(format!("roc_{}.svg", split.name())), &eval.roc_points, eval.report.auroc)?;
    plots::pr_plot(&run_dir.join(format!("pr_{}.svg", split.name())), &eval.pr_points, eval.report.auprc)?;
    plots::confusion_plot(&run_dir.join(format!("confusion_{}.svg", split.name())), &eval.confusion)?;
    let text = summary_text(cfg.task.name(), &[(split.name().to_string(), eval.report.clone())]);
    let summary_path = run_dir.join(format!("summary_{}.txt", split.name()));
    fs::write(&summary_path, text)
        .map_err(|e| CoreError::io(summary_path.display().to_string(), e))?;
    Ok(eval)
}

fn write_confusion_csv(path: &Path, m: &[[usize; 3]; 2]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot write confusion: {e}")))?;
    w.write_record(["truth", "pred_class0", "pred_class1", "pred_BG"])
        .map_err(|e| CoreError::Data(e.to_string()))?;
    for (t, row) in m.iter().enumerate() {
        w.write_record([
            format!("class{t}"),
            row[0].to_string(),
            row[1].to_string(),
            row[2].to_string(),
        ])
        .map_err(|e| CoreError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    Ok(())
}

/// Paired statistical comparison of two runs' predictions on a split.
pub fn cmd_compare(run_a: &Path, run_b: &Path, split: Split, out: &Path) -> Result<()> {
    let name = format!("predictions_{}.csv", split.name());
    let a = read_predictions_csv(&run_a.join(&name))?;
    let b = read_predictions_csv(&run_b.join(&name))?;
    let rows = compare_runs(&a, &b)?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out.display().to_string(), e))?;
    write_comparison_csv(&out.join("comparison.csv"), &rows)?;
    let mut text = format!("{} vs {} ({})\n", run_a.display(), run_b.display(), split.name());
    for r in &rows {
        text.push_str(&format!(
            "  {}: {:.3} vs {:.3} (diff {:+.3}), {} p = {:.4}{}\n",
            r.metric,
            r.value_a,
            r.value_b,
            r.difference,
            r.method,
            r.p_value,
            if r.degenerate { " [degenerate]" } else { "" },
        ));
    }
    let txt_path = out.join("comparison.txt");
    fs::write(&txt_path, text).map_err(|e| CoreError::io(txt_path.display().to_string(), e))?;
    Ok(())
}

/// Which axis an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// The four fusion schemes at a fixed view.
    Fusion,
    /// The three planes plus the multi-view ensemble at a fixed fusion.
    View,
}

/// Runs the ablation grid: one sub-run per scheme (reused if its predictions
/// already exist), then a table comparing every scheme to the proposed one.
pub fn cmd_ablate(
    base: &ExperimentConfig,
    axis: AblationAxis,
    proposed: &str,
    splits: &[Split],
) -> Result<Vec<PathBuf>> {
    base.validate()?;
    let schemes: Vec<(String, ExperimentConfig)> = match axis {
        AblationAxis::Fusion => FusionMode::ALL
            .iter()
            .map(|&f| {
                let mut c = base.clone();
                c.fusion = f;
                c.output_dir = base.output_dir.join(f.as_str().replace('+', "_"));
                (f.as_str().to_string(), c)
            })
            .collect(),
        AblationAxis::View => [View::Axial, View::Coronal, View::Sagittal, View::MultiView]
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.view = v;
                c.output_dir = base.output_dir.join(v.name().replace('.', "_"));
                (v.name().to_string(), c)
            })
            .collect(),
    };
    if !schemes.iter().any(|(name, _)| name == proposed) {
        return Err(CoreError::Config(format!(
            "proposed scheme '{proposed}' is not on the {axis:?} axis"
        )));
    }
    let mut runs: Vec<(String, String, Vec<PredictionRow>)> = Vec::new();
    for (name, cfg) in &schemes {
        let done = splits.iter().all(|s| {
            cfg.output_dir.join(format!("predictions_{}.csv", s.name())).exists()
        });
        if !done {
            cmd_train(cfg)?;
            for &s in splits {
                cmd_predict(&cfg.output_dir, s)?;
            }
        }
        for &s in splits {
            let rows = read_predictions_csv(
                &cfg.output_dir.join(format!("predictions_{}.csv", s.name())),
            )?;
            runs.push((name.clone(), s.name().to_string(), rows));
        }
    }
    let bootstrap = BootstrapConfig {
        n_resamples: base.bootstrap_resamples,
        seed: derive_seed(base.seed, "bootstrap", 0),
        wide: false,
    };
    let cells = ablation_table(&runs, proposed, bootstrap)?;
    let mut outputs = Vec::new();
    for &s in splits {
        let split_cells: Vec<_> =
            cells.iter().filter(|c| c.split == s.name()).cloned().collect();
        let path = base.output_dir.join(format!("ablation_{}.csv", s.name()));
        write_ablation_csv(&path, &split_cells)?;
        outputs.push(path);
    }
    Ok(outputs)
}

/// Kaplan-Meier curves and pairwise Cox fits across WHO 2016 subtypes.
pub fn cmd_survival(cohort_dir: &Path, out_dir: &Path) -> Result<()> {
    let manifest = read_manifest(&cohort_dir.join("manifest.json"))?;
    let mut groups: BTreeMap<String, Vec<(f64, glioma25d::cohort::Event)>> = BTreeMap::new();
    for ManifestCase { meta, .. } in &manifest.cases {
        let (Some(os), Some(event)) = (meta.os_months, meta.event) else {
            continue;
        };
        let Some(subtype) = who2016_subtype(meta.idh, meta.codel, meta.grade) else {
            continue;
        };
        groups.entry(subtype.name().to_string()).or_default().push((os, event));
    }
    if groups.is_empty() {
        return Err(CoreError::Data("no cases carry survival data".into()));
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let cmp = compare_groups(&groups)?;
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    plots::km_plot(&out_dir.join("km.svg"), &cmp.groups)?;
    let mut w = csv::Writer::from_path(out_dir.join("survival.csv"))
        .map_err(|e| CoreError::Data(format!("cannot write survival table: {e}")))?;
    w.write_record(["group_a", "group_b", "hazard_ratio", "score_chi2", "score_p", "wald_p"])
        .map_err(|e| CoreError::Data(e.to_string()))?;
    for (a, b, fit) in &cmp.pairwise {
        let rec = match fit {
            Some(f) => [
                a.clone(),
                b.clone(),
                format!("{:.4}", f.hazard_ratio),
                format!("{:.4}", f.score_statistic),
                format!("{:.6}", f.score_p),
                format!("{:.6}", f.wald_p),
            ],
            None => [a.clone(), b.clone(), "".into(), "".into(), "".into(), "".into()],
        };
        w.write_record(rec).map_err(|e| CoreError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    save_json(&out_dir.join("medians.json"), &cmp
        .groups
        .iter()
        .map(|(name, curve)| (name.clone(), curve.median))
        .collect::<Vec<_>>())?;
    Ok(())
}

/// Renders a combined human-readable report from evaluated runs.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut text = String::new();
    for run_dir in run_dirs {
        let cfg = load_run_config(run_dir)?;
        let mut rows = Vec::new();
        for &split in &Split::ALL {
            let path = run_dir.join(format!("metrics_{}.json", split.name()));
            if !path.exists() {
                continue;
            }
            let eval: Evaluation = crate::config::load_json(&path)?;
            rows.push((split.name().to_string(), eval.report));
        }
        if rows.is_empty() {
            return Err(CoreError::Data(format!(
                "{}: no metrics found — run `evaluate` first",
                run_dir.display()
            )));
        }
        text.push_str(&summary_text(
            &format!("{} / {} / {}", cfg.task.name(), cfg.fusion.as_str(), cfg.view.name()),
            &rows,
        ));
        text.push('\n');
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent.display().to_string(), e))?;
    }
    fs::write(out, text).map_err(|e| CoreError::io(out.display().to_string(), e))?;
    Ok(())
}
