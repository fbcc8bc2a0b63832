use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mdunet::backbone::{checkpoint, MultiDecoderNet};
use mdunet::datapipe::{
    average_annotations, ct_rescale, load_dataset, pad_to_grid, save_dataset, save_prediction,
    synth_generate, unpad_map, zscore_normalize, CaseRecord, Modality,
};
use mdunet::metrics::{evaluate_dataset, EvalReport, SoftMap, ThresholdLadder};
use mdunet::trainer::{
    self, ensemble_predict, history_to_csv, EnsembleRun, EnsembleSpec, TrainSchedule,
};

use crate::config::RunConfig;
use crate::CliError;

fn require_data(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    cfg.data
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset directory: set `data` or --data".into()))
}

fn require_out(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    cfg.out
        .as_ref()
        .ok_or_else(|| CliError::Config("no output directory: set `out` or --out".into()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn task_name(data: &Path) -> String {
    data.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require_data(cfg)?;
    let cases = synth_generate(&cfg.synth)?;
    save_dataset(data, &cases)?;
    println!(
        "wrote {} synthetic cases ({} raters, {}x{}) to {}",
        cases.len(),
        cfg.synth.n_raters,
        cfg.synth.height,
        cfg.synth.width,
        data.display()
    );
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require_data(cfg)?;
    let out = require_out(cfg)?;
    let cases = load_dataset(data)?;
    let multiple = cfg.model.grid_multiple();
    let mut processed = Vec::with_capacity(cases.len());
    for case in &cases {
        let image = match case.modality {
            Modality::Mr => zscore_normalize(&case.image)?,
            Modality::Ct => ct_rescale(&case.image, (cfg.ct_window[0], cfg.ct_window[1]))?,
        };
        let normalized = CaseRecord {
            image,
            ..case.clone()
        };
        let (padded, _) = pad_to_grid(&normalized, multiple);
        processed.push(padded);
    }
    save_dataset(out, &processed)?;
    println!(
        "preprocessed {} cases to grid multiple {multiple} at {}",
        processed.len(),
        out.display()
    );
    Ok(())
}

fn run_dir(out: &Path, run: usize, n_runs: usize) -> PathBuf {
    if n_runs == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("run_{run:02}"))
    }
}

/// The hyperparameter variations trained when `ensemble` is set: the default
/// three-run pattern, extended cyclically for larger counts.
fn ensemble_spec(cfg: &RunConfig, n_runs: usize) -> EnsembleSpec {
    let base = EnsembleSpec::default_runs(cfg.model.n_decoders, cfg.schedule.seed);
    EnsembleSpec {
        runs: (0..n_runs)
            .map(|i| EnsembleRun {
                alpha: base.runs[i % base.runs.len()].alpha,
                betas: cfg.loss.resolve(cfg.model.n_decoders).betas,
                seed: cfg.schedule.seed + i as u64,
            })
            .collect(),
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require_data(cfg)?;
    let out = require_out(cfg)?;
    let cases = load_dataset(data)?;
    let n_runs = cfg.ensemble.unwrap_or(1);
    let spec = ensemble_spec(cfg, n_runs);
    spec.validate()?;
    for (run, member) in spec.runs.iter().enumerate() {
        let mut run_cfg = cfg.clone();
        if n_runs > 1 {
            run_cfg.loss.alpha = member.alpha;
            run_cfg.loss.betas = Some(member.betas.clone());
            run_cfg.schedule.seed = member.seed;
        }
        let schedule: &TrainSchedule = &run_cfg.schedule;
        let weights = run_cfg.loss.resolve(run_cfg.model.n_decoders);
        let mut net = MultiDecoderNet::build(&run_cfg.model, schedule.seed)?;
        let outcome = trainer::train(&mut net, &cases, schedule, &weights)?;

        let dir = run_dir(out, run, n_runs);
        ensure_dir(&dir)?;
        checkpoint::save_checkpoint(dir.join("model.ckpt"), &net)?;
        write_text(&dir.join("train_log.csv"), &history_to_csv(&outcome.epochs))?;
        write_text(&dir.join("config.json"), &run_cfg.to_pretty_json())?;
        println!(
            "run {run}: {} epochs, best val staple {:.4} at epoch {}, saved to {}",
            outcome.epochs.len(),
            outcome.best_val_score,
            outcome.best_epoch,
            dir.display()
        );
    }
    Ok(())
}

/// Loads the single checkpoint or every `run_*/model.ckpt` in sorted order.
fn load_models(out: &Path) -> Result<Vec<MultiDecoderNet>, CliError> {
    let single = out.join("model.ckpt");
    if single.exists() {
        return Ok(vec![checkpoint::load_checkpoint(&single)?]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", out.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("run_"))
                    .unwrap_or(false)
                && p.join("model.ckpt").exists()
        })
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(CliError::Data(format!(
            "no model.ckpt or run_*/model.ckpt under {}",
            out.display()
        )));
    }
    runs.iter()
        .map(|r| Ok(checkpoint::load_checkpoint(r.join("model.ckpt"))?))
        .collect()
}

/// Ensemble prediction for one case, cut back to the original geometry when
/// the case carries a preprocessing crop record.
fn predict_case(models: &[MultiDecoderNet], case: &CaseRecord) -> Result<SoftMap, CliError> {
    let soft = ensemble_predict(models, &case.image)?;
    match &case.crop {
        Some(crop) => Ok(SoftMap::new(
            unpad_map(&soft.values, crop),
            soft.provenance,
        )?),
        None => Ok(soft),
    }
}

fn ground_truth(case: &CaseRecord) -> Result<SoftMap, CliError> {
    let gt = average_annotations(&case.raters)?;
    match &case.crop {
        Some(crop) => Ok(SoftMap::new(unpad_map(&gt.values, crop), gt.provenance)?),
        None => Ok(gt),
    }
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require_data(cfg)?;
    let out = require_out(cfg)?;
    let cases = load_dataset(data)?;
    let models = load_models(out)?;
    let pred_root = out.join("predictions");
    for case in &cases {
        let soft = predict_case(&models, case)?;
        save_prediction(&pred_root.join(&case.case_id), &case.case_id, &soft)?;
    }
    println!(
        "wrote {} prediction maps ({} model{}) to {}",
        cases.len(),
        models.len(),
        if models.len() == 1 { "" } else { "s" },
        pred_root.display()
    );
    Ok(())
}

fn score_cases(
    task: &str,
    cases: &[CaseRecord],
    preds: &[SoftMap],
) -> Result<EvalReport, CliError> {
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let gts: Vec<SoftMap> = cases
        .iter()
        .map(ground_truth)
        .collect::<Result<_, CliError>>()?;
    Ok(evaluate_dataset(
        task,
        &ids,
        preds,
        &gts,
        &ThresholdLadder::default(),
    )?)
}

fn write_report(out_dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("report.csv"), &report.to_csv())?;
    let summary: BTreeMap<&str, f64> = BTreeMap::from([(report.task.as_str(), report.mean_score)]);
    write_text(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("serializable"),
    )
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require_data(cfg)?;
    let out = require_out(cfg)?;
    let cases = load_dataset(data)?;
    let models = load_models(out)?;
    let preds: Vec<SoftMap> = cases
        .iter()
        .map(|c| predict_case(&models, c))
        .collect::<Result<_, CliError>>()?;
    let report = score_cases(&task_name(data), &cases, &preds)?;
    write_report(out, &report)?;
    for c in &report.cases {
        println!("{},{:.6}", c.case_id, c.score);
    }
    println!("mean staple score: {:.6}", report.mean_score);
    Ok(())
}

fn diff_heatmap(pred: &SoftMap, gt: &SoftMap, path: &Path) -> Result<(), CliError> {
    let (h, w) = pred.shape();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let d = (pred.values[[y, x]] - gt.values[[y, x]]).abs();
            img.put_pixel(x as u32, y as u32, image::Luma([(d * 255.0).round() as u8]));
        }
    }
    img.save(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require_data(cfg)?;
    let out = require_out(cfg)?;
    let cases = load_dataset(data)?;
    let pred_root = out.join("predictions");
    if !pred_root.is_dir() {
        return Err(CliError::Data(format!(
            "no predictions under {}; run `mdunet predict` first",
            pred_root.display()
        )));
    }
    let mut preds = Vec::with_capacity(cases.len());
    for case in &cases {
        let (_, soft) = mdunet::datapipe::load_prediction(&pred_root.join(&case.case_id))?;
        preds.push(soft);
    }
    let task = task_name(data);
    let report = score_cases(&task, &cases, &preds)?;
    let report_dir = out.join("report");
    write_report(&report_dir, &report)?;
    for ((case, pred), row) in cases.iter().zip(&preds).zip(&report.cases) {
        let gt = ground_truth(case)?;
        diff_heatmap(
            pred,
            &gt,
            &report_dir.join(format!("{}_diff.png", case.case_id)),
        )?;
        println!("{:<12} {:>8.4}", row.case_id, row.score);
    }
    println!(
        "{:<12} {:>8.4}  ({} cases)",
        "mean",
        report.mean_score,
        report.cases.len()
    );
    Ok(())
}
