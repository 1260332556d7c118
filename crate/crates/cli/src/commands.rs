use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use pcqa_core::backbone::checkpoint::Checkpoint;
use pcqa_core::data::{
    generate_dataset, load_samples, split_holdout, split_kfold, Manifest, Part, Sample, SplitPlan,
    SynthSpec,
};
use pcqa_core::eval::{evaluate, MetricReport};
use pcqa_core::finetune::{
    finetune, prepare_labeled, quality_checkpoint, FinetuneEcho, LabeledViews, Predictor,
};
use pcqa_core::geometry::{
    crop_window, normalize_to_unit_sphere, read_ply, rig_evenly_distributed, rig_perpendicular,
    CropPolicy, ViewMeta,
};
use pcqa_core::pretrain::{prepare_views, pretrain, PretrainEcho, PretrainPair};
use pcqa_core::views::render_self_rig;

use crate::config::{ConfigError, Protocol, RunConfig};
use crate::rundir::{RunDir, CHECKPOINTS, METRICS, PREDICTIONS};

/// Manifest file plus every cloud it references.
fn manifest_inputs(path: &Path, m: &Manifest) -> Vec<PathBuf> {
    let mut out = vec![path.to_path_buf()];
    for e in m.entries() {
        out.push(e.distorted_path.clone());
        if let Some(r) = &e.reference_path {
            out.push(r.clone());
        }
    }
    out.sort();
    out.dedup();
    out
}

pub fn makedata(spec: &SynthSpec, out: &Path) -> anyhow::Result<()> {
    let run = RunDir::create(out)?;
    let cfg = RunConfig {
        seed: spec.seed,
        ..RunConfig::default()
    };
    run.write(
        "synth.toml",
        toml::to_string_pretty(spec)
            .expect("spec serializes")
            .as_bytes(),
    )?;
    let (m, _) = generate_dataset(spec, Some(out))?;
    run.record("makedata", &cfg, &[])?;
    log::info!(
        "wrote {} samples over {} references to {}",
        m.len(),
        m.reference_ids().len(),
        out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub enum Rig {
    Quality,
    Pretrain,
}

pub fn render(cfg: &RunConfig, input: &Path, rig: Rig, out: &Path) -> anyhow::Result<()> {
    let run = RunDir::create(out)?;
    run.record("render", cfg, &[input.to_path_buf()])?;
    let pc = read_ply(input)?;
    let cams = match rig {
        Rig::Quality => rig_perpendicular(cfg.view.distance)?,
        Rig::Pretrain => rig_evenly_distributed(cfg.pretrain.views, cfg.view.distance)?,
    };
    let (_, transform) = normalize_to_unit_sphere(&pc)?;
    let crop = crop_window(cfg.view.resolution, cfg.view.crop, CropPolicy::Center)?;
    let source_id = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut meta = Vec::new();
    for (k, img) in render_self_rig(&pc, &cams, &cfg.view)?.iter().enumerate() {
        img.save_png(&run.path(&format!("view_{k:02}.png")))?;
        meta.push(ViewMeta {
            source_id: source_id.clone(),
            camera_index: k,
            camera: cams[k],
            transform,
            crop_window: Some(crop),
        });
    }
    run.write_json("views.json", &meta)?;
    log::info!("rendered {} views of {}", cams.len(), input.display());
    Ok(())
}

#[derive(Serialize)]
struct PretrainMetrics {
    steps: usize,
    epochs: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    /// Mean over the last ten logged steps.
    final_loss_smoothed: Option<f64>,
}

pub fn pretrain_cmd(
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    cache: Option<&Path>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let m = Manifest::load(manifest_path)?;
    let run = RunDir::create(out)?;
    let mut inputs = manifest_inputs(manifest_path, &m);
    inputs.extend(resume.map(Path::to_path_buf));
    run.record("pretrain", cfg, &inputs)?;

    let pairs: Vec<PretrainPair> = load_samples(&m)?
        .into_iter()
        .map(|s| match s.reference {
            Some(reference) => Ok(PretrainPair {
                id: s.id,
                distorted: s.distorted,
                reference,
            }),
            None => bail!("sample {} has no reference cloud; pre-training needs pairs", s.id),
        })
        .collect::<anyhow::Result<_>>()?;
    let views = prepare_views(&pairs, cfg.pretrain.views, &cfg.view, cache)?;
    let echo = PretrainEcho {
        backbone: cfg.backbone,
        view: cfg.view.clone(),
        pretrain: cfg.pretrain.clone(),
        seed: cfg.seed,
    };
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = pretrain(&echo, &views, Some(run.root()), resume.as_ref())?;
    let log = &outcome.log;
    let tail = &log[log.len().saturating_sub(10)..];
    let metrics = PretrainMetrics {
        steps: outcome.adam.step as usize,
        epochs: outcome.epochs_done,
        initial_loss: log.first().map(|r| r.loss),
        final_loss: log.last().map(|r| r.loss),
        final_loss_smoothed: (!tail.is_empty())
            .then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64),
    };
    run.write_json(METRICS, &metrics)
}

#[derive(Serialize)]
struct FoldMetrics {
    fold: usize,
    train_refs: Vec<String>,
    test_refs: Vec<String>,
    best_epoch: usize,
    steps: usize,
    test: Option<MetricReport>,
}

#[derive(Serialize)]
struct MeanMetrics {
    srocc: f64,
    plcc: f64,
    rmse: f64,
    folds_used: usize,
}

#[derive(Serialize)]
struct FinetuneMetrics {
    protocol: Protocol,
    selection: &'static str,
    folds: Vec<FoldMetrics>,
    mean: Option<MeanMetrics>,
}

fn make_plan(cfg: &RunConfig, m: &Manifest) -> anyhow::Result<SplitPlan> {
    let r = &cfg.split.ratio;
    let plan = match cfg.split.protocol {
        Protocol::Kfold => split_kfold(m, cfg.split.folds, (r[0], r[1]), cfg.seed),
        Protocol::Holdout => split_holdout(m, (r[0], r[1], r[2]), cfg.seed),
    };
    // an infeasible ratio is a configuration problem
    plan.map_err(|e| match e {
        pcqa_core::Error::InfeasibleSplit(_) => ConfigError(format!("config field `split`: {e}")).into(),
        other => other.into(),
    })
}

fn labeled_triples(samples: &[Sample]) -> anyhow::Result<Vec<(String, pcqa_core::geometry::PointCloud, f64)>> {
    samples
        .iter()
        .map(|s| match s.mos {
            Some(mos) => Ok((s.id.clone(), s.distorted.clone(), mos)),
            None => bail!("sample {} has no mos", s.id),
        })
        .collect()
}

pub fn finetune_cmd(
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    init: Option<&Path>,
) -> anyhow::Result<()> {
    let m = Manifest::load(manifest_path)?;
    m.require_labels()?;
    let plan = make_plan(cfg, &m)?;
    let run = RunDir::create(out)?;
    let mut inputs = manifest_inputs(manifest_path, &m);
    inputs.extend(init.map(Path::to_path_buf));
    run.record("finetune", cfg, &inputs)?;
    run.write_json("split.json", &plan)?;

    let init = init.map(Checkpoint::load).transpose()?;
    let samples = load_samples(&m)?;
    let views = prepare_labeled(&labeled_triples(&samples)?, &cfg.view)?;
    let by_id: HashMap<&str, &LabeledViews> = views.iter().map(|v| (v.id.as_str(), v)).collect();
    let pick = |part: &Manifest| -> Vec<LabeledViews> {
        part.entries()
            .iter()
            .map(|e| by_id[e.sample_id.as_str()].clone())
            .collect()
    };

    let echo = FinetuneEcho {
        backbone: cfg.backbone,
        view: cfg.view.clone(),
        finetune: cfg.finetune.clone(),
        seed: cfg.seed,
    };
    let mut folds = Vec::new();
    let mut pred_csv = String::from("fold,sample_id,predicted_score,mos\n");
    let mut hist_csv = String::from("fold,epoch,steps,train_loss,train_srocc,test_srocc\n");
    for (k, fold) in plan.folds.iter().enumerate() {
        let train = pick(&plan.select(&m, k, Part::Train)?);
        let test = pick(&plan.select(&m, k, Part::Test)?);
        log::info!("fold {k}: {} train / {} test samples", train.len(), test.len());
        let o = finetune(&echo, &train, Some(&test), init.as_ref(), None)?;
        quality_checkpoint(&echo, &o.store, &o.scale)
            .save(&run.path(CHECKPOINTS).join(format!("fold{k}.ckpt")))?;
        for (s, p) in test.iter().zip(&o.best_test_predictions) {
            pred_csv.push_str(&format!("{k},{},{p},{}\n", s.id, s.mos));
        }
        for h in &o.history {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            hist_csv.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                h.epoch,
                h.steps,
                h.train_loss,
                opt(h.train_srocc),
                opt(h.test.as_ref().map(|t| t.srocc))
            ));
        }
        folds.push(FoldMetrics {
            fold: k,
            train_refs: fold.train.clone(),
            test_refs: fold.test.clone(),
            best_epoch: o.best_epoch,
            steps: o.steps,
            test: o.best_test,
        });
    }
    let reports: Vec<&MetricReport> = folds.iter().filter_map(|f| f.test.as_ref()).collect();
    let mean = (!reports.is_empty()).then(|| {
        let n = reports.len() as f64;
        MeanMetrics {
            srocc: reports.iter().map(|r| r.srocc).sum::<f64>() / n,
            plcc: reports.iter().map(|r| r.plcc).sum::<f64>() / n,
            rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
            folds_used: reports.len(),
        }
    });
    if let Some(mean) = &mean {
        println!(
            "srocc {:.4} plcc {:.4} rmse {:.4} over {} fold(s)",
            mean.srocc, mean.plcc, mean.rmse, mean.folds_used
        );
    }
    run.write(PREDICTIONS, pred_csv.as_bytes())?;
    run.write("history.csv", hist_csv.as_bytes())?;
    run.write_json(
        METRICS,
        &FinetuneMetrics {
            protocol: cfg.split.protocol,
            selection: "min-train-loss-epoch",
            folds,
            mean,
        },
    )
}

pub fn predict_cmd(
    checkpoint: &Path,
    manifest_path: Option<&Path>,
    inputs: &[PathBuf],
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let predictor = Predictor::from_checkpoint(&ck)?;
    let cfg = RunConfig {
        seed: predictor.echo.seed,
        backbone: predictor.echo.backbone,
        view: predictor.echo.view.clone(),
        finetune: predictor.echo.finetune.clone(),
        ..RunConfig::default()
    };
    let mut items: Vec<(String, PathBuf, Option<f64>)> = inputs
        .iter()
        .map(|p| (p.display().to_string(), p.clone(), None))
        .collect();
    let mut hashed = vec![checkpoint.to_path_buf()];
    hashed.extend(inputs.iter().cloned());
    if let Some(mp) = manifest_path {
        let m = Manifest::load(mp)?;
        hashed.push(mp.to_path_buf());
        for e in m.entries() {
            hashed.push(e.distorted_path.clone());
            items.push((e.sample_id.clone(), e.distorted_path.clone(), e.mos));
        }
    }
    if items.is_empty() {
        return Err(ConfigError("nothing to predict: give --manifest or --input".into()).into());
    }
    let run = out.map(RunDir::create).transpose()?;
    if let Some(run) = &run {
        run.record("predict", &cfg, &hashed)?;
    }

    // a single file prints the bare score
    let bare = items.len() == 1 && manifest_path.is_none();
    let mut csv = String::from("sample_id,predicted_score,mos\n");
    let mut pred = Vec::new();
    let mut mos = Vec::new();
    for (id, path, label) in &items {
        let pc = read_ply(path)?;
        let p = predictor.predict(&pc)?;
        let l = label.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{id},{p},{l}\n"));
        if let Some(v) = label {
            pred.push(p);
            mos.push(*v);
        }
        if bare {
            println!("{p}");
        } else {
            println!("{id}\t{p}");
        }
    }
    if let Some(run) = &run {
        run.write(PREDICTIONS, csv.as_bytes())?;
        if pred.len() >= 3 && pred.len() == items.len() {
            run.write_json(METRICS, &evaluate(&pred, &mos)?)?;
        }
    }
    Ok(())
}

/// Reads the score and `mos` columns of a predictions CSV. The score column
/// is `predicted_score`, or `pred` as a short form.
pub fn read_predictions(path: &Path) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.contains(&h.trim()))
            .with_context(|| format!("{} has no `{}` column", path.display(), names[0]))
    };
    let (ip, im) = (col(&["predicted_score", "pred"])?, col(&["mos"])?);
    let mut pred = Vec::new();
    let mut mos = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> anyhow::Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("{} row {}: bad number", path.display(), line + 2))
        };
        pred.push(num(ip)?);
        mos.push(num(im)?);
    }
    Ok((pred, mos))
}

pub fn evaluate_cmd(predictions: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (pred, mos) = read_predictions(predictions)?;
    let report = evaluate(&pred, &mos)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
