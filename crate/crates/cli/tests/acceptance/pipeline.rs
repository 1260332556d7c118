//! Criteria that train models or drive the binary end to end.

use std::fs;
use std::path::Path;
use std::process::Command;

use pcqa_core::backbone::checkpoint::Checkpoint;
use pcqa_core::data::{generate_dataset, split_kfold, CloudKind, DistortionType, Sample, SynthSpec};
use pcqa_core::finetune::{finetune, prepare_labeled, FinetuneConfig, FinetuneEcho, LabeledViews};
use pcqa_core::patches::{patchify, sample_mask};
use pcqa_core::pretrain::{
    constant_color_mse, masked_patch_mse, prepare_views, pretrain, PretrainConfig, PretrainEcho,
    PretrainPair, PretrainViews, CHECKPOINT_KIND,
};

use super::{check, toy_backbone, toy_view, Outcome};

fn toy_head() -> FinetuneConfig {
    FinetuneConfig {
        heads: 4,
        fused_width: 64,
        hidden: 32,
        ..FinetuneConfig::default()
    }
}

fn spec(types: Vec<DistortionType>, seed: u64) -> SynthSpec {
    SynthSpec {
        kinds: CloudKind::ALL.to_vec(),
        refs_per_kind: 2,
        n_points: 4000,
        types,
        levels: (1..=7).collect(),
        seed,
    }
}

fn pairs(samples: &[&Sample]) -> Vec<PretrainPair> {
    samples
        .iter()
        .map(|s| PretrainPair {
            id: s.id.clone(),
            distorted: s.distorted.clone(),
            reference: s.reference.clone().expect("synthetic samples carry references"),
        })
        .collect()
}

fn labeled(samples: &[&Sample]) -> Vec<(String, pcqa_core::geometry::PointCloud, f64)> {
    samples
        .iter()
        .map(|s| (s.id.clone(), s.distorted.clone(), s.mos.expect("synthetic samples are labeled")))
        .collect()
}

/// One sample per reference with pairwise distinct labels.
fn one_per_reference(samples: &[Sample]) -> Vec<&Sample> {
    let mut refs: Vec<&str> = samples.iter().map(|s| s.reference_id.as_str()).collect();
    refs.sort();
    refs.dedup();
    let mut picked: Vec<&Sample> = Vec::new();
    for (r, rid) in refs.iter().enumerate() {
        let cand: Vec<&Sample> = samples.iter().filter(|s| s.reference_id == *rid).collect();
        let n = cand.len();
        let fresh = (0..n)
            .map(|k| cand[(r * 5 + k * 7) % n])
            .find(|s| picked.iter().all(|p| (p.mos.unwrap() - s.mos.unwrap()).abs() > 1e-9));
        picked.extend(fresh);
    }
    picked
}

fn pretrain_echo(steps: usize, seed: u64) -> PretrainEcho {
    PretrainEcho {
        backbone: toy_backbone(),
        view: toy_view(),
        pretrain: PretrainConfig {
            epochs: 100_000,
            max_steps: steps,
            ..PretrainConfig::default()
        },
        seed,
    }
}

/// Masked-patch MSE of the model and of the constant `color` predictor over
/// every view of `views`, both branches, one fixed mask per view.
fn heldout_mse(
    model: &pcqa_core::pretrain::MaskedAutoencoder,
    store: &pcqa_core::params::ParamStore<f32>,
    views: &PretrainViews,
    color: [f64; 3],
) -> (f64, f64) {
    let (mut m, mut c, mut n) = (0.0, 0.0, 0.0);
    for (p, rig) in views.views.iter().enumerate() {
        for (v, (x, y)) in rig.iter().enumerate() {
            let gx = patchify(x).unwrap();
            let gy = patchify(y).unwrap();
            let plan = sample_mask(gx.len(), 0.5, (p * 100 + v) as u64).unwrap();
            let (px, py) = model.reconstruct(store, &gx, &gy, &plan).unwrap();
            m += masked_patch_mse(&px, &gx, &plan).unwrap() + masked_patch_mse(&py, &gy, &plan).unwrap();
            c += constant_color_mse(&gx, &plan, color).unwrap() + constant_color_mse(&gy, &plan, color).unwrap();
            n += 2.0;
        }
    }
    (m / n, c / n)
}

pub fn training_behavior() -> Outcome {
    let (_, samples) = generate_dataset(&spec(DistortionType::ALL.to_vec(), 3), None).map_err(|e| e.to_string())?;
    let chosen = one_per_reference(&samples);
    if chosen.len() != 8 {
        return Err(format!("only {} distinct-label references", chosen.len()));
    }

    let train = prepare_views(&pairs(&chosen), 12, &toy_view(), None).unwrap();
    // the constant schedule makes the first 50 steps of a longer run identical
    // to a 50-step run; the held-out check uses the longer one
    let out = pretrain(&pretrain_echo(300, 0), &train, None, None).map_err(|e| e.to_string())?;
    let initial = out.log[0].loss;
    let tail = &out.log[40..50];
    let smoothed = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    if smoothed > 0.7 * initial {
        return Err(format!("pre-training loss {initial:.4} -> {smoothed:.4} (smoothed) after 50 steps"));
    }

    let (_, other) = generate_dataset(&spec(DistortionType::ALL.to_vec(), 99), None).unwrap();
    let heldout: Vec<&Sample> = one_per_reference(&other).into_iter().take(4).collect();
    let heldout = prepare_views(&pairs(&heldout), 12, &toy_view(), None).unwrap();
    let (model_mse, mean_mse) = heldout_mse(&out.model, &out.store, &heldout, train.mean_color());
    if model_mse >= mean_mse {
        return Err(format!("held-out masked MSE {model_mse:.5} vs mean color {mean_mse:.5}"));
    }

    let data = prepare_labeled(&labeled(&chosen), &toy_view()).unwrap();
    let mut finals = Vec::new();
    for seed in 0..3u64 {
        let echo = FinetuneEcho {
            backbone: toy_backbone(),
            view: toy_view(),
            finetune: FinetuneConfig {
                epochs: 200,
                ..toy_head()
            },
            seed,
        };
        let o = finetune(&echo, &data, None, None, None).map_err(|e| e.to_string())?;
        finals.push(o.history.last().and_then(|h| h.train_srocc).unwrap_or(f64::NAN));
        if o.steps > 200 {
            return Err(format!("fine-tuning took {} steps", o.steps));
        }
    }
    let worst = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    check(
        worst >= 0.9,
        format!(
            "pre-training {initial:.4} -> {smoothed:.4} in 50 steps; held-out masked MSE after 300 steps {model_mse:.5} < mean color {mean_mse:.5}; overfit train SROCC {finals:.3?} after 200 steps"
        ),
    )
}

fn subset(all: &PretrainViews, keep: &[bool]) -> PretrainViews {
    let pick = |i: &usize| keep[*i];
    let idx: Vec<usize> = (0..all.len()).filter(pick).collect();
    PretrainViews {
        ids: idx.iter().map(|&i| all.ids[i].clone()).collect(),
        views: idx.iter().map(|&i| all.views[i].clone()).collect(),
    }
}

pub fn pretraining_benefit() -> Outcome {
    let (m, samples) =
        generate_dataset(&spec(vec![DistortionType::ColorNoise, DistortionType::Downsample], 7), None)
            .map_err(|e| e.to_string())?;
    let all: Vec<&Sample> = samples.iter().collect();
    let views = prepare_views(&pairs(&all), 12, &toy_view(), None).unwrap();
    let labeled_views = prepare_labeled(&labeled(&all), &toy_view()).unwrap();

    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in 0..5u64 {
        let plan = split_kfold(&m, 1, (3, 1), seed).map_err(|e| e.to_string())?;
        let test_refs = &plan.folds[0].test;
        let is_train: Vec<bool> = samples.iter().map(|s| !test_refs.contains(&s.reference_id)).collect();
        let part = |want: bool| -> Vec<LabeledViews> {
            labeled_views
                .iter()
                .zip(&is_train)
                .filter(|(_, &t)| t == want)
                .map(|(v, _)| v.clone())
                .collect()
        };
        let (train, test) = (part(true), part(false));

        let pre = pretrain(&pretrain_echo(300, seed), &subset(&views, &is_train), None, None)
            .map_err(|e| e.to_string())?;
        let ck = Checkpoint::from_store(CHECKPOINT_KIND, serde_json::Value::Null, &pre.store, None);
        let echo = FinetuneEcho {
            backbone: toy_backbone(),
            view: toy_view(),
            finetune: FinetuneConfig {
                epochs: 40,
                ..toy_head()
            },
            seed,
        };
        let score = |init: Option<&Checkpoint>| -> Result<f64, String> {
            let o = finetune(&echo, &train, Some(&test), init, None).map_err(|e| e.to_string())?;
            Ok(o.best_test.map(|r| r.srocc).unwrap_or(f64::NAN))
        };
        let with = score(Some(&ck))?;
        let without = score(None)?;
        if with >= without {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {with:.3} vs {without:.3}"));
    }
    check(
        wins >= 3,
        format!("pre-trained >= random in {wins}/5 seeds ({})", rows.join("; ")),
    )
}

const TOY_CONFIG: &str = r#"
seed = 3

[backbone.encoder]
depth = 2
width = 32
heads = 4
mlp_ratio = 2

[backbone.decoder]
depth = 1
width = 32
heads = 4
mlp_ratio = 2

[view]
resolution = 64
crop = 64
splat_radius = 1

[pretrain]
views = 4
batch_size = 8
max_steps = 10

[finetune]
heads = 4
fused_width = 64
hidden = 32
batch_size = 8
epochs = 3

[split]
folds = 2
ratio = [3, 1]
"#;

fn pcqa(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pcqa"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "pcqa {} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn end_to_end(root: &Path) -> Result<Vec<Vec<u8>>, String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    fs::write(root.join("config.toml"), TOY_CONFIG).map_err(|e| e.to_string())?;
    pcqa(&[
        "makedata", "--out", &p("data"), "--kinds", "sphere,cube", "--points", "1500",
        "--levels", "1,4,7", "--seed", "5",
    ])?;
    let manifest = p("data/manifest.jsonl");
    pcqa(&["pretrain", "--config", &p("config.toml"), "--manifest", &manifest, "--out", &p("pre")])?;
    pcqa(&[
        "finetune", "--config", &p("config.toml"), "--manifest", &manifest, "--out", &p("ft"),
        "--init", &p("pre/checkpoints/pretrain_last.ckpt"),
    ])?;
    pcqa(&["evaluate", "--predictions", &p("ft/predictions.csv"), "--out", &p("eval.json")])?;
    ["pre/metrics.json", "ft/metrics.json", "ft/predictions.csv", "eval.json"]
        .iter()
        .map(|f| fs::read(root.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

pub fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = end_to_end(a.path())?;
    let second = end_to_end(b.path())?;
    check(
        first == second,
        format!(
            "two makedata -> pretrain -> finetune -> evaluate runs; metrics.json {} bytes identical",
            first[1].len()
        ),
    )
}
