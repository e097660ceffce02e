//! End-to-end runs: model preparation, per-image evaluation and parameter
//! sweeps. All reductions are ordered by image id.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_patch, optimize_patch, AttackConfig, LocationPolicy, PatchTensor, Victim};
use crate::certify::{Certifier, DefenseConfig};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::report::ImageResult;
use crate::train::{accuracy, train, TrainReport};

/// Vanilla model and its SIN-finetuned copy.
#[derive(Debug, Clone)]
pub struct PreparedModels {
    pub vanilla: Model,
    pub pruned: Model,
    pub vanilla_report: TrainReport,
    pub finetune_report: TrainReport,
}

/// Trains a fresh model from the config, then finetunes a copy through the gate.
pub fn prepare_models(cfg: &RunConfig, train_set: &Dataset) -> Result<PreparedModels> {
    let mut vanilla = Model::plain_cnn(train_set.dims, train_set.classes, (cfg.width1, cfg.width2), cfg.model_seed)?
        .with_superficial_layer(cfg.superficial_layer)?;
    let vanilla_report = train(&mut vanilla, train_set, &cfg.train_config())?;
    let mut pruned = vanilla.clone();
    let finetune_report = train(&mut pruned, train_set, &cfg.finetune_config())?;
    Ok(PreparedModels {
        vanilla,
        pruned,
        vanilla_report,
        finetune_report,
    })
}

pub fn attack_config(cfg: &RunConfig) -> AttackConfig {
    AttackConfig {
        target: cfg.target,
        steps: cfg.attack_steps,
        step_size: cfg.attack_step_size,
        patch_side: cfg.patch,
        alpha: cfg.alpha,
        location: LocationPolicy::PerImageRandom { seed: cfg.attack_seed },
        victim: Victim::Vanilla,
    }
}

/// Optimises a universal patch on the first `attack_images` training images.
pub fn forge_patch(cfg: &RunConfig, vanilla: &Model, train_set: &Dataset) -> Result<PatchTensor> {
    let images = &train_set.images[..cfg.attack_images.min(train_set.len())];
    Ok(optimize_patch(vanilla, images, &attack_config(cfg))?.patch)
}

/// Certifies and detects every test image, and, given a patch, detects the
/// patched copy at the policy's location for that image.
pub fn evaluate(
    defense: &Certifier,
    test: &Dataset,
    attack: Option<(&PatchTensor, &LocationPolicy)>,
) -> Result<Vec<ImageResult>> {
    let locs = match attack {
        Some((p, pol)) => Some(pol.locations(test.len(), p.side(), test.dims.height, test.dims.width)?),
        None => None,
    };
    test.images
        .par_iter()
        .zip(test.labels.par_iter())
        .enumerate()
        .map(|(id, (x, &y))| {
            let start = Instant::now();
            let certify = defense.certify(x, y)?;
            let benign = defense.detect(x)?;
            let attacked = match (attack, &locs) {
                (Some((patch, _)), Some(locs)) => {
                    let loc = locs[id];
                    let xp = apply_patch(x, patch, loc)?;
                    Some((defense.detect(&xp)?, loc.window(patch.side())))
                }
                _ => None,
            };
            Ok(ImageResult {
                image_id: id,
                true_label: y,
                certify,
                benign,
                attacked,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Tau,
    Patch,
    WinnerRate,
    Layer,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "patch" => Ok(SweepParam::Patch),
            "winner_rate" | "kappa" => Ok(SweepParam::WinnerRate),
            "layer" => Ok(SweepParam::Layer),
            other => Err(Error::config(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Patch => "patch",
            SweepParam::WinnerRate => "winner_rate",
            SweepParam::Layer => "layer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub merged_windows: usize,
    pub avg_candidates: f64,
    pub clean_acc: f64,
    pub certified_acc: f64,
    pub pruned_acc: f64,
}

/// Mean number of merged occluders intersecting `R(x)` over `test`.
pub fn mean_candidates(defense: &Certifier, test: &Dataset) -> Result<f64> {
    let counts = test
        .images
        .par_iter()
        .map(|x| Ok(defense.occlusion_map(x)?.entries.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.iter().sum::<usize>() as f64 / test.len().max(1) as f64)
}

fn point(model: &Model, defense: DefenseConfig, test: &Dataset, value: f64) -> Result<SweepPoint> {
    let cert = Certifier::new(model, defense)?;
    let results = evaluate(&cert, test, None)?;
    let m = crate::report::metrics(&results)?;
    Ok(SweepPoint {
        value,
        merged_windows: cert.plan().merged.len(),
        avg_candidates: mean_candidates(&cert, test)?,
        clean_acc: m.clean_acc,
        certified_acc: m.certified_acc,
        pruned_acc: f64::from(accuracy(model, test, Some(defense.winner_rate))?),
    })
}

/// Re-evaluates the defense for each value of `param`. Winner-rate and layer
/// sweeps finetune a fresh copy of `vanilla` per value.
pub fn sweep(
    cfg: &RunConfig,
    vanilla: &Model,
    pruned: &Model,
    train_set: &Dataset,
    test: &Dataset,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    let base = cfg.defense();
    values
        .iter()
        .map(|&v| match param {
            SweepParam::Tau => point(pruned, DefenseConfig { tau: v, ..base }, test, v),
            SweepParam::Patch => point(pruned, DefenseConfig { patch: as_index(v)?, ..base }, test, v),
            SweepParam::WinnerRate => {
                let mut c = cfg.clone();
                c.winner_rate = v as f32;
                c.validate()?;
                let mut m = vanilla.clone();
                train(&mut m, train_set, &c.finetune_config())?;
                point(&m, c.defense(), test, v)
            }
            SweepParam::Layer => {
                let mut m = vanilla.clone().with_superficial_layer(as_index(v)?)?;
                train(&mut m, train_set, &cfg.finetune_config())?;
                point(&m, base, test, v)
            }
        })
        .collect()
}

fn as_index(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::config(format!("expected a non-negative integer, got {v}")))
    }
}

/// CSV with one row per sweep value.
pub fn write_sweep_csv<W: std::io::Write>(param: SweepParam, points: &[SweepPoint], fingerprint: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = crate::analysis::csv_error;
    w.write_record([
        "param",
        "value",
        "merged_windows",
        "avg_candidates",
        "clean_acc",
        "certified_acc",
        "pruned_acc",
        "config_fingerprint",
    ])
    .map_err(err)?;
    for p in points {
        w.write_record([
            param.name().to_string(),
            p.value.to_string(),
            p.merged_windows.to_string(),
            format!("{:.4}", p.avg_candidates),
            format!("{:.6}", p.clean_acc),
            format!("{:.6}", p.certified_acc),
            format!("{:.6}", p.pruned_acc),
            fingerprint.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}
