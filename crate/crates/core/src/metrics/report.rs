//! Evaluation of persisted run directories.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    convergence_curve, delta_clip, directional_clip, global_clip, kid, local_clip, psnr, q_score,
    ssim, KidEstimate, KidOptions, SsimParams,
};
use crate::backends::{Embedder, FeatureExtractor};
use crate::engine::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::image::{read_image, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub run_dir: PathBuf,
    /// Final output against the synthesis at step 0.
    pub psnr: f64,
    pub ssim: f64,
    pub local_clip: Option<f64>,
    pub global_clip: Option<f64>,
    pub directional_clip: Option<f64>,
    pub delta_clip: Option<f64>,
    pub q_score: Option<f64>,
    pub intensity_curve: Vec<f64>,
    pub converged_at: Option<usize>,
}

#[derive(Clone, Copy)]
pub struct EvalOptions<'a> {
    pub embedder: Option<&'a dyn Embedder>,
    pub features: Option<&'a dyn FeatureExtractor>,
    /// Real photographs for KID against the run outputs.
    pub reference: &'a [Image],
    pub ssim: SsimParams,
    pub kid: KidOptions,
    /// Caption standing for the unedited render in directional CLIP.
    pub source_caption: &'a str,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            embedder: None,
            features: None,
            reference: &[],
            ssim: SsimParams::default(),
            kid: KidOptions::default(),
            source_caption: "a computer rendered image",
        }
    }
}

fn load_rgb(path: &Path) -> Result<Image> {
    let (img, _) = read_image(path)?;
    Ok(if img.channels() == 1 {
        img.replicate(3)
    } else {
        img
    })
}

/// Mask of the last step that had one, as a single channel.
fn last_mask(dir: &Path, steps: usize) -> Result<Option<Image>> {
    for t in (0..steps).rev() {
        let p = dir.join(format!("mask_{t}.png"));
        if p.exists() {
            let (m, _) = read_image(&p)?;
            return Ok(Some(m.channel(0)));
        }
    }
    Ok(None)
}

/// Scores one run directory written by the engine.
pub fn evaluate_run(dir: &Path, opts: &EvalOptions<'_>) -> Result<(EvalRecord, Image)> {
    let record = TrajectoryRecord::load(dir)?;
    if record.steps == 0 {
        return Err(Error::Manifest {
            path: dir.to_path_buf(),
            message: "run has no steps".into(),
        });
    }
    let source = load_rgb(&TrajectoryRecord::step_image_path(dir, 0))?;
    let output = load_rgb(&TrajectoryRecord::step_image_path(dir, record.steps - 1))?;
    let scene_id = record.scene_id.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let curve = convergence_curve(&record);
    let prompt = record.prompts.iter().rev().flatten().next().cloned();
    let mut rec = EvalRecord {
        scene_id,
        run_dir: dir.to_path_buf(),
        psnr: psnr(&source, &output, 1.0)?,
        ssim: ssim(&source, &output, &opts.ssim)?,
        local_clip: None,
        global_clip: None,
        directional_clip: None,
        delta_clip: None,
        q_score: None,
        intensity_curve: curve.series,
        converged_at: curve.converged_at,
    };
    if let (Some(e), Some(p)) = (opts.embedder, prompt.as_deref()) {
        let mask = last_mask(dir, record.steps)?
            .unwrap_or_else(|| Image::filled(output.width(), output.height(), 1, 1.0));
        rec.local_clip = match local_clip(&output, &mask, p, e) {
            Ok(v) => Some(v),
            Err(Error::ZeroMask) => None,
            Err(err) => return Err(err),
        };
        rec.global_clip = Some(global_clip(&output, p, e)?);
        rec.delta_clip = Some(delta_clip(&source, &output, p, e)?);
        rec.directional_clip = Some(directional_clip(
            &source,
            &output,
            opts.source_caption,
            p,
            e,
        )?);
        rec.q_score = match rec.local_clip {
            Some(l) => q_score(rec.ssim, l).ok(),
            None => None,
        };
    }
    Ok((rec, output))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub runs: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub local_clip: Option<f64>,
    pub global_clip: Option<f64>,
    pub directional_clip: Option<f64>,
    pub delta_clip: Option<f64>,
    /// Mean of per-run Q-Scores.
    pub q_score: Option<f64>,
    /// Reference photographs against all run outputs.
    pub kid: Option<KidEstimate>,
    pub converged_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores every run directory in parallel and summarizes.
pub fn evaluate_runs(dirs: &[PathBuf], opts: &EvalOptions<'_>) -> Result<EvalReport> {
    let results: Vec<(EvalRecord, Image)> = dirs
        .par_iter()
        .map(|d| evaluate_run(d, opts))
        .collect::<Result<_>>()?;
    let kid_estimate = match opts.features {
        Some(f) if !opts.reference.is_empty() => {
            let real = opts
                .reference
                .iter()
                .map(|i| f.features(i))
                .collect::<Result<Vec<_>>>()?;
            let generated = results
                .iter()
                .map(|(_, i)| f.features(i))
                .collect::<Result<Vec<_>>>()?;
            Some(kid(&real, &generated, &opts.kid)?)
        }
        _ => None,
    };
    let records: Vec<EvalRecord> = results.into_iter().map(|(r, _)| r).collect();
    let summary = EvalSummary {
        runs: records.len(),
        psnr: mean_of(records.iter().map(|r| Some(r.psnr))),
        ssim: mean_of(records.iter().map(|r| Some(r.ssim))),
        local_clip: mean_of(records.iter().map(|r| r.local_clip)),
        global_clip: mean_of(records.iter().map(|r| r.global_clip)),
        directional_clip: mean_of(records.iter().map(|r| r.directional_clip)),
        delta_clip: mean_of(records.iter().map(|r| r.delta_clip)),
        q_score: mean_of(records.iter().map(|r| r.q_score)),
        kid: kid_estimate,
        converged_runs: records.iter().filter(|r| r.converged_at.is_some()).count(),
    };
    Ok(EvalReport { records, summary })
}

impl EvalReport {
    /// Writes `eval.jsonl`, `summary.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for r in &self.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        let write = |name: &str, body: &str| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("eval.jsonl", &lines)?;
        write(
            "summary.json",
            &serde_json::to_string_pretty(&self.summary)?,
        )?;
        let mut csv = String::from("scene_id,step,intensity\n");
        for r in &self.records {
            for (i, v) in r.intensity_curve.iter().enumerate() {
                csv.push_str(&format!("{},{},{v:.9e}\n", r.scene_id, i + 1));
            }
        }
        write("curves.csv", &csv)
    }
}
