//! Paired training trajectories built by critique → prompt → edit loops.
//!
//! Each step asks three critic roles about the current image, merges their
//! suggestions into one instruction, grounds the named targets to a mask,
//! runs the editing backend, then filters and aligns the result. A rejected
//! step ends the scene's trajectory; the kept prefix is still written.

pub mod agents;
pub mod quality;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use agents::{
    critique, image_ref, synthesize_prompt, AgentCritique, AgentRole, Suggestion,
    SynthesizedPrompt, DEFAULT_PROMPT_BUDGET, TEMPLATE_VERSION,
};
pub use quality::{
    align_pair, filter_sample, laplacian_variance, noise_ratio, Alignment, FilterConfig,
    FilterReport, RejectReason, Verdict, DEFAULT_MAX_SHIFT,
};

use crate::backends::{ChatClient, EditingBackend, Embedder, SegmentationBackend};
use crate::error::{Error, Result};
use crate::gbuffer::{assemble_condition, BufferKind, ConditionTensor, GBufferSet};
use crate::image::{write_image, Image, SampleFormat};
use crate::mask::{refine_mask, segment, Entity, MaskParams, SemanticMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    /// Trajectory length `T`.
    pub steps: usize,
    pub max_shift: usize,
    pub prompt_budget: usize,
    pub filter: FilterConfig,
    pub mask: MaskParams,
    pub workers: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            max_shift: DEFAULT_MAX_SHIFT,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            filter: FilterConfig::default(),
            mask: MaskParams::default(),
            workers: 4,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("forge steps must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.mask.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    pub template_version: String,
    pub critiques: Vec<AgentCritique>,
    pub targets: Vec<String>,
    pub filter: FilterReport,
    pub shift: (i64, i64),
    pub alignment_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x_prev: Image,
    pub x_next: Image,
    pub condition: ConditionTensor,
    pub prompt: String,
    pub mask: SemanticMask,
    pub step: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub step: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgedTrajectory {
    pub scene_id: String,
    pub samples: Vec<PairedSample>,
    pub truncated: Option<Truncation>,
}

/// One scene to forge: its G-buffers and the renderer's image of it.
#[derive(Debug, Clone)]
pub struct SceneJob {
    pub gbuffers: GBufferSet,
    pub base: Image,
}

impl SceneJob {
    pub fn scene_id(&self) -> &str {
        self.gbuffers.scene_id()
    }
}

/// Simple shaded preview used as the starting render when none is given:
/// albedo lit by irradiance.
pub fn preview_render(g: &GBufferSet) -> Image {
    let albedo = g.buffer(BufferKind::Albedo);
    let irr = g.buffer(BufferKind::Irradiance);
    Image::from_fn(albedo.width(), albedo.height(), 3, |x, y, c| {
        (albedo.get(x, y, c) * (0.35 + 0.65 * irr.get(x, y, c))).clamp(0.0, 1.0)
    })
}

/// Shared, read-only services used by every scene.
pub struct Forge<'a> {
    pub chat: &'a dyn ChatClient,
    pub segmenter: &'a dyn SegmentationBackend,
    pub embedder: Option<&'a dyn Embedder>,
    pub config: ForgeConfig,
}

impl Forge<'_> {
    /// Union of the targets' segmentation maps, refined.
    fn target_mask(&self, image: &Image, targets: &[String]) -> Result<SemanticMask> {
        let mut raw = Image::zeros(image.width(), image.height(), 1);
        for t in targets {
            let entity = Entity {
                text: t.clone(),
                source_prompt: t.clone(),
            };
            let map = segment(image, &entity, self.segmenter)?;
            for (r, m) in raw.data_mut().iter_mut().zip(map.data()) {
                *r = r.max(*m);
            }
        }
        let p = &self.config.mask;
        let mut mask = refine_mask(&raw, p.threshold, p.dilation_radius, p.sigma);
        mask.entity = Some(targets.join(", "));
        Ok(mask)
    }

    pub fn build_trajectory(
        &self,
        job: &SceneJob,
        editor: &dyn EditingBackend,
    ) -> Result<ForgedTrajectory> {
        self.config.validate()?;
        let g = &job.gbuffers;
        if job.base.dims() != g.dims() || job.base.channels() != 3 {
            return Err(Error::dims(g.dims(), job.base.dims(), "base render"));
        }
        let scene_id = g.scene_id().to_string();
        let mut current = job.base.clone();
        let mut samples = Vec::new();
        for t in 0..self.config.steps {
            let reference = image_ref(&current);
            let critiques = AgentRole::ALL
                .iter()
                .map(|&role| critique(&reference, role, self.chat))
                .collect::<Result<Vec<_>>>()?;
            let merged = synthesize_prompt(&critiques, self.config.prompt_budget)?;
            let mask = self.target_mask(&current, &merged.targets)?;
            let edited = editor.edit(&current, &merged.prompt, &mask.refined, t)?;
            edited.ensure_same_shape(&current, "edited image")?;
            let edited = edited.clamp01();
            let filter = filter_sample(&current, &edited, &self.config.filter, self.embedder)?;
            if let Verdict::Reject(reason) = filter.verdict {
                log::info!("{scene_id}: step {t} rejected ({reason:?}), truncating");
                return Ok(ForgedTrajectory {
                    scene_id,
                    samples,
                    truncated: Some(Truncation { step: t, reason }),
                });
            }
            let alignment = align_pair(&current, &edited, self.config.max_shift)?;
            let condition = assemble_condition(g, Some(&mask.refined))?;
            let x_next = alignment.aligned;
            samples.push(PairedSample {
                x_prev: current,
                x_next: x_next.clone(),
                condition,
                prompt: merged.prompt,
                mask,
                step: t,
                provenance: Provenance {
                    scene_id: scene_id.clone(),
                    template_version: TEMPLATE_VERSION.to_string(),
                    critiques,
                    targets: merged.targets,
                    filter,
                    shift: alignment.shift,
                    alignment_residual: alignment.residual,
                },
            });
            current = x_next;
        }
        Ok(ForgedTrajectory {
            scene_id,
            samples,
            truncated: None,
        })
    }

    /// Forges every scene not already recorded under `root`, in parallel on
    /// `config.workers` threads. `editor_for` builds the editing backend of
    /// a scene. Per-scene failures are logged and reported, not fatal.
    pub fn build_dataset(
        &self,
        jobs: &[SceneJob],
        root: &Path,
        editor_for: &(dyn Fn(&SceneJob) -> Result<Box<dyn EditingBackend>> + Sync),
    ) -> Result<DatasetSummary> {
        self.config.validate()?;
        let writer = DatasetWriter::open(root)?;
        let done = writer.completed_scenes()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let outcomes: Vec<SceneOutcome> = pool.install(|| {
            jobs.par_iter()
                .map(|job| {
                    let id = job.scene_id().to_string();
                    if done.contains(&id) {
                        return SceneOutcome::Skipped(id);
                    }
                    let result = editor_for(job)
                        .and_then(|editor| self.build_trajectory(job, editor.as_ref()))
                        .and_then(|traj| writer.write_trajectory(&traj).map(|n| (traj, n)));
                    match result {
                        Ok((traj, n)) => SceneOutcome::Written {
                            scene_id: id,
                            kept: n,
                            truncated: traj.truncated,
                        },
                        Err(e) => {
                            log::error!("scene {id} failed: {e}");
                            SceneOutcome::Failed {
                                scene_id: id,
                                error: e.to_string(),
                            }
                        }
                    }
                })
                .collect()
        });
        let mut summary = DatasetSummary::default();
        for o in outcomes {
            match o {
                SceneOutcome::Skipped(id) => summary.skipped.push(id),
                SceneOutcome::Written {
                    scene_id,
                    kept,
                    truncated,
                } => {
                    summary.kept_samples += kept;
                    if let Some(t) = truncated {
                        summary.truncated.push((scene_id.clone(), t));
                    }
                    summary.written.push(scene_id);
                }
                SceneOutcome::Failed { scene_id, error } => summary.failed.push((scene_id, error)),
            }
        }
        Ok(summary)
    }
}

enum SceneOutcome {
    Skipped(String),
    Written {
        scene_id: String,
        kept: usize,
        truncated: Option<Truncation>,
    },
    Failed {
        scene_id: String,
        error: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub truncated: Vec<(String, Truncation)>,
    pub failed: Vec<(String, String)>,
    pub kept_samples: usize,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const SCENE_STATUS_FILE: &str = "scene.json";

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scene_id: String,
    pub step: usize,
    /// Sample directory relative to the dataset root.
    pub dir: String,
    pub prompt: String,
    pub targets: Vec<String>,
    pub shift: (i64, i64),
    pub noise_ratio: f64,
    pub drift_similarity: Option<f64>,
}

/// Per-sample `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub step: usize,
    pub prompt: String,
    pub dropout_state: [bool; 6],
    pub mask: crate::mask::MaskSidecar,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneStatus {
    scene_id: String,
    kept: usize,
    truncated: Option<Truncation>,
}

/// Writes sample directories and appends to the manifest. The manifest
/// file handle is the only shared state and is behind a mutex.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: Mutex<File>,
}

impl DatasetWriter {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Mutex::new(file),
        })
    }

    /// Scenes that need no more work: any with manifest records, plus
    /// finished scenes that kept nothing.
    pub fn completed_scenes(&self) -> Result<HashSet<String>> {
        let mut done: HashSet<String> = read_manifest(&self.root)?
            .into_iter()
            .map(|r| r.scene_id)
            .collect();
        let entries = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for entry in entries.flatten() {
            let status = entry.path().join(SCENE_STATUS_FILE);
            if let Ok(text) = std::fs::read_to_string(&status) {
                if let Ok(s) = serde_json::from_str::<SceneStatus>(&text) {
                    if s.kept == 0 {
                        done.insert(s.scene_id);
                    }
                }
            }
        }
        Ok(done)
    }

    /// Writes all samples, then the scene status, then appends the
    /// manifest records in one locked write. Returns the sample count.
    pub fn write_trajectory(&self, traj: &ForgedTrajectory) -> Result<usize> {
        let mut records = Vec::with_capacity(traj.samples.len());
        for s in &traj.samples {
            records.push(self.write_sample(s)?);
        }
        let scene_dir = self.root.join(&traj.scene_id);
        std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let status_path = scene_dir.join(SCENE_STATUS_FILE);
        let status = SceneStatus {
            scene_id: traj.scene_id.clone(),
            kept: records.len(),
            truncated: traj.truncated.clone(),
        };
        std::fs::write(&status_path, serde_json::to_string_pretty(&status)?)
            .map_err(|e| Error::io(&status_path, e))?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        let path = self.root.join(MANIFEST_FILE);
        let mut file = self
            .manifest
            .lock()
            .map_err(|_| Error::Config("manifest lock poisoned".into()))?;
        file.write_all(lines.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(&path, e))?;
        Ok(records.len())
    }

    fn write_sample(&self, s: &PairedSample) -> Result<ManifestRecord> {
        let rel = format!("{}/step_{}", s.provenance.scene_id, s.step);
        let dir = self.root.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_image(&s.x_prev, &dir.join("prev.png"), SampleFormat::U16)?;
        write_image(&s.x_next, &dir.join("next.png"), SampleFormat::U16)?;
        write_image(&s.mask.refined, &dir.join("mask.png"), SampleFormat::U16)?;
        let prompt_path = dir.join("prompt.txt");
        std::fs::write(&prompt_path, &s.prompt).map_err(|e| Error::io(&prompt_path, e))?;
        let meta = SampleMeta {
            step: s.step,
            prompt: s.prompt.clone(),
            dropout_state: s.condition.dropout_state(),
            mask: s.mask.sidecar(),
            provenance: s.provenance.clone(),
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        Ok(ManifestRecord {
            scene_id: s.provenance.scene_id.clone(),
            step: s.step,
            dir: rel,
            prompt: s.prompt.clone(),
            targets: s.provenance.targets.clone(),
            shift: s.provenance.shift,
            noise_ratio: s.provenance.filter.noise_ratio,
            drift_similarity: s.provenance.filter.drift_similarity,
        })
    }
}

/// Reads `manifest.jsonl` under `root`; a missing file reads as empty.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST_FILE);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.clone(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::embed::HashEmbedder;
    use crate::backends::mock::{
        procedural_target, MaskedEditor, RectSegmenter, ScriptedChatClient,
    };
    use crate::backends::Rect;
    use crate::gbuffer::synthetic;

    fn job(id: &str, seed: u64) -> SceneJob {
        let g = synthetic::scene(id, 32, 32, seed);
        let base = preview_render(&g);
        SceneJob { gbuffers: g, base }
    }

    fn editor(job: &SceneJob) -> MaskedEditor {
        let g = &job.gbuffers;
        MaskedEditor::new(
            procedural_target(
                g.buffer(BufferKind::Albedo),
                g.buffer(BufferKind::Irradiance),
                3,
            ),
            0.5,
        )
    }

    fn segmenter() -> RectSegmenter {
        RectSegmenter::new((32, 32)).with_fallback(Rect::new(8, 8, 24, 24))
    }

    #[test]
    fn full_length_trajectory() {
        let chat = ScriptedChatClient::default();
        let seg = segmenter();
        let emb = HashEmbedder::default();
        let forge = Forge {
            chat: &chat,
            segmenter: &seg,
            embedder: Some(&emb),
            config: ForgeConfig {
                mask: MaskParams::for_resolution(32, 32),
                ..ForgeConfig::default()
            },
        };
        let j = job("a", 1);
        let traj = forge.build_trajectory(&j, &editor(&j)).unwrap();
        assert_eq!(traj.samples.len(), 6);
        assert!(traj.truncated.is_none());
        for (t, s) in traj.samples.iter().enumerate() {
            assert_eq!(s.step, t);
            assert!(!s.prompt.is_empty());
            assert_eq!(s.mask.dims(), (32, 32));
        }
        // Each step starts where the previous one ended.
        for w in traj.samples.windows(2) {
            assert_eq!(w[0].x_next, w[1].x_prev);
        }
    }

    #[test]
    fn noisy_step_truncates() {
        let chat = ScriptedChatClient::default();
        let seg = segmenter();
        let forge = Forge {
            chat: &chat,
            segmenter: &seg,
            embedder: None,
            config: ForgeConfig::default(),
        };
        let j = job("b", 2);
        let mut ed = editor(&j);
        ed.noise_at = Some((3, 0.4, 9));
        let traj = forge.build_trajectory(&j, &ed).unwrap();
        assert_eq!(traj.samples.len(), 3);
        assert_eq!(
            traj.truncated,
            Some(Truncation {
                step: 3,
                reason: RejectReason::Noise
            })
        );
    }

    #[test]
    fn resume_skips_written_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let chat = ScriptedChatClient::default();
        let seg = segmenter();
        let forge = Forge {
            chat: &chat,
            segmenter: &seg,
            embedder: None,
            config: ForgeConfig {
                steps: 2,
                workers: 2,
                ..ForgeConfig::default()
            },
        };
        let jobs = vec![job("s0", 1), job("s1", 2)];
        let make = |j: &SceneJob| -> Result<Box<dyn EditingBackend>> { Ok(Box::new(editor(j))) };
        let first = forge.build_dataset(&jobs, dir.path(), &make).unwrap();
        assert_eq!(first.kept_samples, 4);
        let second = forge.build_dataset(&jobs, dir.path(), &make).unwrap();
        assert_eq!(second.kept_samples, 0);
        assert_eq!(second.skipped.len(), 2);
        assert_eq!(read_manifest(dir.path()).unwrap().len(), 4);
        assert!(dir.path().join("s1/step_1/meta.json").exists());
    }
}
