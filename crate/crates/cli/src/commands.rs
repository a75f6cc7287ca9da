use std::path::{Path, PathBuf};

use dtv_core::backends::embed::{HashEmbedder, RandomProjectionFeatures};
use dtv_core::backends::mock::{procedural_target, MaskedEditor};
use dtv_core::backends::{ChatClient, EditingBackend, Embedder};
use dtv_core::engine::{PromptProvider, RunError, StaticPrompt, StepPrompt, TRAJECTORY_FILE};
use dtv_core::forge::agents::{critique, image_ref, synthesize_prompt, AgentRole};
use dtv_core::forge::{preview_render, DatasetSummary, Forge, SceneJob, MANIFEST_FILE};
use dtv_core::image::{read_image, write_image, SampleFormat};
use dtv_core::mask::MaskSource;
use dtv_core::metrics::report::{evaluate_runs, EvalOptions};
use dtv_core::{
    apply_channel_dropout, assemble_condition, BufferKind, ConditionTensor, Engine, Error,
    GBufferSet, Image, RenderState, Result, Trajectory,
};

use crate::config::{PromptMode, RunConfig};

/// Failure of a command, carrying the exit status class.
#[derive(Debug)]
pub enum CommandError {
    /// Ordinary error, classified by its kind.
    Core(Error),
    /// A trajectory stopped part way; partial artifacts are on disk.
    Aborted(Error),
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Core(e)
    }
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Core(e) => error_class(e).unwrap_or(2),
            CommandError::Aborted(e) => error_class(e).unwrap_or(4),
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            CommandError::Core(e) | CommandError::Aborted(e) => e,
        }
    }
}

/// Exit class of errors that do not depend on where they happened.
fn error_class(e: &Error) -> Option<i32> {
    match e {
        Error::BackendUnavailable(_)
        | Error::Timeout(_)
        | Error::Protocol(_)
        | Error::Remote(_)
        | Error::ClientUnavailable(_)
        | Error::UnparseableResponse(_)
        | Error::EmptyCritiques
        | Error::EmbedderUnavailable(_) => Some(3),
        Error::NonFiniteOutput { .. } | Error::DivergenceDetected { .. } => Some(4),
        Error::NoEntityFound { .. } | Error::MissingUserMask | Error::ZeroMask => Some(5),
        _ => None,
    }
}

pub type CmdResult = std::result::Result<(), CommandError>;

fn mock_target(g: &GBufferSet, seed: u64) -> Image {
    procedural_target(
        g.buffer(BufferKind::Albedo),
        g.buffer(BufferKind::Irradiance),
        seed,
    )
}

fn load_user_mask(cfg: &RunConfig) -> Result<Option<Image>> {
    cfg.user_mask
        .as_deref()
        .map(|p| read_image(p).map(|(m, _)| m))
        .transpose()
}

fn scene_with_dropout(cfg: &RunConfig) -> Result<GBufferSet> {
    let g = cfg.gbuffers()?;
    let (g, kept) = apply_channel_dropout(&g, &cfg.dropout);
    log::info!("scene {}: retained buffers {kept:?}", g.scene_id());
    Ok(g)
}

/// Saves what a run produced; an aborted run keeps its partial artifacts.
fn persist(
    traj: std::result::Result<Trajectory, RunError>,
    out: &Path,
    scene_id: &str,
) -> std::result::Result<Trajectory, CommandError> {
    match traj {
        Ok(t) => {
            t.save(out, Some(scene_id))?;
            Ok(t)
        }
        Err(RunError { trajectory, source }) => {
            if !trajectory.dtvs.is_empty() {
                trajectory.save(out, Some(scene_id))?;
            }
            Err(CommandError::Aborted(source))
        }
    }
}

pub fn synth(cfg: &RunConfig) -> CmdResult {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let g = scene_with_dropout(cfg)?;
    let codec = cfg.codec();
    let backend = cfg.generator(codec.clone(), mock_target(&g, cfg.seed))?;
    cfg.echo(out)?;
    let engine = Engine::new(backend.as_ref(), codec.as_ref(), cfg.engine.clone())?;
    let traj = persist(engine.run_synthesis(&g, cfg.seed), out, g.scene_id())?;
    println!(
        "synthesized {} at {}",
        g.scene_id(),
        out.join("step_0.png").display()
    );
    println!("termination: {}", reason_name(&traj));
    Ok(())
}

/// Per-step prompt from a fresh round of agent critiques.
struct AgentPrompts<'a> {
    chat: &'a dyn ChatClient,
    budget: usize,
}

impl PromptProvider for AgentPrompts<'_> {
    fn next_prompt(&mut self, state: &RenderState) -> Result<Option<StepPrompt>> {
        let reference = image_ref(&state.image);
        let critiques = AgentRole::ALL
            .iter()
            .map(|&role| critique(&reference, role, self.chat))
            .collect::<Result<Vec<_>>>()?;
        let merged = synthesize_prompt(&critiques, self.budget)?;
        log::info!("step {}: agent prompt {:?}", state.step, merged.prompt);
        Ok(Some(StepPrompt {
            prompt: Some(merged.prompt),
            user_mask: None,
        }))
    }
}

pub fn evolve(cfg: &RunConfig) -> CmdResult {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let g = scene_with_dropout(cfg)?;
    let user_mask = load_user_mask(cfg)?;
    let codec = cfg.codec();
    let backend = cfg.generator(codec.clone(), mock_target(&g, cfg.seed))?;
    let segmenter = cfg.segmentation(g.dims());
    let chat = match cfg.prompt_mode {
        PromptMode::Agent => Some(cfg.chat_client()?),
        PromptMode::Static => None,
    };
    cfg.echo(out)?;
    let engine = Engine::new(backend.as_ref(), codec.as_ref(), cfg.engine.clone())?
        .with_segmenter(segmenter.as_ref());
    let result = match &chat {
        Some(chat) => engine.run(
            &g,
            cfg.seed,
            &mut AgentPrompts {
                chat: chat.as_ref(),
                budget: cfg.dataset.forge.prompt_budget,
            },
        ),
        None => engine.run(
            &g,
            cfg.seed,
            &mut StaticPrompt(StepPrompt {
                prompt: cfg.prompt.clone(),
                user_mask,
            }),
        ),
    };
    let partial = match &result {
        Err(e) => Some(e.trajectory.intensities.clone()),
        Ok(_) => None,
    };
    match persist(result, out, g.scene_id()) {
        Ok(traj) => {
            print_intensities(&traj.intensities);
            println!("termination: {}", reason_name(&traj));
            println!("run directory: {}", out.display());
            Ok(())
        }
        Err(e) => {
            print_intensities(&partial.unwrap_or_default());
            println!("termination: aborted");
            Err(e)
        }
    }
}

fn print_intensities(values: &[f64]) {
    for (t, v) in values.iter().enumerate() {
        println!("step {t}: I = {v:.6e}");
    }
}

fn reason_name(traj: &Trajectory) -> String {
    serde_json::to_value(traj.termination_reason)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn edit(cfg: &RunConfig) -> CmdResult {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let input_path = cfg.input_image.as_deref().ok_or_else(|| {
        Error::Config("edit needs an input image: pass --input or set `input_image`".into())
    })?;
    if cfg.prompt.is_none() && cfg.user_mask.is_none() {
        return Err(Error::Config("edit needs --prompt or --mask".into()).into());
    }
    let (input, _) = read_image(input_path)?;
    let input = match input.channels() {
        3 => input,
        1 => input.replicate(3),
        c => return Err(Error::Shape(format!("input image has {c} channels, expected 3")).into()),
    };
    let user_mask = load_user_mask(cfg)?;
    let (w, h) = input.dims();
    let condition = match (&cfg.scene, &cfg.synthetic) {
        (None, None) => ConditionTensor::from_parts(Image::zeros(w, h, 21), [false; 6])?,
        _ => {
            let mut scoped = cfg.clone();
            scoped.resolution = Some([w, h]);
            let g = scene_with_dropout(&scoped)?;
            let g = if g.dims() == (w, h) {
                g
            } else {
                return Err(Error::dims((w, h), g.dims(), "scene vs input image").into());
            };
            assemble_condition(&g, None)?
        }
    };
    let target = procedural_target(
        &condition.span(BufferKind::Albedo),
        &condition.span(BufferKind::Irradiance),
        cfg.seed,
    );
    let codec = cfg.codec();
    let backend = cfg.generator(codec.clone(), target)?;
    let segmenter = cfg.segmentation((w, h));
    cfg.echo(out)?;
    let engine = Engine::new(backend.as_ref(), codec.as_ref(), cfg.engine.clone())?
        .with_segmenter(segmenter.as_ref());
    let state = RenderState {
        latent: codec.encode(&input)?,
        image: input,
        step: 1,
        prompt: None,
        mask: None,
        condition,
    };
    let (next, dtv) = engine.step(
        &state,
        &StepPrompt {
            prompt: cfg.prompt.clone(),
            user_mask,
        },
    )?;
    write_image(&next.image, &out.join("output.png"), SampleFormat::U16)?;
    write_image(&dtv.delta, &out.join("dtv.exr"), SampleFormat::F32)?;
    if let Some(mask) = &next.mask {
        mask.save(out, "mask")?;
        if let Some(e) = &mask.entity {
            println!("entity: {e}");
        }
        let source = match mask.source {
            MaskSource::Auto => "auto",
            MaskSource::User => "user",
        };
        println!("mask source: {source}");
    }
    println!(
        "edited image written to {}",
        out.join("output.png").display()
    );
    Ok(())
}

pub fn dataset_build(cfg: &RunConfig) -> CmdResult {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let scenes = cfg.dataset_scenes()?;
    if scenes.is_empty() {
        return Err(Error::Config("dataset has no scenes".into()).into());
    }
    let chat = cfg.chat_client()?;
    let dims = scenes[0].dims();
    if let Some(g) = scenes.iter().find(|g| g.dims() != dims) {
        return Err(Error::dims(dims, g.dims(), g.scene_id()).into());
    }
    let segmenter = cfg.segmentation(dims);
    let embedder = HashEmbedder::new(cfg.eval.embed_grid);
    cfg.echo(out)?;
    let jobs: Vec<SceneJob> = scenes
        .into_iter()
        .map(|g| SceneJob {
            base: preview_render(&g),
            gbuffers: g,
        })
        .collect();
    let forge = Forge {
        chat: chat.as_ref(),
        segmenter: segmenter.as_ref(),
        embedder: cfg
            .dataset
            .drift_check
            .then_some(&embedder as &dyn Embedder),
        config: cfg.dataset.forge.clone(),
    };
    let seed = cfg.seed;
    let contraction = cfg.dataset.editor_contraction;
    let editor_for = move |job: &SceneJob| -> Result<Box<dyn EditingBackend>> {
        Ok(Box::new(MaskedEditor::new(
            mock_target(&job.gbuffers, seed),
            contraction,
        )))
    };
    let summary = forge.build_dataset(&jobs, out, &editor_for)?;
    report_dataset(&summary, out);
    if summary.failed.is_empty() {
        Ok(())
    } else {
        let (id, msg) = &summary.failed[0];
        Err(CommandError::Aborted(Error::Config(format!(
            "{} scene(s) failed, first {id}: {msg}",
            summary.failed.len()
        ))))
    }
}

fn report_dataset(s: &DatasetSummary, out: &Path) {
    println!(
        "scenes written: {}, skipped: {}, failed: {}",
        s.written.len(),
        s.skipped.len(),
        s.failed.len()
    );
    for (id, t) in &s.truncated {
        println!("{id}: truncated at step {} ({:?})", t.step, t.reason);
    }
    println!("samples kept: {}", s.kept_samples);
    println!("manifest: {}", out.join(MANIFEST_FILE).display());
}

/// Run directories under each path: the path itself when it holds a
/// trajectory, else its immediate children that do.
fn discover_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join(TRAJECTORY_FILE).is_file() {
            runs.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(TRAJECTORY_FILE).is_file())
            .collect();
        children.sort();
        runs.extend(children);
    }
    Ok(runs)
}

fn load_reference(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "exr")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            read_image(p).map(|(img, _)| match img.channels() {
                1 => img.replicate(3),
                _ => img.channel_span(0, 3),
            })
        })
        .collect()
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let runs = discover_runs(&cfg.eval.runs)?;
    if runs.is_empty() {
        return Err(Error::Config("no run directories to evaluate".into()).into());
    }
    let reference = match &cfg.eval.reference {
        Some(dir) => load_reference(dir)?,
        None => Vec::new(),
    };
    let embedder = HashEmbedder::new(cfg.eval.embed_grid);
    let features = RandomProjectionFeatures::new(cfg.eval.embed_grid, 64, cfg.seed);
    cfg.echo(out)?;
    let opts = EvalOptions {
        embedder: Some(&embedder),
        features: Some(&features),
        reference: &reference,
        kid: cfg.eval.kid,
        ..EvalOptions::default()
    };
    let report = evaluate_runs(&runs, &opts)?;
    report.write(out)?;
    let s = &report.summary;
    println!("runs evaluated: {}", s.runs);
    let show = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            println!("{name}: {v:.6}");
        }
    };
    show("psnr", s.psnr);
    show("ssim", s.ssim);
    show("local_clip", s.local_clip);
    show("global_clip", s.global_clip);
    show("directional_clip", s.directional_clip);
    show("delta_clip", s.delta_clip);
    show("q_score", s.q_score);
    if let Some(k) = &s.kid {
        println!("kid: {:.6e} ± {:.6e}", k.mean, k.std);
    }
    println!("converged runs: {}", s.converged_runs);
    println!("report: {}", out.join("summary.json").display());
    Ok(())
}
