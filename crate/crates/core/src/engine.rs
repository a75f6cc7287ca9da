//! Iterative transfer from a PBR synthesis toward a photorealistic image.
//!
//! Step 0 synthesizes `x₁` from a Gaussian latent and the G-buffer
//! condition; its transfer vector is the synthesis itself. Every later
//! step grounds the prompt to a mask, calls the backend on the encoded
//! current image and records `Δxₜ = f(…) − xₜ` before clamping. The loop
//! stops once the mask-weighted residual drops below `tau_stop`, after
//! `max_steps` evolution steps, or when the prompt source asks it to.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backends::{self, Codec, GenerateInput, GenerativeBackend, Latent, SegmentationBackend};
use crate::error::{Error, Result};
use crate::gbuffer::{assemble_condition, ConditionTensor, GBufferSet};
use crate::image::{write_image, Image, SampleFormat};
use crate::mask::{resolve_mask, EntityExtractor, MaskParams, MaskRequest, SemanticMask};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderState {
    pub image: Image,
    pub step: usize,
    /// Prompt of the step that produced this state.
    pub prompt: Option<String>,
    /// Mask of the step that produced this state.
    pub mask: Option<SemanticMask>,
    pub latent: Latent,
    pub condition: ConditionTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferVector {
    pub delta: Image,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    MaxSteps,
    UserStop,
    Aborted,
    /// Only the synthesis step was requested.
    SynthesisOnly,
}

/// States, transfer vectors and intensities of one run.
///
/// `states[0]` is the blank canvas holding the Gaussian latent and
/// `states[t + 1]` is the output of step `t`, so `dtvs[t]` and
/// `intensities[t]` belong to step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<RenderState>,
    pub dtvs: Vec<TransferVector>,
    /// Termination signal per step (normalized or raw, per config).
    pub intensities: Vec<f64>,
    /// Unnormalized mask-weighted residual per step.
    pub raw_intensities: Vec<f64>,
    pub termination_reason: TerminationReason,
    pub seed: u64,
    pub backend: String,
    pub config: EngineConfig,
}

impl Trajectory {
    pub fn final_image(&self) -> &Image {
        &self.states.last().expect("trajectory has a state").image
    }

    /// Number of evolution steps taken after synthesis.
    pub fn evolution_steps(&self) -> usize {
        self.dtvs.len().saturating_sub(1)
    }

    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            scene_id: None,
            seed: self.seed,
            backend: self.backend.clone(),
            prompts: self.states[1..].iter().map(|s| s.prompt.clone()).collect(),
            entities: self.states[1..]
                .iter()
                .map(|s| s.mask.as_ref().and_then(|m| m.entity.clone()))
                .collect(),
            intensities: self.intensities.clone(),
            raw_intensities: self.raw_intensities.clone(),
            termination_reason: self.termination_reason,
            steps: self.dtvs.len(),
            config: self.config.clone(),
        }
    }

    /// Writes `step_<t>.png`, `mask_<t>.png`, `dtv_<t>.exr` and
    /// `trajectory.json` into `dir`.
    pub fn save(&self, dir: &Path, scene_id: Option<&str>) -> Result<TrajectoryRecord> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, (state, dtv)) in self.states[1..].iter().zip(&self.dtvs).enumerate() {
            write_image(
                &state.image,
                &dir.join(format!("step_{t}.png")),
                SampleFormat::U16,
            )?;
            write_image(
                &dtv.delta,
                &dir.join(format!("dtv_{t}.exr")),
                SampleFormat::F32,
            )?;
            if let Some(mask) = &state.mask {
                mask.save(dir, &format!("mask_{t}"))?;
            }
        }
        let mut record = self.record();
        record.scene_id = scene_id.map(str::to_string);
        let path = dir.join(TRAJECTORY_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&record)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(record)
    }
}

pub const TRAJECTORY_FILE: &str = "trajectory.json";

/// Serialized summary of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub scene_id: Option<String>,
    pub seed: u64,
    pub backend: String,
    /// Prompt of each step, `prompts[0]` being the synthesis prompt.
    pub prompts: Vec<Option<String>>,
    pub entities: Vec<Option<String>>,
    pub intensities: Vec<f64>,
    pub raw_intensities: Vec<f64>,
    pub termination_reason: TerminationReason,
    pub steps: usize,
    pub config: EngineConfig,
}

impl TrajectoryRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TRAJECTORY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn step_image_path(dir: &Path, step: usize) -> PathBuf {
        dir.join(format!("step_{step}.png"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub tau_stop: f64,
    /// Cap on evolution steps after synthesis.
    pub max_steps: usize,
    /// Terminate on the mask-normalized intensity rather than the raw sum.
    pub normalized_intensity: bool,
    /// Pass the mask to the backend on evolution steps. When false the
    /// backend sees no mask and the mask only enters the condition tensor.
    pub mask_in_evolution: bool,
    pub mask: MaskParams,
    pub synthesis_prompt: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tau_stop: 0.01,
            max_steps: 12,
            normalized_intensity: true,
            mask_in_evolution: true,
            mask: MaskParams::default(),
            synthesis_prompt: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_stop.is_finite() && self.tau_stop >= 0.0) {
            return Err(Error::Config(format!(
                "tau_stop must be >= 0, got {}",
                self.tau_stop
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        self.mask.validate()
    }
}

/// Blank canvas at step 0 with a seeded standard-normal latent and a
/// zero-mask condition.
pub fn init_state(
    g: &GBufferSet,
    prompt: Option<&str>,
    seed: u64,
    codec: &dyn Codec,
) -> Result<RenderState> {
    let (w, h) = g.dims();
    let (lw, lh, lc) = codec.latent_shape(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..lw * lh * lc)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(RenderState {
        image: Image::zeros(w, h, 3),
        step: 0,
        prompt: prompt.map(str::to_string),
        mask: None,
        latent: Latent(Image::from_vec(lw, lh, lc, data)?),
        condition: assemble_condition(g, None)?,
    })
}

/// Mask-weighted mean-over-channels L1 residual.
///
/// `mask` is single-channel. The raw value is `Σ M·|Δ|`; the normalized
/// value divides by `Σ M` and fails with [`Error::ZeroMask`] when that is 0.
pub fn semantic_intensity(
    x_next: &Image,
    x_prev: &Image,
    mask: &Image,
    normalized: bool,
) -> Result<f64> {
    x_next.ensure_same_shape(x_prev, "semantic intensity")?;
    if mask.dims() != x_next.dims() {
        return Err(Error::dims(x_next.dims(), mask.dims(), "intensity mask"));
    }
    let c = x_next.channels();
    let mc = mask.channels();
    let (mut weighted, mut mass) = (0.0, 0.0);
    for (p, (a, b)) in x_next
        .data()
        .chunks_exact(c)
        .zip(x_prev.data().chunks_exact(c))
        .enumerate()
    {
        let m = mask.data()[p * mc];
        let l1 = a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / c as f64;
        weighted += m * l1;
        mass += m;
    }
    if !normalized {
        return Ok(weighted);
    }
    if mass <= 0.0 {
        return Err(Error::ZeroMask);
    }
    Ok(weighted / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop(TerminationReason),
}

/// Convergence takes precedence over the step cap.
pub fn should_terminate(intensity: f64, tau_stop: f64, step: usize, max_steps: usize) -> Decision {
    if intensity < tau_stop {
        Decision::Stop(TerminationReason::Converged)
    } else if step >= max_steps {
        Decision::Stop(TerminationReason::MaxSteps)
    } else {
        Decision::Continue
    }
}

/// Prompt and optional user-drawn region for one evolution step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepPrompt {
    pub prompt: Option<String>,
    pub user_mask: Option<Image>,
}

impl StepPrompt {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            prompt: Some(prompt.into()),
            user_mask: None,
        }
    }
}

/// Supplies the prompt for each evolution step. Returning `None` stops
/// the run with [`TerminationReason::UserStop`].
pub trait PromptProvider {
    fn next_prompt(&mut self, state: &RenderState) -> Result<Option<StepPrompt>>;
}

/// The same prompt at every step.
#[derive(Debug, Clone)]
pub struct StaticPrompt(pub StepPrompt);

impl PromptProvider for StaticPrompt {
    fn next_prompt(&mut self, _state: &RenderState) -> Result<Option<StepPrompt>> {
        Ok(Some(self.0.clone()))
    }
}

/// A fixed list of prompts; stops when it runs out.
#[derive(Debug, Clone)]
pub struct PromptSchedule {
    prompts: Vec<StepPrompt>,
    next: usize,
}

impl PromptSchedule {
    pub fn new(prompts: Vec<StepPrompt>) -> Self {
        Self { prompts, next: 0 }
    }
}

impl PromptProvider for PromptSchedule {
    fn next_prompt(&mut self, _state: &RenderState) -> Result<Option<StepPrompt>> {
        let p = self.prompts.get(self.next).cloned();
        self.next += 1;
        Ok(p)
    }
}

impl<F> PromptProvider for F
where
    F: FnMut(&RenderState) -> Result<Option<StepPrompt>>,
{
    fn next_prompt(&mut self, state: &RenderState) -> Result<Option<StepPrompt>> {
        self(state)
    }
}

/// A step failed; `trajectory` holds everything up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("trajectory aborted after {} steps: {source}", trajectory.dtvs.len())]
pub struct RunError {
    pub trajectory: Box<Trajectory>,
    #[source]
    pub source: Error,
}

pub struct Engine<'a> {
    backend: &'a dyn GenerativeBackend,
    codec: &'a dyn Codec,
    segmenter: Option<&'a dyn SegmentationBackend>,
    extractor: EntityExtractor,
    config: EngineConfig,
}

impl<'a> Engine<'a> {
    pub fn new(
        backend: &'a dyn GenerativeBackend,
        codec: &'a dyn Codec,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backend,
            codec,
            segmenter: None,
            extractor: EntityExtractor::default(),
            config,
        })
    }

    pub fn with_segmenter(mut self, segmenter: &'a dyn SegmentationBackend) -> Self {
        self.segmenter = Some(segmenter);
        self
    }

    pub fn with_extractor(mut self, extractor: EntityExtractor) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Resolves the step mask, or `None` for a full-frame edit when the
    /// step carries neither prompt nor user region.
    fn resolve(&self, state: &RenderState, next: &StepPrompt) -> Result<Option<SemanticMask>> {
        if next.prompt.is_none() && next.user_mask.is_none() {
            return Ok(None);
        }
        let request = MaskRequest {
            prompt: next.prompt.as_deref(),
            user_mask: next.user_mask.as_ref(),
        };
        resolve_mask(
            &self.config.mask,
            request,
            &state.image,
            &self.extractor,
            self.segmenter,
        )
        .map(Some)
    }

    /// Runs the synthesis step on a freshly initialized state.
    pub fn synthesize(&self, state: &RenderState) -> Result<(RenderState, TransferVector)> {
        let raw = backends::generate(
            self.backend,
            &GenerateInput {
                latent: &state.latent,
                step: 0,
                condition: &state.condition,
                mask: None,
                prompt: state.prompt.as_deref(),
            },
        )?;
        let image = raw.clamp01();
        let next = RenderState {
            latent: self.codec.encode(&image)?,
            image,
            step: 1,
            prompt: state.prompt.clone(),
            mask: None,
            condition: state.condition.clone(),
        };
        Ok((
            next,
            TransferVector {
                delta: raw,
                step: 0,
            },
        ))
    }

    /// One evolution step from `state` (which must have `step ≥ 1`).
    pub fn step(
        &self,
        state: &RenderState,
        next: &StepPrompt,
    ) -> Result<(RenderState, TransferVector)> {
        if state.step == 0 {
            return self.synthesize(state);
        }
        let mask = self.resolve(state, next)?;
        let mask_img = mask.as_ref().map(|m| &m.refined);
        let condition = state.condition.with_mask(mask_img)?;
        let raw = backends::generate(
            self.backend,
            &GenerateInput {
                latent: &state.latent,
                step: state.step,
                condition: &condition,
                mask: if self.config.mask_in_evolution {
                    mask_img
                } else {
                    None
                },
                prompt: next.prompt.as_deref(),
            },
        )?;
        let delta = raw.sub(&state.image)?;
        // Built from the delta so that state + delta reproduces it exactly.
        let image = state.image.add(&delta)?.clamp01();
        let out = RenderState {
            latent: self.codec.encode(&image)?,
            image,
            step: state.step + 1,
            prompt: next.prompt.clone(),
            mask,
            condition,
        };
        Ok((
            out,
            TransferVector {
                delta,
                step: state.step,
            },
        ))
    }

    /// Returns `(signal, raw)` intensities for the transition `prev → next`.
    fn intensities(&self, next: &RenderState, prev: &RenderState) -> Result<(f64, f64)> {
        let full;
        let mask = match &next.mask {
            Some(m) => &m.refined,
            None => {
                full = Image::filled(next.image.width(), next.image.height(), 1, 1.0);
                &full
            }
        };
        let raw = semantic_intensity(&next.image, &prev.image, mask, false)?;
        let signal = if self.config.normalized_intensity {
            match semantic_intensity(&next.image, &prev.image, mask, true) {
                Err(Error::ZeroMask) => 0.0,
                other => other?,
            }
        } else {
            raw
        };
        Ok((signal, raw))
    }

    pub fn run(
        &self,
        g: &GBufferSet,
        seed: u64,
        prompts: &mut dyn PromptProvider,
    ) -> std::result::Result<Trajectory, RunError> {
        let mut traj = self.empty_trajectory(seed);
        match self.drive(g, seed, prompts, &mut traj) {
            Ok(reason) => {
                traj.termination_reason = reason;
                Ok(traj)
            }
            Err(source) => {
                log::warn!("trajectory aborted: {source}");
                Err(RunError {
                    trajectory: Box::new(traj),
                    source,
                })
            }
        }
    }

    /// Initializes and runs the synthesis step only.
    pub fn run_synthesis(
        &self,
        g: &GBufferSet,
        seed: u64,
    ) -> std::result::Result<Trajectory, RunError> {
        let mut traj = self.empty_trajectory(seed);
        let result = init_state(g, self.config.synthesis_prompt.as_deref(), seed, self.codec)
            .and_then(|s0| {
                traj.states.push(s0);
                let (s1, dtv) = self.synthesize(&traj.states[0])?;
                let (signal, raw) = self.intensities(&s1, &traj.states[0])?;
                traj.states.push(s1);
                traj.dtvs.push(dtv);
                traj.intensities.push(signal);
                traj.raw_intensities.push(raw);
                Ok(())
            });
        match result {
            Ok(()) => {
                traj.termination_reason = TerminationReason::SynthesisOnly;
                Ok(traj)
            }
            Err(source) => Err(RunError {
                trajectory: Box::new(traj),
                source,
            }),
        }
    }

    fn empty_trajectory(&self, seed: u64) -> Trajectory {
        Trajectory {
            states: Vec::new(),
            dtvs: Vec::new(),
            intensities: Vec::new(),
            raw_intensities: Vec::new(),
            termination_reason: TerminationReason::Aborted,
            seed,
            backend: self.backend.spec().name,
            config: self.config.clone(),
        }
    }

    fn drive(
        &self,
        g: &GBufferSet,
        seed: u64,
        prompts: &mut dyn PromptProvider,
        traj: &mut Trajectory,
    ) -> Result<TerminationReason> {
        traj.states.push(init_state(
            g,
            self.config.synthesis_prompt.as_deref(),
            seed,
            self.codec,
        )?);
        loop {
            let current = traj.states.last().expect("initialized");
            let next_prompt = if current.step == 0 {
                StepPrompt::default()
            } else {
                match prompts.next_prompt(current)? {
                    Some(p) => p,
                    None => return Ok(TerminationReason::UserStop),
                }
            };
            let (next, dtv) = self.step(current, &next_prompt)?;
            let (signal, raw) = self.intensities(&next, current)?;
            let t = dtv.step;
            log::debug!("step {t}: intensity {signal:.6} (raw {raw:.6})");
            traj.states.push(next);
            traj.dtvs.push(dtv);
            traj.intensities.push(signal);
            traj.raw_intensities.push(raw);
            if t == 0 {
                continue;
            }
            if let Decision::Stop(reason) =
                should_terminate(signal, self.config.tau_stop, t, self.config.max_steps)
            {
                return Ok(reason);
            }
        }
    }
}

/// Convenience wrapper over [`Engine::run`].
pub fn run_trajectory(
    g: &GBufferSet,
    prompts: &mut dyn PromptProvider,
    backend: &dyn GenerativeBackend,
    codec: &dyn Codec,
    segmenter: Option<&dyn SegmentationBackend>,
    config: &EngineConfig,
    seed: u64,
) -> std::result::Result<Trajectory, RunError> {
    let engine = match Engine::new(backend, codec, config.clone()) {
        Ok(e) => e,
        Err(source) => {
            return Err(RunError {
                trajectory: Box::new(Trajectory {
                    states: Vec::new(),
                    dtvs: Vec::new(),
                    intensities: Vec::new(),
                    raw_intensities: Vec::new(),
                    termination_reason: TerminationReason::Aborted,
                    seed,
                    backend: backend.spec().name,
                    config: config.clone(),
                }),
                source,
            })
        }
    };
    let engine = match segmenter {
        Some(s) => engine.with_segmenter(s),
        None => engine,
    };
    engine.run(g, seed, prompts)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::mock::{
        EchoGenerator, FaultyGenerator, IdentityCodec, MockConfig, MockGenerator,
    };
    use crate::gbuffer::synthetic;
    use crate::mask::MaskMode;

    fn user_config() -> EngineConfig {
        EngineConfig {
            mask: MaskParams {
                mode: MaskMode::User,
                dilation_radius: 0,
                sigma: 0.0,
                ..MaskParams::default()
            },
            ..EngineConfig::default()
        }
    }

    fn full_mask_prompt(w: usize, h: usize) -> StaticPrompt {
        StaticPrompt(StepPrompt {
            prompt: Some("make it real".into()),
            user_mask: Some(Image::filled(w, h, 1, 1.0)),
        })
    }

    #[test]
    fn intensity_closed_form() {
        let a = Image::filled(2, 2, 3, 0.5);
        let b = Image::zeros(2, 2, 3);
        let m = Image::filled(2, 2, 1, 1.0);
        assert_eq!(semantic_intensity(&a, &b, &m, false).unwrap(), 2.0);
        assert_eq!(semantic_intensity(&a, &b, &m, true).unwrap(), 0.5);
        assert_eq!(semantic_intensity(&a, &a, &m, true).unwrap(), 0.0);
        assert!(matches!(
            semantic_intensity(&a, &b, &Image::zeros(2, 2, 1), true),
            Err(Error::ZeroMask)
        ));
        assert_eq!(
            semantic_intensity(&a, &b, &Image::zeros(2, 2, 1), false).unwrap(),
            0.0
        );
    }

    #[test]
    fn termination_rules() {
        assert_eq!(
            should_terminate(0.0, 0.01, 1, 12),
            Decision::Stop(TerminationReason::Converged)
        );
        assert_eq!(
            should_terminate(5.0, 0.01, 12, 12),
            Decision::Stop(TerminationReason::MaxSteps)
        );
        assert_eq!(should_terminate(0.01, 0.01, 3, 12), Decision::Continue);
    }

    #[test]
    fn init_state_is_seeded() {
        let g = synthetic::scene("s", 8, 8, 1);
        let a = init_state(&g, None, 7, &IdentityCodec).unwrap();
        let b = init_state(&g, None, 7, &IdentityCodec).unwrap();
        let c = init_state(&g, None, 8, &IdentityCodec).unwrap();
        assert_eq!(a.latent, b.latent);
        let l2: f64 = a
            .latent
            .0
            .sub(&c.latent.0)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum();
        assert!(l2 > 0.0);
        assert_eq!(a.condition.mask_span().max_abs(), 0.0);
    }

    #[test]
    fn echo_converges_after_one_evolution_step() {
        let g = synthetic::scene("s", 8, 8, 1);
        let gen = EchoGenerator::new(Arc::new(IdentityCodec));
        let engine = Engine::new(&gen, &IdentityCodec, user_config()).unwrap();
        let traj = engine.run(&g, 1, &mut full_mask_prompt(8, 8)).unwrap();
        assert_eq!(traj.termination_reason, TerminationReason::Converged);
        assert_eq!(traj.dtvs.len(), 2);
        assert_eq!(traj.intensities[1], 0.0);
        assert_eq!(traj.states.len(), traj.dtvs.len() + 1);
    }

    #[test]
    fn zero_tau_hits_step_cap() {
        let g = synthetic::scene("s", 8, 8, 1);
        let gen = MockGenerator::new(
            MockConfig {
                target_image: Image::filled(8, 8, 3, 0.9),
                contraction: 0.5,
                respect_mask: true,
            },
            Arc::new(IdentityCodec),
        )
        .unwrap();
        let config = EngineConfig {
            tau_stop: 0.0,
            ..user_config()
        };
        let traj = Engine::new(&gen, &IdentityCodec, config)
            .unwrap()
            .run(&g, 1, &mut full_mask_prompt(8, 8))
            .unwrap();
        assert_eq!(traj.termination_reason, TerminationReason::MaxSteps);
        assert_eq!(traj.evolution_steps(), 12);
    }

    #[test]
    fn nan_output_aborts_with_partial_trajectory() {
        let g = synthetic::scene("s", 8, 8, 1);
        let gen = FaultyGenerator {
            inner: EchoGenerator::new(Arc::new(IdentityCodec)),
            fail_at_step: 1,
        };
        let err = Engine::new(&gen, &IdentityCodec, user_config())
            .unwrap()
            .run(&g, 1, &mut full_mask_prompt(8, 8))
            .unwrap_err();
        assert!(matches!(err.source, Error::NonFiniteOutput { step: 1 }));
        assert_eq!(
            err.trajectory.termination_reason,
            TerminationReason::Aborted
        );
        assert_eq!(err.trajectory.dtvs.len(), 1);
    }

    #[test]
    fn schedule_exhaustion_is_user_stop() {
        let g = synthetic::scene("s", 8, 8, 1);
        let gen = MockGenerator::new(
            MockConfig {
                target_image: Image::filled(8, 8, 3, 0.9),
                contraction: 0.5,
                respect_mask: true,
            },
            Arc::new(IdentityCodec),
        )
        .unwrap();
        let full = Image::filled(8, 8, 1, 1.0);
        let step = StepPrompt {
            prompt: None,
            user_mask: Some(full),
        };
        let mut schedule = PromptSchedule::new(vec![step.clone(), step]);
        let traj = Engine::new(&gen, &IdentityCodec, user_config())
            .unwrap()
            .run(&g, 1, &mut schedule)
            .unwrap();
        assert_eq!(traj.termination_reason, TerminationReason::UserStop);
        assert_eq!(traj.evolution_steps(), 2);
    }

    #[test]
    fn missing_user_mask_aborts() {
        let g = synthetic::scene("s", 8, 8, 1);
        let gen = EchoGenerator::new(Arc::new(IdentityCodec));
        let err = Engine::new(&gen, &IdentityCodec, user_config())
            .unwrap()
            .run(&g, 1, &mut StaticPrompt(StepPrompt::text("add moss")))
            .unwrap_err();
        assert!(matches!(err.source, Error::MissingUserMask));
    }
}
