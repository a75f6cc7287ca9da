//! Progressive photorealism pipeline over physical G-buffer conditions.
//!
//! The crate is organised around the stages of one run:
//!
//! * [`gbuffer`]: loading the six physical buffers and assembling the
//!   21-channel condition tensor, with Bernoulli channel dropout.
//! * [`mask`]: turning an instruction into a refined soft spatial mask.
//! * [`engine`]: iterative stepping of the transfer field with adaptive
//!   termination on semantic intensity.
//! * [`backends`]: generative, codec, segmentation, embedding and chat
//!   contracts with deterministic mocks and an out-of-process adapter.
//! * [`forge`]: multi-agent construction of paired training trajectories.
//! * [`trainer`]: a toy convolutional regressor of the transfer field.
//! * [`metrics`]: PSNR, SSIM, CLIP-style scores, Q-Score and KID.

pub mod backends;
pub mod engine;
pub mod error;
pub mod forge;
pub mod gbuffer;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod trainer;

pub use crate::engine::{
    init_state, run_trajectory, semantic_intensity, should_terminate, Engine, EngineConfig,
    RenderState, TerminationReason, Trajectory, TransferVector,
};
pub use crate::error::{Error, Result};
pub use crate::gbuffer::{
    apply_channel_dropout, assemble_condition, load_gbuffer_set, BufferKind, ConditionTensor,
    DropoutSpec, GBufferSet, LoadOptions, SceneManifest,
};
pub use crate::image::Image;
pub use crate::mask::{refine_mask, resolve_mask, MaskParams, SemanticMask};
