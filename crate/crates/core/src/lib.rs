//! Cycle-level simulator of a processing-in-memory self-attention
//! accelerator built from analog PIM macros.

pub mod config;
pub mod controller;
pub mod dma;
pub mod error;
pub mod input_process;
pub mod numerics;
pub mod pim_macro;
pub mod reference;
pub mod score;
pub mod softmax;
pub mod workload;

pub use config::{resolve_shifts, AttentionConfig, ResolvedShifts, ShiftConfig};
pub use controller::{run_inference, InferenceResult, System, TraceRecord};
pub use error::{Result, SimError};
pub use input_process::{Bank, InputProcess, Mode};
pub use numerics::{AdcConfig, AdcMode, FixedWord, QFormat};
pub use pim_macro::{ApimGeometry, ApimMacro};
pub use score::Score;
pub use softmax::{ExpLut, Softmax};
pub use workload::{Int8Matrix, RealMatrix, Weights, Workload};
