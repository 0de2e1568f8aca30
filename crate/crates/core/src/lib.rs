//! Inference engine and static analyzer for EDANet-style real-time
//! segmentation networks and their ablation variants.
//!
//! Networks are described as [`NetworkSpec`]s, built from the
//! [`netdef`] variants or parsed from `.nspec` text. The [`analyzer`]
//! counts parameters, multiply-adds and receptive fields without running
//! anything; the [`runtime`] executes a network on CPU with weights from a
//! [`WeightStore`].

pub mod analyzer;
pub mod blocks;
pub mod error;
pub mod imageio;
pub mod netdef;
pub mod ops;
pub mod runtime;
pub mod schedmetrics;
pub mod selftest;
pub mod tensor;

pub use analyzer::{analyze, render_report, AnalysisReport, LayerReport, ReportFormat};
pub use blocks::{BlockKind, BlockSpec};
pub use error::{Error, Result};
pub use imageio::{Palette, RgbImage};
pub use netdef::{build_variant, parse_netspec, serialize_netspec, Dataset, LayerKind, LayerSpec, NetworkSpec, Variant};
pub use runtime::{FoldedNetwork, Param, WeightStore};
pub use tensor::{BnParams, Kernel, LabelMap, Shape, Tensor};
