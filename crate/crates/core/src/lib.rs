//! Two-stage lung CT pipeline: U-Net lung segmentation, intrapulmonary
//! distance maps, and a dual-head network that jointly learns NCP detection
//! and similar-case retrieval embeddings, plus the exhaustive case index used
//! to recommend similar confirmed cases.

pub mod caseindex;
pub mod checkpoint;
pub mod ducn;
pub mod edt;
pub mod error;
pub mod fsutil;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod ntf;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod segnet;
pub mod tensor;

pub use caseindex::{CaseId, EmbeddingIndex, IndexEntry, IndexScope, Recommendation};
pub use ducn::{AblationMode, DuCNConfig, DuCNModel, InputStack, LossBreakdown, LossWeights, TripletSample};
pub use edt::DistanceMap;
pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use phantom::{ClassLabel, DatasetManifest, PhantomConfig, SliceRecord};
pub use segnet::{UNet, UNetConfig};
pub use tensor::Tensor;
