//! Information-flow analysis toolkit for a miniature multimodal decoder
//! transformer: segment-wise attention accounting, smoothed gradient
//! class-activation maps, attention-ranked image-token truncation, and
//! cliff-layer detection, all over a self-contained seeded model.

pub mod cam;
pub mod cliff;
pub mod error;
pub mod layout;
pub mod model;
pub mod raster;
pub mod segments;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod truncation;

pub use error::{Error, Result};
pub use layout::{Segment, TokenLayout};
pub use model::{MiniLvlm, ModelConfig, MultimodalInput, PatchGrid, TokenId};
pub use tensor::Tensor;
