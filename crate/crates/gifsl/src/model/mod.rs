//! Backbone MLP, classifier heads, joint-space logits, parameter
//! snapshots, and checkpoint serialization.

mod backbone;
mod checkpoint;
mod head;
mod norm;
mod state;

pub use backbone::{Backbone, BackboneConfig, ForwardTape};
pub use checkpoint::{load_model, save_model};
pub use head::{ClassifierHead, HeadCache, HeadMode, DEFAULT_COSINE_TEMPERATURE};
pub use norm::{NormCache, NormLayer};
pub use state::{fingerprint, BackboneSnapshot, ModelState};
