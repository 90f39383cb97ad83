//! Classifier, purifier and discriminator networks, the purify-then-classify
//! pipeline, and the checkpoint container.

mod checkpoint;
mod nets;
mod params;
mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, ModelKind, FORMAT_VERSION};
pub use nets::{
    eval_classifier, Bound, Classifier, ClassifierArch, ClassifierNet, Critic, DiscriminatorArch, DiscriminatorNet,
    IdentityPurifier, Purifier, PurifierArch, PurifierNet, PurifierVariant,
};
pub use params::Params;
pub use pipeline::{argmax_rows, purify_on_graph, purify_pipeline, purify_with_draw, Pipeline, PurifierGrad};
