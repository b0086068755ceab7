//! Toy segmentation network around the context modules, its losses, the
//! optimizer and the training loop.

mod loss;
mod model;
mod optim;
mod train;

pub use loss::{cross_entropy, ohem_loss, pixel_losses, IGNORE_INDEX};
pub use model::{argmax_classes, forward_model, init_model, predict, BackboneSpec, ModelOutput, OUTPUT_STRIDE};
pub use optim::{poly_lr, Sgd};
pub use train::{evaluate, train, IterRecord, OhemConfig, TrainConfig};
