//! Small convolutional classifier trained from scratch, plus feature taps and
//! unit introspection.

mod introspect;
mod model;
mod net;
mod spec;
mod train;

pub use introspect::{
    maximize_unit, top_activating_crops, ActivationCrop, MaximizeConfig, Maximized,
};
pub use model::{load_partition, train_from_split, PagesRead, TrainedModel, MODEL_MAGIC};
pub use net::{activations, argmax, classify, extract_features, softmax, NetworkParams};
pub(crate) use net::{forward, load_params};
pub use spec::{Layer, NetworkSpec, ReceptiveField, Tap};
pub use train::{
    evaluate, train_network, LabeledImages, TrainConfig, TrainRunLog, ValidationPoint,
};
