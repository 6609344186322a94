//! Data ingestion, synthetic data, batch sampling, training and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod optim;
pub mod sampler;
pub mod synth;
pub mod train;

pub use checkpoint::{check_params, import_backbone, load_checkpoint, Checkpoint};
pub use manifest::{images_to_tensor, Dataset, Label, Manifest, ManifestEntry, Split};
pub use optim::{Adam, AdamConfig};
pub use sampler::{batch_from_indices, sample_batch, Batch, Composition, Sampler};
pub use synth::{generate_synthetic_dataset, render_dataset, SynthSpec};
pub use train::{initial_checkpoint, smoothed_loss, train, train_with, training_subset, write_log, TrainLogEntry, TrainOutput};
