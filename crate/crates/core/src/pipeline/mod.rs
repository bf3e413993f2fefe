//! Data preparation, optimization and full-volume inference.

mod infer;
mod optim;
mod patches;
mod phantom;
mod schedule;
mod train;
mod volume;

pub use infer::{sliding_window_infer, sliding_window_probs, tile_starts};
pub use optim::Adam;
pub use patches::{crop_volume, sample_patches, Sample};
pub use phantom::{generate_phantom, normalize, PhantomSpec};
pub use schedule::{Schedule, ScheduleState};
pub use train::{evaluate_loss, foreground_dsc, train, train_step, TrainConfig, TrainOutcome, LOG_HEADER};
pub use volume::{read_labels, read_volume, sidecar_path, write_labels, write_volume, VolumeHeader};
