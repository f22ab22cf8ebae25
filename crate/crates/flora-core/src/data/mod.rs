//! On-disk formats and data generation: feature packs, class splits, and
//! the synthetic paired-modality benchmark.

pub mod fpack;
pub mod split;
pub mod synth;

pub use fpack::{FeaturePack, PackKind, FPACK_MAGIC, FPACK_VERSION};
pub use split::SplitSpec;
pub use synth::{generate_synthetic, nearest_centroid_accuracy, SyntheticConfig};
