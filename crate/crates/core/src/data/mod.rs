//! Dataset preprocessing, train/test splits and online batch generation.

mod batch;
mod cache;
mod preprocess;
mod split;

pub use batch::{
    sample_batch, to_tensor, Batch, BatchGenerator, BatchProducer, ClassSampler, Normalization, ProducerConfig,
};
pub use cache::{
    load_cache, preprocess_tree, read_manifest, sha256_hex, CacheEntry, CacheFailure, CacheManifest,
    CachedDataset, PreprocessReport, MANIFEST_FILE,
};
pub use preprocess::{compute_bounding_box, preprocess_image, PreprocessConfig, Rect};
pub use split::{
    make_split, parse_split_spec, CountAllReading, DatasetIndex, ImageEntry, Part, Sample, Split, SplitSpec,
};
