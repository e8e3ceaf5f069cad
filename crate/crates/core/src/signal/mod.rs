//! Canonical I/Q data model: frames, datasets, preprocessing and on-disk format.

mod dataset;
mod frame;
mod io;

pub use dataset::{split_dataset, CellCount, Dataset, DomainInfo, DomainRole, SplitRatios};
pub use frame::{downsample, normalize_frame, IqFrame, Normalization, STANDARD_FRAME_LENGTH};
pub use io::{load_dataset, save_dataset, DatasetManifest, SampleEncoding, MANIFEST_FORMAT, MANIFEST_VERSION, PAYLOAD_HEADER_LEN, PAYLOAD_MAGIC, PAYLOAD_VERSION};
