use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "placement out of bounds: {src_w}x{src_h} source at offset ({x}, {y}) \
         exits the {dst_w}x{dst_h} target frame"
    )]
    PlacementOutOfBounds {
        src_w: usize,
        src_h: usize,
        x: i64,
        y: i64,
        dst_w: usize,
        dst_h: usize,
    },

    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("png codec error: {0}")]
    Png(#[from] ::image::ImageError),

    #[error("mask has no pixels to blend")]
    EmptyRegion,

    #[error("mask touches the image frame at ({x}, {y}); boundary values are undefined there")]
    MaskTouchesFrame { x: usize, y: usize },

    #[error("bad magic in weight file: expected \"BLW1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("weight file version mismatch: {0}")]
    VersionMismatch(String),

    #[error("truncated weight file: {0}")]
    Truncated(String),

    #[error("duplicate tensor name in weight file: {0}")]
    DuplicateTensor(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("unknown tap {0}")]
    UnknownTap(String),

    #[error("non-finite objective or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}
