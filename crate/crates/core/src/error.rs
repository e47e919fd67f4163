use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("conv2d: kernel extents must be odd, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },

    #[error("conv2d: {what} {channels} is not divisible by groups={groups}")]
    GroupMismatch {
        what: &'static str,
        channels: usize,
        groups: usize,
    },

    #[error("pixel shuffle: {channels} channels are not divisible by r^2 = {r2}")]
    ShuffleChannels { channels: usize, r2: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable #{0} is not recorded on this tape")]
    ForeignVar(usize),

    #[error(
        "feature map {h}x{w} is not divisible into {ph}x{pw} patches; crop the input so both \
         sides are multiples of the patch size"
    )]
    PatchDivisibility { h: usize, w: usize, ph: usize, pw: usize },

    #[error("token grid {gh}x{gw} exceeds the positional embedding grid {max}x{max}")]
    PositionalGrid { gh: usize, gw: usize, max: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss at iteration {iteration}; gradient norms: {grad_norms}")]
    NonFiniteLoss { iteration: u64, grad_norms: String },

    #[error(transparent)]
    Image(#[from] crate::imaging::ImageError),

    #[error(transparent)]
    Checkpoint(#[from] crate::trainer::CheckpointError),

    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
