use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid keypoint schema: {0}")]
    Schema(String),
    #[error("annotation {id}: expected {expected} keypoint values, found {found}")]
    KeypointArity { id: u64, expected: usize, found: usize },
    #[error("invalid instance record {id}: {reason}")]
    Record { id: u64, reason: String },
    #[error("dataset split is empty")]
    EmptyDataset,
    #[error("family {0:?} is not present in the dataset")]
    UnknownFamily(String),
    #[error("train and test family sets overlap on {0:?}")]
    OverlappingFamilies(Vec<String>),
    #[error("degenerate bounding box (w = {w}, h = {h})")]
    DegenerateBox { w: f64, h: f64 },
    #[error("keypoint {name:?} cannot be tokenized: {reason}")]
    Untokenizable { name: String, reason: String },
    #[error("cannot resample a {from_h}x{from_w} map down to {to_h}x{to_w}")]
    Downsample {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("epoch {epoch} is outside [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instance {0} has no labeled keypoints")]
    NoLabeledKeypoints(u64),
    #[error("prediction refers to unknown instance {0}")]
    UnknownInstance(u64),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
