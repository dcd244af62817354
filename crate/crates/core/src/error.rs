use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("layer `{layer}`: expected input shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("tensor has {len} elements but shape {shape:?} needs {expected}")]
    BadTensor {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("non-finite value in `{tensor}` at index {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("quantization configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for `{layer}`")]
    NanGradient { layer: String },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("lowering failed: {0}")]
    Lowering(String),
    #[error("32-bit accumulator overflow in layer `{layer}`")]
    AccumulatorOverflow { layer: String },
    #[error("batch norm multiplier of layer `{layer}` channel {channel} is {value}, outside the 8-bit range")]
    MultiplierRange {
        layer: String,
        channel: usize,
        value: f64,
    },
}
