use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error(
        "conv2d: input {input:?} with kernel {kernel:?}, stride {stride}, pad {pad} \
         yields non-positive output dims"
    )]
    EmptyConvOutput {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        pad: usize,
    },

    #[error("upsample: target {out_h}x{out_w} is smaller than input {in_h}x{in_w}")]
    DownsampleRequested {
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("reshape: cannot view {from:?} ({from_len} elements) as {to:?} ({to_len} elements)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },

    #[error("{op}: needs at least one input")]
    NoInputs { op: &'static str },

    #[error("array file: {0}")]
    FileFormat(String),

    #[error("array file holds {found} data but {requested} was requested")]
    DtypeMismatch {
        found: String,
        requested: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
