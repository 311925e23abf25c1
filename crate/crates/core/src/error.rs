use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index ({0}, {1}, {2}) out of bounds for tensor of shape {3}x{4}x{5}")]
    OutOfBounds(usize, usize, usize, usize, usize, usize),
    #[error("kernel {kernel_h}x{kernel_w} larger than input {height}x{width}")]
    KernelTooLarge {
        kernel_h: usize,
        kernel_w: usize,
        height: usize,
        width: usize,
    },
    #[error("channel mismatch: input has {input} channels, filter expects {filter}")]
    ChannelMismatch { input: usize, filter: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("kernel must be square and odd for this operation, got {0}x{1}")]
    UnsupportedKernel(usize, usize),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
