use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A control value (quality level, realism weight, ...) outside its range.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("symbol {symbol} outside [{min}, {max}] for channel {channel}")]
    SymbolRange { symbol: i32, min: i32, max: i32, channel: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("image of {height}x{width} exceeds the supported size")]
    Size { height: usize, width: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
