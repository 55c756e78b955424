//! Simulated persistent memory with crash-state enumeration, plus a set of
//! transaction engines (write-ahead logging under a spinlock, word-versioned
//! STM, best-effort HTM with a logged fallback) that can be checked for
//! crash atomicity, dependency ordering, and serializability.

pub mod bench;
pub mod checker;
pub mod htm;
pub mod pmem;
pub mod stm;
pub mod txapi;
pub mod util;
pub mod wal;

/// Crate-wide error type. Transaction aborts are not errors; engines report
/// them through their own status types.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("address fault: {addr:#x}+{len} not mapped")]
    Fault { addr: u64, len: u64 },
    #[error("usage: {0}")]
    Usage(String),
    #[error("log full: need {need} bytes, {avail} available")]
    LogFull { need: u64, avail: u64 },
    #[error("log corruption: {0}")]
    Corruption(String),
    #[error("config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
