//! Errors carrying the process exit code they map to.

use std::fmt;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_SCHEMA: u8 = 4;
pub const EXIT_TRAIN: u8 = 5;
pub const EXIT_SHAPE: u8 = 6;
pub const EXIT_EVAL: u8 = 7;
pub const EXIT_GRADCHECK: u8 = 8;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, message: impl fmt::Display) -> Self {
        Self {
            code,
            error: anyhow::anyhow!("{message}"),
        }
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait WithCode<T> {
    fn code(self, code: u8) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

pub fn fail<T>(code: u8, message: impl fmt::Display) -> CmdResult<T> {
    Err(Failure::new(code, message))
}
