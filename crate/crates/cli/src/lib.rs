//! Command implementations behind the `dbsfm` binary.

pub mod commands;
pub mod config;
pub mod dataset;

use dbsfm::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownSubset(_) | Error::UnknownSymptom(_) => EXIT_USAGE,
        Error::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}
