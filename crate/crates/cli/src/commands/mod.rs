//! Subcommand bodies. Each returns its summary record.

use std::path::PathBuf;

pub mod basis_check;
pub mod sample;
pub mod solve;
pub mod verify;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub json: bool,
    pub oracle: bool,
    pub negative_controls: bool,
    pub output: Option<PathBuf>,
}

impl Flags {
    /// The output directory, created on demand.
    pub fn output_dir(&self) -> std::io::Result<Option<PathBuf>> {
        match &self.output {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Ok(Some(dir.clone()))
            }
            None => Ok(None),
        }
    }
}
