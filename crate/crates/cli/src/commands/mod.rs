pub mod eval;
pub mod gradcheck;
pub mod preprocess;
pub mod sample;
pub mod split;
pub mod synth;
pub mod train;

use std::path::Path;

use vitalflow::config::FlatConfig;

use crate::dataset::write_text;
use crate::failure::CmdResult;

pub const CONFIG_ECHO: &str = "config.txt";

/// Writes the effective configuration next to a command's outputs.
pub fn echo_config(out_dir: &Path, cfg: &FlatConfig) -> CmdResult {
    write_text(&out_dir.join(CONFIG_ECHO), &cfg.to_string())
}
