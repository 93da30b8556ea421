use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Mean losses of one epoch. `scale` is `None` for the multi-scale stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub scale: Option<usize>,
    pub bag_loss: f64,
    /// NaN when the stage has no domain head.
    pub domain_loss: f64,
    pub weighted_domain_loss: f64,
    pub lambda: f64,
}

pub const HISTORY_HEADER: &str = "epoch\tscale\tbag_loss\tdomain_loss\tlambda";

/// Tab-separated loss history with a header row.
pub fn format_history(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        let scale = r.scale.map_or_else(|| "all".to_string(), |s| s.to_string());
        let domain = if r.domain_loss.is_nan() {
            "NA".to_string()
        } else {
            format!("{:.6}", r.domain_loss)
        };
        let _ = writeln!(out, "{}\t{}\t{:.6}\t{}\t{:.6}", r.epoch, scale, r.bag_loss, domain, r.lambda);
    }
    out
}

pub fn write_history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, format_history(records)).map_err(|e| Error::io(path, e))
}
