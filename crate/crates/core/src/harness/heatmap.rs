use std::io::Write;
use std::path::Path;

use super::{read_text, HarnessError};
use crate::selection::TraceDocument;
use crate::util::fmt_sig;

pub fn read_trace(path: &Path) -> Result<TraceDocument, HarnessError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| HarnessError::config(format!("{}: not a trace file: {e}", path.display())))
}

/// One row per patch: `index,x0,y0,w,h,pc,filtered,reason`. Patches without
/// a confidence get an empty `pc` cell.
pub fn write_heatmap<W: Write>(trace: &TraceDocument, out: W) -> Result<(), HarnessError> {
    if trace.patches.is_empty() {
        return Err(HarnessError::config("trace has no patches"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "x0", "y0", "w", "h", "pc", "filtered", "reason"])?;
    for p in &trace.patches {
        w.write_record([
            p.index.to_string(),
            p.x0.to_string(),
            p.y0.to_string(),
            p.w.to_string(),
            p.h.to_string(),
            p.pc.map(fmt_sig).unwrap_or_default(),
            p.filtered.to_string(),
            p.reason.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
