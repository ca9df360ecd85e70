// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV export of pooled per-prompt states for external plotting.

use std::io::Write;

use desksteer::corpus::SegmentedPrompt;
use desksteer::model::TinyLm;

use crate::error::{HarnessError, Result};

/// One row per prompt: `label,d0,…,d{d-1}` with the prompt's mean state at
/// `layer`. An empty prompt list yields only the header.
pub fn dump_representations<W: Write>(
    model: &TinyLm,
    prompts: &[(String, SegmentedPrompt)],
    layer: usize,
    out: W,
) -> Result<()> {
    let n_states = model.config().n_states();
    if layer >= n_states {
        return Err(HarnessError::config(format!("layer {layer} outside 0..{n_states}")));
    }
    let d = model.config().d_model;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|j| format!("d{j}")));
    w.write_record(&header)?;
    for (label, p) in prompts {
        let tokens = p.tokens();
        if tokens.is_empty() {
            return Err(HarnessError::data("empty prompt in dump"));
        }
        let (_, trace) = model.forward_with_trace(&tokens, &[])?;
        let mut row = vec![label.clone()];
        row.extend(trace.pooled(layer, 0, tokens.len()).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a dump back into labels and vectors.
pub fn read_dump<R: std::io::Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let mut r = csv::Reader::from_reader(input);
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut it = rec.iter();
        labels.push(it.next().unwrap_or_default().to_string());
        rows.push(
            it.map(|v| {
                v.parse::<f32>()
                    .map_err(|e| HarnessError::data(format!("bad value {v}: {e}")))
            })
            .collect::<Result<Vec<f32>>>()?,
        );
    }
    Ok((labels, rows))
}
