// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level alignment between generated states and a steering
//! representation, and shaded renderings of the result.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActivationTrace, LayerHook, ModelError, TinyLm};
use crate::steering::SteeringRepresentation;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// Layer-averaged steering vector `Δ̄`.
pub fn mean_direction(rep: &SteeringRepresentation) -> Result<Vec<f64>> {
    if rep.vectors.is_empty() {
        return Err(ExplainError::Config("steering representation has no layers".into()));
    }
    let d = rep.dim();
    let mut acc = vec![0.0f64; d];
    for v in &rep.vectors {
        if v.len() != d {
            return Err(ExplainError::Config("steering vectors differ in width".into()));
        }
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
    }
    let k = rep.vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Token `i`'s state averaged over the representation's layers.
pub fn mean_state(rep: &SteeringRepresentation, trace: &ActivationTrace, i: usize) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for &l in &rep.layers {
        if l >= trace.n_states() {
            return Err(ExplainError::Config(format!(
                "layer {l} not recorded in a trace of {} states",
                trace.n_states()
            )));
        }
        let state = trace.layer(l);
        if i >= state.rows() {
            return Err(ExplainError::Parameter(format!(
                "token {i} outside {} tokens",
                state.rows()
            )));
        }
        let row = state.row(i);
        let a = acc.get_or_insert_with(|| vec![0.0; row.len()]);
        if a.len() != row.len() {
            return Err(ExplainError::Config("trace width differs across layers".into()));
        }
        a.iter_mut().zip(row).for_each(|(a, &x)| *a += x as f64);
    }
    let mut acc = acc.ok_or_else(|| ExplainError::Config("steering representation has no layers".into()))?;
    let k = rep.layers.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Δ̄ · r̄_i`.
pub fn token_similarity(rep: &SteeringRepresentation, trace: &ActivationTrace, i: usize) -> Result<f64> {
    let delta = mean_direction(rep)?;
    let state = mean_state(rep, trace, i)?;
    if delta.len() != state.len() {
        return Err(ExplainError::Config(format!(
            "steering width {} but state width {}",
            delta.len(),
            state.len()
        )));
    }
    Ok(dot(&delta, &state))
}

/// Arithmetic mean of similarity scores.
pub fn alignment(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(ExplainError::Contract("alignment of an empty score list".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Indices of the `k` smallest scores, ascending by score, earlier index first
/// among equal scores.
pub fn rank_lowest(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(ExplainError::Parameter(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub tokens: Vec<usize>,
    /// Display text per token.
    pub words: Vec<String>,
    /// Position of the first scored token in the full sequence.
    pub offset: usize,
    pub scores: Vec<f64>,
    /// Cosine between `Δ̄` and `r̄_i`, for reference.
    pub cosine: Vec<f64>,
    pub alignment: f64,
    pub lowest: Vec<usize>,
}

/// Scores tokens `from..` of `sequence`, run with `hooks` active.
pub fn explain(
    model: &TinyLm,
    rep: &SteeringRepresentation,
    hooks: &[&dyn LayerHook],
    sequence: &[usize],
    from: usize,
    k_lowest: usize,
    words: impl Fn(usize) -> String,
) -> Result<ExplanationReport> {
    if from >= sequence.len() {
        return Err(ExplainError::Contract(format!(
            "no tokens to explain: scoring starts at {from} of {}",
            sequence.len()
        )));
    }
    let (_, trace) = model.forward_with_trace(sequence, hooks)?;
    let delta = mean_direction(rep)?;
    let delta_norm = dot(&delta, &delta).sqrt();
    let mut scores = Vec::with_capacity(sequence.len() - from);
    let mut cosine = Vec::with_capacity(sequence.len() - from);
    for i in from..sequence.len() {
        let state = mean_state(rep, &trace, i)?;
        if state.len() != delta.len() {
            return Err(ExplainError::Config("steering width does not match the model".into()));
        }
        let s = dot(&delta, &state);
        let denom = delta_norm * dot(&state, &state).sqrt();
        scores.push(s);
        cosine.push(if denom > 0.0 { s / denom } else { 0.0 });
    }
    let tokens = sequence[from..].to_vec();
    Ok(ExplanationReport {
        words: tokens.iter().map(|&t| words(t)).collect(),
        tokens,
        offset: from,
        alignment: alignment(&scores)?,
        lowest: rank_lowest(&scores, k_lowest.clamp(1, scores.len()))?,
        scores,
        cosine,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    Ansi,
    Html,
    Json,
}

/// Per-sequence min-max normalization into `[0, 1]`; constant sequences map
/// to `0.5` everywhere.
pub fn shading_levels(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Low alignment is shaded red, high alignment fades to white.
fn shade_rgb(level: f64) -> (u8, u8, u8) {
    let g = (110.0 + 145.0 * level).round() as u8;
    (255, g, g)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_report(report: &ExplanationReport, format: RenderFormat) -> Result<String> {
    let levels = shading_levels(&report.scores);
    let mut out = String::new();
    match format {
        RenderFormat::Json => return Ok(serde_json::to_string_pretty(report)?),
        RenderFormat::Ansi => {
            for (i, (word, level)) in report.words.iter().zip(&levels).enumerate() {
                let (r, g, b) = shade_rgb(*level);
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m{word}\x1b[0m");
            }
            let _ = write!(out, "\nalignment {:.6}", report.alignment);
        }
        RenderFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>alignment report</title>\n</head>\n<body>\n<p>");
            for (i, ((word, level), score)) in report.words.iter().zip(&levels).zip(&report.scores).enumerate() {
                let (r, g, b) = shade_rgb(*level);
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(
                    out,
                    "<mark style=\"background-color: rgb({r}, {g}, {b})\" data-score=\"{score}\">{}</mark>",
                    escape_html(word)
                );
            }
            let _ = write!(
                out,
                "</p>\n<p>alignment {:.6}</p>\n</body>\n</html>\n",
                report.alignment
            );
        }
    }
    Ok(out)
}

pub fn parse_json_report(text: &str) -> Result<ExplanationReport> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::ExtractionMethod;
    use crate::tensor::Tensor;

    fn rep(vectors: Vec<Vec<f32>>, layers: Vec<usize>) -> SteeringRepresentation {
        SteeringRepresentation {
            layers,
            vectors,
            n_samples: 1,
            method: ExtractionMethod::Debiased,
        }
    }

    fn trace(states: Vec<Vec<Vec<f32>>>) -> ActivationTrace {
        ActivationTrace {
            tokens: vec![0; states[0].len()],
            states: states.iter().map(|s| Tensor::from_rows(s).unwrap()).collect(),
        }
    }

    #[test]
    fn similarity_examples() {
        let r = rep(vec![vec![1.0, 0.0]], vec![0]);
        let t = trace(vec![vec![vec![0.0, 3.0], vec![2.0, 0.0]]]);
        assert_eq!(token_similarity(&r, &t, 0).unwrap(), 0.0);
        let same = trace(vec![vec![vec![1.0, 0.0]]]);
        assert_eq!(token_similarity(&r, &same, 0).unwrap(), 1.0);
        let missing = rep(vec![vec![1.0, 0.0]], vec![3]);
        assert!(matches!(
            token_similarity(&missing, &t, 0),
            Err(ExplainError::Config(_))
        ));
    }

    #[test]
    fn two_layer_average_by_hand() {
        let r = rep(vec![vec![1.0, 2.0], vec![3.0, -2.0]], vec![1, 2]);
        let t = trace(vec![vec![vec![9.0, 9.0]], vec![vec![0.5, 1.0]], vec![vec![1.5, -3.0]]]);
        // Δ̄ = (2, 0), r̄ = (1, -1)
        assert_eq!(token_similarity(&r, &t, 0).unwrap(), 2.0);
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment(&[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(alignment(&[0.5]).unwrap(), 0.5);
        assert_eq!(alignment(&[0.25; 7]).unwrap(), 0.25);
        assert!(matches!(alignment(&[]), Err(ExplainError::Contract(_))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_lowest(&[3.0, 1.0, 2.0], 1).unwrap(), vec![1]);
        assert_eq!(rank_lowest(&[1.0, 1.0, 2.0], 2).unwrap(), vec![0, 1]);
        assert!(rank_lowest(&[1.0], 0).is_err());
        assert!(rank_lowest(&[1.0], 2).is_err());
    }

    fn sample_report() -> ExplanationReport {
        ExplanationReport {
            tokens: vec![10, 11, 12],
            words: vec!["a<b".into(), "c".into(), "d".into()],
            offset: 4,
            scores: vec![0.1, -2.5e-7, 3.3],
            cosine: vec![0.1, 0.0, 0.9],
            alignment: alignment(&[0.1, -2.5e-7, 3.3]).unwrap(),
            lowest: vec![1],
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = sample_report();
        let text = render_report(&r, RenderFormat::Json).unwrap();
        assert_eq!(parse_json_report(&text).unwrap(), r);
    }

    #[test]
    fn html_has_one_mark_per_token() {
        let html = render_report(&sample_report(), RenderFormat::Html).unwrap();
        assert!(html.starts_with("<!DOCTYPE html>"));
        assert!(html.trim_end().ends_with("</html>"));
        assert_eq!(html.matches("<mark ").count(), 3);
        assert_eq!(html.matches("</mark>").count(), 3);
        assert!(html.contains("a&lt;b"));
    }

    #[test]
    fn equal_scores_shade_uniformly() {
        assert_eq!(shading_levels(&[2.0, 2.0, 2.0]), vec![0.5; 3]);
        let levels = shading_levels(&[1.0, 3.0, 2.0]);
        assert_eq!(levels, vec![0.0, 1.0, 0.5]);
        let ansi = render_report(&sample_report(), RenderFormat::Ansi).unwrap();
        assert_eq!(ansi.matches("\x1b[0m").count(), 3);
    }
}
