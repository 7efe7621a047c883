//! Interval-length histograms of the emitted weight hyperrectangles and the
//! flat-text run summary.

use crate::embedding::{self, TaskEmbeddingState};
use crate::error::Result;
use crate::eval::Summary;
use crate::hypernet::Hypernet;

pub const HIST_BINS: usize = 30;

/// Histogram of one context's interval widths.
#[derive(Debug, Clone)]
pub struct HistContext {
    pub name: String,
    /// Bin edges, length `counts.len() + 1`, spanning [0, max].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Number of coordinates with width exactly zero.
    pub zero_width: usize,
    pub max_width: f64,
}

/// Interval-length report over the hypernetwork outputs at every frozen
/// task embedding and, when the intersection is nonempty, at the universal
/// embedding.
#[derive(Debug, Clone)]
pub struct IntervalLengthReport {
    pub contexts: Vec<HistContext>,
    /// Empty-intersection coordinates, if the universal context failed.
    pub universal_empty: Option<Vec<usize>>,
}

fn hist_of_widths(name: &str, widths: &[f64]) -> HistContext {
    let max_width = widths.iter().cloned().fold(0.0, f64::max);
    let zero_width = widths.iter().filter(|&&w| w == 0.0).count();
    // Deterministic edges: HIST_BINS equal bins over [0, max]; a degenerate
    // max collapses to one [0, 0] bin.
    if max_width == 0.0 {
        return HistContext {
            name: name.to_string(),
            edges: vec![0.0, 0.0],
            counts: vec![widths.len()],
            zero_width,
            max_width,
        };
    }
    let edges: Vec<f64> = (0..=HIST_BINS)
        .map(|i| max_width * i as f64 / HIST_BINS as f64)
        .collect();
    let mut counts = vec![0usize; HIST_BINS];
    for &w in widths {
        let mut bin = ((w / max_width) * HIST_BINS as f64) as usize;
        if bin >= HIST_BINS {
            bin = HIST_BINS - 1;
        }
        counts[bin] += 1;
    }
    HistContext { name: name.to_string(), edges, counts, zero_width, max_width }
}

/// Computes interval-length histograms for each task embedding and the
/// universal embedding.
pub fn interval_length_report(
    hnet: &Hypernet,
    states: &[TaskEmbeddingState],
) -> Result<IntervalLengthReport> {
    let mut contexts = Vec::new();
    let mut intervals = Vec::new();
    for (t, st) in states.iter().enumerate() {
        let e = embedding::materialize(st, st.gamma);
        let (lo, hi) = hnet.forward_interval(&e)?;
        let widths: Vec<f64> = lo.iter().zip(hi.iter()).map(|(l, u)| u - l).collect();
        contexts.push(hist_of_widths(&format!("task_{t}"), &widths));
        intervals.push(e);
    }
    let mut universal_empty = None;
    match embedding::universal_embedding(&intervals) {
        Ok(u) => {
            let (lo, hi) = hnet.forward_interval(&u)?;
            let widths: Vec<f64> = lo.iter().zip(hi.iter()).map(|(l, u)| u - l).collect();
            contexts.push(hist_of_widths("universal", &widths));
        }
        Err(crate::error::Error::EmptyIntersection { coords }) => {
            universal_empty = Some(coords);
        }
        Err(e) => return Err(e),
    }
    Ok(IntervalLengthReport { contexts, universal_empty })
}

/// CSV rows: context,bin_lo,bin_hi,count.
pub fn report_to_csv(report: &IntervalLengthReport) -> String {
    let mut out = String::from("context,bin_lo,bin_hi,count\n");
    for ctx in &report.contexts {
        for (i, &c) in ctx.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{}\n",
                ctx.name,
                ctx.edges[i],
                ctx.edges[i + 1],
                c
            ));
        }
    }
    out
}

/// Flat key=value summary text.
pub fn summary_text(
    summary: Option<&Summary>,
    report: Option<&IntervalLengthReport>,
    extra: &[(String, String)],
) -> String {
    let mut out = String::new();
    if let Some(s) = summary {
        out.push_str(&format!("avg_after_all={:.6}\n", s.avg_after_all));
        out.push_str(&format!("last_task={:.6}\n", s.last_task));
        for (t, d) in s.per_task_drop.iter().enumerate() {
            out.push_str(&format!("per_task_drop_{t}={d:.6}\n"));
        }
    }
    if let Some(r) = report {
        for ctx in &r.contexts {
            out.push_str(&format!("zero_width_count_{}={}\n", ctx.name, ctx.zero_width));
            out.push_str(&format!("max_width_{}={:.12e}\n", ctx.name, ctx.max_width));
        }
        if let Some(coords) = &r.universal_empty {
            out.push_str(&format!(
                "universal_empty_coordinates={}\n",
                coords
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(";")
            ));
        }
    }
    for (k, v) in extra {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Nesting;
    use ndarray::{arr1, Array1};

    #[test]
    fn degenerate_embedding_all_zero_widths() {
        // Zero-radius embedding: every output interval has width 0 and the
        // zero-width count equals D.
        let hnet = Hypernet::init(&[2, 4, 6], 3);
        let st = TaskEmbeddingState {
            pre: arr1(&[0.4, -0.2]),
            logits: Array1::zeros(2),
            gamma: 0.0,
            nesting: Nesting::None,
            trainable_radius: true,
            frozen: true,
        };
        let rep = interval_length_report(&hnet, &[st]).unwrap();
        // one task context + the universal context
        assert_eq!(rep.contexts.len(), 2);
        assert_eq!(rep.contexts[0].zero_width, 6);
        assert_eq!(rep.contexts[0].max_width, 0.0);
    }

    #[test]
    fn histogram_bins_count_everything() {
        let hnet = Hypernet::init(&[3, 8, 10], 5);
        let st = TaskEmbeddingState {
            pre: arr1(&[0.0, 0.3, -0.5]),
            logits: Array1::ones(3),
            gamma: 1.0,
            nesting: Nesting::Cos,
            trainable_radius: false,
            frozen: true,
        };
        let rep = interval_length_report(&hnet, &[st]).unwrap();
        for ctx in &rep.contexts {
            let total: usize = ctx.counts.iter().sum();
            assert_eq!(total, 10);
        }
        let csv = report_to_csv(&rep);
        assert!(csv.starts_with("context,bin_lo,bin_hi,count"));
        // deterministic for a fixed config
        let rep2 = interval_length_report(&hnet, &[TaskEmbeddingState {
            pre: arr1(&[0.0, 0.3, -0.5]),
            logits: Array1::ones(3),
            gamma: 1.0,
            nesting: Nesting::Cos,
            trainable_radius: false,
            frozen: true,
        }])
        .unwrap();
        assert_eq!(report_to_csv(&rep2), csv);
    }
}
