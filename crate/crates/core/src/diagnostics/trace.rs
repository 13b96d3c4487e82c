//! Attention traces captured during decoding, and their CSV form.
//!
//! CSV schema: `layer,head,step,query_pos,key_pos,prob`, one line per
//! lower-triangle entry, probabilities written with 9 significant digits.
//! Entries above the diagonal are exactly zero and are not written.

use std::io::{BufRead, Write};

use crate::decoder::Modality;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TRACE_CSV_HEADER: &str = "layer,head,step,query_pos,key_pos,prob";

/// One head's final probabilities and surviving mass for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub probs: Matrix,
    pub beta: Vec<f64>,
}

/// Per-layer, per-head records of a single forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub layers: Vec<Vec<HeadRecord>>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |h| h.probs.rows())
    }
}

/// The forward pass that produced generated token `step` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub seq_len: usize,
    pub forward: ForwardTrace,
}

/// Every forward pass of a decode run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    /// Tags of the longest sequence seen (prompt plus generated tokens).
    pub modality: Vec<Modality>,
    pub prompt_len: usize,
    pub steps: Vec<TraceStep>,
}

impl AttentionTrace {
    pub fn layer_count(&self) -> usize {
        self.steps.first().map_or(0, |s| s.forward.layers.len())
    }

    pub fn head_count(&self) -> usize {
        self.steps.first().and_then(|s| s.forward.layers.first()).map_or(0, Vec::len)
    }

    pub fn record(&self, layer: usize, head: usize, step: usize) -> Result<&HeadRecord> {
        let s = step
            .checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .ok_or(Error::Index { index: step, len: self.steps.len() })?;
        let l = s
            .forward
            .layers
            .get(layer)
            .ok_or(Error::Index { index: layer, len: s.forward.layers.len() })?;
        l.get(head).ok_or(Error::Index { index: head, len: l.len() })
    }

    /// Writes the trace in CSV form.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for s in &self.steps {
            for (l, heads) in s.forward.layers.iter().enumerate() {
                for (h, rec) in heads.iter().enumerate() {
                    for i in 0..rec.probs.rows() {
                        for j in 0..=i {
                            writeln!(out, "{l},{h},{},{i},{j},{}", s.step, fmt_sig9(rec.probs[(i, j)]))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses a trace CSV. Beta values are recovered as row sums; modality
    /// tags are unknown and default to text.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        struct Entry {
            layer: usize,
            head: usize,
            step: usize,
            i: usize,
            j: usize,
            p: f64,
        }
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                if line != TRACE_CSV_HEADER {
                    return Err(Error::Parse { line: line_no, msg: format!("bad header {line:?}") });
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let int = |k: usize| {
                fields[k].parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("field {k}: {e}"),
                })
            };
            let p = fields[5].parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("probability: {e}"),
            })?;
            let e = Entry { layer: int(0)?, head: int(1)?, step: int(2)?, i: int(3)?, j: int(4)?, p };
            if e.j > e.i || e.step == 0 || !(0.0..=1.0).contains(&e.p) {
                return Err(Error::Parse { line: line_no, msg: "entry violates trace invariants".into() });
            }
            entries.push((line_no, e));
        }
        if !saw_header {
            return Err(Error::Parse { line: 1, msg: "missing header".into() });
        }
        if entries.is_empty() {
            return Ok(Self::default());
        }
        let steps = entries.iter().map(|(_, e)| e.step).max().unwrap_or(0);
        let layers = entries.iter().map(|(_, e)| e.layer).max().unwrap_or(0) + 1;
        let heads = entries.iter().map(|(_, e)| e.head).max().unwrap_or(0) + 1;
        let mut lens = vec![0usize; steps];
        for (_, e) in &entries {
            lens[e.step - 1] = lens[e.step - 1].max(e.i + 1);
        }
        let mut out: Vec<TraceStep> = lens
            .iter()
            .enumerate()
            .map(|(s, &n)| TraceStep {
                step: s + 1,
                seq_len: n,
                forward: ForwardTrace {
                    layers: vec![
                        vec![HeadRecord { probs: Matrix::zeros(n, n), beta: vec![0.0; n] }; heads];
                        layers
                    ],
                },
            })
            .collect();
        let mut offsets = Vec::with_capacity(steps);
        let mut total = 0;
        for &n in &lens {
            offsets.push(total);
            total += n * (n + 1) / 2 * layers * heads;
        }
        let mut seen = vec![false; total];
        for (line_no, e) in &entries {
            let n = lens[e.step - 1];
            let tri = e.i * (e.i + 1) / 2 + e.j;
            let slot = offsets[e.step - 1] + (e.layer * heads + e.head) * n * (n + 1) / 2 + tri;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::Parse { line: *line_no, msg: "duplicate entry".into() });
            }
            let rec = &mut out[e.step - 1].forward.layers[e.layer][e.head];
            rec.probs[(e.i, e.j)] = e.p;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Parse {
                line: entries.len() + 1,
                msg: format!("trace is incomplete (missing entry #{missing})"),
            });
        }
        for s in &mut out {
            for layer in &mut s.forward.layers {
                for rec in layer.iter_mut() {
                    for i in 0..rec.probs.rows() {
                        rec.beta[i] = rec.probs.row(i).iter().sum();
                    }
                }
            }
        }
        let prompt_len = lens[0];
        let full_len = lens.last().copied().unwrap_or(0);
        Ok(Self { modality: vec![Modality::Text; full_len], prompt_len, steps: out })
    }
}

/// Formats with 9 significant digits in scientific notation.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().unwrap_or(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trace() -> AttentionTrace {
        let rec = |n: usize| {
            let probs = Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
            HeadRecord { beta: vec![1.0; n], probs }
        };
        AttentionTrace {
            modality: vec![Modality::Vision, Modality::Text, Modality::Text],
            prompt_len: 2,
            steps: vec![
                TraceStep { step: 1, seq_len: 2, forward: ForwardTrace { layers: vec![vec![rec(2)]] } },
                TraceStep { step: 2, seq_len: 3, forward: ForwardTrace { layers: vec![vec![rec(3)]] } },
            ],
        }
    }

    #[test]
    fn csv_round_trip_within_print_precision() {
        let t = tiny_trace();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRACE_CSV_HEADER));
        assert_eq!(text.lines().count(), 1 + 3 + 6);
        let back = AttentionTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.steps.len(), 2);
        assert_eq!(back.prompt_len, 2);
        let a = &t.steps[1].forward.layers[0][0].probs;
        let b = &back.steps[1].forward.layers[0][0].probs;
        assert!(a.max_abs_diff(b).unwrap() < 1e-9);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let bad = format!("{TRACE_CSV_HEADER}\n0,0,1,0,0,1.0\n0,0,1,1,x,0.5\n");
        match AttentionTrace::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            AttentionTrace::read_csv("nope\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let incomplete = format!("{TRACE_CSV_HEADER}\n0,0,1,1,0,0.5\n");
        assert!(AttentionTrace::read_csv(incomplete.as_bytes()).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.6899744811276125), "6.89974481e-1");
        assert_eq!(round_sig9(1.0 / 3.0), 0.333333333);
    }
}
