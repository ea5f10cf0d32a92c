use std::ops::Range;

use super::{clip_tokens, DecodeOutcome, Grounder, RecursionError};
use crate::calibrank::{confidence_from_entropies, token_entropy};
use crate::corpus::{FeatureSequence, QuerySpec, Segment, WindowConfig};
use crate::decoder::{Answer, ParamSet, Vocab};

/// Answers every prompt from the query's planted interval. Each answer
/// token gets probability `1 − δ`, the rest spread evenly; `δ` grows when a
/// window covers only part of the event, so partial views rank lower.
#[derive(Debug, Clone, Copy)]
pub struct OracleGrounder {
    pub vocab: Vocab,
}

#[derive(Debug, Clone)]
pub struct OracleScope {
    span: Option<(f64, f64)>,
    starts: Vec<f64>,
    window: WindowConfig,
}

const BASE_DELTA: f64 = 1e-3;
const PARTIAL_DELTA: f64 = 0.3;

impl OracleGrounder {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    fn outcome(&self, answer: Answer, delta: f64) -> Result<DecodeOutcome, RecursionError> {
        let tokens = answer.tokens(&self.vocab)?;
        let v = self.vocab.size();
        let entropies = tokens
            .iter()
            .map(|&t| {
                let mut d = vec![delta / (v - 1) as f64; v];
                d[t] = 1.0 - delta;
                token_entropy(&d)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let confidence = confidence_from_entropies(&entropies)?;
        Ok(DecodeOutcome { answer: Some(answer), entropies, confidence })
    }

    fn overlapping(scope: &OracleScope, range: Range<usize>) -> Vec<usize> {
        let Some(span) = scope.span else { return Vec::new() };
        range.filter(|&i| clip_tokens(span, scope.starts[i], &scope.window).is_some()).collect()
    }
}

impl Grounder for OracleGrounder {
    type Scope = OracleScope;

    fn scope(
        &self,
        _video: &FeatureSequence,
        query: &QuerySpec,
        segments: &[Segment],
        window: &WindowConfig,
        _need_sparse: bool,
    ) -> Result<OracleScope, RecursionError> {
        Ok(OracleScope { span: query.span, starts: segments.iter().map(|s| s.start).collect(), window: *window })
    }

    fn dense(&self, scope: &OracleScope, _video: &FeatureSequence, start: f64, window: &WindowConfig) -> Result<DecodeOutcome, RecursionError> {
        let Some(span) = scope.span else { return self.outcome(Answer::NotPresent, BASE_DELTA) };
        match clip_tokens(span, start, window) {
            Some((s, e)) => {
                let covered = ((e - s) as f64 * window.secs_per_token() / (span.1 - span.0)).min(1.0);
                self.outcome(Answer::Boundary(s, e), BASE_DELTA + PARTIAL_DELTA * (1.0 - covered))
            }
            None => self.outcome(Answer::NotPresent, BASE_DELTA),
        }
    }

    fn sparse(&self, scope: &OracleScope, range: Range<usize>, _set: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        let base = range.start;
        match Self::overlapping(scope, range).as_slice() {
            [] => self.outcome(Answer::NotPresent, BASE_DELTA),
            [first, .., last] => self.outcome(Answer::Boundary(first - base, last - base), BASE_DELTA),
            [only] => self.outcome(Answer::Boundary(only - base, only - base), BASE_DELTA),
        }
    }

    fn present(&self, scope: &OracleScope, segment: usize) -> Result<DecodeOutcome, RecursionError> {
        if Self::overlapping(scope, segment..segment + 1).is_empty() {
            self.outcome(Answer::No, BASE_DELTA)
        } else {
            self.outcome(Answer::Yes, BASE_DELTA)
        }
    }

    fn which(&self, scope: &OracleScope, range: Range<usize>, _set: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        let base = range.start;
        match Self::overlapping(scope, range).first() {
            Some(&i) => self.outcome(Answer::VideoIndex(i - base), BASE_DELTA),
            None => self.outcome(Answer::NotPresent, BASE_DELTA),
        }
    }
}
