use std::ops::Range;

use super::{DecodeOutcome, Grounder, RecursionError};
use crate::adapter::Adapter;
use crate::calibrank::{confidence_from_entropies, token_entropy};
use crate::corpus::{sample_frames, FeatureSequence, QuerySpec, Segment, WindowConfig};
use crate::decoder::{parse_answer, Decoded, Decoder, ParamSet, Prompt, Template, Visual};
use crate::numkernel::{Matrix, ParamStore};

/// Grounder backed by trained adapter and decoder weights.
#[derive(Debug, Clone, Copy)]
pub struct ModelGrounder<'a> {
    pub store: &'a ParamStore,
    pub adapter: &'a Adapter,
    pub decoder: &'a Decoder,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct ModelScope {
    query: Matrix,
    /// One sparse feature per segment (`n × D`), when requested.
    sparse: Option<Matrix>,
}

impl ModelScope {
    pub fn sparse(&self) -> Option<&Matrix> {
        self.sparse.as_ref()
    }
}

impl<'a> ModelGrounder<'a> {
    pub fn new(store: &'a ParamStore, adapter: &'a Adapter, decoder: &'a Decoder) -> Self {
        Self { store, adapter, decoder, max_len: 8 }
    }

    fn outcome(&self, d: Decoded) -> Result<DecodeOutcome, RecursionError> {
        let entropies = d.dists.iter().map(|p| token_entropy(p)).collect::<Result<Vec<_>, _>>()?;
        match parse_answer(&d.tokens, self.decoder.vocab()) {
            Ok(a) => Ok(DecodeOutcome { answer: Some(a), confidence: confidence_from_entropies(&entropies)?, entropies }),
            Err(e) => {
                log::debug!("{e}");
                Ok(DecodeOutcome { answer: None, entropies, confidence: 0.0 })
            }
        }
    }

    fn run(&self, prompt: &Prompt, set: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        let d = self.decoder.greedy_decode(self.store, set, prompt, self.max_len)?;
        self.outcome(d)
    }

    fn sparse_rows(&self, scope: &ModelScope, range: Range<usize>) -> Result<Matrix, RecursionError> {
        let s = scope.sparse.as_ref().ok_or_else(|| RecursionError::BadConfig("sparse features were not prepared".into()))?;
        if range.is_empty() || range.end > s.rows() {
            return Err(RecursionError::IndexOutOfRange { index: range.end, bound: s.rows() });
        }
        Ok(s.slice_rows(range.start, range.len()))
    }

    fn sparse_call(&self, scope: &ModelScope, range: Range<usize>, set: ParamSet, template: Template) -> Result<DecodeOutcome, RecursionError> {
        let rows = self.sparse_rows(scope, range)?;
        let p = self.decoder.build_prompt(self.store, self.adapter, set, 2, Visual::Sparse(&rows), &scope.query, template)?;
        self.run(&p, set)
    }
}

impl Grounder for ModelGrounder<'_> {
    type Scope = ModelScope;

    fn scope(
        &self,
        _video: &FeatureSequence,
        query: &QuerySpec,
        segments: &[Segment],
        _window: &WindowConfig,
        need_sparse: bool,
    ) -> Result<ModelScope, RecursionError> {
        let sparse = if need_sparse && !segments.is_empty() {
            let rows = self.adapter.sparse_batch(self.store, segments, &query.embedding)?;
            let refs: Vec<&Matrix> = rows.iter().collect();
            Some(Matrix::vstack(&refs)?)
        } else {
            None
        };
        Ok(ModelScope { query: query.embedding.clone(), sparse })
    }

    fn dense(&self, scope: &ModelScope, video: &FeatureSequence, start: f64, window: &WindowConfig) -> Result<DecodeOutcome, RecursionError> {
        let frames = sample_frames(video, start, window)?;
        let p = self.decoder.dense_prompt(self.store, self.adapter, ParamSet::Bottom, &frames, &scope.query, Template::Ground)?;
        self.run(&p, ParamSet::Bottom)
    }

    fn sparse(&self, scope: &ModelScope, range: Range<usize>, set: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        self.sparse_call(scope, range, set, Template::Ground)
    }

    fn present(&self, scope: &ModelScope, segment: usize) -> Result<DecodeOutcome, RecursionError> {
        self.sparse_call(scope, segment..segment + 1, ParamSet::Bottom, Template::Present)
    }

    fn which(&self, scope: &ModelScope, range: Range<usize>, set: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        self.sparse_call(scope, range, set, Template::Which)
    }
}
