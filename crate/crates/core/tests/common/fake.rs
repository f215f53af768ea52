//! Scorers whose log-probabilities are a fixed function the test can evaluate
//! on its own.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use debias_core::linalg::Projector;
use debias_core::scorer::{HiddenStates, ProjectionHandle, ScoreRequest, Scorer};
use debias_core::{Error, Result};

/// Pseudo-random log-probability in (-12, 0) keyed on the masked sentence,
/// the target and the projection id.
pub fn hashed_logprob(tokens: &[String], mask: usize, target: &str, projection: Option<&str>) -> f64 {
    let mut h = DefaultHasher::new();
    for (i, t) in tokens.iter().enumerate() {
        if i == mask {
            "<m>".hash(&mut h);
        } else {
            t.to_lowercase().hash(&mut h);
        }
    }
    target.to_lowercase().hash(&mut h);
    projection.hash(&mut h);
    let u = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
    -12.0 * u - 1e-6
}

pub struct HashScorer {
    pub calls: usize,
}

impl HashScorer {
    pub fn new() -> Self {
        Self { calls: 0 }
    }
}

impl Scorer for HashScorer {
    fn register(&mut self, _: &ProjectionHandle, _: &Projector) -> Result<()> {
        Ok(())
    }

    fn masked_logprob(&mut self, req: &ScoreRequest) -> Result<f64> {
        self.calls += 1;
        Ok(hashed_logprob(req.tokens(), req.mask_position(), req.target(), req.projection()))
    }

    fn hidden_states(&mut self, _: &[String], _: Option<&ProjectionHandle>) -> Result<HiddenStates> {
        Err(Error::Protocol("hash scorer has no hidden states".into()))
    }
}
