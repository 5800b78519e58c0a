//! Decoding a pot vector back into text: scorer-guided beam search
//! over pluggable proposer/embedder/readability/entailment backends,
//! with deterministic toy backends so the search itself is testable
//! without any model server.

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, seeded_unit_vector, EmbeddingVector};
use crate::error::{MempotError, Result};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredToken {
    pub token: Token,
    pub score: f64,
}

/// Model backends the decoder calls into. Implementations must be
/// deterministic for fixed inputs and return unit-norm embeddings.
pub trait BeamBackend {
    /// Scored continuation candidates for a partial sequence, best
    /// first, at most `k`.
    fn top_k_tokens(&self, prefix: &[Token], partial: &[Token], k: usize)
        -> Result<Vec<ScoredToken>>;
    fn embed(&self, tokens: &[Token]) -> Result<EmbeddingVector>;
    /// In [0, 1]; higher reads better.
    fn readability(&self, tokens: &[Token]) -> Result<f64>;
    /// Probability in [0, 1] that `tokens` is entailed by `safety`.
    fn entailment(&self, tokens: &[Token], safety: &[Token]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerWeights {
    pub lambda_emb: f64,
    pub lambda_read: f64,
    pub lambda_fact: f64,
    pub lambda_priv: f64,
}

impl Default for ScorerWeights {
    fn default() -> Self {
        ScorerWeights {
            lambda_emb: 1.0,
            lambda_read: 0.1,
            lambda_fact: 0.1,
            lambda_priv: 0.1,
        }
    }
}

impl ScorerWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_emb,
            self.lambda_read,
            self.lambda_fact,
            self.lambda_priv,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MempotError::invalid_argument(
                "scorer weights must be finite and non-negative",
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(MempotError::invalid_argument(
                "at least one scorer weight must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingConfig {
    pub beam_width: usize,
    pub top_k_tokens: usize,
    pub max_length: usize,
    #[serde(default)]
    pub prefix: Vec<Token>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            beam_width: 4,
            top_k_tokens: 4,
            max_length: 6,
            prefix: Vec::new(),
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(MempotError::invalid_argument("beam_width must be >= 1"));
        }
        if self.top_k_tokens == 0 {
            return Err(MempotError::invalid_argument("top_k_tokens must be >= 1"));
        }
        if self.max_length == 0 {
            return Err(MempotError::invalid_argument("max_length must be >= 1"));
        }
        Ok(())
    }
}

fn unit_interval(name: &str, value: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        return Err(MempotError::Backend(format!(
            "{name} returned {value}, expected a value in [0, 1]"
        )));
    }
    Ok(value)
}

/// Embedding pull toward the target plus readability and entailment
/// rewards, minus similarity to any real document.
pub fn score_candidate(
    tokens: &[Token],
    target: &EmbeddingVector,
    safety: &[Token],
    doc_embeddings: &[EmbeddingVector],
    weights: &ScorerWeights,
    backend: &dyn BeamBackend,
) -> Result<f64> {
    weights.validate()?;
    if tokens.is_empty() {
        return Err(MempotError::invalid_argument("cannot score an empty sequence"));
    }
    let emb = backend.embed(tokens)?;
    let mut score = 0.0;
    if weights.lambda_emb > 0.0 {
        score += weights.lambda_emb * cosine_similarity(&emb, target)?;
    }
    if weights.lambda_read > 0.0 {
        score += weights.lambda_read * unit_interval("readability", backend.readability(tokens)?)?;
    }
    if weights.lambda_fact > 0.0 {
        score +=
            weights.lambda_fact * unit_interval("entailment", backend.entailment(tokens, safety)?)?;
    }
    if weights.lambda_priv > 0.0 && !doc_embeddings.is_empty() {
        let mut max_sim = f64::NEG_INFINITY;
        for d in doc_embeddings {
            max_sim = max_sim.max(cosine_similarity(&emb, d)?);
        }
        score -= weights.lambda_priv * max_sim;
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub tokens: Vec<Token>,
    pub score: f64,
    /// Cosine between the decoded sequence's embedding and the target.
    pub emb_similarity: f64,
}

/// One expansion round's bookkeeping, for search-behavior tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub expanded: Vec<(Vec<Token>, f64)>,
    pub kept: Vec<(Vec<Token>, f64)>,
}

// Score descending; exact ties prefer the longer sequence (a
// full-length beam outranks its own prefix, as in a final-round
// return), then lexicographic token ids.
fn rank(a: &(Vec<Token>, f64), b: &(Vec<Token>, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| b.0.len().cmp(&a.0.len()))
        .then_with(|| a.0.cmp(&b.0))
}

fn search(
    target: &EmbeddingVector,
    safety: &[Token],
    doc_embeddings: &[EmbeddingVector],
    weights: &ScorerWeights,
    config: &DecodingConfig,
    backend: &dyn BeamBackend,
    mut trace: Option<&mut Vec<RoundTrace>>,
) -> Result<InversionResult> {
    config.validate()?;
    weights.validate()?;
    let mut beams: Vec<(Vec<Token>, f64)> = vec![(config.prefix.clone(), f64::NEG_INFINITY)];
    // The best full sequence can surface at an intermediate length, so
    // the argmax is tracked across every scored candidate, not just
    // the final round's survivors.
    let mut best: Option<(Vec<Token>, f64)> = None;
    for _round in 0..config.max_length {
        let mut expanded: Vec<(Vec<Token>, f64)> = Vec::new();
        for (seq, _) in &beams {
            let proposals = backend.top_k_tokens(&config.prefix, seq, config.top_k_tokens)?;
            for p in proposals.iter().take(config.top_k_tokens) {
                let mut cand = seq.clone();
                cand.push(p.token);
                let s = score_candidate(&cand, target, safety, doc_embeddings, weights, backend)?;
                expanded.push((cand, s));
            }
        }
        if expanded.is_empty() {
            return Err(MempotError::DecodingStalled(
                "proposer returned no candidates for any beam".into(),
            ));
        }
        expanded.sort_by(rank);
        match &mut best {
            Some(b) if rank(&expanded[0], b).is_lt() => *b = expanded[0].clone(),
            None => best = Some(expanded[0].clone()),
            _ => {}
        }
        let kept: Vec<(Vec<Token>, f64)> =
            expanded.iter().take(config.beam_width).cloned().collect();
        if let Some(t) = trace.as_deref_mut() {
            t.push(RoundTrace {
                expanded: expanded.clone(),
                kept: kept.clone(),
            });
        }
        beams = kept;
    }
    let (tokens, score) = best.expect("max_length >= 1 guarantees one round");
    let emb_similarity = cosine_similarity(&backend.embed(&tokens)?, target)?;
    Ok(InversionResult {
        tokens,
        score,
        emb_similarity,
    })
}

/// Beam-search decode of a target vector. Each round every beam is
/// extended with the proposer's candidates, all extensions are scored
/// as full sequences, and the top `beam_width` survive; ties break
/// lexicographically on token ids.
pub fn beam_search_invert(
    target: &EmbeddingVector,
    safety: &[Token],
    doc_embeddings: &[EmbeddingVector],
    weights: &ScorerWeights,
    config: &DecodingConfig,
    backend: &dyn BeamBackend,
) -> Result<InversionResult> {
    search(target, safety, doc_embeddings, weights, config, backend, None)
}

/// Same search, also returning per-round expanded and kept sets.
pub fn beam_search_invert_traced(
    target: &EmbeddingVector,
    safety: &[Token],
    doc_embeddings: &[EmbeddingVector],
    weights: &ScorerWeights,
    config: &DecodingConfig,
    backend: &dyn BeamBackend,
) -> Result<(InversionResult, Vec<RoundTrace>)> {
    let mut trace = Vec::new();
    let res = search(
        target,
        safety,
        doc_embeddings,
        weights,
        config,
        backend,
        Some(&mut trace),
    )?;
    Ok((res, trace))
}

/// Deterministic stand-ins for the model backends: uniform proposer,
/// bag-of-tokens embedder behind a seeded random projection, adjacent
/// -distinct readability, and lexical-overlap entailment.
pub struct ToyBackends {
    vocab: Vec<Token>,
    /// Row t = image of vocab slot t, dimension `dim`.
    projection: Vec<Vec<f64>>,
    dim: usize,
}

impl ToyBackends {
    pub fn new(vocab: Vec<Token>, dim: usize, seed: u64) -> Result<Self> {
        if vocab.is_empty() {
            return Err(MempotError::invalid_argument("toy vocab must be non-empty"));
        }
        if dim == 0 {
            return Err(MempotError::invalid_argument("embedding dim must be >= 1"));
        }
        let mut sorted = vocab.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != vocab.len() {
            return Err(MempotError::invalid_argument("toy vocab has duplicate tokens"));
        }
        let projection = (0..sorted.len())
            .map(|i| {
                seeded_unit_vector(seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9), dim)
                    .map(|v| v.components().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(ToyBackends {
            vocab: sorted,
            projection,
            dim,
        })
    }

    /// Identity projection: embeddings are normalized token-count
    /// histograms, one axis per vocab slot.
    pub fn one_hot(vocab: Vec<Token>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(MempotError::invalid_argument("toy vocab must be non-empty"));
        }
        let mut sorted = vocab.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != vocab.len() {
            return Err(MempotError::invalid_argument("toy vocab has duplicate tokens"));
        }
        let dim = sorted.len();
        let projection = (0..dim)
            .map(|i| {
                let mut row = vec![0.0; dim];
                row[i] = 1.0;
                row
            })
            .collect();
        Ok(ToyBackends {
            vocab: sorted,
            projection,
            dim,
        })
    }

    pub fn vocab(&self) -> &[Token] {
        &self.vocab
    }

    fn slot(&self, token: Token) -> Result<usize> {
        self.vocab
            .binary_search(&token)
            .map_err(|_| MempotError::Backend(format!("token {token} not in toy vocab")))
    }
}

impl BeamBackend for ToyBackends {
    fn top_k_tokens(
        &self,
        _prefix: &[Token],
        _partial: &[Token],
        k: usize,
    ) -> Result<Vec<ScoredToken>> {
        // Uniform proposer: every vocab token is equally likely, so the
        // tie-break yields the k lowest token ids.
        let p = 1.0 / self.vocab.len() as f64;
        Ok(self
            .vocab
            .iter()
            .take(k)
            .map(|&token| ScoredToken { token, score: p })
            .collect())
    }

    fn embed(&self, tokens: &[Token]) -> Result<EmbeddingVector> {
        if tokens.is_empty() {
            return Err(MempotError::Backend("cannot embed an empty sequence".into()));
        }
        // Count per slot first so the projection sum runs in a fixed
        // order and permuted inputs embed bit-identically.
        let mut counts = vec![0usize; self.vocab.len()];
        for &t in tokens {
            counts[self.slot(t)?] += 1;
        }
        let mut acc = vec![0.0; self.dim];
        for (slot, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let row = &self.projection[slot];
            for (a, r) in acc.iter_mut().zip(row) {
                *a += c as f64 * r;
            }
        }
        EmbeddingVector::new(acc)
            .and_then(|v| v.normalized())
            .map_err(|_| {
                MempotError::Backend("bag-of-tokens projection collapsed to zero".into())
            })
    }

    fn readability(&self, tokens: &[Token]) -> Result<f64> {
        // Surrogate for a fluency model: fraction of adjacent pairs
        // that differ. A single token has no repetition, so 1.0.
        if tokens.is_empty() {
            return Err(MempotError::Backend("cannot rate an empty sequence".into()));
        }
        if tokens.len() == 1 {
            return Ok(1.0);
        }
        let distinct = tokens.windows(2).filter(|w| w[0] != w[1]).count();
        Ok(distinct as f64 / (tokens.len() - 1) as f64)
    }

    fn entailment(&self, tokens: &[Token], safety: &[Token]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(MempotError::Backend("cannot entail an empty sequence".into()));
        }
        let y: std::collections::BTreeSet<Token> = tokens.iter().copied().collect();
        let s: std::collections::BTreeSet<Token> = safety.iter().copied().collect();
        let overlap = y.intersection(&s).count();
        Ok(overlap as f64 / y.len() as f64)
    }
}

#[cfg(feature = "http")]
pub use http_backend::HttpBackend;

#[cfg(feature = "http")]
mod http_backend {
    use super::{BeamBackend, ScoredToken, Token};
    use crate::embedding::EmbeddingVector;
    use crate::error::{MempotError, Result};
    use serde::Deserialize;

    /// JSON-over-HTTP backend. Endpoints relative to the base URL:
    /// POST /propose     {"prefix": [..], "partial": [..], "candidates_requested": k}
    ///                   -> {"candidates": [{"token": id, "score": s}, ..]}
    /// POST /embed       {"text": [..]}                        -> {"vector": [..]}
    /// POST /readability {"text": [..]}                        -> {"score": s}
    /// POST /entail      {"premise": [..], "hypothesis": [..]} -> {"score": s}
    pub struct HttpBackend {
        base_url: String,
    }

    #[derive(Deserialize)]
    struct ProposeResponse {
        candidates: Vec<Candidate>,
    }

    #[derive(Deserialize)]
    struct Candidate {
        token: Token,
        score: f64,
    }

    #[derive(Deserialize)]
    struct EmbedResponse {
        vector: Vec<f64>,
    }

    #[derive(Deserialize)]
    struct ScoreResponse {
        score: f64,
    }

    impl HttpBackend {
        pub fn new(base_url: impl Into<String>) -> Self {
            HttpBackend {
                base_url: base_url.into(),
            }
        }

        fn post<T: serde::de::DeserializeOwned>(
            &self,
            path: &str,
            body: serde_json::Value,
        ) -> Result<T> {
            let url = format!("{}/{}", self.base_url.trim_end_matches('/'), path);
            let mut resp = ureq::post(&url)
                .send_json(body)
                .map_err(|e| MempotError::Backend(format!("POST {url}: {e}")))?;
            resp.body_mut()
                .read_json::<T>()
                .map_err(|e| MempotError::Backend(format!("decoding {url} response: {e}")))
        }
    }

    impl BeamBackend for HttpBackend {
        fn top_k_tokens(
            &self,
            prefix: &[Token],
            partial: &[Token],
            k: usize,
        ) -> Result<Vec<ScoredToken>> {
            let resp: ProposeResponse = self.post(
                "propose",
                serde_json::json!({
                    "prefix": prefix,
                    "partial": partial,
                    "candidates_requested": k,
                }),
            )?;
            Ok(resp
                .candidates
                .into_iter()
                .map(|c| ScoredToken {
                    token: c.token,
                    score: c.score,
                })
                .collect())
        }

        fn embed(&self, tokens: &[Token]) -> Result<EmbeddingVector> {
            let resp: EmbedResponse = self.post("embed", serde_json::json!({ "text": tokens }))?;
            EmbeddingVector::new(resp.vector)
                .and_then(|v| v.normalized())
                .map_err(|e| MempotError::Backend(format!("embed endpoint: {e}")))
        }

        fn readability(&self, tokens: &[Token]) -> Result<f64> {
            let resp: ScoreResponse =
                self.post("readability", serde_json::json!({ "text": tokens }))?;
            Ok(resp.score)
        }

        fn entailment(&self, tokens: &[Token], safety: &[Token]) -> Result<f64> {
            let resp: ScoreResponse = self.post(
                "entail",
                serde_json::json!({ "premise": safety, "hypothesis": tokens }),
            )?;
            Ok(resp.score)
        }
    }
}
