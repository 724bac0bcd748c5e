//! The ten hallucination scorers. Every scorer returns the probability that a
//! response is permissible.

mod kind;
pub mod prompts;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use kind::ScorerKind;
pub use prompts::PromptTemplate;

use crate::backends::{BackendError, Backends, ChatRequest, FirstTokenLogits, TokenLogprobs, MAX_TOP_LOGPROBS};
use crate::exec::Execution;
use crate::model::{Dataset, Example, ScoreMatrix, ScoreRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("verdict token {0:?} absent from first-token logprobs")]
    MissingVerdictToken(String),
    #[error("no probability in [0,1] found in completion {0:?}")]
    Abstention(String),
    #[error("non-finite log-probability")]
    NonFinite,
    #[error("empty token logprob list")]
    EmptyTokens,
    #[error("example has empty {0}")]
    EmptyText(&'static str),
    #[error("sampling at temperature 0 yields a single distinct generation; K={0} needs temperature > 0")]
    DegenerateSampling(u32),
    #[error("need {need} samples, have {have}")]
    NotEnoughSamples { need: usize, have: usize },
    #[error("no scorers configured")]
    NoScorers,
    #[error("every cell of scorer {kind} failed; first error: {first}")]
    ScorerFailed { kind: ScorerKind, first: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Models, decoding settings and limits shared by all scorers in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub detector_model: String,
    pub generator_model: String,
    /// Temperature for the K alternative generations.
    pub generation_temperature: f64,
    /// Temperature for judge calls (verdict, verbalized, rail).
    pub detector_temperature: f64,
    pub verdict_max_tokens: u32,
    pub verbalized_max_tokens: u32,
    pub sample_max_tokens: u32,
    pub top_logprobs: u8,
    /// Seed of the first sampled generation; sample i uses `sample_seed + i`.
    pub sample_seed: u64,
    /// Maximum concurrently scored examples.
    pub parallelism: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            detector_model: "detector".into(),
            generator_model: "generator".into(),
            generation_temperature: 1.0,
            detector_temperature: 0.0,
            verdict_max_tokens: 1,
            verbalized_max_tokens: 16,
            sample_max_tokens: 256,
            top_logprobs: MAX_TOP_LOGPROBS,
            sample_seed: 0,
            parallelism: 8,
        }
    }
}

/// exp(a) / (exp(a) + exp(b)), evaluated after subtracting the larger argument.
pub fn softmax_binary_normalize(lp_pos: f64, lp_neg: f64) -> Result<f64, ScoreError> {
    if !lp_pos.is_finite() || !lp_neg.is_finite() {
        return Err(ScoreError::NonFinite);
    }
    let m = lp_pos.max(lp_neg);
    let pos = (lp_pos - m).exp();
    let neg = (lp_neg - m).exp();
    Ok(pos / (pos + neg))
}

/// Exponentiated mean token log-likelihood.
pub fn score_inverse_perplexity(tl: &TokenLogprobs) -> Result<f64, ScoreError> {
    if tl.tokens.is_empty() {
        return Err(ScoreError::EmptyTokens);
    }
    let mut sum = 0.0;
    for lp in tl.logprobs() {
        if lp.is_nan() || lp > 0.0 {
            return Err(ScoreError::NonFinite);
        }
        sum += lp;
    }
    Ok((sum / tl.tokens.len() as f64).exp())
}

fn token_word(token: &str) -> String {
    token
        .trim()
        .trim_start_matches(['\u{2581}', '\u{120}'])
        .trim()
        .to_lowercase()
}

/// Log-sum-exp of every first-token candidate that spells `word`
/// (case-insensitive, whitespace and tokenizer space markers trimmed).
pub fn verdict_logprob(logits: &FirstTokenLogits, word: &str) -> Option<f64> {
    let word = word.to_lowercase();
    let matches: Vec<f64> = logits
        .entries
        .iter()
        .filter(|(tok, lp)| token_word(tok) == word && lp.is_finite())
        .map(|(_, lp)| *lp)
        .collect();
    let m = matches.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if matches.is_empty() {
        return None;
    }
    Some(m + matches.iter().map(|lp| (lp - m).exp()).sum::<f64>().ln())
}

fn binary_verdict(logits: &FirstTokenLogits, pos: &str, neg: &str) -> Result<(f64, f64, f64), ScoreError> {
    let lp_pos = verdict_logprob(logits, pos).ok_or_else(|| ScoreError::MissingVerdictToken(pos.into()))?;
    let lp_neg = verdict_logprob(logits, neg).ok_or_else(|| ScoreError::MissingVerdictToken(neg.into()))?;
    Ok((softmax_binary_normalize(lp_pos, lp_neg)?, lp_pos, lp_neg))
}

/// First number in the text that lies in [0,1]. Accepts `0.25`, `.5`, `1`.
pub fn parse_verbalized(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let starts_number =
            bytes[i].is_ascii_digit() || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit));
        if !starts_number {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        if let Ok(v) = text[start..i].parse::<f64>() {
            if (0.0..=1.0).contains(&v) {
                return Some(v);
            }
        }
    }
    None
}

/// One minus the mean contradiction probability.
pub fn selfcheck_value(contradictions: &[f64]) -> f64 {
    1.0 - contradictions.iter().sum::<f64>() / contradictions.len() as f64
}

/// Degree of the candidate in the similarity graph, divided by K. Inputs are
/// direction-averaged contradiction probabilities to each sample.
pub fn similarity_degree_value(symmetric_contradictions: &[f64]) -> (f64, f64) {
    let degree: f64 = symmetric_contradictions.iter().map(|c| 1.0 - c).sum();
    (degree / symmetric_contradictions.len() as f64, degree)
}

fn require_text(text: &str, what: &'static str) -> Result<(), ScoreError> {
    if text.trim().is_empty() {
        Err(ScoreError::EmptyText(what))
    } else {
        Ok(())
    }
}

fn first_samples(ex: &Example, k: usize) -> Result<&[String], ScoreError> {
    let samples = ex.samples.as_deref().unwrap_or(&[]);
    if samples.len() < k {
        return Err(ScoreError::NotEnoughSamples {
            need: k,
            have: samples.len(),
        });
    }
    Ok(&samples[..k])
}

/// Runs scorers against configured backends.
pub struct Scorer<'a> {
    backends: &'a Backends,
    cfg: &'a ScoringConfig,
}

impl<'a> Scorer<'a> {
    pub fn new(backends: &'a Backends, cfg: &'a ScoringConfig) -> Self {
        Self { backends, cfg }
    }

    fn record(ex: &Example, kind: ScorerKind, value: f64, raw: Value) -> ScoreRecord {
        ScoreRecord {
            example_id: ex.id.clone(),
            scorer: kind,
            value: value.clamp(0.0, 1.0),
            llm_calls: kind.llm_calls(),
            raw,
        }
    }

    fn verdict_request(&self, prompt: String) -> ChatRequest {
        ChatRequest {
            model: self.cfg.detector_model.clone(),
            messages: vec![crate::backends::Message::user(prompt)],
            temperature: self.cfg.detector_temperature,
            max_tokens: self.cfg.verdict_max_tokens,
            want_logprobs: true,
            top_logprobs: self.cfg.top_logprobs,
            seed: None,
        }
    }

    fn first_token(&self, prompt: String) -> Result<FirstTokenLogits, ScoreError> {
        let completion = self.backends.chat.complete(&self.verdict_request(prompt))?;
        completion
            .first_token
            .ok_or_else(|| BackendError::Malformed("completion lacks first-token logprobs".into()).into())
    }

    /// P(True) and its three contradiction variants.
    pub fn score_prompted_binary(&self, kind: ScorerKind, ex: &Example) -> Result<ScoreRecord, ScoreError> {
        assert!(kind.is_prompted_binary(), "{kind} is not a prompted binary scorer");
        require_text(&ex.response, "response")?;
        if matches!(kind, ScorerKind::PTrue | ScorerKind::PInputContradict) {
            require_text(&ex.input, "input")?;
        }
        let template = PromptTemplate::for_kind(kind).expect("prompted kinds have templates");
        let prompt = template.render(&[(prompts::INPUT, &ex.input), (prompts::RESPONSE, &ex.response)]);
        let logits = self.first_token(prompt)?;
        let (value, lp_true, lp_false) = binary_verdict(&logits, "true", "false")?;
        Ok(Self::record(ex, kind, value, json!({"lp_true": lp_true, "lp_false": lp_false})))
    }

    pub fn score_verbalized(&self, ex: &Example) -> Result<ScoreRecord, ScoreError> {
        require_text(&ex.input, "input")?;
        require_text(&ex.response, "response")?;
        let template = PromptTemplate::for_kind(ScorerKind::PTrueVerbalized).expect("template");
        let prompt = template.render(&[(prompts::INPUT, &ex.input), (prompts::RESPONSE, &ex.response)]);
        let req = ChatRequest {
            max_tokens: self.cfg.verbalized_max_tokens,
            want_logprobs: false,
            top_logprobs: 0,
            ..self.verdict_request(prompt)
        };
        let completion = self.backends.chat.complete(&req)?;
        let value = parse_verbalized(&completion.text).ok_or(ScoreError::Abstention(completion.text.clone()))?;
        Ok(Self::record(
            ex,
            ScorerKind::PTrueVerbalized,
            value,
            json!({"completion": completion.text, "abstained": false}),
        ))
    }

    /// Uses `response_logprobs` carried by the example when present; otherwise
    /// asks the detector to answer the input greedily and scores that answer.
    pub fn score_inverse_perplexity_example(&self, ex: &Example) -> Result<ScoreRecord, ScoreError> {
        if let Some(carried) = ex.extras.get("response_logprobs") {
            let tl = carried_logprobs(carried)?;
            let value = score_inverse_perplexity(&tl)?;
            return Ok(Self::record(
                ex,
                ScorerKind::InversePerplexity,
                value,
                json!({"source": "example", "tokens": tl.tokens.len()}),
            ));
        }
        require_text(&ex.input, "input")?;
        let req = ChatRequest {
            model: self.cfg.detector_model.clone(),
            messages: vec![crate::backends::Message::user(ex.input.clone())],
            temperature: 0.0,
            max_tokens: self.cfg.sample_max_tokens,
            want_logprobs: true,
            top_logprobs: 0,
            seed: None,
        };
        let completion = self.backends.chat.complete(&req)?;
        let tl = completion
            .token_logprobs
            .ok_or_else(|| BackendError::Malformed("completion lacks token logprobs".into()))?;
        let value = score_inverse_perplexity(&tl)?;
        let matches = crate::model::normalize_text(&completion.text) == crate::model::normalize_text(&ex.response);
        Ok(Self::record(
            ex,
            ScorerKind::InversePerplexity,
            value,
            json!({"source": "detector", "tokens": tl.tokens.len(), "regenerated_matches": matches}),
        ))
    }

    pub fn score_nli_direct(&self, ex: &Example) -> Result<ScoreRecord, ScoreError> {
        require_text(&ex.input, "input")?;
        require_text(&ex.response, "response")?;
        let verdict = self.backends.nli.classify(&ex.input, &ex.response)?;
        Ok(Self::record(
            ex,
            ScorerKind::NliDirect,
            1.0 - verdict.contradiction,
            json!({"contradiction": verdict.contradiction, "nli_calls": 1}),
        ))
    }

    /// Tops the example up to `k` samples from the generator. Returns the
    /// extended example and the number of fresh generations.
    pub fn ensure_samples(&self, ex: &Example, k: u32) -> Result<(Example, u32), ScoreError> {
        let have = ex.sample_count();
        if have >= k as usize {
            return Ok((ex.clone(), 0));
        }
        if k >= 2 && self.cfg.generation_temperature <= 0.0 {
            return Err(ScoreError::DegenerateSampling(k));
        }
        require_text(&ex.input, "input")?;
        let mut samples = ex.samples.clone().unwrap_or_default();
        for i in have..k as usize {
            let req = ChatRequest {
                model: self.cfg.generator_model.clone(),
                messages: vec![crate::backends::Message::user(ex.input.clone())],
                temperature: self.cfg.generation_temperature,
                max_tokens: self.cfg.sample_max_tokens,
                want_logprobs: false,
                top_logprobs: 0,
                seed: Some(self.cfg.sample_seed + i as u64),
            };
            samples.push(self.backends.chat.complete(&req)?.text);
        }
        let fresh = k - have as u32;
        let mut out = ex.clone();
        out.samples = Some(samples);
        Ok((out, fresh))
    }

    pub fn score_selfcheck_nli(&self, ex: &Example, k: u32) -> Result<ScoreRecord, ScoreError> {
        require_text(&ex.response, "response")?;
        let samples = first_samples(ex, k as usize)?;
        let contradictions = samples
            .iter()
            .map(|s| Ok(self.backends.nli.classify(s, &ex.response)?.contradiction))
            .collect::<Result<Vec<f64>, ScoreError>>()?;
        Ok(Self::record(
            ex,
            ScorerKind::SelfCheckNli(k),
            selfcheck_value(&contradictions),
            json!({"contradictions": contradictions}),
        ))
    }

    pub fn score_similarity_degree(&self, ex: &Example, k: u32) -> Result<ScoreRecord, ScoreError> {
        require_text(&ex.response, "response")?;
        let samples = first_samples(ex, k as usize)?;
        let mut symmetric = Vec::with_capacity(samples.len());
        for s in samples {
            let forward = self.backends.nli.classify(&ex.response, s)?.contradiction;
            let backward = self.backends.nli.classify(s, &ex.response)?.contradiction;
            symmetric.push(0.5 * (forward + backward));
        }
        let (value, degree) = similarity_degree_value(&symmetric);
        Ok(Self::record(
            ex,
            ScorerKind::SimilarityDegree(k),
            value,
            json!({"degree": degree, "symmetric_contradictions": symmetric}),
        ))
    }

    pub fn score_hallucination_rail(&self, ex: &Example, k: u32) -> Result<ScoreRecord, ScoreError> {
        require_text(&ex.response, "response")?;
        let samples = first_samples(ex, k as usize)?;
        let context = samples.join("\n\n");
        let template = PromptTemplate::for_kind(ScorerKind::HallucinationRail(k)).expect("template");
        let prompt = template.render(&[(prompts::SAMPLES, &context), (prompts::CANDIDATE, &ex.response)]);
        let logits = self.first_token(prompt)?;
        let (value, lp_yes, lp_no) = binary_verdict(&logits, "yes", "no")?;
        Ok(Self::record(
            ex,
            ScorerKind::HallucinationRail(k),
            value,
            json!({"lp_yes": lp_yes, "lp_no": lp_no}),
        ))
    }

    /// Dispatches one cell. A verbalized abstention is imputed as 0.5 and flagged.
    pub fn score(&self, kind: ScorerKind, ex: &Example) -> Result<ScoreRecord, ScoreError> {
        match kind {
            k if k.is_prompted_binary() => self.score_prompted_binary(k, ex),
            ScorerKind::PTrueVerbalized => match self.score_verbalized(ex) {
                Err(ScoreError::Abstention(text)) => Ok(Self::record(
                    ex,
                    kind,
                    0.5,
                    json!({"completion": text, "abstained": true}),
                )),
                other => other,
            },
            ScorerKind::InversePerplexity => self.score_inverse_perplexity_example(ex),
            ScorerKind::NliDirect => self.score_nli_direct(ex),
            ScorerKind::SelfCheckNli(k) => self.score_selfcheck_nli(ex, k),
            ScorerKind::SimilarityDegree(k) => self.score_similarity_degree(ex, k),
            ScorerKind::HallucinationRail(k) => self.score_hallucination_rail(ex, k),
            _ => unreachable!("all kinds handled"),
        }
    }
}

fn carried_logprobs(v: &Value) -> Result<TokenLogprobs, ScoreError> {
    let items = v
        .as_array()
        .ok_or_else(|| BackendError::Malformed("response_logprobs must be an array".into()))?;
    let mut tokens = Vec::with_capacity(items.len());
    for item in items {
        let (tok, lp) = match item {
            Value::Number(n) => (String::new(), n.as_f64()),
            Value::Array(pair) if pair.len() == 2 => (
                pair[0].as_str().unwrap_or_default().to_string(),
                pair[1].as_f64(),
            ),
            Value::Object(o) => (
                o.get("token").and_then(Value::as_str).unwrap_or_default().to_string(),
                o.get("logprob").and_then(Value::as_f64),
            ),
            _ => (String::new(), None),
        };
        let lp = lp.ok_or_else(|| BackendError::Malformed("bad response_logprobs entry".into()))?;
        tokens.push((tok, lp));
    }
    Ok(TokenLogprobs { tokens })
}

/// Output of a scoring run.
#[derive(Debug, Clone)]
pub struct ScoreRun {
    pub matrix: ScoreMatrix,
    /// Successful cells in (example, scorer) order.
    pub records: Vec<ScoreRecord>,
    /// Fresh generator calls issued to top up samples.
    pub generations: u64,
}

impl ScoreRun {
    pub fn total_llm_calls(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.llm_calls)).sum()
    }
}

/// Scores every (example, scorer) cell. Samples are generated once per
/// example (up to the largest K) and shared by every multi-generation scorer.
pub fn score_all(
    d: &Dataset,
    kinds: &[ScorerKind],
    backends: &Backends,
    cfg: &ScoringConfig,
    exec: Execution,
) -> Result<ScoreRun, ScoreError> {
    if kinds.is_empty() {
        return Err(ScoreError::NoScorers);
    }
    let scorer = Scorer::new(backends, cfg);
    let k_max = kinds.iter().map(|k| k.generations()).max().unwrap_or(0);

    let rows: Vec<(Vec<Result<ScoreRecord, ScoreError>>, u32)> = exec.bounded(cfg.parallelism, || {
        exec.map(&d.examples, |ex| {
            let sampled = if k_max > 0 {
                scorer.ensure_samples(ex, k_max)
            } else {
                Ok((ex.clone(), 0))
            };
            let fresh = sampled.as_ref().map_or(0, |(_, n)| *n);
            let cells = kinds
                .iter()
                .map(|&kind| match (&sampled, kind.is_multi_generation()) {
                    (Err(e), true) => Err(e.clone()),
                    (Ok((extended, _)), true) => scorer.score(kind, extended),
                    _ => scorer.score(kind, ex),
                })
                .collect();
            (cells, fresh)
        })
    });

    let mut matrix = ScoreMatrix::new(d.ids(), kinds.to_vec());
    let mut records = Vec::new();
    let mut generations = 0u64;
    for (r, (cells, fresh)) in rows.into_iter().enumerate() {
        generations += u64::from(fresh);
        for (c, cell) in cells.into_iter().enumerate() {
            match cell {
                Ok(rec) => {
                    matrix.set(r, c, rec.value);
                    records.push(rec);
                }
                Err(e) => {
                    matrix.errors.insert((r, c), e.to_string());
                }
            }
        }
    }
    for (c, &kind) in kinds.iter().enumerate() {
        if matrix.present_count(c) == 0 {
            let first = matrix
                .errors
                .iter()
                .find(|((_, col), _)| *col == c)
                .map(|(_, e)| e.clone())
                .unwrap_or_default();
            return Err(ScoreError::ScorerFailed { kind, first });
        }
    }
    Ok(ScoreRun {
        matrix,
        records,
        generations,
    })
}
