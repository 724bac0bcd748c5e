//! Regenerates the replay fixtures under `fixtures/`.
//!
//! A synthetic question-answering world stands in for the model services:
//! every example has a latent correctness logit, a topic, and per-scorer
//! noisy views of that logit, with topic-dependent bias on the judge scores
//! so that group-wise calibration has something to fix. A simulator answers
//! the exact requests the scorers send, and a recording transport stores
//! them.
//!
//!     cargo run --example make_fixtures

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use halludetect::backends::{BackendError, Endpoint, RecordingTransport, Transport};
use halludetect::exec::Execution;
use halludetect::model::{Dataset, Example};
use halludetect::pipeline::{cmd_score_with, RunConfig};
use halludetect::scorers::prompts::{self, PromptTemplate};
use halludetect::scorers::{ScorerKind, ScoringConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

const N_EXAMPLES: usize = 1000;
const K_MAX: usize = 3;
const EMBED_DIM: usize = 6;
const TOPICS: [&str; 4] = ["river", "composer", "mineral", "treaty"];
/// Judge-score bias per topic, the miscalibration multicalibration should remove.
const TOPIC_BIAS: [f64; 4] = [0.9, -0.9, 0.4, -0.4];
const SYLLABLES: [&str; 16] = [
    "ar", "bel", "cor", "dun", "el", "fa", "gri", "hol", "is", "ka", "lo", "mer", "nov", "or", "pel", "ra",
];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn name(rng: &mut ChaCha8Rng, parts: usize) -> String {
    let mut s: String = (0..parts).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
    s[..1].make_ascii_uppercase();
    s
}

struct Latent {
    topic: usize,
    ptrue: f64,
    input_contradict: f64,
    verbalized: Option<f64>,
    inverse_perplexity: f64,
    nli_contradiction: f64,
    /// NLI contradiction of (sample, response) and (response, sample).
    sample_contradictions: Vec<(f64, f64)>,
    rail: f64,
}

fn build_world(seed: u64) -> (Dataset, Vec<Latent>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..TOPICS.len() * 2).map(|_| (0..EMBED_DIM).map(|_| 3.0 * z.sample(&mut rng)).collect()).collect();
    let mut examples = Vec::with_capacity(N_EXAMPLES);
    let mut latents = Vec::with_capacity(N_EXAMPLES);
    let mut embeddings = Vec::with_capacity(N_EXAMPLES);
    for i in 0..N_EXAMPLES {
        let topic = rng.random_range(0..TOPICS.len());
        let a: f64 = 0.35 + z.sample(&mut rng);
        let label = u8::from(rng.random::<f64>() < sigmoid(4.0 * a));
        let subject = name(&mut rng, 3);
        let answer = name(&mut rng, 2);
        let input = format!("Q{i:04}. Which {} is most closely associated with {subject}?", TOPICS[topic]);
        let response = format!("The {} associated with {subject} is {answer}.", TOPICS[topic]);
        let bias = TOPIC_BIAS[topic];

        let ptrue = sigmoid(1.5 * a + z.sample(&mut rng) + bias + 0.4);
        let input_contradict = sigmoid(1.2 * a + 1.2 * z.sample(&mut rng) - bias);
        let verbalized = (rng.random::<f64>() >= 0.04).then(|| sigmoid(1.2 * a + 1.2 * z.sample(&mut rng) + 0.8));
        let inverse_perplexity = sigmoid(a + 1.3 * z.sample(&mut rng) + 1.2);
        let nli_contradiction = sigmoid(-0.8 * a + 1.4 * z.sample(&mut rng) - 0.5);
        let mut sample_contradictions = Vec::with_capacity(K_MAX);
        let mut agreeing = 0;
        for _ in 0..K_MAX {
            let agrees = rng.random::<f64>() < sigmoid(2.0 * a + 0.6 * z.sample(&mut rng));
            agreeing += usize::from(agrees);
            let logit = if agrees { -2.5 + 0.6 * z.sample(&mut rng) } else { 1.5 + 0.8 * z.sample(&mut rng) };
            sample_contradictions.push((sigmoid(logit), sigmoid(logit + 0.3 * z.sample(&mut rng))));
        }
        let rail = sigmoid(3.0 * (agreeing as f64 / K_MAX as f64 - 0.5) + 0.8 * z.sample(&mut rng) + 0.3);

        let mut emb = Vec::with_capacity(2 * EMBED_DIM);
        for half in 0..2 {
            emb.extend(centers[topic * 2 + half].iter().map(|c| c + z.sample(&mut rng)));
        }
        examples.push(Example::new(format!("q{i:04}"), input, response).with_label(label));
        latents.push(Latent {
            topic,
            ptrue,
            input_contradict,
            verbalized,
            inverse_perplexity,
            nli_contradiction,
            sample_contradictions,
            rail,
        });
        embeddings.push(emb);
    }
    (Dataset::new("synthetic-qa", examples).unwrap(), latents, embeddings)
}

fn sample_text(ex: &Example, j: usize) -> String {
    let answer = ex.response.rsplit(' ').next().unwrap_or_default().trim_end_matches('.');
    format!("Sampled answer {} for {}: it is {answer}, as far as I recall.", j + 1, ex.id)
}

fn verdict_reply(pos: &str, neg: &str, value: f64) -> Value {
    let v = value.clamp(1e-4, 1.0 - 1e-4);
    let lp_pos = round6((0.97 * v).ln());
    let lp_neg = round6((0.97 * (1.0 - v)).ln());
    let lp_other = round6(0.03f64.ln());
    let (tok, lp) = if lp_pos >= lp_neg { (pos, lp_pos) } else { (neg, lp_neg) };
    json!({"choices": [{
        "message": {"role": "assistant", "content": tok},
        "logprobs": {"content": [{
            "token": tok, "logprob": lp,
            "top_logprobs": [
                {"token": pos, "logprob": lp_pos},
                {"token": neg, "logprob": lp_neg},
                {"token": "The", "logprob": lp_other}
            ]
        }]}
    }]})
}

fn text_reply(text: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
}

/// Greedy answer whose mean token log-probability is ln(value).
fn greedy_reply(text: &str, value: f64) -> Value {
    let mean = value.clamp(1e-4, 1.0).ln();
    let words: Vec<&str> = text.split(' ').collect();
    let scale = [1.2, 0.8, 1.1, 0.9];
    let content: Vec<Value> = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            // Pairs of scales average to one; an odd last token keeps the mean.
            let s = if words.len() % 2 == 1 && i == words.len() - 1 { 1.0 } else { scale[i % 4] };
            json!({"token": format!(" {w}"), "logprob": round6((mean * s).min(0.0))})
        })
        .collect();
    json!({"choices": [{"message": {"role": "assistant", "content": text}, "logprobs": {"content": content}}]})
}

fn nli_reply(contradiction: f64) -> Value {
    let c = round6(contradiction);
    let rest = 1.0 - c;
    let e = round6(rest * 0.8);
    json!({"entailment": e, "neutral": round6(1.0 - c - e), "contradiction": c})
}

#[derive(Default)]
struct Simulator {
    prompts: HashMap<String, Value>,
    generations: HashMap<(String, u64), Value>,
    greedy: HashMap<String, Value>,
    nli: HashMap<(String, String), Value>,
    embeddings: HashMap<String, Value>,
}

impl Simulator {
    fn new(d: &Dataset, latents: &[Latent], embeddings: &[Vec<f64>], cfg: &ScoringConfig) -> Self {
        let mut sim = Self::default();
        let render = |kind: ScorerKind, ex: &Example| {
            PromptTemplate::for_kind(kind).unwrap().render(&[(prompts::INPUT, &ex.input), (prompts::RESPONSE, &ex.response)])
        };
        for ((ex, l), emb) in d.examples.iter().zip(latents).zip(embeddings) {
            let bias = TOPIC_BIAS[l.topic];
            sim.prompts.insert(render(ScorerKind::PTrue, ex), verdict_reply("True", "False", l.ptrue));
            sim.prompts.insert(render(ScorerKind::PInputContradict, ex), verdict_reply(" True", " False", l.input_contradict));
            sim.prompts.insert(render(ScorerKind::PSelfContradict, ex), verdict_reply("True", "False", sigmoid(bias)));
            sim.prompts.insert(render(ScorerKind::PFactContradict, ex), verdict_reply("True", "False", sigmoid(-bias)));
            let verbal = l.verbalized.map_or_else(|| "I cannot tell.".to_string(), |v| format!("{v:.2}"));
            sim.prompts.insert(render(ScorerKind::PTrueVerbalized, ex), text_reply(&verbal));
            sim.greedy.insert(ex.input.clone(), greedy_reply(&ex.response, l.inverse_perplexity));
            sim.nli.insert((ex.input.clone(), ex.response.clone()), nli_reply(l.nli_contradiction));
            let samples: Vec<String> = (0..K_MAX).map(|j| sample_text(ex, j)).collect();
            for (j, s) in samples.iter().enumerate() {
                sim.generations.insert((ex.input.clone(), cfg.sample_seed + j as u64), text_reply(s));
                let (c_fwd, c_bwd) = l.sample_contradictions[j];
                sim.nli.insert((s.clone(), ex.response.clone()), nli_reply(c_fwd));
                sim.nli.insert((ex.response.clone(), s.clone()), nli_reply(c_bwd));
            }
            for k in 2..=K_MAX {
                let prompt = PromptTemplate::for_kind(ScorerKind::HallucinationRail(k as u32))
                    .unwrap()
                    .render(&[(prompts::SAMPLES, &samples[..k].join("\n\n")), (prompts::CANDIDATE, &ex.response)]);
                sim.prompts.insert(prompt, verdict_reply("yes", "no", l.rail));
            }
            let (x, z) = emb.split_at(EMBED_DIM);
            let as_reply = |v: &[f64]| json!({"data": [{"embedding": v.iter().map(|x| round6(*x)).collect::<Vec<_>>()}]});
            sim.embeddings.insert(ex.input.clone(), as_reply(x));
            sim.embeddings.insert(ex.response.clone(), as_reply(z));
        }
        sim
    }

    fn answer(&self, endpoint: Endpoint, body: &Value) -> Option<Value> {
        let s = |p: &str| body.pointer(p).and_then(Value::as_str).map(str::to_string);
        match endpoint {
            Endpoint::Chat => {
                let content = s("/messages/0/content")?;
                if let Some(seed) = body.get("seed").and_then(Value::as_u64) {
                    return self.generations.get(&(content, seed)).cloned();
                }
                self.prompts.get(&content).or_else(|| self.greedy.get(&content)).cloned()
            }
            Endpoint::Nli => self.nli.get(&(s("/premise")?, s("/hypothesis")?)).cloned(),
            Endpoint::Embeddings => self.embeddings.get(&s("/input")?).cloned(),
        }
    }
}

impl Transport for Simulator {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, BackendError> {
        self.answer(endpoint, body)
            .ok_or_else(|| BackendError::Malformed(format!("simulator has no answer for {} request {body}", endpoint.name())))
    }
}

fn main() {
    env_logger::init();
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let config_path = dir.join("config.toml");
    let mut cfg = RunConfig::load(&config_path).expect("fixtures/config.toml");
    let (dataset, latents, embeddings) = build_world(cfg.seed);
    dataset.save(&cfg.dataset).expect("write dataset");

    let fixtures = cfg.backend.fixtures.clone().expect("config names a fixture file");
    if fixtures.exists() {
        std::fs::remove_file(&fixtures).expect("remove old fixtures");
    }
    let sim = Arc::new(Simulator::new(&dataset, &latents, &embeddings, &cfg.scoring));
    let recorder = Arc::new(RecordingTransport::create(sim, &fixtures).expect("open fixture file"));
    let scratch = tempdir();
    cfg.out = scratch.clone();
    let summary = cmd_score_with(&cfg, recorder, Execution::Parallel).expect("scoring against the simulator");
    let records = halludetect::backends::sort_fixture_file(&fixtures).expect("sort fixtures");
    for (kind, ok, failed) in &summary.coverage {
        println!("{kind}: {ok} scored, {failed} failed");
    }
    println!("{} examples, {records} fixture records in {}", dataset.len(), fixtures.display());
    let _ = std::fs::remove_dir_all(scratch);
}

fn tempdir() -> PathBuf {
    let p = std::env::temp_dir().join(format!("halludetect-fixtures-{}", std::process::id()));
    std::fs::create_dir_all(&p).expect("scratch dir");
    p
}
