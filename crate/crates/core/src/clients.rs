//! Black-box client behaviours.
//!
//! The protocol only ever calls [`Client::generate`] and [`Client::train`],
//! so clients of different kinds can be mixed freely in one session.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{fnv1a, splitmix64};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One (prompt, response) training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub response: String,
}

impl Example {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            response: response.into(),
        }
    }
}

/// A client's local data. Deliberately not `Serialize`: it must never end up in a message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrivateDataset {
    pub owner: Option<ClientId>,
    pub examples: Vec<Example>,
}

impl PrivateDataset {
    pub fn new(owner: ClientId, examples: Vec<Example>) -> Self {
        Self {
            owner: Some(owner),
            examples,
        }
    }

    /// Load `{"prompt": ..., "response": ...}` rows.
    pub fn from_jsonl(owner: ClientId, path: &Path) -> Result<Self> {
        Ok(Self::new(owner, jsonl::read_jsonl(path)?))
    }
}

/// Loss weights for private (`alpha`) and pseudo-labeled (`beta`) examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrainingWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl TrainingWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("weights", "alpha and beta must be non-negative"));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "weights",
                format!("alpha + beta must equal 1, got {}", self.alpha + self.beta),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub round: u32,
    pub prompt_id: &'a str,
    pub prompt: &'a str,
    /// Upper bound on whitespace-separated output tokens.
    pub max_tokens: usize,
}

pub trait Client: Send {
    fn id(&self) -> ClientId;

    fn generate(&self, request: &GenerationRequest<'_>) -> String;

    fn train(&mut self, private: &PrivateDataset, pseudo: &[Example], weights: TrainingWeights);
}

/// Replays a fixed response table.
///
/// A lookup for `(round, prompt_id)` falls back to the latest earlier round
/// scripted for that prompt, so a script may specify a prompt once and have
/// it repeat. Unscripted prompts yield the empty string.
#[derive(Debug, Clone)]
pub struct ScriptedClient {
    id: ClientId,
    table: BTreeMap<(String, u32), String>,
}

#[derive(Debug, Deserialize)]
struct ScriptRow {
    client: u32,
    round: u32,
    prompt_id: String,
    response: String,
}

impl ScriptedClient {
    pub fn new(id: ClientId) -> Self {
        Self {
            id,
            table: BTreeMap::new(),
        }
    }

    pub fn with_response(mut self, round: u32, prompt_id: impl Into<String>, response: impl Into<String>) -> Self {
        self.insert(round, prompt_id, response);
        self
    }

    pub fn insert(&mut self, round: u32, prompt_id: impl Into<String>, response: impl Into<String>) {
        self.table.insert((prompt_id.into(), round), response.into());
    }

    pub fn lookup(&self, round: u32, prompt_id: &str) -> Option<&str> {
        self.table
            .range((prompt_id.to_string(), 0)..=(prompt_id.to_string(), round))
            .next_back()
            .map(|(_, v)| v.as_str())
    }

    /// Load every client found in a script file of
    /// `{"client", "round", "prompt_id", "response"}` rows.
    pub fn load_all(path: &Path) -> Result<BTreeMap<ClientId, ScriptedClient>> {
        let rows: Vec<ScriptRow> = jsonl::read_jsonl(path)?;
        let mut clients: BTreeMap<ClientId, ScriptedClient> = BTreeMap::new();
        for row in rows {
            let id = ClientId(row.client);
            clients
                .entry(id)
                .or_insert_with(|| ScriptedClient::new(id))
                .insert(row.round, row.prompt_id, row.response);
        }
        Ok(clients)
    }

    /// Load the rows of one client, re-labelled as `id`.
    pub fn load(path: &Path, script_client: ClientId, id: ClientId) -> Result<Self> {
        let mut all = Self::load_all(path)?;
        let mut client = all.remove(&script_client).ok_or_else(|| {
            Error::Config(format!(
                "{} has no rows for client {}",
                path.display(),
                script_client
            ))
        })?;
        client.id = id;
        Ok(client)
    }
}

impl Client for ScriptedClient {
    fn id(&self) -> ClientId {
        self.id
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> String {
        self.lookup(request.round, request.prompt_id)
            .unwrap_or_default()
            .to_string()
    }

    fn train(&mut self, _private: &PrivateDataset, _pseudo: &[Example], _weights: TrainingWeights) {}
}

type Context = Vec<String>;

/// Word-level Markov chain with weighted transition counts and backoff.
///
/// Training on `(prompt, response)` adds, for every response token, a count
/// under each context of length `0..=order` formed by the tokens before it
/// (prompt tokens included). Generation starts from the prompt's trailing
/// tokens and always uses the longest known context.
#[derive(Debug, Clone)]
pub struct MarkovToyClient {
    id: ClientId,
    order: usize,
    seed: u64,
    counts: BTreeMap<Context, BTreeMap<String, f64>>,
}

impl MarkovToyClient {
    pub fn new(id: ClientId, order: usize, seed: u64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("order", "must be at least 1"));
        }
        Ok(Self {
            id,
            order,
            seed,
            counts: BTreeMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Transition weights observed after `context`.
    pub fn transitions(&self, context: &[&str]) -> Option<&BTreeMap<String, f64>> {
        let key: Context = context.iter().map(|s| s.to_string()).collect();
        self.counts.get(&key)
    }

    pub fn counts(&self) -> &BTreeMap<Context, BTreeMap<String, f64>> {
        &self.counts
    }

    fn observe(&mut self, example: &Example, weight: f64) {
        if weight == 0.0 {
            return;
        }
        let prompt: Vec<&str> = example.prompt.split_whitespace().collect();
        let response: Vec<&str> = example.response.split_whitespace().collect();
        let tokens: Vec<&str> = prompt.iter().chain(&response).copied().collect();
        for pos in prompt.len()..tokens.len() {
            for k in 0..=self.order.min(pos) {
                let context: Context = tokens[pos - k..pos].iter().map(|s| s.to_string()).collect();
                *self
                    .counts
                    .entry(context)
                    .or_default()
                    .entry(tokens[pos].to_string())
                    .or_insert(0.0) += weight;
            }
        }
    }

    fn next_token(&self, history: &[String], rng: &mut ChaCha8Rng) -> Option<String> {
        for k in (0..=self.order.min(history.len())).rev() {
            let context = &history[history.len() - k..];
            let Some(next) = self.counts.get(context) else {
                continue;
            };
            let total: f64 = next.values().sum();
            if total <= 0.0 {
                continue;
            }
            let mut target = rng.random::<f64>() * total;
            let mut last = None;
            for (token, w) in next {
                if *w <= 0.0 {
                    continue;
                }
                last = Some(token);
                if target < *w {
                    return Some(token.clone());
                }
                target -= w;
            }
            return last.cloned();
        }
        None
    }
}

impl Client for MarkovToyClient {
    fn id(&self) -> ClientId {
        self.id
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            self.seed ^ fnv1a(self.seed, request.prompt.as_bytes()),
        ));
        let mut history: Vec<String> = request
            .prompt
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let start = history.len();
        while history.len() - start < request.max_tokens {
            match self.next_token(&history, &mut rng) {
                Some(tok) => history.push(tok),
                None => break,
            }
        }
        history[start..].join(" ")
    }

    fn train(&mut self, private: &PrivateDataset, pseudo: &[Example], weights: TrainingWeights) {
        for ex in &private.examples {
            self.observe(ex, weights.alpha);
        }
        for ex in pseudo {
            self.observe(ex, weights.beta);
        }
    }
}
