//! Round orchestration over an in-process transport.
//!
//! One round runs four phases separated by barriers:
//!
//! 1. each client (optionally) updates on its private data and answers every public prompt;
//! 2. the server embeds the responses and runs consensus per prompt;
//! 3. the server broadcasts `(prompt_id, pseudo_label)` to every client;
//! 4. each client trains on its private data plus the broadcast pseudo-labels.
//!
//! Every payload that crosses the simulated wire is metered in UTF-8 bytes
//! with no framing overhead. Collections in the transcript are ordered by
//! client id and prompt position, so output never depends on scheduling.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{Client, ClientId, Example, GenerationRequest, PrivateDataset, TrainingWeights};
use crate::consensus::{consensus_for_prompt, ClusterParams, ConsensusResult, SelectionStrategy};
use crate::encoder::{EmbeddingSource, Embedding};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::privacy::{PrivacyLedger, RoundBudget};

/// Bytes a payload occupies on the wire.
pub fn meter_message(payload: &str) -> u64 {
    payload.len() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicPrompt {
    pub prompt_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PublicPromptSet {
    prompts: Vec<PublicPrompt>,
}

impl PublicPromptSet {
    pub fn new(prompts: Vec<PublicPrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::invalid("prompts", "the public prompt set is empty"));
        }
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.prompt_id.as_str()) {
                return Err(Error::invalid(
                    "prompts",
                    format!("duplicate prompt id `{}`", p.prompt_id),
                ));
            }
        }
        Ok(Self { prompts })
    }

    /// Load `{"prompt_id": ..., "text": ...}` rows.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        Self::new(jsonl::read_jsonl(path)?)
    }

    /// Keep only the first `budget` prompts.
    pub fn truncated(mut self, budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::invalid("prompt_budget", "must be positive"));
        }
        self.prompts.truncate(budget);
        Ok(self)
    }

    pub fn prompts(&self) -> &[PublicPrompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// One client's response to one public prompt, as uploaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub client: ClientId,
    pub prompt_id: String,
    pub text: String,
    pub byte_len: u64,
}

impl ResponseRecord {
    pub fn new(client: ClientId, prompt_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            client,
            prompt_id: prompt_id.into(),
            byte_len: meter_message(&text),
            text,
        }
    }

    /// Key used to look up externally supplied embeddings.
    pub fn response_id(&self, round: u32) -> String {
        format!("{round}:{}:{}", self.client, self.prompt_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub prompt_id: String,
    pub pseudo_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn payload_bytes(&self) -> u64 {
        self.entries.iter().map(|e| meter_message(&e.pseudo_label)).sum()
    }
}

/// A problem with one prompt in one round. With `client` set, only that
/// client's response was excluded; otherwise the prompt was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptError {
    pub prompt_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub client: Option<ClientId>,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientCharge {
    pub client: ClientId,
    pub budget: RoundBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: u32,
    pub responses: Vec<ResponseRecord>,
    pub consensus: Vec<ConsensusResult>,
    pub broadcast: PseudoLabelSet,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    pub errors: Vec<PromptError>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub privacy: Vec<ClientCharge>,
}

/// Per-round (epsilon, delta) each client's mechanism is assumed to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub cluster: ClusterParams,
    pub strategy: SelectionStrategy,
    pub weights: TrainingWeights,
    pub max_tokens: usize,
    /// Run the private-only update before generation in round 1 only.
    pub skip_pre_update_after_first_round: bool,
    pub dp: Option<DpSettings>,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            cluster: ClusterParams::default(),
            strategy: SelectionStrategy::default(),
            weights: TrainingWeights::default(),
            max_tokens: 64,
            skip_pre_update_after_first_round: false,
            dp: None,
            threads: None,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.weights.validate()?;
        if let Some(dp) = &self.dp {
            RoundBudget::new(1, dp.epsilon, dp.delta)?;
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads", "must be positive"));
        }
        Ok(())
    }
}

/// A client together with the private data only it can see.
pub struct Participant {
    pub client: Box<dyn Client>,
    pub private: PrivateDataset,
}

impl Participant {
    pub fn new(client: impl Client + 'static, private: PrivateDataset) -> Self {
        Self {
            client: Box::new(client),
            private,
        }
    }

    pub fn id(&self) -> ClientId {
        self.client.id()
    }
}

fn check_participants(participants: &[Participant]) -> Result<()> {
    if participants.is_empty() {
        return Err(Error::Config("at least one client is required".into()));
    }
    if participants.windows(2).any(|w| w[0].id() >= w[1].id()) {
        return Err(Error::Config(
            "clients must have strictly increasing ids".into(),
        ));
    }
    Ok(())
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Embed and run consensus for one prompt's responses (ordered by client).
///
/// Responses that cannot be embedded are excluded and reported; the prompt
/// yields no result only when nothing embeddable remains or consensus fails.
pub fn prompt_consensus(
    prompt_id: &str,
    responses: &[&ResponseRecord],
    encoder: &dyn EmbeddingSource,
    cluster: &ClusterParams,
    strategy: SelectionStrategy,
    round: u32,
) -> (Option<ConsensusResult>, Vec<PromptError>) {
    let mut errors = Vec::new();
    let mut kept: Vec<ResponseRecord> = Vec::with_capacity(responses.len());
    let mut embeddings: Vec<Embedding> = Vec::with_capacity(responses.len());
    for r in responses {
        match encoder.embedding(&r.response_id(round), &r.text) {
            Ok(e) => {
                kept.push((*r).clone());
                embeddings.push(e);
            }
            Err(e) => errors.push(PromptError {
                prompt_id: prompt_id.to_string(),
                client: Some(r.client),
                reason: format!("response excluded: {e}"),
            }),
        }
    }
    if kept.is_empty() {
        errors.push(PromptError {
            prompt_id: prompt_id.to_string(),
            client: None,
            reason: "no embeddable responses; prompt dropped from broadcast".into(),
        });
        return (None, errors);
    }
    match consensus_for_prompt(&kept, &embeddings, cluster, strategy) {
        Ok(result) => (Some(result), errors),
        Err(e) => {
            errors.push(PromptError {
                prompt_id: prompt_id.to_string(),
                client: None,
                reason: format!("consensus failed: {e}; prompt dropped from broadcast"),
            });
            (None, errors)
        }
    }
}

fn run_round_inner(
    participants: &mut [Participant],
    prompts: &PublicPromptSet,
    encoder: &dyn EmbeddingSource,
    params: &ProtocolParams,
    round: u32,
) -> RoundTranscript {
    let pre_update = round <= 1 || !params.skip_pre_update_after_first_round;
    let weights = params.weights;

    // Phase 1: local update on D_i, then generation on the public prompts.
    let per_client: Vec<Vec<ResponseRecord>> = participants
        .par_iter_mut()
        .map(|p| {
            if pre_update {
                p.client.train(&p.private, &[], weights);
            }
            let id = p.client.id();
            prompts
                .prompts()
                .iter()
                .map(|prompt| {
                    let text = p.client.generate(&GenerationRequest {
                        round,
                        prompt_id: &prompt.prompt_id,
                        prompt: &prompt.text,
                        max_tokens: params.max_tokens,
                    });
                    ResponseRecord::new(id, prompt.prompt_id.clone(), text)
                })
                .collect()
        })
        .collect();
    let responses: Vec<ResponseRecord> = per_client.into_iter().flatten().collect();
    let uploaded_bytes = responses.iter().map(|r| r.byte_len).sum();

    // Phase 2: server-side consensus per prompt.
    let m = prompts.len();
    let outcomes: Vec<(Option<ConsensusResult>, Vec<PromptError>)> = prompts
        .prompts()
        .par_iter()
        .enumerate()
        .map(|(j, prompt)| {
            let column: Vec<&ResponseRecord> = responses.iter().skip(j).step_by(m).collect();
            let strategy = params.strategy.for_prompt(round, j);
            prompt_consensus(&prompt.prompt_id, &column, encoder, &params.cluster, strategy, round)
        })
        .collect();
    let mut consensus = Vec::new();
    let mut errors = Vec::new();
    for (result, errs) in outcomes {
        consensus.extend(result);
        errors.extend(errs);
    }

    // Phase 3: broadcast.
    let broadcast = PseudoLabelSet {
        entries: consensus
            .iter()
            .map(|c| PseudoLabel {
                prompt_id: c.prompt_id.clone(),
                pseudo_label: c.pseudo_label.clone(),
            })
            .collect(),
    };
    let downloaded_bytes = participants.len() as u64 * broadcast.payload_bytes();

    // Phase 4: union training on exactly the broadcast pairs.
    let texts: std::collections::HashMap<&str, &str> = prompts
        .prompts()
        .iter()
        .map(|p| (p.prompt_id.as_str(), p.text.as_str()))
        .collect();
    let pseudo: Vec<Example> = broadcast
        .entries
        .iter()
        .map(|e| Example::new(texts[e.prompt_id.as_str()], e.pseudo_label.clone()))
        .collect();
    participants
        .par_iter_mut()
        .for_each(|p| p.client.train(&p.private, &pseudo, weights));

    let privacy = params
        .dp
        .map(|dp| {
            participants
                .iter()
                .map(|p| ClientCharge {
                    client: p.id(),
                    budget: RoundBudget {
                        round,
                        epsilon: dp.epsilon,
                        delta: dp.delta,
                    },
                })
                .collect()
        })
        .unwrap_or_default();

    RoundTranscript {
        round,
        responses,
        consensus,
        broadcast,
        uploaded_bytes,
        downloaded_bytes,
        errors,
        privacy,
    }
}

/// Run one communication round. Per-prompt failures are recorded in the
/// transcript; only invalid configuration is an error.
pub fn run_round(
    participants: &mut [Participant],
    prompts: &PublicPromptSet,
    encoder: &dyn EmbeddingSource,
    params: &ProtocolParams,
    round: u32,
) -> Result<RoundTranscript> {
    check_participants(participants)?;
    params.validate()?;
    if prompts.is_empty() {
        return Err(Error::invalid("prompts", "the public prompt set is empty"));
    }
    in_pool(params.threads, || {
        run_round_inner(participants, prompts, encoder, params, round)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub transcripts: Vec<RoundTranscript>,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub privacy: Vec<PrivacyLedger>,
}

impl SessionReport {
    pub fn total_bytes(&self) -> u64 {
        self.uploaded_bytes + self.downloaded_bytes
    }

    pub fn error_count(&self) -> usize {
        self.transcripts.iter().map(|t| t.errors.len()).sum()
    }
}

/// Run rounds `1..=num_rounds`.
pub fn run_session(
    participants: &mut [Participant],
    prompts: &PublicPromptSet,
    encoder: &dyn EmbeddingSource,
    num_rounds: u32,
    params: &ProtocolParams,
) -> Result<SessionReport> {
    if num_rounds == 0 {
        return Err(Error::Config("num_rounds must be at least 1".into()));
    }
    check_participants(participants)?;
    params.validate()?;

    let mut ledgers: Vec<PrivacyLedger> = if params.dp.is_some() {
        participants.iter().map(|p| PrivacyLedger::new(p.id())).collect()
    } else {
        Vec::new()
    };
    let mut transcripts = Vec::with_capacity(num_rounds as usize);
    for round in 1..=num_rounds {
        let t = run_round(participants, prompts, encoder, params, round)?;
        for charge in &t.privacy {
            let ledger = ledgers
                .iter_mut()
                .find(|l| l.client == charge.client)
                .expect("ledger per participant");
            *ledger = ledger.record_round(charge.budget)?;
        }
        transcripts.push(t);
    }
    Ok(SessionReport {
        uploaded_bytes: transcripts.iter().map(|t| t.uploaded_bytes).sum(),
        downloaded_bytes: transcripts.iter().map(|t| t.downloaded_bytes).sum(),
        transcripts,
        privacy: ledgers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{MarkovToyClient, ScriptedClient};
    use crate::encoder::{EncoderConfig, HashingEncoder};

    fn prompts(n: usize) -> PublicPromptSet {
        PublicPromptSet::new(
            (0..n)
                .map(|j| PublicPrompt {
                    prompt_id: format!("p{j}"),
                    text: format!("question number {j}"),
                })
                .collect(),
        )
        .unwrap()
    }

    fn encoder() -> HashingEncoder {
        HashingEncoder::new(EncoderConfig::default()).unwrap()
    }

    fn scripted(id: u32, f: impl Fn(usize) -> String, m: usize) -> Participant {
        let mut c = ScriptedClient::new(ClientId(id));
        for j in 0..m {
            c.insert(1, format!("p{j}"), f(j));
        }
        Participant::new(c, PrivateDataset::new(ClientId(id), vec![]))
    }

    #[test]
    fn meter_examples() {
        assert_eq!(meter_message(""), 0);
        assert_eq!(meter_message("abcd"), 4);
        assert_eq!(meter_message("é"), 2);
    }

    #[test]
    fn prompt_set_validation() {
        assert!(PublicPromptSet::new(vec![]).is_err());
        let dup = vec![
            PublicPrompt { prompt_id: "a".into(), text: "x".into() },
            PublicPrompt { prompt_id: "a".into(), text: "y".into() },
        ];
        assert!(PublicPromptSet::new(dup).is_err());
        let p = prompts(10).truncated(3).unwrap();
        assert_eq!(p.len(), 3);
        assert!(prompts(2).truncated(0).is_err());
    }

    #[test]
    fn single_client_self_consensus() {
        let mut ps = vec![scripted(0, |j| format!("my own answer to {j}"), 3)];
        let t = run_round(&mut ps, &prompts(3), &encoder(), &ProtocolParams::default(), 1).unwrap();
        assert_eq!(t.broadcast.entries.len(), 3);
        for (j, e) in t.broadcast.entries.iter().enumerate() {
            assert_eq!(e.pseudo_label, format!("my own answer to {j}"));
        }
        assert!(t.errors.is_empty());
    }

    #[test]
    fn fixed_length_byte_accounting() {
        let m = 4;
        let text = |c: u32| move |j: usize| format!("{:0<128}", format!("c{c}p{j}"));
        let mut ps: Vec<Participant> = (0..10).map(|c| scripted(c, text(c), m)).collect();
        let t = run_round(&mut ps, &prompts(m), &encoder(), &ProtocolParams::default(), 1).unwrap();
        assert!(t.responses.iter().all(|r| r.byte_len == 128));
        assert_eq!(t.uploaded_bytes, 10 * 4 * 128);
        assert_eq!(t.downloaded_bytes, 10 * 4 * 128);
    }

    #[test]
    fn empty_responses_are_excluded_then_dropped() {
        let mut ps = vec![
            scripted(0, |_| String::new(), 2),
            scripted(1, |j| if j == 0 { "an answer".into() } else { String::new() }, 2),
        ];
        let t = run_round(&mut ps, &prompts(2), &encoder(), &ProtocolParams::default(), 1).unwrap();
        assert_eq!(t.broadcast.entries.len(), 1);
        assert_eq!(t.broadcast.entries[0].pseudo_label, "an answer");
        // p0: client 0 excluded; p1: both excluded and the prompt dropped.
        assert_eq!(t.errors.len(), 4);
        assert_eq!(t.errors.iter().filter(|e| e.client.is_none()).count(), 1);
        assert_eq!(t.downloaded_bytes, 2 * 9);
    }

    #[test]
    fn session_validation_and_additivity() {
        let mut ps = vec![scripted(0, |j| format!("answer {j}"), 2), scripted(1, |j| format!("answer {j}!"), 2)];
        let p = prompts(2);
        assert!(run_session(&mut ps, &p, &encoder(), 0, &ProtocolParams::default()).is_err());
        let r = run_session(&mut ps, &p, &encoder(), 3, &ProtocolParams::default()).unwrap();
        assert_eq!(r.transcripts.len(), 3);
        assert_eq!(
            r.uploaded_bytes,
            r.transcripts.iter().map(|t| t.uploaded_bytes).sum::<u64>()
        );
        assert_eq!(
            r.total_bytes(),
            r.transcripts.iter().map(|t| t.uploaded_bytes + t.downloaded_bytes).sum::<u64>()
        );
        assert!(r.privacy.is_empty());
    }

    #[test]
    fn duplicate_client_ids_rejected() {
        let mut ps = vec![scripted(1, |_| "a".into(), 1), scripted(1, |_| "b".into(), 1)];
        assert!(matches!(
            run_round(&mut ps, &prompts(1), &encoder(), &ProtocolParams::default(), 1),
            Err(Error::Config(_))
        ));
        let mut none: Vec<Participant> = vec![];
        assert!(run_round(&mut none, &prompts(1), &encoder(), &ProtocolParams::default(), 1).is_err());
    }

    #[test]
    fn dp_ledgers_get_one_entry_per_client_per_round() {
        let mut ps = vec![scripted(0, |_| "a b c".into(), 1), scripted(1, |_| "a b c".into(), 1)];
        let params = ProtocolParams {
            dp: Some(DpSettings { epsilon: 1.0, delta: 1e-5 }),
            ..ProtocolParams::default()
        };
        let r = run_session(&mut ps, &prompts(1), &encoder(), 3, &params).unwrap();
        assert_eq!(r.privacy.len(), 2);
        for t in &r.transcripts {
            assert_eq!(t.privacy.len(), 2);
        }
        for l in &r.privacy {
            assert_eq!(l.rounds().len(), 3);
            let (eps, delta) = l.total_budget();
            assert!((eps - 3.0).abs() < 1e-12);
            assert!((delta - 3e-5).abs() < 1e-18);
        }
    }

    #[test]
    fn markov_clients_learn_the_pseudo_labels() {
        let consensus = "the answer is forty two";
        let mut ps: Vec<Participant> = (0..3)
            .map(|i| scripted(i, move |_| consensus.to_string(), 1))
            .collect();
        let mut markov = MarkovToyClient::new(ClientId(3), 1, 11).unwrap();
        markov.train(
            &PrivateDataset::default(),
            &[Example::new("", "unrelated words here")],
            TrainingWeights::new(0.0, 1.0).unwrap(),
        );
        ps.push(Participant::new(markov, PrivateDataset::new(ClientId(3), vec![])));
        let p = PublicPromptSet::new(vec![PublicPrompt {
            prompt_id: "p0".into(),
            text: "what is it".into(),
        }])
        .unwrap();
        let params = ProtocolParams::default();
        let r = run_session(&mut ps, &p, &encoder(), 1, &params).unwrap();
        assert_eq!(r.transcripts[0].broadcast.entries[0].pseudo_label, consensus);
    }

    #[test]
    fn thread_count_does_not_change_transcripts() {
        let make = || -> Vec<Participant> {
            (0..6)
                .map(|i| {
                    let mut m = MarkovToyClient::new(ClientId(i), 2, u64::from(i)).unwrap();
                    m.train(
                        &PrivateDataset::default(),
                        &[Example::new("", format!("shared words and token{i} plus more shared words"))],
                        TrainingWeights::new(0.0, 1.0).unwrap(),
                    );
                    Participant::new(
                        m,
                        PrivateDataset::new(ClientId(i), vec![Example::new("question", "shared words again")]),
                    )
                })
                .collect()
        };
        let p = prompts(5);
        let run = |threads| {
            let params = ProtocolParams {
                threads: Some(threads),
                strategy: SelectionStrategy::RandomInMajorityCluster { seed: 3 },
                ..ProtocolParams::default()
            };
            let r = run_session(&mut make(), &p, &encoder(), 2, &params).unwrap();
            serde_json::to_string(&r).unwrap()
        };
        assert_eq!(run(1), run(4));
    }
}
