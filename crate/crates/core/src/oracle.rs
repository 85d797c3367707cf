//! The "LLM as a user": pairwise preferences over cold items given a user's
//! full train history.
//!
//! Three oracles implement [`PreferenceOracle`]: a deterministic similarity
//! simulator, its Bradley-Terry style stochastic variant, and a client for an
//! external chat-completion service.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::seq::index;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, ItemId, SplitDataset, UserId};
use crate::embeddings::{cosine, history_centroid_or_first, EmbeddingTable};
use crate::error::{format_err, invalid, Error, Result};
use crate::numerics::{sigmoid, RngStream};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferenceQuery {
    pub user: UserId,
    /// Chronological train history.
    pub history: Vec<ItemId>,
    pub item_a: ItemId,
    pub item_b: ItemId,
}

impl PreferenceQuery {
    pub fn new(user: UserId, history: Vec<ItemId>, item_a: ItemId, item_b: ItemId) -> Result<Self> {
        if item_a == item_b {
            return Err(invalid("a preference query needs two distinct items"));
        }
        if history.is_empty() {
            return Err(invalid(format!("user {user} has an empty history")));
        }
        Ok(Self { user, history, item_a, item_b })
    }

    pub fn swapped(&self) -> Self {
        Self { item_a: self.item_b.clone(), item_b: self.item_a.clone(), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentationTriple {
    pub user: UserId,
    pub pos: ItemId,
    pub neg: ItemId,
}

fn title<'c>(catalog: &'c Catalog, item: &ItemId) -> Result<&'c str> {
    catalog
        .get(item)
        .map(|m| m.title.as_str())
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::MissingMetadata(item.to_string()))
}

/// Renders the user-impersonation prompt. `max_history` keeps only the most
/// recent titles when set.
pub fn render_prompt(q: &PreferenceQuery, catalog: &Catalog, max_history: Option<usize>) -> Result<String> {
    let skip = max_history.map_or(0, |m| q.history.len().saturating_sub(m));
    let mut out = String::new();
    out.push_str(
        "You are a shopper. Pretend to be this user and answer as they would.\n\
         These are the products you bought and reviewed, oldest first:\n",
    );
    for (n, item) in q.history.iter().skip(skip).enumerate() {
        let _ = writeln!(out, "{}. {}", n + 1, title(catalog, item)?);
    }
    out.push_str("\nTwo new products were just released. Which one would you prefer?\n");
    let _ = writeln!(out, "A: {}", title(catalog, &q.item_a)?);
    let _ = writeln!(out, "B: {}", title(catalog, &q.item_b)?);
    out.push_str("\nAnswer with exactly one letter, \"A\" or \"B\".\n");
    Ok(out)
}

pub trait PreferenceOracle: Sync {
    /// Returns the preferred item of the query.
    fn choose(&self, q: &PreferenceQuery, rng: &mut RngStream) -> Result<ItemId>;

    /// Upper bound on concurrent [`choose`](Self::choose) calls.
    fn max_in_flight(&self) -> usize {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SimulationMode {
    /// Higher centroid cosine wins; ties go to the smaller item id.
    Deterministic,
    /// Picks `item_a` with probability `σ((s_a − s_b) / temperature)`.
    Stochastic { temperature: f64 },
}

/// Embedding-similarity stand-in for the LLM.
pub struct SimulatedOracle<'t> {
    table: &'t EmbeddingTable,
    mode: SimulationMode,
}

impl<'t> SimulatedOracle<'t> {
    pub fn new(table: &'t EmbeddingTable, mode: SimulationMode) -> Result<Self> {
        if let SimulationMode::Stochastic { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(invalid("oracle temperature must be positive"));
            }
        }
        Ok(Self { table, mode })
    }

    /// Cosine of each candidate with the history centroid.
    pub fn similarities(&self, q: &PreferenceQuery) -> Result<(f64, f64)> {
        let a = self.table.require(&q.item_a)?;
        let b = self.table.require(&q.item_b)?;
        let centroid = history_centroid_or_first(&q.history, self.table)?;
        Ok((cosine(&centroid, a), cosine(&centroid, b)))
    }
}

impl PreferenceOracle for SimulatedOracle<'_> {
    fn choose(&self, q: &PreferenceQuery, rng: &mut RngStream) -> Result<ItemId> {
        let (sa, sb) = self.similarities(q)?;
        let pick_a = match self.mode {
            SimulationMode::Deterministic => sa > sb || (sa == sb && q.item_a < q.item_b),
            SimulationMode::Stochastic { temperature } => rng.gen::<f64>() < sigmoid((sa - sb) / temperature),
        };
        Ok(if pick_a { q.item_a.clone() } else { q.item_b.clone() })
    }
}

/// External chat-completion endpoint settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub max_history: Option<usize>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "meta-llama/Llama-3.2-3B-Instruct".into(),
            token_env: Some("LLM_API_TOKEN".into()),
            timeout_secs: 60,
            retries: 3,
            max_in_flight: 4,
            max_history: None,
        }
    }
}

/// Sends one prompt and returns the raw reply text.
pub trait ChatTransport: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// OpenAI-style `chat/completions` over HTTP.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    model: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &LlmConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        let token = cfg.token_env.as_ref().and_then(|k| std::env::var(k).ok());
        Self { agent, url: cfg.url.clone(), model: cfg.model.clone(), token }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl ChatTransport for HttpTransport {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature: 0.0,
            max_tokens: 8,
        };
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::OracleProtocol("response has no choices".into()))
    }
}

/// First standalone `A` or `B` token of a reply.
pub fn parse_choice(reply: &str) -> Option<char> {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(|t| match t {
            "A" => Some('A'),
            "B" => Some('B'),
            _ => None,
        })
}

/// Oracle backed by a chat model.
pub struct LlmOracle<'c, T: ChatTransport> {
    transport: T,
    catalog: &'c Catalog,
    retries: u32,
    max_in_flight: usize,
    max_history: Option<usize>,
    retry_count: AtomicU64,
}

impl<'c, T: ChatTransport> LlmOracle<'c, T> {
    pub fn new(transport: T, catalog: &'c Catalog, cfg: &LlmConfig) -> Self {
        Self {
            transport,
            catalog,
            retries: cfg.retries,
            max_in_flight: cfg.max_in_flight.max(1),
            max_history: cfg.max_history,
            retry_count: AtomicU64::new(0),
        }
    }

    /// Number of retried attempts so far.
    pub fn retry_count(&self) -> u64 {
        self.retry_count.load(Ordering::Relaxed)
    }

    pub fn llm_choose(&self, q: &PreferenceQuery) -> Result<ItemId> {
        let prompt = render_prompt(q, self.catalog, self.max_history)?;
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                self.retry_count.fetch_add(1, Ordering::Relaxed);
            }
            match self.transport.complete(&prompt) {
                Ok(reply) => match parse_choice(&reply) {
                    Some('A') => return Ok(q.item_a.clone()),
                    Some(_) => return Ok(q.item_b.clone()),
                    None => last = Some(Error::OracleProtocol(format!("unparseable reply {reply:?}"))),
                },
                Err(e @ (Error::Transport(_) | Error::OracleProtocol(_))) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl<T: ChatTransport> PreferenceOracle for LlmOracle<'_, T> {
    fn choose(&self, q: &PreferenceQuery, _rng: &mut RngStream) -> Result<ItemId> {
        self.llm_choose(q)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// Chronological train history of every warm user.
pub fn train_histories(split: &SplitDataset) -> BTreeMap<UserId, Vec<ItemId>> {
    let mut out: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
    for x in &split.train {
        out.entry(x.user.clone()).or_default().push(x.item.clone());
    }
    out
}

/// Maps the `k`-th unordered pair of `0..n` (lexicographic order) to `(i, j)`, `i < j`.
fn decode_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

/// Samples `pairs_per_user` distinct unordered cold pairs per selected user and
/// resolves each through `oracle`.
///
/// Sampling is sequential in user order; oracle calls may run concurrently but
/// each gets its own pre-drawn stream, so the output only depends on `rng`.
pub fn generate_triples(
    selected: &[UserId],
    cold_items: &[ItemId],
    pairs_per_user: usize,
    histories: &BTreeMap<UserId, Vec<ItemId>>,
    oracle: &dyn PreferenceOracle,
    rng: &mut RngStream,
) -> Result<Vec<AugmentationTriple>> {
    let n = cold_items.len();
    if n < 2 {
        return Err(invalid("augmentation needs at least two cold items"));
    }
    let total_pairs = n * (n - 1) / 2;
    if pairs_per_user > total_pairs {
        return Err(invalid(format!("{pairs_per_user} pairs per user exceeds the {total_pairs} available")));
    }
    let mut queries = Vec::with_capacity(selected.len() * pairs_per_user);
    for user in selected {
        let history = histories.get(user).ok_or_else(|| Error::MissingUser(user.to_string()))?;
        for k in index::sample(rng, total_pairs, pairs_per_user).into_iter() {
            let (i, j) = decode_pair(k, n);
            let (a, b) = if rng.gen::<bool>() { (i, j) } else { (j, i) };
            let q = PreferenceQuery::new(user.clone(), history.clone(), cold_items[a].clone(), cold_items[b].clone())?;
            queries.push((q, rng.next_u64()));
        }
    }
    let resolve = |(q, seed): &(PreferenceQuery, u64)| -> Result<AugmentationTriple> {
        let mut local = RngStream::new(*seed, 0);
        let pos = oracle.choose(q, &mut local)?;
        let neg = if pos == q.item_a { q.item_b.clone() } else { q.item_a.clone() };
        Ok(AugmentationTriple { user: q.user.clone(), pos, neg })
    };
    let workers = oracle.max_in_flight();
    if workers <= 1 {
        queries.iter().map(resolve).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| invalid(format!("cannot build oracle pool: {e}")))?;
        pool.install(|| queries.par_iter().map(resolve).collect())
    }
}

pub fn write_triples(path: &Path, triples: &[AugmentationTriple]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user\tpos\tneg")?;
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.user, t.pos, t.neg)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_triples(path: &Path) -> Result<Vec<AugmentationTriple>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(format_err(format!("{}:{}: expected user, pos, neg", path.display(), n + 1)));
        }
        out.push(AugmentationTriple { user: cols[0].into(), pos: cols[1].into(), neg: cols[2].into() });
    }
    Ok(out)
}
