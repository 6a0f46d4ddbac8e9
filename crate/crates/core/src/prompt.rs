//! Translation prompt and a client for an external completion endpoint.
//!
//! The endpoint is only used while synthesizing data: each transcript
//! sentence is translated with up to three preceding sentences as context.

use crate::error::{contract_err, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;

const TEMPLATE: &str = include_str!("prompt_template.txt");
const MAX_PRECEDING: usize = 3;

/// Fills the chat-formatted prompt. Only the last three preceding sentences
/// are used; they are joined by newlines.
pub fn render_translation_prompt(sentence: &str, preceding: &[String], target_language: &str) -> Result<String> {
    if sentence.trim().is_empty() {
        return contract_err("sentence to translate is empty");
    }
    let ctx = &preceding[preceding.len().saturating_sub(MAX_PRECEDING)..];
    let slots = [("{target_language}", target_language.to_string()), ("{preceding}", ctx.join("\n")), ("{sentence}", sentence.to_string())];
    // One left-to-right pass so slot text is never re-scanned.
    let mut out = String::with_capacity(TEMPLATE.len() + 256);
    let mut rest = TEMPLATE;
    while let Some((idx, key, val)) =
        slots.iter().filter_map(|(k, v)| rest.find(k).map(|i| (i, *k, v))).min_by_key(|(i, _, _)| *i)
    {
        out.push_str(&rest[..idx]);
        out.push_str(val);
        rest = &rest[idx + key.len()..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Anything that turns a rendered prompt into a translation.
pub trait ChatClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Canned answers keyed by the sentence being translated.
#[derive(Clone, Debug, Default)]
pub struct MockChatClient {
    pub answers: BTreeMap<String, String>,
}

impl MockChatClient {
    /// Extracts the sentence from a rendered prompt.
    pub fn sentence_of(prompt: &str) -> Option<&str> {
        let a = prompt.find("|Sentence to Translate|\n")? + "|Sentence to Translate|\n".len();
        let b = prompt[a..].find("\n|End of Sentence to Translate|")?;
        Some(&prompt[a..a + b])
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let s = Self::sentence_of(prompt).ok_or_else(|| Error::Endpoint("prompt has no sentence slot".into()))?;
        self.answers.get(s).cloned().ok_or_else(|| Error::Endpoint(format!("no canned answer for {s:?}")))
    }
}

/// Text-completion client for an OpenAI-style HTTP endpoint. The prompt is
/// sent verbatim, so chat markup in the template is preserved.
#[derive(Clone, Debug)]
pub struct HttpChatClient {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_tokens: usize,
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

pub const ENV_URL: &str = "STREAMST_CHAT_URL";
pub const ENV_KEY: &str = "STREAMST_CHAT_KEY";
pub const ENV_MODEL: &str = "STREAMST_CHAT_MODEL";

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

impl HttpChatClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            max_tokens: 256,
            retries: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads the base URL, key and model name from the environment.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL).map_err(|_| Error::Config(format!("{ENV_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into());
        let mut c = Self::new(url, model);
        c.api_key = std::env::var(ENV_KEY).ok();
        Ok(c)
    }

    fn attempt(&self, agent: &ureq::Agent, prompt: &str) -> std::result::Result<String, (bool, String)> {
        let url = format!("{}/v1/completions", self.base_url.trim_end_matches('/'));
        let body = CompletionRequest { model: &self.model, prompt, max_tokens: self.max_tokens, temperature: 0.0 };
        let mut req = agent.post(&url).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) => return Err((code == 429 || code >= 500, format!("HTTP {code}"))),
            Err(e) => return Err((true, e.to_string())),
        };
        let parsed: CompletionResponse = resp.body_mut().read_json().map_err(|e| (false, e.to_string()))?;
        parsed.choices.into_iter().next().map(|c| c.text.trim().to_string()).ok_or((false, "empty choices".into()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut wait = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.attempt(&agent, prompt) {
                Ok(t) => return Ok(t),
                Err((retry, msg)) => {
                    last = msg;
                    if !retry || attempt == self.retries {
                        break;
                    }
                    std::thread::sleep(wait);
                    wait *= 2;
                }
            }
        }
        Err(Error::Endpoint(last))
    }
}

/// One sentence of a recording with its preceding context.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationRequest {
    pub sentence: String,
    pub preceding: Vec<String>,
}

/// Builds requests for consecutive sentences of one recording.
pub fn requests_for(sentences: &[String], context: usize) -> Vec<TranslationRequest> {
    let context = context.min(MAX_PRECEDING);
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| TranslationRequest { sentence: s.clone(), preceding: sentences[i.saturating_sub(context)..i].to_vec() })
        .collect()
}

/// Translates all requests with at most `concurrency` in flight. Output
/// order follows input order.
pub fn translate_all<C: ChatClient + ?Sized>(client: &C, reqs: &[TranslationRequest], target_language: &str, concurrency: usize) -> Result<Vec<String>> {
    let prompts = reqs
        .iter()
        .map(|r| render_translation_prompt(&r.sentence, &r.preceding, target_language))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(prompts.len());
    for batch in prompts.chunks(concurrency.max(1)) {
        let results: Vec<Result<String>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|p| s.spawn(move || client.complete(p))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Endpoint("worker panicked".into())))).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}
