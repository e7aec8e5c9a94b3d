use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{check_window, GenerationRequest, GenerationResult, LlmError, LlmProvider};

/// Replays a fixed list of replies, one per call, and records every request.
pub struct ScriptedProvider {
    entries: Vec<Result<GenerationResult, LlmError>>,
    cursor: AtomicUsize,
    log: Mutex<Vec<GenerationRequest>>,
    context_window: Option<usize>,
    tag: String,
}

impl ScriptedProvider {
    pub fn new<I, S>(script: I) -> Result<Self, LlmError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_entries(
            script
                .into_iter()
                .map(|s| Ok(GenerationResult::stop(s)))
                .collect(),
        )
    }

    /// Script that may also contain injected failures.
    pub fn from_entries(entries: Vec<Result<GenerationResult, LlmError>>) -> Result<Self, LlmError> {
        if entries.is_empty() {
            return Err(LlmError::InvalidConfig("script must not be empty".into()));
        }
        Ok(Self {
            entries,
            cursor: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
            context_window: None,
            tag: "scripted".to_string(),
        })
    }

    pub fn with_context_window(mut self, chars: usize) -> Self {
        self.context_window = Some(chars);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst).min(self.entries.len() + 1)
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }

    pub fn script_len(&self) -> usize {
        self.entries.len()
    }
}

impl LlmProvider for ScriptedProvider {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        check_window(request, self.context_window)?;
        self.log
            .lock()
            .expect("request log poisoned")
            .push(request.clone());
        let idx = self.cursor.fetch_add(1, Ordering::SeqCst);
        match self.entries.get(idx) {
            Some(entry) => entry.clone(),
            None => Err(LlmError::ScriptExhausted {
                calls: self.entries.len(),
            }),
        }
    }

    fn model_tag(&self) -> String {
        self.tag.clone()
    }
}

/// One script per task query, selected by the first user message.
///
/// Lets concurrently running episodes share a provider handle and still get
/// deterministic replies.
#[derive(Default)]
pub struct ScriptBook {
    scripts: HashMap<String, ScriptedProvider>,
    tag: String,
}

impl ScriptBook {
    pub fn new() -> Self {
        Self {
            scripts: HashMap::new(),
            tag: "scripted".to_string(),
        }
    }

    pub fn insert(&mut self, query: impl Into<String>, script: ScriptedProvider) {
        self.scripts.insert(query.into(), script);
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn get(&self, query: &str) -> Option<&ScriptedProvider> {
        self.scripts.get(query)
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }
}

impl LlmProvider for ScriptBook {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        let query = request
            .first_user_content()
            .ok_or_else(|| LlmError::InvalidRequest("request has no user message".into()))?;
        let script = self.scripts.get(query).ok_or_else(|| {
            LlmError::InvalidRequest(format!("no script registered for query {query:?}"))
        })?;
        script.complete(request)
    }

    fn model_tag(&self) -> String {
        self.tag.clone()
    }
}

type ReplyFn = dyn Fn(&GenerationRequest) -> Result<String, LlmError> + Send + Sync;

/// Provider computed by a closure; useful for generated workloads.
pub struct FnProvider {
    f: Box<ReplyFn>,
    tag: String,
}

impl FnProvider {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Result<String, LlmError> + Send + Sync + 'static,
    {
        Self {
            f: Box::new(f),
            tag: "fn".to_string(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }
}

impl LlmProvider for FnProvider {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        (self.f)(request).map(GenerationResult::stop)
    }

    fn model_tag(&self) -> String {
        self.tag.clone()
    }
}
