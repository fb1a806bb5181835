//! Observation-labeling boundary: a deterministic keyword stub, precomputed
//! label tables, and a remote service client, all returning 4-class labels
//! over a finding vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::conversation::FindingVocabulary;
use crate::error::{Error, Result};

/// 4-class observation status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelClass {
    Positive,
    Negative,
    Uncertain,
    Blank,
}

impl LabelClass {
    pub fn parse(raw: &str) -> Option<LabelClass> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "positive" => Some(LabelClass::Positive),
            "negative" => Some(LabelClass::Negative),
            "uncertain" => Some(LabelClass::Uncertain),
            "blank" | "" => Some(LabelClass::Blank),
            _ => None,
        }
    }
}

/// Per-report classes over a vocabulary, one class per label.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationLabels {
    vocabulary: FindingVocabulary,
    classes: Vec<LabelClass>,
}

impl ObservationLabels {
    pub fn new(vocabulary: FindingVocabulary, classes: Vec<LabelClass>) -> Result<Self> {
        if classes.len() != vocabulary.names().len() {
            return Err(Error::Labeler(format!(
                "expected {} classes, got {}",
                vocabulary.names().len(),
                classes.len()
            )));
        }
        Ok(ObservationLabels { vocabulary, classes })
    }

    pub fn vocabulary(&self) -> &FindingVocabulary {
        &self.vocabulary
    }

    pub fn class_of(&self, label: &str) -> Option<LabelClass> {
        self.vocabulary
            .names()
            .iter()
            .position(|n| n == label)
            .map(|i| self.classes[i])
    }

    /// Binarization rule: exactly the positive labels; every other class
    /// counts as negative.
    pub fn positives(&self) -> BTreeSet<String> {
        self.vocabulary
            .names()
            .iter()
            .zip(&self.classes)
            .filter(|(_, &c)| c == LabelClass::Positive)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// See [`ObservationLabels::positives`].
pub fn binarize(labels: &ObservationLabels) -> BTreeSet<String> {
    labels.positives()
}

/// Where labels come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelerEndpoint {
    /// Deterministic keyword matcher for tests and fixture builds.
    KeywordStub {
        /// Extra keyword -> label rows merged over the built-in table.
        #[serde(default)]
        keywords: BTreeMap<String, String>,
    },
    /// CSV of precomputed classes, one row per report id.
    PrecomputedFile { path: PathBuf },
    /// HTTP service: POST of `{"text", "vocabulary"}`, response
    /// `{"classes": [...]}` aligned with the vocabulary.
    RemoteService {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl LabelerEndpoint {
    /// Stable descriptor recorded (hashed) in corpus manifests so clinical
    /// scores are attributable to a labeler.
    pub fn descriptor(&self) -> Result<String> {
        match self {
            LabelerEndpoint::KeywordStub { keywords } => {
                let mut rows: Vec<String> = stub_keyword_table()
                    .iter()
                    .map(|(k, l)| format!("{k}={l}"))
                    .collect();
                rows.extend(keywords.iter().map(|(k, l)| format!("{k}={l}")));
                rows.sort();
                Ok(format!("keyword_stub:{}", rows.join(";")))
            }
            LabelerEndpoint::PrecomputedFile { path } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Ok(format!("precomputed_file:{}", crate::corpus::sha256_hex(&bytes)))
            }
            LabelerEndpoint::RemoteService { url, .. } => Ok(format!("remote_service:{url}")),
        }
    }
}

/// A resolved endpoint ready to label reports. Construction validates
/// files; labeling itself is concurrency-safe.
pub enum Labeler {
    Stub(KeywordStub),
    File(PrecomputedTable),
    Remote(RemoteClient),
}

impl Labeler {
    pub fn open(endpoint: &LabelerEndpoint, vocab: &FindingVocabulary) -> Result<Labeler> {
        match endpoint {
            LabelerEndpoint::KeywordStub { keywords } => {
                Ok(Labeler::Stub(KeywordStub::new(keywords.clone())))
            }
            LabelerEndpoint::PrecomputedFile { path } => {
                Ok(Labeler::File(PrecomputedTable::load(path, vocab)?))
            }
            LabelerEndpoint::RemoteService {
                url,
                timeout_ms,
                retries,
            } => Ok(Labeler::Remote(RemoteClient {
                url: url.clone(),
                timeout: Duration::from_millis(*timeout_ms),
                retries: *retries,
            })),
        }
    }

    /// Labels one findings text. `report_id` keys precomputed lookups.
    pub fn label_report(
        &self,
        report_id: &str,
        findings: &str,
        vocab: &FindingVocabulary,
    ) -> Result<ObservationLabels> {
        match self {
            Labeler::Stub(stub) => stub.label(findings, vocab),
            Labeler::File(table) => table.lookup(report_id, vocab),
            Labeler::Remote(client) => client.label(findings, vocab),
        }
    }
}

/// Keyword table shipped with the stub, covering the five findings the
/// clinical F1-5 subset scores.
fn stub_keyword_table() -> &'static [(&'static str, &'static str)] {
    &[
        ("cardiomegaly", "cardiomegaly"),
        ("enlarged heart", "cardiomegaly"),
        ("edema", "edema"),
        ("consolidation", "consolidation"),
        ("atelectasis", "atelectasis"),
        ("pleural effusion", "pleural effusion"),
    ]
}

/// Negation cues: a keyword within three tokens after one of these is
/// labeled negative.
const NEGATION_CUES: &[&[&str]] = &[&["no"], &["without"], &["free", "of"]];
const NEGATION_WINDOW: usize = 3;

pub struct KeywordStub {
    /// keyword tokens -> label
    entries: Vec<(Vec<String>, String)>,
}

impl KeywordStub {
    pub fn new(extra: BTreeMap<String, String>) -> KeywordStub {
        let mut entries: Vec<(Vec<String>, String)> = stub_keyword_table()
            .iter()
            .map(|(k, l)| (tokenize(k), l.to_string()))
            .collect();
        for (keyword, label) in extra {
            entries.push((tokenize(&keyword), label.to_lowercase()));
        }
        KeywordStub { entries }
    }

    /// Positive iff a keyword for the label occurs outside a negation
    /// window, negative iff every occurrence is negated, blank otherwise.
    pub fn label(&self, findings: &str, vocab: &FindingVocabulary) -> Result<ObservationLabels> {
        let tokens = tokenize(findings);
        let mut classes = Vec::with_capacity(vocab.names().len());
        for name in vocab.names() {
            let mut class = LabelClass::Blank;
            for (keyword, label) in &self.entries {
                if label != name {
                    continue;
                }
                for start in occurrences(&tokens, keyword) {
                    if is_negated(&tokens, start) {
                        if class == LabelClass::Blank {
                            class = LabelClass::Negative;
                        }
                    } else {
                        class = LabelClass::Positive;
                    }
                }
            }
            classes.push(class);
        }
        ObservationLabels::new(vocab.clone(), classes)
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn occurrences(tokens: &[String], keyword: &[String]) -> Vec<usize> {
    if keyword.is_empty() || tokens.len() < keyword.len() {
        return Vec::new();
    }
    (0..=tokens.len() - keyword.len())
        .filter(|&i| tokens[i..i + keyword.len()].iter().zip(keyword).all(|(a, b)| a == b))
        .collect()
}

fn is_negated(tokens: &[String], keyword_start: usize) -> bool {
    let window_start = keyword_start.saturating_sub(NEGATION_WINDOW);
    for cue in NEGATION_CUES {
        for pos in window_start..keyword_start {
            if pos + cue.len() <= keyword_start
                && tokens[pos..pos + cue.len()].iter().zip(*cue).all(|(a, b)| a == b)
            {
                return true;
            }
        }
    }
    false
}

/// CSV table: `report_id` column plus one column per vocabulary label.
pub struct PrecomputedTable {
    rows: BTreeMap<String, Vec<LabelClass>>,
}

impl PrecomputedTable {
    pub fn load(path: &Path, vocab: &FindingVocabulary) -> Result<PrecomputedTable> {
        let display = path.display().to_string();
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::format(&display, 0, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::format(&display, 0, e.to_string()))?
            .clone();
        let id_col = headers
            .iter()
            .position(|h| h == "report_id")
            .ok_or_else(|| Error::format(&display, 0, "missing column `report_id`"))?;
        let label_cols: Vec<usize> = vocab
            .names()
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::format(&display, 0, format!("missing column `{name}`")))
            })
            .collect::<Result<_>>()?;
        let mut rows = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let record = record.map_err(|e| Error::format(&display, line, e.to_string()))?;
            let id = record.get(id_col).unwrap_or("").trim().to_string();
            let classes: Vec<LabelClass> = label_cols
                .iter()
                .map(|&c| {
                    LabelClass::parse(record.get(c).unwrap_or("")).ok_or_else(|| {
                        Error::format(&display, line, "class must be positive/negative/uncertain/blank")
                    })
                })
                .collect::<Result<_>>()?;
            rows.insert(id, classes);
        }
        Ok(PrecomputedTable { rows })
    }

    pub fn lookup(&self, report_id: &str, vocab: &FindingVocabulary) -> Result<ObservationLabels> {
        let classes = self
            .rows
            .get(report_id)
            .ok_or_else(|| Error::MissingLabelRow(report_id.to_string()))?;
        ObservationLabels::new(vocab.clone(), classes.clone())
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    text: &'a str,
    vocabulary: &'a [String],
}

#[derive(Deserialize)]
struct RemoteResponse {
    classes: Vec<LabelClass>,
}

/// Plain HTTP/1.1 client with per-request timeout and idempotent retries.
pub struct RemoteClient {
    url: String,
    timeout: Duration,
    retries: u32,
}

impl RemoteClient {
    pub fn label(&self, findings: &str, vocab: &FindingVocabulary) -> Result<ObservationLabels> {
        let body = serde_json::to_string(&RemoteRequest {
            text: findings,
            vocabulary: vocab.names(),
        })
        .expect("request serializes");
        let mut last_err = None;
        for _ in 0..=self.retries {
            match self.post_once(&body) {
                Ok(response) => {
                    let parsed: RemoteResponse = serde_json::from_str(&response)
                        .map_err(|e| Error::Labeler(format!("bad response body: {e}")))?;
                    return ObservationLabels::new(vocab.clone(), parsed.classes);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Labeler("no attempts made".into())))
    }

    fn post_once(&self, body: &str) -> Result<String> {
        let (host, port, path) = parse_http_url(&self.url)?;
        let addr = format!("{host}:{port}");
        let err = |reason: String| Error::Labeler(format!("{addr}: {reason}"));
        let stream = TcpStream::connect(&addr).map_err(|e| err(e.to_string()))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| err(e.to_string()))?;
        stream
            .set_write_timeout(Some(self.timeout))
            .map_err(|e| err(e.to_string()))?;
        let mut stream = stream;
        let request = format!(
            "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| err(e.to_string()))?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).map_err(|e| err(e.to_string()))?;
        let text = String::from_utf8_lossy(&raw);
        let (head, response_body) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| err("malformed HTTP response".into()))?;
        let status = head.lines().next().unwrap_or("");
        if !status.contains(" 200 ") {
            return Err(err(format!("unexpected status line `{status}`")));
        }
        Ok(response_body.to_string())
    }
}

fn parse_http_url(url: &str) -> Result<(String, u16, String)> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| Error::Labeler(format!("only http:// endpoints are supported: {url}")))?;
    let (authority, path) = match rest.find('/') {
        Some(pos) => (&rest[..pos], &rest[pos..]),
        None => (rest, "/"),
    };
    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => (
            h.to_string(),
            p.parse::<u16>()
                .map_err(|_| Error::Labeler(format!("bad port in url: {url}")))?,
        ),
        None => (authority.to_string(), 80),
    };
    Ok((host, port, path.to_string()))
}
