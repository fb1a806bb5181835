//! Corpus persistence: line-delimited sample records with a file-meta
//! header, the build manifest, and corpus validation.
//!
//! A corpus shard holds one JSON object per line: the first line is a
//! `{"file_meta": ...}` header embedding the config hash and seed, every
//! following line is one conversation sample, sorted by sample id. Mix
//! files use the same layout with a `{"mix_meta": ...}` header and
//! ticket-wrapped samples.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conversation::{
    template::{self, TemplateSet},
    ConversationSample, Role, TaskId, EMPTY_ANSWER,
};
use crate::error::{Error, Result};
use crate::geometry::parse_bboxes_from_text;
use crate::mixer::SampleTicket;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header line of a corpus shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    pub task: TaskId,
    pub dataset: String,
    pub config_hash: String,
    pub template_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine<'a> {
    file_meta: std::borrow::Cow<'a, FileMeta>,
}

/// Header line of a mixed training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixMeta {
    pub seed: u64,
    pub spec_hash: String,
    pub config_hash: String,
    pub tool_version: String,
    pub tickets: u64,
}

#[derive(Serialize, Deserialize)]
struct MixHeaderLine<'a> {
    mix_meta: std::borrow::Cow<'a, MixMeta>,
}

/// One line of a mixed file: the ticket and the materialized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub ticket: SampleTicket,
    pub sample: ConversationSample,
}

/// Writes bytes through a temp file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes a shard: header line plus one sample per line, presorted by
/// sample id.
pub fn render_shard(meta: &FileMeta, samples: &[ConversationSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let header = HeaderLine {
        file_meta: std::borrow::Cow::Borrowed(meta),
    };
    serde_json::to_writer(&mut out, &header).expect("meta serializes");
    out.push(b'\n');
    for sample in samples {
        serde_json::to_writer(&mut out, sample).expect("sample serializes");
        out.push(b'\n');
    }
    Ok(out)
}

/// Parsed corpus shard.
pub struct ShardContents {
    pub meta: Option<FileMeta>,
    pub samples: Vec<ConversationSample>,
}

pub fn read_shard(path: &Path) -> Result<ShardContents> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut meta = None;
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(header) = serde_json::from_str::<HeaderLine>(&line) {
                meta = Some(header.file_meta.into_owned());
                continue;
            }
        }
        let sample: ConversationSample = serde_json::from_str(&line).map_err(|e| {
            Error::format(path.display().to_string(), i as u64 + 1, e.to_string())
        })?;
        samples.push(sample);
    }
    Ok(ShardContents { meta, samples })
}

/// Parsed mix file.
pub struct MixContents {
    pub meta: Option<MixMeta>,
    pub records: Vec<MixRecord>,
}

pub fn render_mix(meta: &MixMeta, records: &[MixRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    let header = MixHeaderLine {
        mix_meta: std::borrow::Cow::Borrowed(meta),
    };
    serde_json::to_writer(&mut out, &header).expect("meta serializes");
    out.push(b'\n');
    for record in records {
        serde_json::to_writer(&mut out, record).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_mix(path: &Path) -> Result<MixContents> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut meta = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(header) = serde_json::from_str::<MixHeaderLine>(&line) {
                meta = Some(header.mix_meta.into_owned());
                continue;
            }
        }
        let record: MixRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format(path.display().to_string(), i as u64 + 1, e.to_string())
        })?;
        records.push(record);
    }
    Ok(MixContents { meta, records })
}

/// Per-shard accounting in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub file: String,
    pub records: u64,
    pub sha256: String,
}

/// Build provenance: counts and input hashes for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Hash over the shard hashes, identifying the corpus content.
    pub corpus_id: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub template_hash: String,
    pub labeler_hash: String,
    /// Keyed `task/dataset`.
    pub shards: BTreeMap<String, ShardSummary>,
    /// Images removed per dataset by blocklists.
    pub exclusions: BTreeMap<String, u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl CorpusManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)
    }

    pub fn load(dir: &Path) -> Result<CorpusManifest> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path,
            source: e,
        })
    }

    pub fn total_records(&self) -> u64 {
        self.shards.values().map(|s| s.records).sum()
    }
}

/// One validation failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub file: String,
    pub sample_id: String,
    pub reason: String,
}

/// A blocklist together with the dataset ids it does not apply to (the
/// list's own source dataset keeps its records).
#[derive(Debug, Clone, Default)]
pub struct ScopedBlocklist {
    pub ids: BTreeSet<String>,
    pub exempt: Vec<String>,
}

impl ScopedBlocklist {
    pub fn from_ids(ids: BTreeSet<String>) -> ScopedBlocklist {
        ScopedBlocklist {
            ids,
            exempt: Vec::new(),
        }
    }

    pub fn blocks(&self, dataset_id: &str, image_id: &str) -> bool {
        !self.exempt.iter().any(|d| d == dataset_id) && self.ids.contains(image_id)
    }
}

/// True when any list blocks this image for this dataset.
pub fn is_blocked(blocklists: &[ScopedBlocklist], dataset_id: &str, image_id: &str) -> bool {
    blocklists.iter().any(|l| l.blocks(dataset_id, image_id))
}

/// Structural and hygiene checks over corpus shards: sample invariants,
/// sorted unique ids, box-answer well-formedness, template round-trip,
/// and blocklist hygiene.
pub struct Validator<'a> {
    pub templates: &'a TemplateSet,
    pub blocklists: &'a [ScopedBlocklist],
}

impl Validator<'_> {
    pub fn validate_shard(&self, path: &Path) -> Result<Vec<Violation>> {
        let contents = read_shard(path)?;
        let file = path.display().to_string();
        let mut violations = Vec::new();
        let mut push = |sample_id: &str, reason: String| {
            violations.push(Violation {
                file: file.clone(),
                sample_id: sample_id.to_string(),
                reason,
            });
        };
        let mut last_id: Option<&str> = None;
        for sample in &contents.samples {
            if let Some(prev) = last_id {
                if prev >= sample.sample_id.as_str() {
                    push(&sample.sample_id, format!("ids not sorted: `{prev}` precedes it"));
                }
            }
            last_id = Some(&sample.sample_id);
            if let Err(e) = sample.check_invariants() {
                push(&sample.sample_id, e.to_string());
                continue;
            }
            if let Some(meta) = &contents.meta {
                if sample.task_id != meta.task {
                    push(&sample.sample_id, "task differs from shard header".to_string());
                }
            }
            for image in &sample.images {
                if is_blocked(self.blocklists, &sample.dataset_id, &image.image_id) {
                    push(
                        &sample.sample_id,
                        format!("references blocklisted image `{}`", image.image_id),
                    );
                }
            }
            if let Err(reason) = check_template_round_trip(sample, self.templates) {
                push(&sample.sample_id, reason);
            }
        }
        Ok(violations)
    }
}

/// Re-derives the placeholder values of a rendered sample from its task
/// template, checks box-valued placeholders parse, and re-renders to the
/// identical bytes.
fn check_template_round_trip(
    sample: &ConversationSample,
    templates: &TemplateSet,
) -> std::result::Result<(), String> {
    // Multi-study instances without a prior study are rendered with the
    // multi-image template.
    let mut candidates = vec![sample.task_id];
    if sample.task_id == TaskId::MultiStudy {
        candidates.push(TaskId::MultiImage);
    }
    let mut failure = String::from("does not match its task template");
    'templates: for task in candidates {
        let turns = templates.turns(task);
        if sample.turns.len() != turns.len() + 1 {
            continue;
        }
        if sample.turns[0].role != Role::System
            || sample.turns[0].content != templates.system_prompt
        {
            failure = "system prompt differs from template".to_string();
            continue;
        }
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        for (turn, tmpl) in sample.turns[1..].iter().zip(turns) {
            if turn.role != tmpl.role {
                continue 'templates;
            }
            let extracted = match template::extract_text(&tmpl.text, &turn.content) {
                Some(v) => v,
                None => continue 'templates,
            };
            for (name, value) in extracted {
                if let Some(previous) = values.get(&name) {
                    // The candidate list appears in the question; the
                    // answer reuses other placeholder names.
                    if previous != &value {
                        failure = format!("placeholder `{name}` is inconsistent across turns");
                        continue 'templates;
                    }
                } else {
                    values.insert(name, value);
                }
            }
        }
        if let Err(reason) = check_box_placeholders(&values) {
            failure = reason;
            continue;
        }
        // Re-render to prove the extraction is lossless.
        let borrowed: BTreeMap<&str, String> =
            values.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        for (turn, tmpl) in sample.turns[1..].iter().zip(turns) {
            match template::render_text(task.as_str(), &tmpl.text, &borrowed) {
                Ok(rendered) if rendered == turn.content => {}
                _ => continue 'templates,
            }
        }
        return Ok(());
    }
    Err(failure)
}

fn check_box_placeholders(values: &BTreeMap<String, String>) -> std::result::Result<(), String> {
    for (name, value) in values {
        match name.as_str() {
            "box" => {
                let boxes = parse_bboxes_from_text(value);
                if boxes.len() != 1 || boxes[0].render() != *value {
                    return Err(format!("placeholder `box` is not a single box: `{value}`"));
                }
            }
            "boxes" => {
                if value != EMPTY_ANSWER {
                    let boxes = parse_bboxes_from_text(value);
                    let rendered: Vec<String> = boxes.iter().map(|b| b.render()).collect();
                    if boxes.is_empty() || rendered.join(" ") != *value {
                        return Err(format!("placeholder `boxes` is malformed: `{value}`"));
                    }
                }
            }
            "findings_boxes"
                if value != EMPTY_ANSWER && parse_bboxes_from_text(value).is_empty() =>
            {
                return Err(format!(
                    "placeholder `findings_boxes` carries no parsable box: `{value}`"
                ));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Reads a newline-delimited image-id blocklist.
pub fn load_blocklist(path: &Path) -> Result<BTreeSet<String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Corpus shard files under a directory, sorted for determinism.
pub fn shard_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
