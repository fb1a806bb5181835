//! Build, mix, eval, validate, and stats entry points behind the CLI.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ForgeConfig;
use crate::conversation::{
    build_cot_mrg, render_task, template::TemplateSet, ConversationSample, FindingVocabulary,
    RecordPayload, RenderRecord, TaskId,
};
use crate::corpus::{
    is_blocked, load_blocklist, read_mix, read_shard, render_mix, render_shard, sha256_hex,
    shard_files, write_atomic, CorpusManifest, FileMeta, MixMeta, MixRecord, ScopedBlocklist,
    ShardSummary, Validator, Violation, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::geometry::{self, NormalizedBBox};
use crate::ingest::adapters::{load_dataset, DatasetDecl, LoadContext};
use crate::ingest::{
    exclude_images, scenario_studies, AnnotationPayload, DatasetCatalog, ImageRef, Scenario,
    ScenarioInstance,
};
use crate::labeler::Labeler;
use crate::metrics::{
    corpus_bleu, f1_scores, grounding_eval, mean_rouge_l, vqa_eval, LabelPredictionPair,
    MetricReport,
};
use crate::mixer::{mixture_stats, sample_stream, MixtureSpec, MixtureStats};

pub struct BuildOutcome {
    pub manifest: CorpusManifest,
    pub out_dir: PathBuf,
    pub warnings: Vec<String>,
}

/// Ingests every declared dataset, applies blocklists, renders every
/// eligible record per task, and writes one corpus shard per
/// (task, dataset) plus the manifest. Output ordering is deterministic.
pub fn cmd_build(config: &ForgeConfig) -> Result<BuildOutcome> {
    let (templates, template_hash) = config.templates()?;
    let vocab = config.vocabulary()?;
    let endpoint = config.resolved_labeler();
    let labeler = Labeler::open(&endpoint, &vocab)?;
    let labeler_hash = sha256_hex(endpoint.descriptor()?.as_bytes());
    let config_hash = config.config_hash();
    let mut warnings = Vec::new();

    let blocklists = config_blocklists(config)?;

    let mut ctx = LoadContext::default();
    let mut catalogs = Vec::new();
    let mut exclusions: BTreeMap<String, u64> = BTreeMap::new();
    for decl in &config.datasets {
        let (catalog, report) = load_dataset(decl, &config.base_dir_for_data(), &ctx)?;
        warnings.extend(report.warnings);
        ctx.register(&catalog);
        let mut catalog = catalog;
        for list in &blocklists {
            if list.exempt.iter().any(|d| d == &catalog.dataset_id) {
                continue;
            }
            let (filtered, report) = exclude_images(&catalog, &list.ids);
            if report.images_removed > 0 {
                *exclusions.entry(catalog.dataset_id.clone()).or_insert(0) +=
                    report.images_removed as u64;
            }
            catalog = filtered;
        }
        catalogs.push((decl, catalog));
    }

    let mut jobs = Vec::new();
    for (decl, catalog) in &catalogs {
        jobs.extend(plan_jobs(decl, catalog, &vocab, &mut warnings)?);
    }
    jobs.sort_by(|a, b| (a.task, &a.dataset).cmp(&(b.task, &b.dataset)));

    let rendered: Result<Vec<(TaskId, String, Vec<ConversationSample>)>> = jobs
        .into_par_iter()
        .map(|job| {
            let samples = render_job(&job, &templates, &labeler)?;
            Ok((job.task, job.dataset, samples))
        })
        .collect();
    let mut rendered = rendered?;
    for (_, _, samples) in &mut rendered {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    }

    let out_dir = config.output_dir();
    let corpus_dir = out_dir.join("corpus");
    // Rendering succeeded; clear stale shards from earlier builds so scans
    // of the directory see exactly this build's output.
    if corpus_dir.is_dir() {
        for stale in shard_files(&corpus_dir)? {
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        let _ = std::fs::remove_file(out_dir.join(MANIFEST_FILE));
    }
    let mut written: Vec<PathBuf> = Vec::new();
    let mut shards = BTreeMap::new();
    let mut write_all = || -> Result<()> {
        for (task, dataset, samples) in &rendered {
            let meta = FileMeta {
                task: *task,
                dataset: dataset.clone(),
                config_hash: config_hash.clone(),
                template_hash: template_hash.clone(),
                seed: config.seed,
                tool_version: crate::TOOL_VERSION.to_string(),
            };
            let bytes = render_shard(&meta, samples)?;
            let file_name = format!("{}.{}.jsonl", task.as_str(), dataset);
            let path = corpus_dir.join(&file_name);
            write_atomic(&path, &bytes)?;
            written.push(path);
            shards.insert(
                format!("{}/{}", task.as_str(), dataset),
                ShardSummary {
                    file: format!("corpus/{file_name}"),
                    records: samples.len() as u64,
                    sha256: sha256_hex(&bytes),
                },
            );
        }
        Ok(())
    };
    if let Err(e) = write_all() {
        for path in &written {
            let _ = std::fs::remove_file(path);
        }
        return Err(e);
    }

    let mut id_input = String::new();
    for (key, shard) in &shards {
        id_input.push_str(&format!("{key}:{}\n", shard.sha256));
    }
    let manifest = CorpusManifest {
        corpus_id: sha256_hex(id_input.as_bytes()),
        tool_version: crate::TOOL_VERSION.to_string(),
        seed: config.seed,
        config_hash,
        template_hash,
        labeler_hash,
        shards,
        exclusions,
    };
    manifest.save(&out_dir)?;
    Ok(BuildOutcome {
        manifest,
        out_dir,
        warnings,
    })
}

impl ForgeConfig {
    fn base_dir_for_data(&self) -> PathBuf {
        self.resolve(Path::new(""))
    }
}

struct ShardJob {
    task: TaskId,
    dataset: String,
    candidates: FindingVocabulary,
    input: JobInput,
}

enum JobInput {
    Scenario(Vec<ScenarioInstance>),
    Records(Vec<RenderRecord>),
}

/// Tasks a catalog can feed, derived from what it actually contains.
fn supported_tasks(catalog: &DatasetCatalog) -> BTreeSet<TaskId> {
    let mut tasks = BTreeSet::new();
    if catalog.studies.iter().any(|s| s.findings.is_some()) {
        tasks.insert(TaskId::SingleImage);
        tasks.insert(TaskId::MultiImage);
        tasks.insert(TaskId::MultiStudy);
    }
    for ann in &catalog.annotations {
        match &ann.payload {
            AnnotationPayload::ClassLabels { .. } => {
                tasks.insert(TaskId::DiseaseClassification);
            }
            AnnotationPayload::FindingBox { .. } => {
                tasks.insert(TaskId::FindingGrounding);
                tasks.insert(TaskId::GroundedFinding);
                tasks.insert(TaskId::AbnormalityDetection);
                tasks.insert(TaskId::MultiFindingGrounding);
            }
            AnnotationPayload::OrganBox { .. } => {
                tasks.insert(TaskId::OrganGrounding);
                tasks.insert(TaskId::GroundedOrgan);
            }
            AnnotationPayload::PhraseBox { .. } => {
                tasks.insert(TaskId::PhraseGrounding);
                tasks.insert(TaskId::GroundedPhraseGeneration);
            }
            AnnotationPayload::RegionBox { phrase, .. } => {
                tasks.insert(TaskId::AnatomicalRegionGrounding);
                tasks.insert(TaskId::GroundedAnatomicalRegion);
                if phrase.is_some() {
                    tasks.insert(TaskId::GroundedPhraseGeneration);
                }
            }
            AnnotationPayload::QaPair { .. } => {
                tasks.insert(TaskId::Vqa);
            }
            AnnotationPayload::DiffQaPair { .. } => {
                tasks.insert(TaskId::DiffVqa);
            }
            AnnotationPayload::InstructionPair { .. } => {
                tasks.insert(TaskId::VisualInstructionFollowing);
            }
        }
    }
    tasks
}

fn plan_jobs(
    decl: &DatasetDecl,
    catalog: &DatasetCatalog,
    global_vocab: &FindingVocabulary,
    warnings: &mut Vec<String>,
) -> Result<Vec<ShardJob>> {
    let supported = supported_tasks(catalog);
    let selected: Vec<TaskId> = if decl.tasks.is_empty() {
        supported.iter().copied().collect()
    } else {
        let mut tasks = Vec::new();
        for raw in &decl.tasks {
            let task = TaskId::parse(raw)
                .ok_or_else(|| Error::Config(format!("unknown task `{raw}` for `{}`", decl.id)))?;
            if !supported.contains(&task) {
                warnings.push(format!(
                    "dataset `{}` declares task `{raw}` but has no matching records",
                    decl.id
                ));
            }
            tasks.push(task);
        }
        tasks
    };
    let dataset_vocab = if catalog.finding_vocabulary.is_empty() {
        global_vocab.clone()
    } else {
        FindingVocabulary::new(catalog.finding_vocabulary.clone(), None)?
    };
    let mut jobs = Vec::new();
    for task in selected {
        let (candidates, input) = match task {
            TaskId::SingleImage | TaskId::MultiImage | TaskId::MultiStudy => {
                let scenario = match task {
                    TaskId::SingleImage => Scenario::SingleImage,
                    TaskId::MultiImage => Scenario::MultiImage,
                    _ => Scenario::MultiStudy,
                };
                (
                    global_vocab.clone(),
                    JobInput::Scenario(scenario_studies(catalog, scenario)),
                )
            }
            _ => (
                dataset_vocab.clone(),
                JobInput::Records(annotation_records(catalog, task, &dataset_vocab, warnings)?),
            ),
        };
        jobs.push(ShardJob {
            task,
            dataset: catalog.dataset_id.clone(),
            candidates,
            input,
        });
    }
    Ok(jobs)
}

fn render_job(
    job: &ShardJob,
    templates: &TemplateSet,
    labeler: &Labeler,
) -> Result<Vec<ConversationSample>> {
    match &job.input {
        JobInput::Scenario(instances) => instances
            .iter()
            .map(|instance| {
                let report_id = format!("{}/{}", job.dataset, instance.study_id);
                let labels = labeler.label_report(&report_id, &instance.findings, &job.candidates)?;
                let sample_id =
                    format!("{}/{}/{}", job.dataset, job.task.as_str(), instance.key);
                build_cot_mrg(
                    instance,
                    &labels,
                    &job.candidates,
                    templates,
                    &job.dataset,
                    &sample_id,
                )
            })
            .collect(),
        JobInput::Records(records) => records
            .iter()
            .map(|record| render_task(record, job.task, &job.candidates, templates))
            .collect(),
    }
}

/// Normalizes a pixel box against its image, recording warnings.
fn norm_box(
    bbox: &geometry::BBox,
    image: &ImageRef,
    context: &str,
    warnings: &mut Vec<String>,
) -> Result<NormalizedBBox> {
    let normalized = geometry::normalize(bbox, image.width, image.height)?;
    if normalized.clamped {
        warnings.push(format!("{context}: box clamped to image bounds"));
    }
    if normalized.degenerate {
        warnings.push(format!("{context}: degenerate box retained"));
    }
    Ok(normalized.bbox)
}

/// Groups a catalog's annotations into per-task renderable records.
fn annotation_records(
    catalog: &DatasetCatalog,
    task: TaskId,
    dataset_vocab: &FindingVocabulary,
    warnings: &mut Vec<String>,
) -> Result<Vec<RenderRecord>> {
    let dataset = &catalog.dataset_id;
    let image_of = |id: &str| -> Result<ImageRef> {
        catalog
            .images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("annotation references unknown image `{id}`")))
    };
    let record = |suffix: String, images: Vec<ImageRef>, payload: RecordPayload| RenderRecord {
        sample_id: format!("{dataset}/{}/{suffix}", task.as_str()),
        dataset_id: dataset.clone(),
        images,
        payload,
    };
    let mut records = Vec::new();

    // Grouped tasks key by image (and label/organ) over all annotations.
    match task {
        TaskId::FindingGrounding | TaskId::OrganGrounding => {
            let mut grouped: BTreeMap<(String, String), Vec<NormalizedBBox>> = BTreeMap::new();
            for (i, ann) in catalog.annotations.iter().enumerate() {
                let (name, bbox, wanted) = match &ann.payload {
                    AnnotationPayload::FindingBox { label, bbox } => {
                        (label, bbox, task == TaskId::FindingGrounding)
                    }
                    AnnotationPayload::OrganBox { organ, bbox } => {
                        (organ, bbox, task == TaskId::OrganGrounding)
                    }
                    _ => continue,
                };
                if !wanted {
                    continue;
                }
                let image = image_of(&ann.image_id)?;
                let context = format!("{dataset} annotation #{i}");
                let nbox = norm_box(bbox, &image, &context, warnings)?;
                grouped
                    .entry((ann.image_id.clone(), name.clone()))
                    .or_default()
                    .push(nbox);
            }
            for ((image_id, name), boxes) in grouped {
                let image = image_of(&image_id)?;
                let payload = match task {
                    TaskId::FindingGrounding => RecordPayload::FindingGrounding {
                        finding: name.clone(),
                        boxes,
                    },
                    _ => RecordPayload::OrganGrounding {
                        organ: name.clone(),
                        boxes,
                    },
                };
                records.push(record(format!("{image_id}/{name}"), vec![image], payload));
            }
            return Ok(records);
        }
        TaskId::AbnormalityDetection => {
            let mut grouped: BTreeMap<String, Vec<NormalizedBBox>> = BTreeMap::new();
            for (i, ann) in catalog.annotations.iter().enumerate() {
                if let AnnotationPayload::FindingBox { bbox, .. } = &ann.payload {
                    let image = image_of(&ann.image_id)?;
                    let context = format!("{dataset} annotation #{i}");
                    let nbox = norm_box(bbox, &image, &context, warnings)?;
                    grouped.entry(ann.image_id.clone()).or_default().push(nbox);
                }
            }
            for (image_id, boxes) in grouped {
                let image = image_of(&image_id)?;
                records.push(record(
                    image_id.clone(),
                    vec![image],
                    RecordPayload::AbnormalityDetection { boxes },
                ));
            }
            return Ok(records);
        }
        TaskId::MultiFindingGrounding => {
            let mut grouped: BTreeMap<String, BTreeMap<String, Vec<NormalizedBBox>>> =
                BTreeMap::new();
            for (i, ann) in catalog.annotations.iter().enumerate() {
                if let AnnotationPayload::FindingBox { label, bbox } = &ann.payload {
                    let image = image_of(&ann.image_id)?;
                    let context = format!("{dataset} annotation #{i}");
                    let nbox = norm_box(bbox, &image, &context, warnings)?;
                    grouped
                        .entry(ann.image_id.clone())
                        .or_default()
                        .entry(label.clone())
                        .or_default()
                        .push(nbox);
                }
            }
            for (image_id, by_label) in grouped {
                let image = image_of(&image_id)?;
                // Present findings follow the candidate order.
                let present: Vec<(String, Vec<NormalizedBBox>)> = dataset_vocab
                    .names()
                    .iter()
                    .filter_map(|name| by_label.get(name).map(|b| (name.clone(), b.clone())))
                    .collect();
                records.push(record(
                    image_id.clone(),
                    vec![image],
                    RecordPayload::MultiFindingGrounding { present },
                ));
            }
            return Ok(records);
        }
        _ => {}
    }

    // Per-annotation tasks.
    for (i, ann) in catalog.annotations.iter().enumerate() {
        let suffix = format!("{}#{i:08}", ann.image_id);
        let context = format!("{dataset} annotation #{i}");
        match (&ann.payload, task) {
            (AnnotationPayload::ClassLabels { labels }, TaskId::DiseaseClassification) => {
                records.push(record(
                    suffix,
                    vec![image_of(&ann.image_id)?],
                    RecordPayload::Classification {
                        positives: labels.clone(),
                    },
                ));
            }
            (AnnotationPayload::FindingBox { label, bbox }, TaskId::GroundedFinding) => {
                let image = image_of(&ann.image_id)?;
                let nbox = norm_box(bbox, &image, &context, warnings)?;
                records.push(record(
                    suffix,
                    vec![image],
                    RecordPayload::GroundedFinding {
                        finding: label.clone(),
                        bbox: nbox,
                    },
                ));
            }
            (AnnotationPayload::OrganBox { organ, bbox }, TaskId::GroundedOrgan) => {
                let image = image_of(&ann.image_id)?;
                let nbox = norm_box(bbox, &image, &context, warnings)?;
                records.push(record(
                    suffix,
                    vec![image],
                    RecordPayload::GroundedOrgan {
                        organ: organ.clone(),
                        bbox: nbox,
                    },
                ));
            }
            (AnnotationPayload::PhraseBox { phrase, bbox }, TaskId::PhraseGrounding) => {
                let image = image_of(&ann.image_id)?;
                let nbox = norm_box(bbox, &image, &context, warnings)?;
                records.push(record(
                    suffix,
                    vec![image],
                    RecordPayload::PhraseGrounding {
                        phrase: phrase.clone(),
                        bbox: nbox,
                    },
                ));
            }
            (AnnotationPayload::PhraseBox { phrase, bbox }, TaskId::GroundedPhraseGeneration) => {
                let image = image_of(&ann.image_id)?;
                let nbox = norm_box(bbox, &image, &context, warnings)?;
                records.push(record(
                    suffix,
                    vec![image],
                    RecordPayload::GroundedPhrase {
                        phrase: phrase.clone(),
                        bbox: nbox,
                    },
                ));
            }
            (
                AnnotationPayload::RegionBox { region, bbox, phrase },
                TaskId::AnatomicalRegionGrounding
                | TaskId::GroundedAnatomicalRegion
                | TaskId::GroundedPhraseGeneration,
            ) => {
                let image = image_of(&ann.image_id)?;
                let nbox = norm_box(bbox, &image, &context, warnings)?;
                let payload = match task {
                    TaskId::AnatomicalRegionGrounding => RecordPayload::RegionGrounding {
                        region: region.clone(),
                        bbox: nbox,
                    },
                    TaskId::GroundedAnatomicalRegion => RecordPayload::GroundedRegion {
                        region: region.clone(),
                        bbox: nbox,
                    },
                    _ => match phrase {
                        Some(phrase) => RecordPayload::GroundedPhrase {
                            phrase: phrase.clone(),
                            bbox: nbox,
                        },
                        None => continue,
                    },
                };
                records.push(record(suffix, vec![image], payload));
            }
            (AnnotationPayload::QaPair { question, answer }, TaskId::Vqa) => {
                records.push(record(
                    suffix,
                    vec![image_of(&ann.image_id)?],
                    RecordPayload::Qa {
                        question: question.clone(),
                        answer: answer.clone(),
                    },
                ));
            }
            (
                AnnotationPayload::DiffQaPair {
                    reference_image,
                    question,
                    answer,
                },
                TaskId::DiffVqa,
            ) => {
                records.push(record(
                    suffix,
                    vec![image_of(reference_image)?, image_of(&ann.image_id)?],
                    RecordPayload::DiffQa {
                        question: question.clone(),
                        answer: answer.clone(),
                    },
                ));
            }
            (
                AnnotationPayload::InstructionPair { question, answer },
                TaskId::VisualInstructionFollowing,
            ) => {
                records.push(record(
                    suffix,
                    vec![image_of(&ann.image_id)?],
                    RecordPayload::Instruction {
                        question: question.clone(),
                        answer: answer.clone(),
                    },
                ));
            }
            _ => {}
        }
    }
    Ok(records)
}

pub struct MixOutcome {
    pub meta: MixMeta,
    pub out_path: PathBuf,
    pub stats: MixtureStats,
}

/// Materializes `n` tickets from the built corpus into one mixed file.
/// `seed_override` (CLI/env) takes precedence over the spec's seed.
pub fn cmd_mix(
    config: &ForgeConfig,
    n: u64,
    out_path: &Path,
    seed_override: Option<u64>,
) -> Result<MixOutcome> {
    let spec_path = config
        .mixture_spec
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `mixture_spec` path".into()))?;
    let spec_path = config.resolve(spec_path);
    let spec_bytes = std::fs::read(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let mut spec = MixtureSpec::load(&spec_path)?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    let out_dir = config.output_dir();
    let manifest = CorpusManifest::load(&out_dir)?;
    let mut pools: BTreeMap<String, Vec<ConversationSample>> = BTreeMap::new();
    for entry in &mut spec.entries {
        let key = format!("{}/{}", entry.task.as_str(), entry.dataset);
        let shard = manifest
            .shards
            .get(&key)
            .ok_or_else(|| Error::Config(format!("corpus has no shard for `{key}`")))?;
        let contents = read_shard(&out_dir.join(&shard.file))?;
        entry.pool_size = contents.samples.len() as u64;
        pools.insert(key, contents.samples);
    }
    let tickets = sample_stream(&spec, n)?;
    let records: Vec<MixRecord> = tickets
        .into_iter()
        .map(|ticket| {
            let key = format!("{}/{}", ticket.task.as_str(), ticket.dataset);
            let sample = pools[&key][ticket.record_index as usize].clone();
            MixRecord { ticket, sample }
        })
        .collect();
    let meta = MixMeta {
        seed: spec.seed,
        spec_hash: sha256_hex(&spec_bytes),
        config_hash: config.config_hash(),
        tool_version: crate::TOOL_VERSION.to_string(),
        tickets: n,
    };
    write_atomic(out_path, &render_mix(&meta, &records))?;
    let stats = mixture_stats(records.iter().map(|r| (&r.ticket.task, r.ticket.dataset.as_str())));
    Ok(MixOutcome {
        meta,
        out_path: out_path.to_path_buf(),
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Report,
    Grounding,
    Vqa,
}

impl EvalKind {
    pub fn parse(raw: &str) -> Option<EvalKind> {
        match raw {
            "report" => Some(EvalKind::Report),
            "grounding" => Some(EvalKind::Grounding),
            "vqa" => Some(EvalKind::Vqa),
            _ => None,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct TextLine {
    id: String,
    text: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct BoxLine {
    id: String,
    #[serde(rename = "box")]
    bbox: NormalizedBBox,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            Error::format(path.display().to_string(), i as u64 + 1, e.to_string())
        })?);
    }
    Ok(out)
}

fn into_map<T>(rows: Vec<(String, T)>, path: &Path) -> Result<BTreeMap<String, T>> {
    let mut map = BTreeMap::new();
    for (id, value) in rows {
        if map.insert(id.clone(), value).is_some() {
            return Err(Error::format(
                path.display().to_string(),
                0,
                format!("duplicate id `{id}`"),
            ));
        }
    }
    Ok(map)
}

fn check_alignment<A, B>(
    predictions: &BTreeMap<String, A>,
    references: &BTreeMap<String, B>,
) -> Result<()> {
    let pred_ids: BTreeSet<&String> = predictions.keys().collect();
    let ref_ids: BTreeSet<&String> = references.keys().collect();
    if pred_ids == ref_ids {
        return Ok(());
    }
    let missing: Vec<&str> = ref_ids
        .difference(&pred_ids)
        .take(10)
        .map(|s| s.as_str())
        .collect();
    let extra: Vec<&str> = pred_ids
        .difference(&ref_ids)
        .take(10)
        .map(|s| s.as_str())
        .collect();
    Err(Error::IdMismatch(format!(
        "missing from predictions: [{}]; not in references: [{}]",
        missing.join(", "),
        extra.join(", ")
    )))
}

/// Scores a predictions file against a references file.
///
/// `report` labels both sides with the configured labeler (precomputed
/// tables are keyed `<id>/pred` and `<id>/ref`), then scores the clinical
/// F1 family plus BLEU-1/4 and ROUGE-L. `grounding` parses the first box
/// from each prediction. `vqa` scores accuracy, recall, and BLEU-1.
pub fn cmd_eval(
    kind: EvalKind,
    pred_path: &Path,
    ref_path: &Path,
    config: &ForgeConfig,
) -> Result<MetricReport> {
    let predictions: Vec<TextLine> = read_jsonl(pred_path)?;
    let predictions = into_map(
        predictions.into_iter().map(|l| (l.id, l.text)).collect(),
        pred_path,
    )?;
    match kind {
        EvalKind::Report => {
            let references: Vec<TextLine> = read_jsonl(ref_path)?;
            let references = into_map(
                references.into_iter().map(|l| (l.id, l.text)).collect(),
                ref_path,
            )?;
            check_alignment(&predictions, &references)?;
            let vocab = config.vocabulary()?;
            let labeler = Labeler::open(&config.resolved_labeler(), &vocab)?;
            let mut pairs = Vec::new();
            let mut texts = Vec::new();
            for (id, reference) in &references {
                let prediction = &predictions[id];
                let pred_labels =
                    labeler.label_report(&format!("{id}/pred"), prediction, &vocab)?;
                let ref_labels =
                    labeler.label_report(&format!("{id}/ref"), reference, &vocab)?;
                pairs.push(LabelPredictionPair {
                    sample_id: id.clone(),
                    predicted: pred_labels.positives(),
                    reference: ref_labels.positives(),
                });
                texts.push((prediction.clone(), reference.clone()));
            }
            let n = vocab.names().len();
            let full = f1_scores(&pairs, &vocab, None)?;
            let mut report = MetricReport::new("report", pairs.len());
            report.set(&format!("mF1-{n}"), full.micro);
            report.set(&format!("MF1-{n}"), full.macro_);
            report.set(&format!("eF1-{n}"), full.example);
            report.per_label = full.per_label;
            if let Some(subset) = config.f1_subset(&vocab) {
                let five = f1_scores(&pairs, &vocab, Some(&subset))?;
                report.set(&format!("mF1-{}", subset.len()), five.micro);
                report.set(&format!("MF1-{}", subset.len()), five.macro_);
                report.set(&format!("eF1-{}", subset.len()), five.example);
            }
            report.set("BLEU-1", corpus_bleu(&texts, 1)?);
            report.set("BLEU-4", corpus_bleu(&texts, 4)?);
            report.set("ROUGE-L", mean_rouge_l(&texts)?);
            Ok(report)
        }
        EvalKind::Grounding => {
            let references: Vec<BoxLine> = read_jsonl(ref_path)?;
            let references = into_map(
                references.into_iter().map(|l| (l.id, l.bbox)).collect(),
                ref_path,
            )?;
            check_alignment(&predictions, &references)?;
            let samples: Vec<(String, NormalizedBBox)> = references
                .iter()
                .map(|(id, bbox)| (predictions[id].clone(), *bbox))
                .collect();
            let grounding = grounding_eval(&samples)?;
            let mut report = MetricReport::new("grounding", samples.len());
            report.set("accuracy", grounding.accuracy);
            report.set("mIoU", grounding.mean_iou);
            Ok(report)
        }
        EvalKind::Vqa => {
            let references: Vec<TextLine> = read_jsonl(ref_path)?;
            let references = into_map(
                references.into_iter().map(|l| (l.id, l.text)).collect(),
                ref_path,
            )?;
            check_alignment(&predictions, &references)?;
            let pairs: Vec<(String, String)> = references
                .iter()
                .map(|(id, reference)| (predictions[id].clone(), reference.clone()))
                .collect();
            let vqa = vqa_eval(&pairs)?;
            let mut report = MetricReport::new("vqa", pairs.len());
            report.set("accuracy", vqa.accuracy);
            report.set("recall", vqa.recall);
            report.set("BLEU-1", vqa.bleu1);
            Ok(report)
        }
    }
}

#[derive(Debug, Default)]
pub struct ValidationSummary {
    pub files: usize,
    pub samples: usize,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

/// Loads a config's blocklists with their exemptions.
pub fn config_blocklists(config: &ForgeConfig) -> Result<Vec<ScopedBlocklist>> {
    let mut out = Vec::new();
    for decl in &config.blocklists {
        out.push(ScopedBlocklist {
            ids: load_blocklist(&config.resolve(&decl.path))?,
            exempt: decl.exempt.clone(),
        });
    }
    Ok(out)
}

/// Validates a corpus directory, one shard, or a mixed file: sample
/// invariants, sorted ids, template round-trips, manifest counts, and
/// blocklist hygiene (honoring per-blocklist dataset exemptions).
pub fn cmd_validate(
    path: &Path,
    templates: &TemplateSet,
    blocklists: &[ScopedBlocklist],
) -> Result<ValidationSummary> {
    let mut summary = ValidationSummary::default();
    let validator = Validator {
        templates,
        blocklists,
    };
    if path.is_dir() {
        let corpus_dir = if path.join("corpus").is_dir() {
            path.join("corpus")
        } else {
            path.to_path_buf()
        };
        let manifest = CorpusManifest::load(path).ok();
        let files = shard_files(&corpus_dir)?;
        if files.is_empty() {
            summary.warnings.push(format!(
                "{}: no corpus shards found",
                corpus_dir.display()
            ));
        }
        let mut counted: BTreeMap<String, u64> = BTreeMap::new();
        for file in &files {
            summary.files += 1;
            let contents = read_shard(file)?;
            summary.samples += contents.samples.len();
            if contents.samples.is_empty() {
                summary
                    .warnings
                    .push(format!("{}: empty shard", file.display()));
            }
            if let Some(meta) = &contents.meta {
                counted.insert(
                    format!("{}/{}", meta.task.as_str(), meta.dataset),
                    contents.samples.len() as u64,
                );
            }
            summary.violations.extend(validator.validate_shard(file)?);
        }
        if let Some(manifest) = manifest {
            for (key, shard) in &manifest.shards {
                let actual = counted.get(key).copied().unwrap_or(0);
                if actual != shard.records {
                    summary.violations.push(Violation {
                        file: MANIFEST_FILE.to_string(),
                        sample_id: key.clone(),
                        reason: format!(
                            "manifest records {} but shard holds {actual}",
                            shard.records
                        ),
                    });
                }
            }
        }
    } else if is_mix_file(path)? {
        summary.files = 1;
        let contents = read_mix(path)?;
        summary.samples = contents.records.len();
        if contents.meta.is_none() {
            summary.violations.push(Violation {
                file: path.display().to_string(),
                sample_id: String::new(),
                reason: "mix file has no header".into(),
            });
        }
        for (i, record) in contents.records.iter().enumerate() {
            if record.ticket.index != i as u64 {
                summary.violations.push(Violation {
                    file: path.display().to_string(),
                    sample_id: record.sample.sample_id.clone(),
                    reason: format!("ticket {} out of order at line {}", record.ticket.index, i + 2),
                });
            }
            if let Err(e) = record.sample.check_invariants() {
                summary.violations.push(Violation {
                    file: path.display().to_string(),
                    sample_id: record.sample.sample_id.clone(),
                    reason: e.to_string(),
                });
            }
            for image in &record.sample.images {
                if is_blocked(blocklists, &record.sample.dataset_id, &image.image_id) {
                    summary.violations.push(Violation {
                        file: path.display().to_string(),
                        sample_id: record.sample.sample_id.clone(),
                        reason: format!("references blocklisted image `{}`", image.image_id),
                    });
                }
            }
        }
    } else {
        summary.files = 1;
        let contents = read_shard(path)?;
        summary.samples = contents.samples.len();
        if contents.samples.is_empty() {
            summary
                .warnings
                .push(format!("{}: empty corpus file", path.display()));
        }
        summary.violations.extend(validator.validate_shard(path)?);
    }
    Ok(summary)
}

fn is_mix_file(path: &Path) -> Result<bool> {
    use std::io::{BufRead, BufReader};
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(first.contains("\"mix_meta\""))
}

pub struct StatsOutcome {
    pub stats: MixtureStats,
    /// Config hash and seed of the scanned corpus or mix, when present.
    pub provenance: Option<(String, u64)>,
}

impl StatsOutcome {
    pub fn render_text(&self) -> String {
        let stats = &self.stats;
        let mut out = format!("records: {}\n", stats.total);
        let section = |name: &str, counts: &BTreeMap<String, u64>| {
            let mut block = format!("{name}:\n");
            for (key, count) in counts {
                block.push_str(&format!(
                    "  {key}: {count} ({:.4})\n",
                    MixtureStats::frequency(*count, stats.total)
                ));
            }
            block
        };
        out.push_str(&section("task types", &stats.per_task_type));
        out.push_str(&section("tasks", &stats.per_task));
        out.push_str(&section("datasets", &stats.per_dataset));
        out
    }

    pub fn render_csv(&self) -> String {
        let stats = &self.stats;
        let mut out = String::new();
        if let Some((config_hash, seed)) = &self.provenance {
            out.push_str(&format!("# config_hash={config_hash} seed={seed}\n"));
        }
        out.push_str("kind,name,count,frequency\n");
        let mut push = |kind: &str, counts: &BTreeMap<String, u64>| {
            for (key, count) in counts {
                out.push_str(&format!(
                    "{kind},{key},{count},{:.6}\n",
                    MixtureStats::frequency(*count, stats.total)
                ));
            }
        };
        push("task_type", &stats.per_task_type);
        push("task", &stats.per_task);
        push("dataset", &stats.per_dataset);
        push("entry", &stats.per_entry);
        out
    }
}

/// Frequency report over a corpus directory, one shard, or a mixed file.
pub fn cmd_stats(path: &Path) -> Result<StatsOutcome> {
    let mut tickets: Vec<(TaskId, String)> = Vec::new();
    let mut provenance = None;
    if path.is_dir() {
        let corpus_dir = if path.join("corpus").is_dir() {
            path.join("corpus")
        } else {
            path.to_path_buf()
        };
        for file in shard_files(&corpus_dir)? {
            let contents = read_shard(&file)?;
            if provenance.is_none() {
                provenance = contents.meta.map(|m| (m.config_hash, m.seed));
            }
            for sample in contents.samples {
                tickets.push((sample.task_id, sample.dataset_id));
            }
        }
    } else if is_mix_file(path)? {
        let contents = read_mix(path)?;
        provenance = contents.meta.map(|m| (m.config_hash, m.seed));
        for record in contents.records {
            tickets.push((record.ticket.task, record.ticket.dataset));
        }
    } else {
        let contents = read_shard(path)?;
        provenance = contents.meta.map(|m| (m.config_hash, m.seed));
        for sample in contents.samples {
            tickets.push((sample.task_id, sample.dataset_id));
        }
    }
    let stats = mixture_stats(tickets.iter().map(|(t, d)| (t, d.as_str())));
    Ok(StatsOutcome { stats, provenance })
}
