//! Renders catalog records into multi-turn instruction conversations with
//! image-slot interleaving, including the two-turn CoT report-generation
//! form.

pub mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NormalizedBBox;
use crate::ingest::{ImageRef, Scenario, ScenarioInstance};
use crate::labeler::ObservationLabels;
use template::TemplateSet;

/// Marker substituted where one image's visual tokens are inserted.
pub const IMAGE_SLOT: &str = "<image>";

/// Answer rendered when a finding or box list is empty and the vocabulary
/// designates no entry for that case.
pub const EMPTY_ANSWER: &str = "none";

/// The task set: three report-generation scenarios, eleven image
/// understanding tasks, three question-answering tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    SingleImage,
    MultiImage,
    MultiStudy,
    DiseaseClassification,
    FindingGrounding,
    GroundedFinding,
    AbnormalityDetection,
    MultiFindingGrounding,
    OrganGrounding,
    GroundedOrgan,
    GroundedPhraseGeneration,
    PhraseGrounding,
    AnatomicalRegionGrounding,
    GroundedAnatomicalRegion,
    Vqa,
    DiffVqa,
    VisualInstructionFollowing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Mrg,
    ImageUnderstanding,
    Vqa,
}

impl TaskType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Mrg => "mrg",
            TaskType::ImageUnderstanding => "image_understanding",
            TaskType::Vqa => "vqa",
        }
    }
}

impl TaskId {
    pub fn all() -> &'static [TaskId] {
        use TaskId::*;
        &[
            SingleImage,
            MultiImage,
            MultiStudy,
            DiseaseClassification,
            FindingGrounding,
            GroundedFinding,
            AbnormalityDetection,
            MultiFindingGrounding,
            OrganGrounding,
            GroundedOrgan,
            GroundedPhraseGeneration,
            PhraseGrounding,
            AnatomicalRegionGrounding,
            GroundedAnatomicalRegion,
            Vqa,
            DiffVqa,
            VisualInstructionFollowing,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        use TaskId::*;
        match self {
            SingleImage => "single_image",
            MultiImage => "multi_image",
            MultiStudy => "multi_study",
            DiseaseClassification => "disease_classification",
            FindingGrounding => "finding_grounding",
            GroundedFinding => "grounded_finding",
            AbnormalityDetection => "abnormality_detection",
            MultiFindingGrounding => "multi_finding_grounding",
            OrganGrounding => "organ_grounding",
            GroundedOrgan => "grounded_organ",
            GroundedPhraseGeneration => "grounded_phrase_generation",
            PhraseGrounding => "phrase_grounding",
            AnatomicalRegionGrounding => "anatomical_region_grounding",
            GroundedAnatomicalRegion => "grounded_anatomical_region",
            Vqa => "vqa",
            DiffVqa => "diff_vqa",
            VisualInstructionFollowing => "visual_instruction_following",
        }
    }

    pub fn parse(raw: &str) -> Option<TaskId> {
        TaskId::all().iter().copied().find(|t| t.as_str() == raw)
    }

    pub fn task_type(&self) -> TaskType {
        use TaskId::*;
        match self {
            SingleImage | MultiImage | MultiStudy => TaskType::Mrg,
            Vqa | DiffVqa | VisualInstructionFollowing => TaskType::Vqa,
            _ => TaskType::ImageUnderstanding,
        }
    }

    pub fn for_scenario(scenario: Scenario) -> TaskId {
        match scenario {
            Scenario::SingleImage => TaskId::SingleImage,
            Scenario::MultiImage => TaskId::MultiImage,
            Scenario::MultiStudy => TaskId::MultiStudy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

/// A rendered multi-turn sample: the corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub sample_id: String,
    pub task_id: TaskId,
    pub dataset_id: String,
    pub images: Vec<ImageRef>,
    pub turns: Vec<Turn>,
    /// One flag per assistant turn; true marks a training target.
    pub target_flags: Vec<bool>,
}

impl ConversationSample {
    /// Count of image-slot markers across all turns.
    pub fn slot_count(&self) -> usize {
        self.turns
            .iter()
            .map(|t| t.content.matches(IMAGE_SLOT).count())
            .sum()
    }

    /// Checks the structural invariants every corpus record must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::BadConversation {
                sample: self.sample_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.images.is_empty() {
            return fail("sample has no images");
        }
        if self.slot_count() != self.images.len() {
            return fail("image slot count does not equal image count");
        }
        if self.turns.first().map(|t| t.role) != Some(Role::System) {
            return fail("first turn must be the system prompt");
        }
        let mut assistant_turns = 0;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.content.contains("\n\n") {
                return fail("turn content contains a blank line");
            }
            match turn.role {
                Role::System => {
                    if i != 0 {
                        return fail("system turn not at conversation start");
                    }
                }
                Role::Assistant => {
                    if self.turns[i - 1].role != Role::User {
                        return fail("assistant turn does not follow a user turn");
                    }
                    assistant_turns += 1;
                }
                Role::User => {}
            }
        }
        if assistant_turns == 0 {
            return fail("no assistant turns");
        }
        if self.target_flags.len() != assistant_turns {
            return fail("target flag count does not equal assistant turn count");
        }
        if !self.target_flags.iter().any(|&t| t) {
            return fail("no turn is flagged as a training target");
        }
        Ok(())
    }
}

/// Ordered candidate findings with an optional designated empty-case entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingVocabulary {
    names: Vec<String>,
    no_finding: Option<String>,
}

impl FindingVocabulary {
    pub fn new(names: Vec<String>, no_finding: Option<String>) -> Result<FindingVocabulary> {
        if names.is_empty() {
            return Err(Error::Config("finding vocabulary is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(Error::Config("finding vocabulary has an empty name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate finding `{name}`")));
            }
        }
        if let Some(nf) = &no_finding {
            if !seen.contains(nf.as_str()) {
                return Err(Error::Config(format!(
                    "designated no-finding entry `{nf}` is not in the vocabulary"
                )));
            }
        }
        Ok(FindingVocabulary { names, no_finding })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn no_finding(&self) -> Option<&str> {
        self.no_finding.as_deref()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Candidate list text as it appears in questions.
    pub fn candidates_text(&self) -> String {
        self.names.join(", ")
    }

    /// Comma-separated members of `positives`, in vocabulary order; the
    /// designated entry (or `none`) when empty.
    pub fn findings_answer<'a, I>(&self, positives: I) -> String
    where
        I: IntoIterator<Item = &'a str>,
    {
        let set: std::collections::BTreeSet<&str> = positives.into_iter().collect();
        let ordered: Vec<&str> = self
            .names
            .iter()
            .map(|n| n.as_str())
            .filter(|n| set.contains(n))
            .collect();
        if ordered.is_empty() {
            self.no_finding.clone().unwrap_or_else(|| EMPTY_ANSWER.to_string())
        } else {
            ordered.join(", ")
        }
    }
}

/// Space-separated box renderings; `none` when the list is empty.
pub fn boxes_answer(boxes: &[NormalizedBBox]) -> String {
    if boxes.is_empty() {
        EMPTY_ANSWER.to_string()
    } else {
        boxes.iter().map(|b| b.render()).collect::<Vec<_>>().join(" ")
    }
}

fn slots(n: usize) -> String {
    vec![IMAGE_SLOT; n].join(" ")
}

/// What a non-MRG task renders from.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordPayload {
    Classification {
        positives: Vec<String>,
    },
    FindingGrounding {
        finding: String,
        boxes: Vec<NormalizedBBox>,
    },
    GroundedFinding {
        finding: String,
        bbox: NormalizedBBox,
    },
    AbnormalityDetection {
        boxes: Vec<NormalizedBBox>,
    },
    /// Present findings with their boxes, in candidate order.
    MultiFindingGrounding {
        present: Vec<(String, Vec<NormalizedBBox>)>,
    },
    OrganGrounding {
        organ: String,
        boxes: Vec<NormalizedBBox>,
    },
    GroundedOrgan {
        organ: String,
        bbox: NormalizedBBox,
    },
    GroundedPhrase {
        phrase: String,
        bbox: NormalizedBBox,
    },
    PhraseGrounding {
        phrase: String,
        bbox: NormalizedBBox,
    },
    RegionGrounding {
        region: String,
        bbox: NormalizedBBox,
    },
    GroundedRegion {
        region: String,
        bbox: NormalizedBBox,
    },
    Qa {
        question: String,
        answer: String,
    },
    /// Images are ordered reference first, then main.
    DiffQa {
        question: String,
        answer: String,
    },
    Instruction {
        question: String,
        answer: String,
    },
}

/// One renderable record for [`render_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub images: Vec<ImageRef>,
    pub payload: RecordPayload,
}

fn mismatch(task: TaskId, reason: &str) -> Error {
    Error::TaskMismatch {
        task: task.as_str().to_string(),
        reason: reason.to_string(),
    }
}

/// Renders a single-turn task record against its template.
///
/// `candidates` supplies the finding list for classification-style
/// questions (the dataset vocabulary, or the global vocabulary for MRG).
pub fn render_task(
    record: &RenderRecord,
    task: TaskId,
    candidates: &FindingVocabulary,
    templates: &TemplateSet,
) -> Result<ConversationSample> {
    use RecordPayload as P;
    let expected_images = match &record.payload {
        P::DiffQa { .. } => 2,
        _ => 1,
    };
    if record.images.len() != expected_images {
        return Err(mismatch(task, "record has the wrong number of images"));
    }
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    match (&record.payload, task) {
        (P::Classification { positives }, TaskId::DiseaseClassification) => {
            for p in positives {
                if !candidates.contains(p) {
                    return Err(mismatch(task, "positive label outside candidate vocabulary"));
                }
            }
            values.insert("candidates", candidates.candidates_text());
            values.insert(
                "findings",
                candidates.findings_answer(positives.iter().map(|s| s.as_str())),
            );
        }
        (P::FindingGrounding { finding, boxes }, TaskId::FindingGrounding) => {
            values.insert("finding", finding.clone());
            values.insert("boxes", boxes_answer(boxes));
        }
        (P::GroundedFinding { finding, bbox }, TaskId::GroundedFinding) => {
            values.insert("box", bbox.render());
            values.insert("finding", finding.clone());
        }
        (P::AbnormalityDetection { boxes }, TaskId::AbnormalityDetection) => {
            values.insert("boxes", boxes_answer(boxes));
        }
        (P::MultiFindingGrounding { present }, TaskId::MultiFindingGrounding) => {
            for (label, _) in present {
                if !candidates.contains(label) {
                    return Err(mismatch(task, "present label outside candidate vocabulary"));
                }
            }
            values.insert("candidates", candidates.candidates_text());
            let answer = if present.is_empty() {
                candidates
                    .no_finding()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| EMPTY_ANSWER.to_string())
            } else {
                present
                    .iter()
                    .map(|(label, boxes)| format!("{label} {}", boxes_answer(boxes)))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            values.insert("findings_boxes", answer);
        }
        (P::OrganGrounding { organ, boxes }, TaskId::OrganGrounding) => {
            values.insert("organ", organ.clone());
            values.insert("boxes", boxes_answer(boxes));
        }
        (P::GroundedOrgan { organ, bbox }, TaskId::GroundedOrgan) => {
            values.insert("box", bbox.render());
            values.insert("organ", organ.clone());
        }
        (P::GroundedPhrase { phrase, bbox }, TaskId::GroundedPhraseGeneration) => {
            values.insert("box", bbox.render());
            values.insert("phrase", phrase.clone());
        }
        (P::PhraseGrounding { phrase, bbox }, TaskId::PhraseGrounding) => {
            values.insert("phrase", phrase.clone());
            values.insert("box", bbox.render());
        }
        (P::RegionGrounding { region, bbox }, TaskId::AnatomicalRegionGrounding) => {
            values.insert("region", region.clone());
            values.insert("box", bbox.render());
        }
        (P::GroundedRegion { region, bbox }, TaskId::GroundedAnatomicalRegion) => {
            values.insert("box", bbox.render());
            values.insert("region", region.clone());
        }
        (P::Qa { question, answer }, TaskId::Vqa)
        | (P::Instruction { question, answer }, TaskId::VisualInstructionFollowing)
        | (P::DiffQa { question, answer }, TaskId::DiffVqa) => {
            values.insert("question", question.clone());
            values.insert("answer", answer.clone());
        }
        _ => return Err(mismatch(task, "record kind does not supply this task's inputs")),
    }
    assemble(record, task, task, &values, templates)
}

/// Builds the two-turn CoT report conversation for an MRG scenario
/// instance: first the observation question over the full candidate
/// vocabulary, then the report request, both answers flagged as targets.
///
/// Multi-study instances without a prior study are rendered with the
/// multi-image template.
pub fn build_cot_mrg(
    instance: &ScenarioInstance,
    labels: &ObservationLabels,
    vocab: &FindingVocabulary,
    templates: &TemplateSet,
    dataset_id: &str,
    sample_id: &str,
) -> Result<ConversationSample> {
    let task = TaskId::for_scenario(instance.scenario);
    if labels.vocabulary() != vocab {
        return Err(mismatch(task, "label vocabulary differs from prompt vocabulary"));
    }
    if instance.findings.trim().is_empty() {
        return Err(mismatch(task, "instance has no report findings"));
    }
    let positives = labels.positives();
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("candidates", vocab.candidates_text());
    values.insert(
        "findings",
        vocab.findings_answer(positives.iter().map(|s| s.as_str())),
    );
    values.insert("report", instance.findings.clone());
    let template_task = match (task, &instance.prior) {
        (TaskId::MultiStudy, Some(prior)) => {
            values.insert("prior_images", slots(instance.prior_image_count));
            values.insert("prior_report", prior.findings.clone());
            values.insert(
                "followup_images",
                slots(instance.images.len() - instance.prior_image_count),
            );
            TaskId::MultiStudy
        }
        (TaskId::MultiStudy, None) => {
            values.insert("images", slots(instance.images.len()));
            TaskId::MultiImage
        }
        (TaskId::MultiImage, _) => {
            values.insert("images", slots(instance.images.len()));
            TaskId::MultiImage
        }
        (other, _) => other,
    };
    let record = RenderRecord {
        sample_id: sample_id.to_string(),
        dataset_id: dataset_id.to_string(),
        images: instance.images.clone(),
        payload: RecordPayload::Qa {
            question: String::new(),
            answer: String::new(),
        },
    };
    assemble(&record, task, template_task, &values, templates)
}

fn assemble(
    record: &RenderRecord,
    task: TaskId,
    template_task: TaskId,
    values: &BTreeMap<&str, String>,
    templates: &TemplateSet,
) -> Result<ConversationSample> {
    let mut turns = Vec::new();
    let mut target_flags = Vec::new();
    turns.push(Turn {
        role: Role::System,
        content: templates.system_prompt.clone(),
    });
    for tmpl in templates.turns(template_task) {
        let content = template::render_text(task.as_str(), &tmpl.text, values)?;
        if tmpl.role == Role::Assistant {
            target_flags.push(tmpl.target);
        }
        turns.push(Turn {
            role: tmpl.role,
            content,
        });
    }
    let sample = ConversationSample {
        sample_id: record.sample_id.clone(),
        task_id: task,
        dataset_id: record.dataset_id.clone(),
        images: record.images.clone(),
        turns,
        target_flags,
    };
    sample.check_invariants()?;
    Ok(sample)
}

/// Serializes a sample into a single prompt: turns as `role: content`
/// separated by blank lines, the i-th slot marker matching `images[i]`.
pub fn interleave_image_slots(sample: &ConversationSample) -> Result<String> {
    sample.check_invariants()?;
    let parts: Vec<String> = sample
        .turns
        .iter()
        .map(|t| format!("{}: {}", t.role.as_str(), t.content))
        .collect();
    Ok(parts.join("\n\n"))
}

/// Inverse of [`interleave_image_slots`]; used to check reversibility.
pub fn parse_flat_prompt(flat: &str) -> Result<Vec<Turn>> {
    let mut turns = Vec::new();
    for chunk in flat.split("\n\n") {
        let (role, content) = chunk
            .split_once(": ")
            .ok_or_else(|| Error::BadConversation {
                sample: String::new(),
                reason: format!("chunk without role prefix: `{chunk}`"),
            })?;
        let role = match role {
            "system" => Role::System,
            "user" => Role::User,
            "assistant" => Role::Assistant,
            other => {
                return Err(Error::BadConversation {
                    sample: String::new(),
                    reason: format!("unknown role `{other}`"),
                })
            }
        };
        turns.push(Turn {
            role,
            content: content.to_string(),
        });
    }
    Ok(turns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{PriorStudy, View};
    use crate::labeler::{LabelClass, ObservationLabels};

    fn image(id: &str) -> ImageRef {
        ImageRef {
            dataset_id: "d".into(),
            image_id: id.into(),
            path: format!("{id}.png"),
            width: 512.0,
            height: 512.0,
            view: View::Pa,
            study_id: None,
            patient_id: None,
        }
    }

    fn vocab(names: &[&str]) -> FindingVocabulary {
        FindingVocabulary::new(names.iter().map(|s| s.to_string()).collect(), None).unwrap()
    }

    fn record(payload: RecordPayload, n_images: usize) -> RenderRecord {
        RenderRecord {
            sample_id: "s1".into(),
            dataset_id: "d".into(),
            images: (0..n_images).map(|i| image(&format!("i{i}"))).collect(),
            payload,
        }
    }

    #[test]
    fn disease_classification_render() {
        let templates = TemplateSet::embedded_default();
        let sample = render_task(
            &record(
                RecordPayload::Classification {
                    positives: vec!["pneumonia".into()],
                },
                1,
            ),
            TaskId::DiseaseClassification,
            &vocab(&["pneumonia", "effusion"]),
            &templates,
        )
        .unwrap();
        assert_eq!(
            sample.turns[1].content,
            "radiology image: <image> Which of the following findings are present in the \
             radiology image? Findings: pneumonia, effusion"
        );
        assert_eq!(sample.turns[2].content, "pneumonia");
        assert_eq!(sample.target_flags, vec![true]);
    }

    #[test]
    fn phrase_grounding_render() {
        let templates = TemplateSet::embedded_default();
        let bbox = NormalizedBBox::new(25, 10, 60, 45).unwrap();
        let sample = render_task(
            &record(
                RecordPayload::PhraseGrounding {
                    phrase: "right basilar opacity".into(),
                    bbox,
                },
                1,
            ),
            TaskId::PhraseGrounding,
            &vocab(&["unused"]),
            &templates,
        )
        .unwrap();
        assert_eq!(
            sample.turns[1].content,
            "radiology image: <image> Provide the bounding box coordinate of the region \
             this phrase describes: right basilar opacity"
        );
        assert_eq!(sample.turns[2].content, "[25, 10, 60, 45]");
    }

    #[test]
    fn empty_positives_use_designated_entry() {
        let templates = TemplateSet::embedded_default();
        let v = FindingVocabulary::new(
            vec!["pneumonia".into(), "no finding".into()],
            Some("no finding".into()),
        )
        .unwrap();
        let sample = render_task(
            &record(RecordPayload::Classification { positives: vec![] }, 1),
            TaskId::DiseaseClassification,
            &v,
            &templates,
        )
        .unwrap();
        assert_eq!(sample.turns[2].content, "no finding");
    }

    #[test]
    fn empty_positives_without_designated_entry_use_none() {
        let templates = TemplateSet::embedded_default();
        let sample = render_task(
            &record(RecordPayload::Classification { positives: vec![] }, 1),
            TaskId::DiseaseClassification,
            &vocab(&["pneumonia"]),
            &templates,
        )
        .unwrap();
        assert_eq!(sample.turns[2].content, "none");
    }

    #[test]
    fn task_record_mismatch_rejected() {
        let templates = TemplateSet::embedded_default();
        let err = render_task(
            &record(RecordPayload::Classification { positives: vec![] }, 1),
            TaskId::PhraseGrounding,
            &vocab(&["x"]),
            &templates,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TaskMismatch { .. }));
    }

    fn labels_for(vocab: &FindingVocabulary, positives: &[&str]) -> ObservationLabels {
        let classes = vocab
            .names()
            .iter()
            .map(|n| {
                if positives.contains(&n.as_str()) {
                    LabelClass::Positive
                } else {
                    LabelClass::Blank
                }
            })
            .collect();
        ObservationLabels::new(vocab.clone(), classes).unwrap()
    }

    fn instance(
        scenario: Scenario,
        n_prior: usize,
        n_follow: usize,
        prior: Option<PriorStudy>,
    ) -> ScenarioInstance {
        let images: Vec<ImageRef> = (0..n_prior + n_follow)
            .map(|i| image(&format!("i{i}")))
            .collect();
        ScenarioInstance {
            scenario,
            key: "k".into(),
            study_id: "s".into(),
            patient_id: "p".into(),
            images,
            prior_image_count: n_prior,
            prior,
            findings: "atelectasis and a small pleural effusion.".into(),
        }
    }

    #[test]
    fn cot_single_image_two_turns() {
        let templates = TemplateSet::embedded_default();
        let v = vocab(&["atelectasis", "pleural effusion", "edema"]);
        let labels = labels_for(&v, &["pleural effusion", "atelectasis"]);
        let sample = build_cot_mrg(
            &instance(Scenario::SingleImage, 0, 1, None),
            &labels,
            &v,
            &templates,
            "mimic-cxr",
            "id-1",
        )
        .unwrap();
        assert_eq!(sample.turns.len(), 5);
        // Positives appear in vocabulary order.
        assert_eq!(sample.turns[2].content, "atelectasis, pleural effusion");
        assert_eq!(
            sample.turns[4].content,
            "atelectasis and a small pleural effusion."
        );
        assert_eq!(sample.target_flags, vec![true, true]);
    }

    #[test]
    fn cot_multi_study_mentions_chronological_order() {
        let templates = TemplateSet::embedded_default();
        let v = vocab(&["edema"]);
        let labels = labels_for(&v, &[]);
        let sample = build_cot_mrg(
            &instance(
                Scenario::MultiStudy,
                2,
                1,
                Some(PriorStudy {
                    study_id: "prev".into(),
                    findings: "mild edema.".into(),
                }),
            ),
            &labels,
            &v,
            &templates,
            "mimic-cxr",
            "id-2",
        )
        .unwrap();
        let q = &sample.turns[1].content;
        assert!(q.starts_with("prior radiology images: <image> <image>"));
        assert!(q.contains("prior radiology report: mild edema."));
        assert!(q.contains("\nfollow-up images: <image>"));
        assert!(q.contains("The radiology studies are given in chronological order."));
        assert_eq!(sample.slot_count(), 3);
    }

    #[test]
    fn cot_multi_study_without_prior_uses_multi_image_template() {
        let templates = TemplateSet::embedded_default();
        let v = vocab(&["edema"]);
        let labels = labels_for(&v, &[]);
        let sample = build_cot_mrg(
            &instance(Scenario::MultiStudy, 0, 2, None),
            &labels,
            &v,
            &templates,
            "mimic-cxr",
            "id-3",
        )
        .unwrap();
        assert_eq!(sample.task_id, TaskId::MultiStudy);
        assert!(sample.turns[1].content.starts_with("radiology images: <image> <image>"));
    }

    #[test]
    fn interleave_round_trips() {
        let templates = TemplateSet::embedded_default();
        let sample = render_task(
            &record(
                RecordPayload::Qa {
                    question: "Is there pneumothorax?".into(),
                    answer: "no".into(),
                },
                1,
            ),
            TaskId::Vqa,
            &vocab(&["unused"]),
            &templates,
        )
        .unwrap();
        let flat = interleave_image_slots(&sample).unwrap();
        let turns = parse_flat_prompt(&flat).unwrap();
        assert_eq!(turns, sample.turns);
        assert_eq!(flat.matches(IMAGE_SLOT).count(), 1);
    }

    #[test]
    fn zero_image_sample_rejected() {
        let templates = TemplateSet::embedded_default();
        let err = render_task(
            &record(
                RecordPayload::Qa {
                    question: "q".into(),
                    answer: "a".into(),
                },
                0,
            ),
            TaskId::Vqa,
            &vocab(&["unused"]),
            &templates,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TaskMismatch { .. }));
    }

    #[test]
    fn diff_vqa_has_reference_and_main_slots() {
        let templates = TemplateSet::embedded_default();
        let sample = render_task(
            &record(
                RecordPayload::DiffQa {
                    question: "What changed?".into(),
                    answer: "the effusion resolved".into(),
                },
                2,
            ),
            TaskId::DiffVqa,
            &vocab(&["unused"]),
            &templates,
        )
        .unwrap();
        assert!(sample.turns[1].content.starts_with("reference: <image> main: <image>"));
        assert_eq!(sample.slot_count(), 2);
    }
}
