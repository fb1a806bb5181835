//! Unified catalog of images, studies, reports, and annotations, plus the
//! report-text preprocessing rules and MRG scenario assembly.

pub mod adapters;

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Radiographic view position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Pa,
    Ap,
    Lateral,
    Other,
    Unknown,
}

impl View {
    pub fn parse(raw: &str) -> View {
        match raw.trim().to_ascii_lowercase().as_str() {
            "pa" => View::Pa,
            "ap" => View::Ap,
            "lateral" | "ll" | "lat" => View::Lateral,
            "" => View::Unknown,
            _ => View::Other,
        }
    }
}

/// One image in a dataset catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub dataset_id: String,
    pub image_id: String,
    pub path: String,
    pub width: f64,
    pub height: f64,
    pub view: View,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

/// A patient study: ordered images plus the preprocessed report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub images: Vec<ImageRef>,
    /// Cleaned full report text, when present.
    pub report: Option<String>,
    /// Cleaned FINDINGS section, when present and admitted.
    pub findings: Option<String>,
    /// Monotone per-patient ordering token (timestamp or sequence index).
    pub order_key: i64,
}

/// Kind-specific annotation payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationPayload {
    ClassLabels { labels: Vec<String> },
    FindingBox { label: String, bbox: BBox },
    PhraseBox { phrase: String, bbox: BBox },
    OrganBox { organ: String, bbox: BBox },
    RegionBox {
        region: String,
        bbox: BBox,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phrase: Option<String>,
    },
    QaPair { question: String, answer: String },
    DiffQaPair {
        reference_image: String,
        question: String,
        answer: String,
    },
    InstructionPair { question: String, answer: String },
}

/// An annotation attached to one image (the main image for difference QA).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub payload: AnnotationPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Everything loaded from one dataset, with preprocessing rules applied.
///
/// Records carry the declared split and never cross splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub dataset_id: String,
    pub split: Split,
    pub images: BTreeMap<String, ImageRef>,
    pub studies: Vec<StudyRecord>,
    pub annotations: Vec<Annotation>,
    /// Ordered label list for this dataset's classification candidates.
    pub finding_vocabulary: Vec<String>,
}

impl DatasetCatalog {
    pub fn empty(dataset_id: &str, split: Split) -> Self {
        DatasetCatalog {
            dataset_id: dataset_id.to_string(),
            split,
            images: BTreeMap::new(),
            studies: Vec::new(),
            annotations: Vec::new(),
            finding_vocabulary: Vec::new(),
        }
    }

    /// Normalized file stems of all images, used for cross-dataset dedup.
    pub fn image_stems(&self) -> BTreeSet<String> {
        self.images.keys().map(|id| normalized_stem(id)).collect()
    }
}

/// Lowercased file stem: directory prefix and final extension stripped.
pub fn normalized_stem(image_id: &str) -> String {
    let name = image_id.rsplit(['/', '\\']).next().unwrap_or(image_id);
    let stem = match name.rfind('.') {
        Some(pos) if pos > 0 => &name[..pos],
        _ => name,
    };
    stem.to_ascii_lowercase()
}

const ALLOWED_PUNCT: &[char] = &['.', ',', ':', ';', '(', ')', '/', '-'];

fn numbering_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(^|[.:;!?]\s+)\d{1,2}[.)]\s*").unwrap())
}

/// Report text cleanup: lowercase, drop characters outside
/// letters/digits/`.,:;()/-`, collapse whitespace, then strip enumeration
/// prefixes at sentence starts. Character removal runs first so prefixes
/// it uncovers are still stripped; the result is idempotent.
pub fn clean_report_text(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut cleaned = String::with_capacity(lowered.len());
    for ch in lowered.chars() {
        if ch.is_alphanumeric() || ALLOWED_PUNCT.contains(&ch) {
            cleaned.push(ch);
        } else {
            cleaned.push(' ');
        }
    }
    let mut text = String::with_capacity(cleaned.len());
    let mut last_space = true;
    for ch in cleaned.chars() {
        if ch == ' ' {
            if !last_space {
                text.push(' ');
            }
            last_space = true;
        } else {
            text.push(ch);
            last_space = false;
        }
    }
    // Enumeration prefixes can nest ("1. 2) item"); strip to a fixed point.
    loop {
        let next = numbering_regex().replace_all(&text, "$1").into_owned();
        if next == text {
            break;
        }
        text = next;
    }
    text.trim().to_string()
}

/// Section headers recognized as FINDINGS terminators.
pub const DEFAULT_SECTION_HEADERS: &[&str] =
    &["findings", "impression", "comparison", "indication", "technique"];

/// Text between the `FINDINGS:` header and the next recognized section
/// header (or end of report). Empty sections are treated as missing.
pub fn extract_findings_section(report: &str) -> Option<String> {
    let headers: Vec<String> = DEFAULT_SECTION_HEADERS.iter().map(|h| h.to_string()).collect();
    extract_findings_section_with(report, &headers)
}

pub fn extract_findings_section_with(report: &str, headers: &[String]) -> Option<String> {
    let lower = report.to_lowercase();
    let start_pos = find_header(&lower, "findings", 0)?;
    let mut end = lower.len();
    for header in headers {
        if let Some(pos) = find_header(&lower, header, start_pos) {
            end = end.min(header_start(&lower, header, start_pos, pos));
        }
    }
    let section = report[start_pos..end].trim();
    if section.is_empty() {
        None
    } else {
        Some(section.to_string())
    }
}

/// Position just after `header:` (first occurrence at or after `from`), or
/// None when absent.
fn find_header(lower: &str, header: &str, from: usize) -> Option<usize> {
    let mut search = from;
    while let Some(rel) = lower[search..].find(header) {
        let at = search + rel;
        let after = at + header.len();
        let rest = lower[after..].trim_start();
        let boundary_ok = at == 0
            || !lower[..at]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        if boundary_ok && rest.starts_with(':') {
            let colon = after + (lower[after..].len() - rest.len());
            return Some(colon + 1);
        }
        search = after;
    }
    None
}

/// Start offset of the header word whose content begins at `content_pos`.
fn header_start(lower: &str, header: &str, from: usize, content_pos: usize) -> usize {
    // Walk occurrences again to locate the matched header's word start.
    let mut search = from;
    while let Some(rel) = lower[search..].find(header) {
        let at = search + rel;
        let after = at + header.len();
        let rest = lower[after..].trim_start();
        if rest.starts_with(':') {
            let colon = after + (lower[after..].len() - rest.len());
            if colon + 1 == content_pos {
                return at;
            }
        }
        search = after;
    }
    content_pos
}

/// Minimum findings length, in characters, for a report to enter the corpus.
pub const MIN_FINDINGS_CHARS: usize = 5;

/// True iff the findings text is present and at least five characters long.
pub fn admit_report(findings: &str) -> bool {
    findings.trim().chars().count() >= MIN_FINDINGS_CHARS
}

/// Removal counts from [`exclude_images`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub images_removed: usize,
    pub annotations_removed: usize,
    pub study_images_removed: usize,
    pub studies_dropped: usize,
}

/// Drops every record referencing a blocked image. Difference-QA pairs are
/// removed when either side is blocked. Studies keep their remaining images
/// and are dropped entirely when none remain.
pub fn exclude_images(
    catalog: &DatasetCatalog,
    blocklist: &BTreeSet<String>,
) -> (DatasetCatalog, ExclusionReport) {
    let mut out = catalog.clone();
    let mut report = ExclusionReport::default();
    let blocked = |id: &str| blocklist.contains(id);

    let before = out.images.len();
    out.images.retain(|id, _| !blocked(id));
    report.images_removed = before - out.images.len();

    let before = out.annotations.len();
    out.annotations.retain(|ann| {
        if blocked(&ann.image_id) {
            return false;
        }
        match &ann.payload {
            AnnotationPayload::DiffQaPair { reference_image, .. } => !blocked(reference_image),
            _ => true,
        }
    });
    report.annotations_removed = before - out.annotations.len();

    let mut studies = Vec::with_capacity(out.studies.len());
    for mut study in std::mem::take(&mut out.studies) {
        let before = study.images.len();
        study.images.retain(|img| !blocked(&img.image_id));
        report.study_images_removed += before - study.images.len();
        if study.images.is_empty() && before > 0 {
            report.studies_dropped += 1;
        } else {
            studies.push(study);
        }
    }
    out.studies = studies;
    (out, report)
}

/// MRG input scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SingleImage,
    MultiImage,
    MultiStudy,
}

/// Image-count caps per scenario.
pub const MULTI_IMAGE_MAX: usize = 5;
pub const MULTI_STUDY_COMBINED_MAX: usize = 10;

/// Prior-study context for a multi-study instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorStudy {
    pub study_id: String,
    pub findings: String,
}

/// One renderable MRG instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInstance {
    pub scenario: Scenario,
    /// Natural key used to build the sample id.
    pub key: String,
    pub study_id: String,
    pub patient_id: String,
    /// All images shown, prior-study images first for multi-study.
    pub images: Vec<ImageRef>,
    /// Number of leading entries of `images` that belong to the prior study.
    pub prior_image_count: usize,
    pub prior: Option<PriorStudy>,
    /// Target findings section of the (follow-up) study.
    pub findings: String,
}

/// Expands the catalog's admitted studies into scenario instances.
///
/// - single-image: one instance per image of an admitted study
/// - multi-image: one instance per admitted study with 1..=5 images
/// - multi-study: one instance per admitted study, paired with the
///   patient's previous admitted study when one exists; pairs whose
///   combined image count exceeds 10 are skipped
pub fn scenario_studies(catalog: &DatasetCatalog, scenario: Scenario) -> Vec<ScenarioInstance> {
    let mut admitted: Vec<&StudyRecord> = catalog
        .studies
        .iter()
        .filter(|s| {
            !s.images.is_empty()
                && s.findings.as_deref().map(admit_report).unwrap_or(false)
        })
        .collect();
    admitted.sort_by(|a, b| {
        (&a.patient_id, a.order_key, &a.study_id).cmp(&(&b.patient_id, b.order_key, &b.study_id))
    });

    let mut instances = Vec::new();
    match scenario {
        Scenario::SingleImage => {
            for study in &admitted {
                for image in &study.images {
                    instances.push(ScenarioInstance {
                        scenario,
                        key: format!("{}/{}", study.study_id, image.image_id),
                        study_id: study.study_id.clone(),
                        patient_id: study.patient_id.clone(),
                        images: vec![image.clone()],
                        prior_image_count: 0,
                        prior: None,
                        findings: study.findings.clone().unwrap(),
                    });
                }
            }
        }
        Scenario::MultiImage => {
            for study in &admitted {
                if study.images.len() > MULTI_IMAGE_MAX {
                    continue;
                }
                instances.push(ScenarioInstance {
                    scenario,
                    key: study.study_id.clone(),
                    study_id: study.study_id.clone(),
                    patient_id: study.patient_id.clone(),
                    images: study.images.clone(),
                    prior_image_count: 0,
                    prior: None,
                    findings: study.findings.clone().unwrap(),
                });
            }
        }
        Scenario::MultiStudy => {
            for (i, study) in admitted.iter().enumerate() {
                let prior = if i > 0 && admitted[i - 1].patient_id == study.patient_id {
                    Some(admitted[i - 1])
                } else {
                    None
                };
                let prior_images = prior.map(|p| p.images.len()).unwrap_or(0);
                if prior_images + study.images.len() > MULTI_STUDY_COMBINED_MAX {
                    continue;
                }
                let mut images = Vec::with_capacity(prior_images + study.images.len());
                if let Some(p) = prior {
                    images.extend(p.images.iter().cloned());
                }
                images.extend(study.images.iter().cloned());
                instances.push(ScenarioInstance {
                    scenario,
                    key: study.study_id.clone(),
                    study_id: study.study_id.clone(),
                    patient_id: study.patient_id.clone(),
                    images,
                    prior_image_count: prior_images,
                    prior: prior.map(|p| PriorStudy {
                        study_id: p.study_id.clone(),
                        findings: p.findings.clone().unwrap(),
                    }),
                    findings: study.findings.clone().unwrap(),
                });
            }
        }
    }
    instances
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_empty() {
        assert_eq!(clean_report_text(""), "");
    }

    #[test]
    fn clean_strips_numbering_and_spaces() {
        assert_eq!(clean_report_text("1. No  acute process.\n\n"), "no acute process.");
    }

    #[test]
    fn clean_removes_special_characters() {
        assert_eq!(clean_report_text("Heart size\u{2014}normal***"), "heart size normal");
    }

    #[test]
    fn clean_keeps_basic_punctuation() {
        assert_eq!(
            clean_report_text("Lungs: clear; no edema, effusion (small)."),
            "lungs: clear; no edema, effusion (small)."
        );
    }

    #[test]
    fn clean_strips_mid_report_numbering() {
        assert_eq!(
            clean_report_text("Notes: 1. clear lungs. 2) stable heart."),
            "notes: clear lungs. stable heart."
        );
    }

    #[test]
    fn findings_delimited_by_next_header() {
        assert_eq!(
            extract_findings_section("FINDINGS: clear lungs. IMPRESSION: normal."),
            Some("clear lungs.".to_string())
        );
    }

    #[test]
    fn findings_absent() {
        assert_eq!(extract_findings_section("IMPRESSION: normal."), None);
    }

    #[test]
    fn findings_empty_section_is_missing() {
        assert_eq!(extract_findings_section("FINDINGS:"), None);
        assert_eq!(extract_findings_section("FINDINGS:   IMPRESSION: ok."), None);
    }

    #[test]
    fn findings_runs_to_end_without_terminator() {
        assert_eq!(
            extract_findings_section("FINDINGS: low lung volumes."),
            Some("low lung volumes.".to_string())
        );
    }

    #[test]
    fn findings_case_insensitive() {
        assert_eq!(
            extract_findings_section("findings: ok. impression: fine."),
            Some("ok.".to_string())
        );
    }

    #[test]
    fn admit_length_rule() {
        assert!(!admit_report("abc"));
        assert!(!admit_report(""));
        assert!(admit_report("clear lungs."));
    }

    fn image(id: &str, study: &str) -> ImageRef {
        ImageRef {
            dataset_id: "d".into(),
            image_id: id.into(),
            path: format!("{id}.png"),
            width: 100.0,
            height: 100.0,
            view: View::Pa,
            study_id: Some(study.into()),
            patient_id: Some("p1".into()),
        }
    }

    fn study(id: &str, order: i64, n_images: usize, findings: &str) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            patient_id: "p1".into(),
            images: (0..n_images).map(|i| image(&format!("{id}-img{i}"), id)).collect(),
            report: Some(findings.to_string()),
            findings: Some(findings.to_string()),
            order_key: order,
        }
    }

    fn catalog_with(studies: Vec<StudyRecord>) -> DatasetCatalog {
        let mut cat = DatasetCatalog::empty("d", Split::Train);
        for s in &studies {
            for img in &s.images {
                cat.images.insert(img.image_id.clone(), img.clone());
            }
        }
        cat.studies = studies;
        cat
    }

    #[test]
    fn single_image_instances_per_image() {
        let cat = catalog_with(vec![study("s1", 0, 3, "clear lungs.")]);
        let out = scenario_studies(&cat, Scenario::SingleImage);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|i| i.images.len() == 1));
    }

    #[test]
    fn multi_image_caps_at_five() {
        let cat = catalog_with(vec![study("s1", 0, 6, "clear lungs."), study("s2", 1, 5, "clear lungs.")]);
        let out = scenario_studies(&cat, Scenario::MultiImage);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].study_id, "s2");
    }

    #[test]
    fn one_image_study_valid_everywhere() {
        let cat = catalog_with(vec![study("s1", 0, 1, "clear lungs.")]);
        for scenario in [Scenario::SingleImage, Scenario::MultiImage, Scenario::MultiStudy] {
            assert_eq!(scenario_studies(&cat, scenario).len(), 1);
        }
    }

    #[test]
    fn multi_study_pairs_consecutive() {
        let cat = catalog_with(vec![
            study("s1", 10, 2, "first findings."),
            study("s2", 20, 2, "second findings."),
            study("s3", 30, 2, "third findings."),
        ]);
        let out = scenario_studies(&cat, Scenario::MultiStudy);
        assert_eq!(out.len(), 3);
        assert!(out[0].prior.is_none());
        assert_eq!(out[1].prior.as_ref().unwrap().study_id, "s1");
        assert_eq!(out[2].prior.as_ref().unwrap().study_id, "s2");
        assert_eq!(out[1].prior_image_count, 2);
        assert_eq!(out[1].images.len(), 4);
    }

    #[test]
    fn multi_study_prior_ordering_holds() {
        let cat = catalog_with(vec![study("s2", 20, 1, "later."), study("s1", 10, 1, "earlier.")]);
        let out = scenario_studies(&cat, Scenario::MultiStudy);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].study_id, "s2");
        assert_eq!(out[1].prior.as_ref().unwrap().study_id, "s1");
    }

    #[test]
    fn multi_study_combined_cap() {
        let cat = catalog_with(vec![
            study("s1", 10, 5, "first findings."),
            study("s2", 20, 6, "second findings."),
        ]);
        let out = scenario_studies(&cat, Scenario::MultiStudy);
        // s1 alone is fine; the (s1, s2) pair has 11 images and is skipped.
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].study_id, "s1");
    }

    #[test]
    fn unadmitted_studies_are_skipped() {
        let cat = catalog_with(vec![study("s1", 0, 2, "abc")]);
        assert!(scenario_studies(&cat, Scenario::SingleImage).is_empty());
    }

    #[test]
    fn exclusion_removes_only_blocked() {
        let mut cat = catalog_with(vec![study("s1", 0, 2, "clear lungs.")]);
        cat.annotations.push(Annotation {
            image_id: "s1-img0".into(),
            payload: AnnotationPayload::ClassLabels { labels: vec!["edema".into()] },
        });
        cat.annotations.push(Annotation {
            image_id: "s1-img1".into(),
            payload: AnnotationPayload::ClassLabels { labels: vec!["edema".into()] },
        });
        let blocklist: BTreeSet<String> = ["s1-img0".to_string()].into();
        let (out, report) = exclude_images(&cat, &blocklist);
        assert_eq!(report.images_removed, 1);
        assert_eq!(report.annotations_removed, 1);
        assert_eq!(out.studies[0].images.len(), 1);
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(out.annotations[0].image_id, "s1-img1");
    }

    #[test]
    fn exclusion_empty_blocklist_is_identity() {
        let cat = catalog_with(vec![study("s1", 0, 2, "clear lungs.")]);
        let (out, report) = exclude_images(&cat, &BTreeSet::new());
        assert_eq!(out, cat);
        assert_eq!(report, ExclusionReport::default());
    }

    #[test]
    fn exclusion_total_blocklist_empties_catalog() {
        let cat = catalog_with(vec![study("s1", 0, 2, "clear lungs.")]);
        let blocklist: BTreeSet<String> =
            ["s1-img0".to_string(), "s1-img1".to_string()].into();
        let (out, report) = exclude_images(&cat, &blocklist);
        assert!(out.images.is_empty());
        assert!(out.studies.is_empty());
        assert_eq!(report.images_removed, 2);
        assert_eq!(report.studies_dropped, 1);
    }

    #[test]
    fn stem_normalization() {
        assert_eq!(normalized_stem("dir/IMG_001.png"), "img_001");
        assert_eq!(normalized_stem("IMG_001"), "img_001");
        assert_eq!(normalized_stem("a\\b\\X.Y.dcm"), "x.y");
    }
}
