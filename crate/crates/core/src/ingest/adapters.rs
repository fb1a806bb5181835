//! Source-file adapters and per-dataset preprocessing rules.
//!
//! Every annotation source is a CSV file with a header row; the `kind`
//! declared per source selects the expected columns. Box columns use the
//! half-open corner convention unless the source sets `inclusive_corners`,
//! in which case 1 is added to the far edge on ingest. Mask sources carry
//! run-length counts (alternating background/foreground, row-major,
//! background first) in a single space-separated column.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, RleMask};
use crate::ingest::{
    admit_report, clean_report_text, extract_findings_section_with, normalized_stem, Annotation,
    AnnotationPayload, DatasetCatalog, ImageRef, Split, StudyRecord, View,
    DEFAULT_SECTION_HEADERS,
};

/// Parser selected for one source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// `image_id,path,width,height,view,labels` with `|`-separated labels.
    ClassLabels,
    /// `image_id,path,width,height,view,label,x1,y1,x2,y2`
    FindingBoxes,
    /// `image_id,path,width,height,view,label,cx,cy,r`
    FindingCircles,
    /// `image_id,path,width,height,view,label,runs`
    FindingMasks,
    /// `image_id,path,width,height,view,organ,runs`
    OrganMasks,
    /// `image_id,path,width,height,view,phrase,x1,y1,x2,y2`
    PhraseBoxes,
    /// `image_id,path,width,height,view,region,x1,y1,x2,y2,phrase`
    RegionBoxes,
    /// `image_id,path,width,height,view,question,answer`
    QaPairs,
    /// `main_image_id,path,width,height,view,ref_image_id,ref_path,ref_width,ref_height,ref_view,question,answer`
    DiffQaPairs,
    /// `image_id,path,width,height,view,source,task,question,answer`
    InstructionPairs,
    /// `study_id,patient_id,image_id,path,width,height,view,order_key`
    Studies,
    /// `study_id,report`
    Reports,
}

/// One source file of a dataset declaration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDecl {
    pub kind: SourceKind,
    pub path: PathBuf,
    /// Far edges are inclusive pixel indices; add 1 on ingest.
    #[serde(default)]
    pub inclusive_corners: bool,
}

/// A dataset registration: id, split, sources, and rule knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDecl {
    pub id: String,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub source: Vec<SourceDecl>,
    /// Ordered classification vocabulary; defaults to sorted observed labels.
    #[serde(default)]
    pub labels: Vec<String>,
    /// Tasks to render for this dataset; defaults to all supported.
    #[serde(default)]
    pub tasks: Vec<String>,
    /// Remove images whose normalized file stem appears in this dataset.
    #[serde(default)]
    pub dedup_against: Option<String>,
}

fn default_split() -> Split {
    Split::Train
}

/// Cross-dataset context for rules that look at previously loaded catalogs.
#[derive(Debug, Default)]
pub struct LoadContext {
    stems: BTreeMap<String, BTreeSet<String>>,
}

impl LoadContext {
    pub fn register(&mut self, catalog: &DatasetCatalog) {
        self.stems
            .insert(catalog.dataset_id.clone(), catalog.image_stems());
    }

    fn stems_of(&self, dataset_id: &str) -> Option<&BTreeSet<String>> {
        self.stems.get(dataset_id)
    }
}

/// Warnings accumulated while loading (empty files, clamped boxes, drops).
#[derive(Debug, Default)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

/// Dataset ids with special preprocessing rules.
const VINDR: &str = "vindr-cxr";
const RSNA: &str = "rsna";
const COVID19_RADIOGRAPHY: &str = "covid19-radiography";
const RADIALOG: &str = "radialog";
const MIMIC_CXR: &str = "mimic-cxr";

/// Loads one dataset and applies its preprocessing rules.
///
/// Rules by dataset id: `vindr-cxr` merges same-label boxes overlapping by
/// more than 50 percent; `rsna` keeps only the `lung opacity` and `normal`
/// labels and renames the former to `pneumonia`; `covid19-radiography`
/// drops images with more than three mask regions; `radialog` keeps only
/// MIMIC-CXR-sourced rows and drops report-generation instructions;
/// `mimic-cxr` cleans reports, extracts the FINDINGS section, and admits
/// sections of at least five characters. `dedup_against` removes images
/// whose file stem appears in the named, previously loaded dataset.
pub fn load_dataset(
    decl: &DatasetDecl,
    base_dir: &Path,
    ctx: &LoadContext,
) -> Result<(DatasetCatalog, LoadReport)> {
    let mut state = Loader {
        decl,
        catalog: DatasetCatalog::empty(&decl.id, decl.split),
        report: LoadReport::default(),
        mask_regions: BTreeMap::new(),
        raw_reports: BTreeMap::new(),
        study_rows: Vec::new(),
        observed_labels: BTreeSet::new(),
    };
    for source in &decl.source {
        let path = base_dir.join(&source.path);
        state.load_source(source, &path)?;
    }
    state.assemble_studies();
    state.apply_rules(ctx)?;
    let Loader {
        mut catalog,
        report,
        observed_labels,
        ..
    } = state;
    if catalog.finding_vocabulary.is_empty() {
        catalog.finding_vocabulary = if decl.labels.is_empty() {
            observed_labels.into_iter().collect()
        } else {
            decl.labels.clone()
        };
    }
    Ok((catalog, report))
}

struct Loader<'a> {
    decl: &'a DatasetDecl,
    catalog: DatasetCatalog,
    report: LoadReport,
    /// Mask component counts per image, for the >3-region exclusion.
    mask_regions: BTreeMap<String, usize>,
    raw_reports: BTreeMap<String, String>,
    study_rows: Vec<(String, String, ImageRef, i64)>,
    observed_labels: BTreeSet<String>,
}

impl Loader<'_> {
    fn load_source(&mut self, source: &SourceDecl, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::format(&display, 0, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::format(&display, 0, e.to_string()))?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::format(&display, 0, format!("missing column `{name}`")))
        };
        let mut rows = 0u64;
        for (i, record) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let record = record.map_err(|e| Error::format(&display, line, e.to_string()))?;
            let field = |name: &str| -> Result<&str> {
                Ok(record.get(col(name)?).unwrap_or("").trim())
            };
            let numeric = |name: &str| -> Result<f64> {
                field(name)?.parse::<f64>().map_err(|_| {
                    Error::format(&display, line, format!("column `{name}` is not a number"))
                })
            };
            rows += 1;
            match source.kind {
                SourceKind::ClassLabels => {
                    let image = self.image_from(&record, &headers, &display, line, "image_id")?;
                    let labels: Vec<String> = field("labels")?
                        .split('|')
                        .map(|l| l.trim().to_lowercase())
                        .filter(|l| !l.is_empty())
                        .collect();
                    for label in &labels {
                        self.observed_labels.insert(label.clone());
                    }
                    self.catalog.annotations.push(Annotation {
                        image_id: image,
                        payload: AnnotationPayload::ClassLabels { labels },
                    });
                }
                SourceKind::FindingBoxes
                | SourceKind::PhraseBoxes
                | SourceKind::RegionBoxes => {
                    let image = self.image_from(&record, &headers, &display, line, "image_id")?;
                    let far = if source.inclusive_corners { 1.0 } else { 0.0 };
                    let bbox = BBox::new(
                        numeric("x1")?,
                        numeric("y1")?,
                        numeric("x2")? + far,
                        numeric("y2")? + far,
                    )?;
                    let bbox = self.clamp_to_image(&image, bbox, &display, line)?;
                    let payload = match source.kind {
                        SourceKind::FindingBoxes => {
                            let label = field("label")?.to_lowercase();
                            self.observed_labels.insert(label.clone());
                            AnnotationPayload::FindingBox { label, bbox }
                        }
                        SourceKind::PhraseBoxes => AnnotationPayload::PhraseBox {
                            phrase: field("phrase")?.to_string(),
                            bbox,
                        },
                        _ => {
                            let phrase = field("phrase")?.to_string();
                            AnnotationPayload::RegionBox {
                                region: field("region")?.to_lowercase(),
                                bbox,
                                phrase: (!phrase.is_empty()).then_some(phrase),
                            }
                        }
                    };
                    self.catalog.annotations.push(Annotation { image_id: image, payload });
                }
                SourceKind::FindingCircles => {
                    let image = self.image_from(&record, &headers, &display, line, "image_id")?;
                    let bbox =
                        geometry::circle_to_bbox(numeric("cx")?, numeric("cy")?, numeric("r")?)?;
                    let label = field("label")?.to_lowercase();
                    self.observed_labels.insert(label.clone());
                    let bbox = self.clamp_to_image(&image, bbox, &display, line)?;
                    self.catalog.annotations.push(Annotation {
                        image_id: image,
                        payload: AnnotationPayload::FindingBox { label, bbox },
                    });
                }
                SourceKind::FindingMasks | SourceKind::OrganMasks => {
                    let image = self.image_from(&record, &headers, &display, line, "image_id")?;
                    let runs: Vec<u32> = field("runs")?
                        .split_whitespace()
                        .map(|r| {
                            r.parse::<u32>().map_err(|_| {
                                Error::format(&display, line, "run counts must be integers")
                            })
                        })
                        .collect::<Result<_>>()?;
                    let mask = RleMask::new(numeric("width")? as u32, numeric("height")? as u32, runs)
                        .map_err(|e| Error::format(&display, line, e.to_string()))?;
                    let boxes = geometry::mask_to_bboxes(&mask);
                    // The region-count exclusion looks at finding masks
                    // only; organ masks always have a few large regions.
                    if source.kind == SourceKind::FindingMasks {
                        *self.mask_regions.entry(image.clone()).or_insert(0) += boxes.len();
                    }
                    for bbox in boxes {
                        let payload = match source.kind {
                            SourceKind::FindingMasks => {
                                let label = field("label")?.to_lowercase();
                                self.observed_labels.insert(label.clone());
                                AnnotationPayload::FindingBox { label, bbox }
                            }
                            _ => AnnotationPayload::OrganBox {
                                organ: field("organ")?.to_lowercase(),
                                bbox,
                            },
                        };
                        self.catalog.annotations.push(Annotation {
                            image_id: image.clone(),
                            payload,
                        });
                    }
                }
                SourceKind::QaPairs => {
                    let image = self.image_from(&record, &headers, &display, line, "image_id")?;
                    self.catalog.annotations.push(Annotation {
                        image_id: image,
                        payload: AnnotationPayload::QaPair {
                            question: field("question")?.to_string(),
                            answer: field("answer")?.to_string(),
                        },
                    });
                }
                SourceKind::DiffQaPairs => {
                    let main = self.image_from(&record, &headers, &display, line, "main_image_id")?;
                    let reference = ImageRef {
                        dataset_id: self.decl.id.clone(),
                        image_id: field("ref_image_id")?.to_string(),
                        path: field("ref_path")?.to_string(),
                        width: numeric("ref_width")?,
                        height: numeric("ref_height")?,
                        view: View::parse(field("ref_view")?),
                        study_id: None,
                        patient_id: None,
                    };
                    let ref_id = reference.image_id.clone();
                    self.insert_image(reference, &display, line)?;
                    self.catalog.annotations.push(Annotation {
                        image_id: main,
                        payload: AnnotationPayload::DiffQaPair {
                            reference_image: ref_id,
                            question: field("question")?.to_string(),
                            answer: field("answer")?.to_string(),
                        },
                    });
                }
                SourceKind::InstructionPairs => {
                    let image = self.image_from(&record, &headers, &display, line, "image_id")?;
                    // RaDialog rules are applied here so excluded rows never
                    // register annotations.
                    if self.decl.id == RADIALOG {
                        if field("task")?.eq_ignore_ascii_case("rg") {
                            continue;
                        }
                        if !field("source")?.eq_ignore_ascii_case(MIMIC_CXR) {
                            continue;
                        }
                    }
                    self.catalog.annotations.push(Annotation {
                        image_id: image,
                        payload: AnnotationPayload::InstructionPair {
                            question: field("question")?.to_string(),
                            answer: field("answer")?.to_string(),
                        },
                    });
                }
                SourceKind::Studies => {
                    let study_id = field("study_id")?.to_string();
                    let patient_id = field("patient_id")?.to_string();
                    let order_key = field("order_key")?.parse::<i64>().map_err(|_| {
                        Error::format(&display, line, "order_key must be an integer")
                    })?;
                    let image = ImageRef {
                        dataset_id: self.decl.id.clone(),
                        image_id: field("image_id")?.to_string(),
                        path: field("path")?.to_string(),
                        width: numeric("width")?,
                        height: numeric("height")?,
                        view: View::parse(field("view")?),
                        study_id: Some(study_id.clone()),
                        patient_id: Some(patient_id.clone()),
                    };
                    self.insert_image(image.clone(), &display, line)?;
                    self.study_rows.push((study_id, patient_id, image, order_key));
                }
                SourceKind::Reports => {
                    self.raw_reports
                        .insert(field("study_id")?.to_string(), field("report")?.to_string());
                }
            }
        }
        if rows == 0 {
            self.report
                .warnings
                .push(format!("{display}: no data rows"));
        }
        Ok(())
    }

    /// Reads the shared image columns and registers the image.
    fn image_from(
        &mut self,
        record: &csv::StringRecord,
        headers: &csv::StringRecord,
        path: &str,
        line: u64,
        id_column: &str,
    ) -> Result<String> {
        let get = |name: &str| -> Result<&str> {
            headers
                .iter()
                .position(|h| h == name)
                .and_then(|i| record.get(i))
                .map(str::trim)
                .ok_or_else(|| Error::format(path, line, format!("missing column `{name}`")))
        };
        let width: f64 = get("width")?
            .parse()
            .map_err(|_| Error::format(path, line, "width must be a number"))?;
        let height: f64 = get("height")?
            .parse()
            .map_err(|_| Error::format(path, line, "height must be a number"))?;
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::format(path, line, "image dimensions must be positive"));
        }
        let image = ImageRef {
            dataset_id: self.decl.id.clone(),
            image_id: get(id_column)?.to_string(),
            path: get("path")?.to_string(),
            width,
            height,
            view: View::parse(get("view")?),
            study_id: None,
            patient_id: None,
        };
        let id = image.image_id.clone();
        self.insert_image(image, path, line)?;
        Ok(id)
    }

    /// Registers an image, tolerating exact repeats of the same metadata.
    fn insert_image(&mut self, image: ImageRef, path: &str, line: u64) -> Result<()> {
        if image.image_id.is_empty() {
            return Err(Error::format(path, line, "empty image id"));
        }
        match self.catalog.images.get(&image.image_id) {
            None => {
                self.catalog.images.insert(image.image_id.clone(), image);
                Ok(())
            }
            Some(existing) if *existing == image => Ok(()),
            Some(_) => Err(Error::DuplicateImage {
                dataset: self.decl.id.clone(),
                image: image.image_id,
            }),
        }
    }

    /// Clamps a box to its image bounds, warning when coordinates change.
    fn clamp_to_image(&mut self, image_id: &str, bbox: BBox, path: &str, line: u64) -> Result<BBox> {
        let image = self.catalog.images.get(image_id).ok_or_else(|| {
            Error::format(path, line, format!("box references unknown image `{image_id}`"))
        })?;
        if bbox.x2 <= image.width && bbox.y2 <= image.height {
            return Ok(bbox);
        }
        self.report.warnings.push(format!(
            "{path}:{line}: box ({}, {}, {}, {}) exceeds {}x{} image `{image_id}`; clamped",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2, image.width, image.height
        ));
        BBox::new(
            bbox.x1.min(image.width),
            bbox.y1.min(image.height),
            bbox.x2.min(image.width),
            bbox.y2.min(image.height),
        )
    }

    fn assemble_studies(&mut self) {
        if self.study_rows.is_empty() {
            return;
        }
        let mut grouped: BTreeMap<String, (String, Vec<ImageRef>, i64)> = BTreeMap::new();
        for (study_id, patient_id, image, order_key) in self.study_rows.drain(..) {
            let entry = grouped
                .entry(study_id)
                .or_insert_with(|| (patient_id, Vec::new(), order_key));
            entry.1.push(image);
        }
        let headers: Vec<String> = DEFAULT_SECTION_HEADERS.iter().map(|h| h.to_string()).collect();
        for (study_id, (patient_id, images, order_key)) in grouped {
            let (report, findings) = match self.raw_reports.get(&study_id) {
                Some(raw) => {
                    let cleaned = clean_report_text(raw);
                    let findings = extract_findings_section_with(raw, &headers)
                        .map(|section| clean_report_text(&section))
                        .filter(|section| admit_report(section));
                    (Some(cleaned), findings)
                }
                None => (None, None),
            };
            self.catalog.studies.push(StudyRecord {
                study_id,
                patient_id,
                images,
                report,
                findings,
                order_key,
            });
        }
        self.catalog.studies.sort_by(|a, b| {
            (&a.patient_id, a.order_key, &a.study_id).cmp(&(&b.patient_id, b.order_key, &b.study_id))
        });
    }

    fn apply_rules(&mut self, ctx: &LoadContext) -> Result<()> {
        match self.decl.id.as_str() {
            VINDR => self.merge_same_label_boxes()?,
            RSNA => self.apply_rsna_labels(),
            COVID19_RADIOGRAPHY => self.drop_many_region_images(),
            _ => {}
        }
        if let Some(other) = &self.decl.dedup_against {
            let stems = ctx
                .stems_of(other)
                .ok_or_else(|| Error::UnknownDataset(format!("{other} (dedup target not loaded)")))?;
            self.drop_overlapping_stems(stems);
        }
        Ok(())
    }

    /// Boxes of the same label on the same image merge when they overlap by
    /// more than 50 percent of the smaller box.
    fn merge_same_label_boxes(&mut self) -> Result<()> {
        let mut grouped: BTreeMap<(String, String), Vec<BBox>> = BTreeMap::new();
        let mut rest = Vec::new();
        for ann in self.catalog.annotations.drain(..) {
            match ann.payload {
                AnnotationPayload::FindingBox { label, bbox } => {
                    grouped
                        .entry((ann.image_id, label))
                        .or_default()
                        .push(bbox);
                }
                _ => rest.push(ann),
            }
        }
        for ((image_id, label), boxes) in grouped {
            for bbox in geometry::merge_overlapping(&boxes, 0.5)? {
                rest.push(Annotation {
                    image_id: image_id.clone(),
                    payload: AnnotationPayload::FindingBox {
                        label: label.clone(),
                        bbox,
                    },
                });
            }
        }
        self.catalog.annotations = rest;
        Ok(())
    }

    /// Keeps only `lung opacity` and `normal`, renaming the former to
    /// `pneumonia`.
    fn apply_rsna_labels(&mut self) {
        let rename = |label: &str| -> Option<String> {
            match label {
                "lung opacity" => Some("pneumonia".to_string()),
                "normal" => Some("normal".to_string()),
                _ => None,
            }
        };
        self.catalog.annotations.retain_mut(|ann| match &mut ann.payload {
            AnnotationPayload::ClassLabels { labels } => {
                *labels = labels.iter().filter_map(|l| rename(l)).collect();
                true
            }
            AnnotationPayload::FindingBox { label, .. } => match rename(label) {
                Some(new) => {
                    *label = new;
                    true
                }
                None => false,
            },
            _ => true,
        });
        self.observed_labels = self
            .observed_labels
            .iter()
            .filter_map(|l| rename(l))
            .collect();
    }

    /// Excludes images with more than three mask regions.
    fn drop_many_region_images(&mut self) {
        let dropped: BTreeSet<String> = self
            .mask_regions
            .iter()
            .filter(|(_, &count)| count > 3)
            .map(|(id, _)| id.clone())
            .collect();
        if dropped.is_empty() {
            return;
        }
        for id in &dropped {
            self.report
                .warnings
                .push(format!("image `{id}` excluded: more than three mask regions"));
        }
        self.catalog.images.retain(|id, _| !dropped.contains(id));
        self.catalog
            .annotations
            .retain(|ann| !dropped.contains(&ann.image_id));
    }

    fn drop_overlapping_stems(&mut self, stems: &BTreeSet<String>) {
        let dropped: BTreeSet<String> = self
            .catalog
            .images
            .keys()
            .filter(|id| stems.contains(&normalized_stem(id)))
            .cloned()
            .collect();
        for id in &dropped {
            self.report
                .warnings
                .push(format!("image `{id}` removed: overlaps dedup target"));
        }
        self.catalog.images.retain(|id, _| !dropped.contains(id));
        self.catalog
            .annotations
            .retain(|ann| !dropped.contains(&ann.image_id));
    }
}
