//! Build configuration: dataset declarations, vocabulary, labeler
//! endpoint, blocklists, and output location. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conversation::template::TemplateSet;
use crate::conversation::FindingVocabulary;
use crate::corpus::sha256_hex;
use crate::error::{Error, Result};
use crate::ingest::adapters::DatasetDecl;
use crate::labeler::LabelerEndpoint;

/// Observation vocabulary used by CoT prompting and clinical scoring.
/// CheXbert-style 14-label set; deployers override it in the config to
/// match their labeler.
pub const DEFAULT_VOCABULARY: &[&str] = &[
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural other",
    "fracture",
    "support devices",
    "no finding",
];

pub const DEFAULT_NO_FINDING: &str = "no finding";

/// The five-label subset scored separately when present in the vocabulary.
pub const F1_SUBSET_5: &[&str] = &[
    "cardiomegaly",
    "edema",
    "consolidation",
    "atelectasis",
    "pleural effusion",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyConfig {
    pub findings: Vec<String>,
    #[serde(default)]
    pub no_finding: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocklistDecl {
    pub path: PathBuf,
    /// Dataset ids the blocklist does not apply to (the list's own source).
    #[serde(default)]
    pub exempt: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub template_file: Option<PathBuf>,
    #[serde(default)]
    pub mixture_spec: Option<PathBuf>,
    /// Overrides the template file's system prompt.
    #[serde(default)]
    pub system_prompt: Option<String>,
    #[serde(default)]
    pub vocabulary: Option<VocabularyConfig>,
    #[serde(default = "default_labeler")]
    pub labeler: LabelerEndpoint,
    #[serde(default, rename = "blocklist")]
    pub blocklists: Vec<BlocklistDecl>,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetDecl>,

    #[serde(skip)]
    base_dir: PathBuf,
    #[serde(skip)]
    raw: String,
}

fn default_version() -> u32 {
    1
}

fn default_labeler() -> LabelerEndpoint {
    LabelerEndpoint::KeywordStub {
        keywords: Default::default(),
    }
}

impl ForgeConfig {
    /// In-memory config with every default: stub labeler, built-in
    /// vocabulary and templates. Enough for `eval` without a config file.
    pub fn builtin() -> ForgeConfig {
        ForgeConfig {
            version: 1,
            seed: 0,
            output_dir: PathBuf::from("."),
            template_file: None,
            mixture_spec: None,
            system_prompt: None,
            vocabulary: None,
            labeler: default_labeler(),
            blocklists: Vec::new(),
            datasets: Vec::new(),
            base_dir: PathBuf::from("."),
            raw: String::new(),
        }
    }

    pub fn load(path: &Path) -> Result<ForgeConfig> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ForgeConfig = toml::from_str(&raw).map_err(|e| Error::Toml {
            path: path.into(),
            source: Box::new(e),
        })?;
        config.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        config.raw = raw;
        let mut seen = std::collections::BTreeSet::new();
        for decl in &config.datasets {
            if !seen.insert(decl.id.as_str()) {
                return Err(Error::Config(format!("dataset `{}` declared twice", decl.id)));
            }
        }
        Ok(config)
    }

    /// Paths in the config resolve relative to the config file.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.raw.as_bytes())
    }

    pub fn vocabulary(&self) -> Result<FindingVocabulary> {
        match &self.vocabulary {
            Some(v) => FindingVocabulary::new(v.findings.clone(), v.no_finding.clone()),
            None => FindingVocabulary::new(
                DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
                Some(DEFAULT_NO_FINDING.to_string()),
            ),
        }
    }

    /// Loads the template set (file or embedded default) and applies the
    /// system-prompt override. The returned hash covers both.
    pub fn templates(&self) -> Result<(TemplateSet, String)> {
        let mut set = match &self.template_file {
            Some(path) => TemplateSet::load(&self.resolve(path))?,
            None => TemplateSet::embedded_default(),
        };
        let mut hashed: Vec<u8> = set.raw_bytes().to_vec();
        if let Some(prompt) = &self.system_prompt {
            set.system_prompt = prompt.clone();
            hashed.extend_from_slice(b"\nsystem_prompt_override=");
            hashed.extend_from_slice(prompt.as_bytes());
        }
        let hash = sha256_hex(&hashed);
        Ok((set, hash))
    }

    /// The labeler endpoint with file paths resolved against the config.
    pub fn resolved_labeler(&self) -> LabelerEndpoint {
        match &self.labeler {
            LabelerEndpoint::PrecomputedFile { path } => LabelerEndpoint::PrecomputedFile {
                path: self.resolve(path),
            },
            other => other.clone(),
        }
    }

    /// Subset labels scored separately, when fully covered by the
    /// vocabulary.
    pub fn f1_subset(&self, vocab: &FindingVocabulary) -> Option<Vec<String>> {
        let subset: Vec<String> = F1_SUBSET_5.iter().map(|s| s.to_string()).collect();
        subset.iter().all(|l| vocab.contains(l)).then_some(subset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, content: &str) -> PathBuf {
        let path = dir.join("forge.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_loads_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "output_dir = \"out\"\n");
        let config = ForgeConfig::load(&path).unwrap();
        assert_eq!(config.seed, 0);
        let vocab = config.vocabulary().unwrap();
        assert_eq!(vocab.names().len(), 14);
        assert_eq!(vocab.no_finding(), Some("no finding"));
        assert!(config.f1_subset(&vocab).is_some());
        let (templates, _) = config.templates().unwrap();
        assert!(templates.system_prompt.contains("medical assistant"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "output_dir = \"out\"\nbogus = 1\n");
        assert!(matches!(ForgeConfig::load(&path), Err(Error::Toml { .. })));
    }

    #[test]
    fn system_prompt_override_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = ForgeConfig::load(&write_config(dir.path(), "output_dir = \"out\"\n")).unwrap();
        let (_, hash_a) = a.templates().unwrap();
        let b = ForgeConfig::load(&write_config(
            dir.path(),
            "output_dir = \"out\"\nsystem_prompt = \"You are a terse assistant.\"\n",
        ))
        .unwrap();
        let (set_b, hash_b) = b.templates().unwrap();
        assert_ne!(hash_a, hash_b);
        assert_eq!(set_b.system_prompt, "You are a terse assistant.");
    }

    #[test]
    fn duplicate_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "output_dir = \"out\"\n[[dataset]]\nid = \"a\"\n[[dataset]]\nid = \"a\"\n",
        );
        assert!(matches!(ForgeConfig::load(&path), Err(Error::Config(_))));
    }
}
