use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_image, read_text, HarnessError, PromptLibrary, RunConfig};
use crate::filters::FieldKind;
use crate::sweep::SweepItem;

pub const DEFAULT_GROUP: &str = "default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FieldKind>,
    /// Prompt template name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(rename = "field", default)]
    pub fields: Vec<FieldRecord>,
}

/// A dataset manifest (TOML):
///
/// ```toml
/// group = "colorado"
///
/// [[document]]
/// id = "co-0001"
/// image = "images/co-0001.png"
///
/// [[document.field]]
/// name = "latitude"
/// ground_truth = "39.8969861"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(rename = "document", default)]
    pub documents: Vec<DocumentRecord>,
}

impl Manifest {
    /// Reads a manifest; image paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = read_text(path)?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for doc in &mut m.documents {
            if doc.image.is_relative() {
                doc.image = base.join(&doc.image);
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn group_of<'a>(&'a self, doc: &'a DocumentRecord) -> &'a str {
        doc.group.as_deref().or(self.group.as_deref()).unwrap_or(DEFAULT_GROUP)
    }

    /// Unique ids, at least one field per document, unique field names per
    /// document, and every prompt reference resolvable.
    pub fn validate(&self, config: &RunConfig, prompts: &PromptLibrary) -> Result<(), HarnessError> {
        let mut ids = BTreeSet::new();
        for doc in &self.documents {
            if doc.id.trim().is_empty() {
                return Err(HarnessError::config("document with empty id"));
            }
            if !ids.insert(doc.id.as_str()) {
                return Err(HarnessError::config(format!("duplicate document id `{}`", doc.id)));
            }
            if doc.fields.is_empty() {
                return Err(HarnessError::config(format!("document `{}` lists no fields", doc.id)));
            }
            let mut names = BTreeSet::new();
            for f in &doc.fields {
                if !names.insert(f.name.as_str()) {
                    return Err(HarnessError::config(format!("document `{}` repeats field `{}`", doc.id, f.name)));
                }
                let kind = config.field_kind(&f.name, f.kind);
                let template = config.template_for(prompts, &f.name, kind, f.prompt.as_deref());
                if !prompts.contains(&template) {
                    return Err(HarnessError::config(format!(
                        "document `{}` field `{}` names unknown prompt template `{template}`",
                        doc.id, f.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Documents whose id is in `ids`, in manifest order. Unknown ids are an
    /// error.
    pub fn select(&self, ids: &[String]) -> Result<Manifest, HarnessError> {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let known: BTreeSet<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        if let Some(missing) = wanted.iter().find(|id| !known.contains(*id)) {
            return Err(HarnessError::config(format!("id `{missing}` is not in the manifest")));
        }
        Ok(Manifest {
            group: self.group.clone(),
            documents: self
                .documents
                .iter()
                .filter(|d| wanted.contains(d.id.as_str()))
                .cloned()
                .collect(),
        })
    }

    /// Loads every image and pairs it with each of its field tasks.
    pub fn sweep_items(&self, config: &RunConfig, prompts: &PromptLibrary) -> Result<Vec<SweepItem>, HarnessError> {
        self.validate(config, prompts)?;
        let mut items = Vec::new();
        for doc in &self.documents {
            let image = load_image(&doc.image)?;
            for f in &doc.fields {
                items.push(SweepItem {
                    document_id: doc.id.clone(),
                    group: self.group_of(doc).to_string(),
                    image: image.clone(),
                    task: config.task(prompts, &f.name, f.kind, f.prompt.as_deref())?,
                    ground_truth: f.ground_truth.clone(),
                });
            }
        }
        Ok(items)
    }

    pub fn has_ground_truth(&self) -> bool {
        self.documents.iter().flat_map(|d| &d.fields).any(|f| f.ground_truth.is_some())
    }
}

/// One id per line; blank lines and `#` comments are skipped.
pub fn read_id_list(path: &Path) -> Result<Vec<String>, HarnessError> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}
