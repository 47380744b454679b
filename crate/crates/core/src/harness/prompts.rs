use std::collections::BTreeMap;

use super::HarnessError;

/// Replaced by the field name when a template is rendered.
pub const FIELD_PLACEHOLDER: &str = "{field}";

const LATITUDE: &str = "A latitude can be written in decimal degrees, for example 52.25967, \
or in degrees, minutes and seconds, for example 60°12'59.32\" or 60°12'59\". \
Report the latitude of the well described in this document. Give the latitude only, never the longitude.";

const LONGITUDE: &str = "A longitude can be written in decimal degrees, for example -104.98765, \
or in degrees, minutes and seconds, for example 104°59'15.54\" W. \
Report the longitude of the well described in this document. Give the longitude only, never the latitude.";

const TVD: &str = "Report the true vertical depth (TVD) of the well described in this document. \
Answer with the number and its unit only.";

const NUMERIC: &str = "Report the value of the field \"{field}\" in this document. Answer with the number only.";

const TEXT: &str = "Report the value of the field \"{field}\" in this document. Answer with the value only.";

/// Named prompt templates. Starts from the shipped defaults; run configs
/// add or replace entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        let templates = [
            ("latitude", LATITUDE),
            ("longitude", LONGITUDE),
            ("tvd", TVD),
            ("numeric", NUMERIC),
            ("text", TEXT),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self { templates }
    }
}

impl PromptLibrary {
    pub fn with_overrides(overrides: &BTreeMap<String, String>) -> Result<Self, HarnessError> {
        let mut lib = Self::default();
        for (name, text) in overrides {
            lib.insert(name, text)?;
        }
        Ok(lib)
    }

    pub fn insert(&mut self, name: &str, text: &str) -> Result<(), HarnessError> {
        if text.replace(FIELD_PLACEHOLDER, "").trim().is_empty() {
            return Err(HarnessError::config(format!("prompt template `{name}` is empty")));
        }
        self.templates.insert(name.to_string(), text.to_string());
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.templates.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, name: &str, field: &str) -> Result<String, HarnessError> {
        let text = self
            .templates
            .get(name)
            .ok_or_else(|| HarnessError::config(format!("unknown prompt template `{name}`")))?;
        let rendered = text.replace(FIELD_PLACEHOLDER, field);
        if rendered.trim().is_empty() {
            return Err(HarnessError::config(format!("prompt template `{name}` renders empty")));
        }
        Ok(rendered)
    }
}
