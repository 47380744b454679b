use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{read_text, HarnessError, PromptLibrary};
use crate::backend::{Backend, MockBackend, MockScript, RemoteBackend, RemoteConfig, DEFAULT_MAX_TOKENS};
use crate::filters::{FieldKind, FilterChain};
use crate::grid::GridSpec;
use crate::selection::{EngineSettings, ExtractionTask};
use crate::sweep::SweepConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Falls back to `DOCPATCH_BACKEND_URL`.
    pub url: Option<String>,
    /// Relative paths resolve against the config file's directory.
    pub mock_script: Option<PathBuf>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub parallelism: usize,
    pub max_tokens: u32,
    pub include_stop_token: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Remote,
            url: None,
            mock_script: None,
            timeout_secs: 120,
            retries: 2,
            parallelism: 4,
            max_tokens: DEFAULT_MAX_TOKENS,
            include_stop_token: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: Option<FieldKind>,
    /// Template name in the prompt library.
    pub prompt: Option<String>,
    /// Filter rule names; the kind's default chain when absent.
    pub filters: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 0.2, seed: 0 }
    }
}

/// A run config file (TOML). Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub backend: BackendConfig,
    pub fields: BTreeMap<String, FieldConfig>,
    pub prompts: BTreeMap<String, String>,
    pub sweep: SweepConfig,
    pub noise: NoiseConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))
    }

    /// Parses and validates; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        if let Some(p) = &cfg.backend.mock_script {
            if p.is_relative() {
                cfg.backend.mock_script = Some(base_dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let prompts = self.prompt_library()?;
        for (name, field) in &self.fields {
            if let Some(t) = &field.prompt {
                if !prompts.contains(t) {
                    return Err(HarnessError::config(format!("field `{name}` names unknown prompt template `{t}`")));
                }
            }
            self.filter_chain(name, self.field_kind(name, None))?;
        }
        self.sweep.validate().map_err(|e| HarnessError::config(e.to_string()))?;
        if self.backend.parallelism == 0 {
            return Err(HarnessError::config("backend.parallelism must be at least 1"));
        }
        if self.backend.max_tokens == 0 {
            return Err(HarnessError::config("backend.max_tokens must be at least 1"));
        }
        if !self.noise.sigma.is_finite() || self.noise.sigma < 0.0 {
            return Err(HarnessError::Sigma(self.noise.sigma));
        }
        Ok(())
    }

    pub fn prompt_library(&self) -> Result<PromptLibrary, HarnessError> {
        PromptLibrary::with_overrides(&self.prompts)
    }

    pub fn engine_settings(&self) -> EngineSettings {
        EngineSettings {
            max_tokens: self.backend.max_tokens,
            include_stop_token: self.backend.include_stop_token,
            parallelism: None,
        }
    }

    /// Kind for a field: explicit override, then the `[fields]` table, then
    /// the field name itself (`latitude`, `tvd`, ...), then free text.
    pub fn field_kind(&self, name: &str, explicit: Option<FieldKind>) -> FieldKind {
        explicit
            .or_else(|| self.fields.get(name).and_then(|f| f.kind))
            .or_else(|| name.parse().ok())
            .unwrap_or(FieldKind::FreeText)
    }

    fn filter_chain(&self, name: &str, kind: FieldKind) -> Result<FilterChain, HarnessError> {
        match self.fields.get(name).and_then(|f| f.filters.as_ref()) {
            Some(names) => FilterChain::from_names(kind, names)
                .map_err(|e| HarnessError::config(format!("field `{name}`: {e}"))),
            None => Ok(FilterChain::default_for(kind)),
        }
    }

    /// Template name for a field: explicit, `[fields]` table, a template
    /// named after the field, then the kind's default template.
    pub fn template_for(&self, prompts: &PromptLibrary, name: &str, kind: FieldKind, explicit: Option<&str>) -> String {
        if let Some(t) = explicit.or_else(|| self.fields.get(name).and_then(|f| f.prompt.as_deref())) {
            return t.to_string();
        }
        if prompts.contains(name) {
            return name.to_string();
        }
        match kind {
            FieldKind::Latitude => "latitude",
            FieldKind::Longitude => "longitude",
            FieldKind::Depth => "tvd",
            FieldKind::Numeric => "numeric",
            FieldKind::FreeText => "text",
        }
        .to_string()
    }

    /// Builds the extraction task for one field.
    pub fn task(
        &self,
        prompts: &PromptLibrary,
        name: &str,
        kind: Option<FieldKind>,
        template: Option<&str>,
    ) -> Result<ExtractionTask, HarnessError> {
        let kind = self.field_kind(name, kind);
        let template = self.template_for(prompts, name, kind, template);
        let prompt = prompts.render(&template, name)?;
        Ok(ExtractionTask::new(name, prompt, self.filter_chain(name, kind)?))
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>, HarnessError> {
        let b = &self.backend;
        match b.kind {
            BackendKind::Mock => {
                let path = b
                    .mock_script
                    .as_ref()
                    .ok_or_else(|| HarnessError::config("backend.kind = \"mock\" needs backend.mock_script"))?;
                let script = MockScript::from_path(path).map_err(|e| HarnessError::config(e.to_string()))?;
                Ok(Box::new(MockBackend::new(script).with_parallelism(b.parallelism)))
            }
            BackendKind::Remote => {
                let mut remote = match (&b.url, RemoteConfig::from_env()) {
                    (Some(url), env) => {
                        let mut cfg = RemoteConfig::new(url.clone());
                        cfg.bearer_token = env.and_then(|e| e.bearer_token);
                        cfg
                    }
                    (None, Some(env)) => env,
                    (None, None) => {
                        return Err(HarnessError::config(format!(
                            "no backend url: set backend.url or {}",
                            crate::backend::ENV_BACKEND_URL
                        )))
                    }
                };
                remote.timeout = Duration::from_secs(b.timeout_secs.max(1));
                remote.retries = b.retries;
                remote.parallelism = b.parallelism;
                Ok(Box::new(RemoteBackend::new(remote)))
            }
        }
    }
}
