//! Service and provider configuration, read from a TOML file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use vizprompt_core::llm::{Client, MockProvider, ProviderConfig, RetryPolicy};
use vizprompt_core::pipeline::PipelineConfig;

/// Environment variable naming a mock fixtures file. When set it takes
/// precedence over the configured provider.
pub const MOCK_FIXTURES_ENV: &str = "VIZPROMPT_MOCK_FIXTURES";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Openai,
    Mock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Fixtures file for `kind = "mock"`.
    pub mock_fixtures: Option<PathBuf>,
    /// Delay before the first retry, in milliseconds.
    pub retry_base_ms: Option<u64>,
    #[serde(flatten)]
    pub settings: ProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen_address: String,
    pub state_dir: PathBuf,
    pub default_seed: u64,
    pub cors_allowed_origin: Option<String>,
    pub provider: ProviderSection,
    pub pipeline: PipelineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen_address: "127.0.0.1:8080".into(),
            state_dir: PathBuf::from(".vizprompt"),
            default_seed: 42,
            cors_allowed_origin: None,
            provider: ProviderSection::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: ServiceConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if config.state_dir.is_relative() {
            config.state_dir = base.join(&config.state_dir);
        }
        if let Some(f) = config.provider.mock_fixtures.as_mut().filter(|f| f.is_relative()) {
            *f = base.join(&*f);
        }
        Ok(config)
    }

    /// Config file if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.state_dir.join("datasets")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.state_dir.join("sessions")
    }

    /// Creates the state directories and proves they are writable.
    pub fn prepare_state_dir(&self) -> anyhow::Result<()> {
        for dir in [self.datasets_dir(), self.sessions_dir()] {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let probe = self.state_dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .with_context(|| format!("state_dir {} is not writable", self.state_dir.display()))?;
        std::fs::remove_file(&probe).ok();
        Ok(())
    }

    /// Builds the model client. `VIZPROMPT_MOCK_FIXTURES` overrides the file.
    pub fn client(&self) -> anyhow::Result<Client> {
        let p = &self.provider;
        let retry = RetryPolicy {
            max_retries: p.settings.max_retries,
            base_delay: p.retry_base_ms.map_or(RetryPolicy::default().base_delay, Duration::from_millis),
        };
        let mock_path = std::env::var_os(MOCK_FIXTURES_ENV)
            .map(PathBuf::from)
            .or_else(|| (p.kind == ProviderKind::Mock).then(|| p.mock_fixtures.clone()).flatten());
        if let Some(path) = mock_path {
            let provider = MockProvider::from_file(&path)?;
            return Ok(Client::new(Arc::new(provider), retry));
        }
        if p.kind == ProviderKind::Mock {
            bail!("provider.kind = \"mock\" needs provider.mock_fixtures or {MOCK_FIXTURES_ENV}");
        }
        Ok(Client::from_config(&p.settings)?)
    }
}
