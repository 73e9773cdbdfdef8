//! Scenario configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::{all_attributes, CapturedDocument, EidToken};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Platform {
    #[serde(default = "yes")]
    pub tee_available: bool,
    #[serde(default = "yes")]
    pub se_available: bool,
    #[serde(default = "Platform::default_se_id")]
    pub se_id: String,
    #[serde(default = "Platform::default_budget")]
    pub storage_budget: usize,
    #[serde(default = "Platform::default_code_size")]
    pub applet_code_size: usize,
    #[serde(default = "Platform::default_digits")]
    pub pin_digits: u8,
    #[serde(default = "Platform::default_retries")]
    pub pin_retries: u8,
}

impl Platform {
    fn default_se_id() -> String {
        "SE-0001".into()
    }
    fn default_budget() -> usize {
        crate::secure_element::DEFAULT_STORAGE_BUDGET
    }
    fn default_code_size() -> usize {
        2048
    }
    fn default_digits() -> u8 {
        6
    }
    fn default_retries() -> u8 {
        3
    }
}

impl Default for Platform {
    fn default() -> Self {
        Self {
            tee_available: true,
            se_available: true,
            se_id: Self::default_se_id(),
            storage_budget: Self::default_budget(),
            applet_code_size: Self::default_code_size(),
            pin_digits: Self::default_digits(),
            pin_retries: Self::default_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkiConfig {
    /// Last tick at which every certificate is valid.
    #[serde(default = "PkiConfig::default_not_after")]
    pub not_after: u64,
    /// Overrides `not_after` for the terminal certificate only.
    #[serde(default)]
    pub terminal_not_after: Option<u64>,
    #[serde(default = "all_attributes")]
    pub terminal_attributes: BTreeSet<String>,
}

impl PkiConfig {
    fn default_not_after() -> u64 {
        1_000_000
    }
}

impl Default for PkiConfig {
    fn default() -> Self {
        Self {
            not_after: Self::default_not_after(),
            terminal_not_after: None,
            terminal_attributes: all_attributes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Citizen {
    pub document_number: String,
    pub given_names: String,
    pub family_name: String,
    pub date_of_birth: String,
    pub address: String,
    pub nationality: String,
    pub expiry: String,
    pub card_pin_proof: String,
}

impl Citizen {
    pub fn token(&self) -> EidToken {
        EidToken {
            document_number: self.document_number.clone(),
            given_names: self.given_names.clone(),
            family_name: self.family_name.clone(),
            date_of_birth: self.date_of_birth.clone(),
            address: self.address.clone(),
            nationality: self.nationality.clone(),
            expiry: self.expiry.clone(),
        }
    }
}

/// Fields of the camera capture that differ from the citizen record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureOverride {
    pub document_number: Option<String>,
    pub given_names: Option<String>,
    pub family_name: Option<String>,
    pub date_of_birth: Option<String>,
    pub address: Option<String>,
    pub nationality: Option<String>,
    pub expiry: Option<String>,
    pub card_pin_proof: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Document number of the enrolling citizen.
    pub citizen: String,
    pub pin: String,
    #[serde(default = "yes")]
    pub rotate_keys: bool,
    #[serde(default)]
    pub capture_override: Option<CaptureOverride>,
    /// Text the camera reads instead of the real QR letter.
    #[serde(default)]
    pub qr_override: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffererConfig {
    pub name: String,
    pub required_attributes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthConfig {
    #[serde(default = "yes")]
    pub run_initialization: bool,
    /// PINs typed in order until one is accepted. Empty means the init PIN.
    #[serde(default)]
    pub pin_attempts: Vec<String>,
    /// Attributes the user approves. `None` approves the whole request.
    #[serde(default)]
    pub consent: Option<BTreeSet<String>>,
    /// Link the host follows to start. Defaults to `offerer://<name>`.
    #[serde(default)]
    pub tc_token_url: Option<String>,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self {
            run_initialization: true,
            pin_attempts: Vec::new(),
            consent: None,
            tc_token_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub platform: Platform,
    #[serde(default)]
    pub pki: PkiConfig,
    pub citizens: Vec<Citizen>,
    pub init: InitConfig,
    pub offerer: OffererConfig,
    #[serde(default)]
    pub auth: AuthConfig,
}

fn check_names(what: &str, names: &BTreeSet<String>) -> Result<(), ConfigError> {
    let known = all_attributes();
    match names.iter().find(|n| !known.contains(*n)) {
        Some(n) => Err(ConfigError::Invalid(format!("{what}: unknown attribute {n}"))),
        None => Ok(()),
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled config is valid")
    }

    /// Reads a file, or the bundled config for the name `default`.
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        if path == "default" {
            return Ok(Self::builtin());
        }
        let text = std::fs::read_to_string(Path::new(path)).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.citizens.is_empty() {
            return Err(ConfigError::Invalid("no citizens".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.citizens {
            c.token()
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("citizen {}: {e}", c.document_number)))?;
            if !seen.insert(&c.document_number) {
                return Err(ConfigError::Invalid(format!("duplicate citizen {}", c.document_number)));
            }
        }
        if self.citizen().is_none() {
            return Err(ConfigError::Invalid(format!("init.citizen {} not in citizens", self.init.citizen)));
        }
        if self.offerer.name.is_empty() {
            return Err(ConfigError::Invalid("offerer.name is empty".into()));
        }
        if self.offerer.required_attributes.is_empty() {
            return Err(ConfigError::Invalid("offerer.required_attributes is empty".into()));
        }
        check_names("offerer.required_attributes", &self.offerer.required_attributes)?;
        check_names("pki.terminal_attributes", &self.pki.terminal_attributes)?;
        if let Some(c) = &self.auth.consent {
            check_names("auth.consent", c)?;
        }
        if self.pki.terminal_not_after.is_some_and(|t| t > self.pki.not_after) {
            return Err(ConfigError::Invalid("pki.terminal_not_after exceeds pki.not_after".into()));
        }
        if !(4..=12).contains(&self.platform.pin_digits) || self.platform.pin_retries == 0 {
            return Err(ConfigError::Invalid("PIN policy out of range".into()));
        }
        Ok(())
    }

    pub fn citizen(&self) -> Option<&Citizen> {
        self.citizens.iter().find(|c| c.document_number == self.init.citizen)
    }

    /// What the camera captures at enrolment.
    pub fn captured_document(&self) -> CapturedDocument {
        let c = self.citizen().expect("validated");
        let mut token = c.token();
        let mut proof = c.card_pin_proof.clone();
        if let Some(o) = &self.init.capture_override {
            let fields: [(&mut String, &Option<String>); 8] = [
                (&mut token.document_number, &o.document_number),
                (&mut token.given_names, &o.given_names),
                (&mut token.family_name, &o.family_name),
                (&mut token.date_of_birth, &o.date_of_birth),
                (&mut token.address, &o.address),
                (&mut token.nationality, &o.nationality),
                (&mut token.expiry, &o.expiry),
                (&mut proof, &o.card_pin_proof),
            ];
            for (slot, value) in fields {
                if let Some(v) = value {
                    *slot = v.clone();
                }
            }
        }
        CapturedDocument {
            token,
            card_pin_proof: proof.into_bytes(),
        }
    }

    pub fn pin_attempts(&self) -> Vec<String> {
        if self.auth.pin_attempts.is_empty() {
            vec![self.init.pin.clone()]
        } else {
            self.auth.pin_attempts.clone()
        }
    }

    pub fn tc_token_url(&self) -> String {
        self.auth
            .tc_token_url
            .clone()
            .unwrap_or_else(|| format!("offerer://{}", self.offerer.name))
    }
}
