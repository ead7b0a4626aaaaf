use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdminConfig {
    pub username: String,
    pub password: String,
}

/// Gateway settings. Read from a TOML file, then overridden by `LEISA_*`
/// environment variables.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub storage_root: PathBuf,
    /// Extra `<eventType>.json` schemas; builtins are always loaded.
    pub schema_dir: Option<PathBuf>,
    pub bootstrap_admin: Option<AdminConfig>,
    pub password_hash_iterations: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            storage_root: PathBuf::from("leisa-data"),
            schema_dir: None,
            bootstrap_admin: None,
            password_hash_iterations: leisa_core::password::DEFAULT_ITERATIONS,
        }
    }
}

impl GatewayConfig {
    /// Reads `path` (if any) and applies overrides from the process environment.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    /// Applies `LEISA_LISTEN`, `LEISA_STORAGE_ROOT`, `LEISA_SCHEMA_DIR`,
    /// `LEISA_ADMIN_USERNAME`, `LEISA_ADMIN_PASSWORD` and
    /// `LEISA_PASSWORD_HASH_ITERATIONS`. Other variables are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<()> {
        let mut admin_user = None;
        let mut admin_pass = None;
        for (key, value) in vars {
            match key.as_str() {
                "LEISA_LISTEN" => self.listen = value.parse().with_context(|| format!("LEISA_LISTEN={value}"))?,
                "LEISA_STORAGE_ROOT" => self.storage_root = value.into(),
                "LEISA_SCHEMA_DIR" => self.schema_dir = Some(value.into()),
                "LEISA_ADMIN_USERNAME" => admin_user = Some(value),
                "LEISA_ADMIN_PASSWORD" => admin_pass = Some(value),
                "LEISA_PASSWORD_HASH_ITERATIONS" => {
                    self.password_hash_iterations =
                        value.parse().with_context(|| format!("LEISA_PASSWORD_HASH_ITERATIONS={value}"))?
                }
                _ => {}
            }
        }
        match (admin_user, admin_pass, self.bootstrap_admin.as_mut()) {
            (None, None, _) => {}
            (Some(username), Some(password), _) => self.bootstrap_admin = Some(AdminConfig { username, password }),
            (user, pass, Some(existing)) => {
                if let Some(u) = user {
                    existing.username = u;
                }
                if let Some(p) = pass {
                    existing.password = p;
                }
            }
            (_, _, None) => bail!("LEISA_ADMIN_USERNAME and LEISA_ADMIN_PASSWORD must be set together"),
        }
        if self.password_hash_iterations == 0 {
            bail!("password_hash_iterations must be positive");
        }
        Ok(())
    }
}
