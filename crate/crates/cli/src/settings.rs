//! Run configuration assembly: defaults, then a config file, then
//! `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dremnet_core::config::{apply, apply_entry, RunConfig};

pub const CONFIG_ENV: &str = "DREMNET_CONFIG";

/// The explicit path, else the environment default, else none.
pub fn config_path(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

/// Layers the file and the overrides over `base`.
pub fn layer(mut base: RunConfig, file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        apply(&mut base, &text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{s}`"))?;
        apply_entry(&mut base, k.trim(), v.trim()).map_err(|e| anyhow!("--set {s}: {e}"))?;
    }
    base.train.validate()?;
    base.data.validate()?;
    Ok(base)
}

pub fn load(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    layer(RunConfig::default(), config_path(file).as_deref(), sets)
}

/// Errors unless both configurations build the same network.
pub fn same_architecture(a: &RunConfig, b: &RunConfig) -> Result<()> {
    let (ma, mb) = (a.train.model_config(), b.train.model_config());
    if ma != mb {
        bail!("checkpoint/config mismatch: checkpoint has {mb:?}, config asks for {ma:?}");
    }
    Ok(())
}
