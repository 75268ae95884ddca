//! Run configuration: flags take precedence over the optional JSON config
//! file, which takes precedence over the documented defaults. The resolved
//! values are echoed into every output's provenance block.

use std::path::Path;

use posekit::heatpose::{VolumeMode, DEFAULT_DIMS};

use crate::errors::CliError;

/// Optional JSON config file; every field may be omitted.
#[derive(Debug, Default, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub sigma_main: Option<f64>,
    pub c: Option<f64>,
    pub dims: Option<String>,
    pub window_len: Option<usize>,
    pub step: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| {
                    CliError::io(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::config(format!("bad config {}: {e}", p.display())))
            }
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Resolved {
    pub sigma_main: Option<f64>,
    pub c: Option<f64>,
    pub dims: [usize; 3],
    pub window_len: usize,
    pub step: usize,
    pub seed: u64,
    pub mode: VolumeMode,
}

pub fn parse_dims(text: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = text.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "dims must look like 64x64x64, got {text:?}"
        )));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| CliError::config(format!("bad dimension {part:?} in {text:?}")))?;
        if *slot == 0 {
            return Err(CliError::config("dims must be positive"));
        }
    }
    Ok(dims)
}

pub fn parse_mode(text: &str) -> Result<VolumeMode, CliError> {
    match text {
        "channel" => Ok(VolumeMode::Channel),
        "fused" => Ok(VolumeMode::Fused),
        other => Err(CliError::config(format!(
            "mode must be \"channel\" or \"fused\", got {other:?}"
        ))),
    }
}

/// Per-invocation flag values that may override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub sigma_main: Option<f64>,
    pub c: Option<f64>,
    pub dims: Option<String>,
    pub window_len: Option<usize>,
    pub step: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
}

pub fn resolve(flags: &Overrides, file: &FileConfig) -> Result<Resolved, CliError> {
    let sigma_main = flags.sigma_main.or(file.sigma_main);
    if let Some(s) = sigma_main {
        if !(s > 0.0) {
            return Err(CliError::config(format!(
                "sigma_main must be positive, got {s}"
            )));
        }
    }
    let c = flags.c.or(file.c);
    if let Some(c) = c {
        if !(c > 0.0) {
            return Err(CliError::config(format!("c must be positive, got {c}")));
        }
    }
    let dims = match flags.dims.as_deref().or(file.dims.as_deref()) {
        Some(text) => parse_dims(text)?,
        None => DEFAULT_DIMS,
    };
    let window_len = flags.window_len.or(file.window_len).unwrap_or(16);
    let step = flags.step.or(file.step).unwrap_or(16);
    if window_len == 0 || step == 0 {
        return Err(CliError::config("window_len and step must be positive"));
    }
    let mode = match flags.mode.as_deref().or(file.mode.as_deref()) {
        Some(text) => parse_mode(text)?,
        None => VolumeMode::Channel,
    };
    Ok(Resolved {
        sigma_main,
        c,
        dims,
        window_len,
        step,
        seed: flags.seed.or(file.seed).unwrap_or(0),
        mode,
    })
}
