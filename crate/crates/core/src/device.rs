//! Compute device selection via the `BCSAM_DEVICE` environment variable.

use candle_core::Device;

use crate::{Error, Result};

pub const DEVICE_ENV: &str = "BCSAM_DEVICE";

/// Resolves `BCSAM_DEVICE` (`auto`, `cpu`, `cuda`, `cuda:N`). Unset means `auto`.
pub fn device_from_env() -> Result<Device> {
    let value = std::env::var(DEVICE_ENV).unwrap_or_else(|_| "auto".to_string());
    parse_device(&value)
}

pub fn parse_device(value: &str) -> Result<Device> {
    match value.trim().to_ascii_lowercase().as_str() {
        "" | "auto" | "cpu" => Ok(Device::Cpu),
        s if s == "cuda" || s.starts_with("cuda:") => {
            let ordinal = s
                .strip_prefix("cuda:")
                .map(|n| n.parse::<usize>())
                .transpose()
                .map_err(|_| Error::InvalidArgument(format!("bad device ordinal in {value:?}")))?
                .unwrap_or(0);
            Device::new_cuda(ordinal).map_err(|e| {
                Error::InvalidArgument(format!("device {value:?} unavailable: {e}"))
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown device {other:?}; expected auto, cpu, cuda or cuda:N"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_and_auto_resolve() {
        assert!(parse_device("cpu").unwrap().is_cpu());
        assert!(parse_device("AUTO").unwrap().is_cpu());
        assert!(parse_device("tpu").is_err());
    }
}
