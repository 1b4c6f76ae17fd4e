use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid fetch config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryBackoff {
    pub base_ms: u64,
    pub cap_ms: u64,
}

impl Default for RetryBackoff {
    fn default() -> Self {
        Self { base_ms: 200, cap_ms: 5_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchConfig {
    /// Maximum requests in flight per worker.
    pub concurrency: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub min_text_chars: usize,
    pub min_image_bytes: u64,
    pub max_image_bytes: u64,
    pub max_pixels: u64,
    /// Downscale so the longer side is at most this many pixels.
    pub resize_target: Option<u32>,
    pub retry_backoff: RetryBackoff,
    pub user_agent: String,
    pub respect_robots: bool,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            concurrency: 64,
            timeout_ms: 10_000,
            max_retries: 3,
            min_text_chars: 5,
            min_image_bytes: 5 * 1024,
            max_image_bytes: 10 * 1024 * 1024,
            max_pixels: 89_478_485,
            resize_target: None,
            retry_backoff: RetryBackoff::default(),
            user_agent: concat!("crawlcurate/", env!("CARGO_PKG_VERSION")).to_string(),
            respect_robots: true,
        }
    }
}

impl FetchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("concurrency", self.concurrency as u64),
            ("timeout_ms", self.timeout_ms),
            ("min_text_chars", self.min_text_chars as u64),
            ("min_image_bytes", self.min_image_bytes),
            ("max_image_bytes", self.max_image_bytes),
            ("max_pixels", self.max_pixels),
            ("retry_backoff.cap_ms", self.retry_backoff.cap_ms),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be positive")));
            }
        }
        if self.min_image_bytes >= self.max_image_bytes {
            return Err(ConfigError("min_image_bytes must be below max_image_bytes".into()));
        }
        if self.retry_backoff.base_ms > self.retry_backoff.cap_ms {
            return Err(ConfigError("retry_backoff.base_ms exceeds cap_ms".into()));
        }
        if self.resize_target == Some(0) {
            return Err(ConfigError("resize_target must be positive".into()));
        }
        Ok(())
    }

    /// Upper bound of the delay before retry number `attempt` (0-based).
    pub fn backoff_ceiling_ms(&self, attempt: u32) -> u64 {
        let b = self.retry_backoff;
        b.base_ms.saturating_mul(1u64 << attempt.min(32)).min(b.cap_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        FetchConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_inverted_byte_limits() {
        let c = FetchConfig { min_image_bytes: 10, max_image_bytes: 10, ..Default::default() };
        assert!(c.validate().is_err());
        let c = FetchConfig { concurrency: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn backoff_doubles_until_cap() {
        let c = FetchConfig { retry_backoff: RetryBackoff { base_ms: 100, cap_ms: 1000 }, ..Default::default() };
        let got: Vec<u64> = (0..6).map(|a| c.backoff_ceiling_ms(a)).collect();
        assert_eq!(got, vec![100, 200, 400, 800, 1000, 1000]);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<FetchConfig>(r#"{"concurency": 3}"#).is_err());
        let c: FetchConfig = serde_json::from_str(r#"{"concurrency": 3}"#).unwrap();
        assert_eq!(c.concurrency, 3);
        assert_eq!(c.min_image_bytes, 5120);
    }
}
