//! Wall-clock source for timestamps written into manifests and sessions.
//!
//! `SOURCE_DATE_EPOCH` pins the clock so that repeated runs produce
//! byte-identical manifests.

use chrono::{DateTime, SecondsFormat, Utc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    pub fn from_env() -> Self {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse::<i64>().ok())
            .map_or(Clock::System, Clock::fixed_epoch)
    }

    pub fn fixed_epoch(secs: i64) -> Self {
        Clock::Fixed(DateTime::from_timestamp(secs, 0).unwrap_or_default())
    }

    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        }
    }

    pub fn timestamp(&self) -> String {
        self.now().to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_clock_is_stable() {
        let c = Clock::fixed_epoch(0);
        assert_eq!(c.timestamp(), "1970-01-01T00:00:00Z");
        assert_eq!(c.timestamp(), c.timestamp());
    }
}
