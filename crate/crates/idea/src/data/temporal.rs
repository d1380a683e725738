//! ISO-8601 parsing and calendar arithmetic for the datetime and duration
//! kinds. Month arithmetic follows the proleptic Gregorian calendar with
//! end-of-month clamping.

use super::{DateTime, Duration};
use chrono::{Months, TimeZone, Utc};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemporalError {
    #[error("invalid datetime literal {0:?}")]
    BadDateTime(String),
    #[error("invalid duration literal {0:?}")]
    BadDuration(String),
    #[error("datetime arithmetic out of range")]
    OutOfRange,
}

/// Parses an ISO-8601 instant such as `2026-01-02T03:04:05Z` or
/// `2026-01-02T03:04:05.123+07:00`. A missing offset is read as UTC.
pub fn parse_datetime(text: &str) -> Result<DateTime, TemporalError> {
    let bad = || TemporalError::BadDateTime(text.to_string());
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(text) {
        return Ok(DateTime::from_millis(dt.timestamp_millis()));
    }
    // Accept a naive timestamp (no offset) as UTC.
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%d"] {
        if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(DateTime::from_millis(naive.and_utc().timestamp_millis()));
        }
        if fmt == "%Y-%m-%d" {
            if let Ok(date) = chrono::NaiveDate::parse_from_str(text, fmt) {
                let naive = date.and_hms_opt(0, 0, 0).ok_or_else(bad)?;
                return Ok(DateTime::from_millis(naive.and_utc().timestamp_millis()));
            }
        }
    }
    Err(bad())
}

/// Formats as UTC with millisecond precision: `2026-01-02T03:04:05.000Z`.
pub fn format_datetime(dt: DateTime) -> String {
    match Utc.timestamp_millis_opt(dt.epoch_millis).single() {
        Some(t) => t.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        None => format!("@{}ms", dt.epoch_millis),
    }
}

/// Parses an ISO-8601 period such as `P2M`, `P1Y2M3D` or `PT4H5M6.5S`.
pub fn parse_duration(text: &str) -> Result<Duration, TemporalError> {
    let bad = || TemporalError::BadDuration(text.to_string());
    let mut chars = text.chars().peekable();
    let negative = match chars.peek() {
        Some('-') => {
            chars.next();
            true
        }
        _ => false,
    };
    if chars.next() != Some('P') {
        return Err(bad());
    }
    let mut months: i64 = 0;
    let mut millis: i64 = 0;
    let mut in_time = false;
    let mut saw_component = false;
    let mut number = String::new();
    for c in chars {
        match c {
            'T' if !in_time && number.is_empty() => in_time = true,
            '0'..='9' | '.' => number.push(c),
            unit => {
                if number.is_empty() {
                    return Err(bad());
                }
                let n: f64 = number.parse().map_err(|_| bad())?;
                if n.fract() != 0.0 && !(in_time && unit == 'S') {
                    return Err(bad()); // fractions only on seconds
                }
                let whole = n as i64;
                match (in_time, unit) {
                    (false, 'Y') => months += whole * 12,
                    (false, 'M') => months += whole,
                    (false, 'W') => millis += whole * 7 * 86_400_000,
                    (false, 'D') => millis += whole * 86_400_000,
                    (true, 'H') => millis += whole * 3_600_000,
                    (true, 'M') => millis += whole * 60_000,
                    (true, 'S') => millis += (n * 1000.0).round() as i64,
                    _ => return Err(bad()),
                }
                saw_component = true;
                number.clear();
            }
        }
    }
    if !number.is_empty() || !saw_component {
        return Err(bad());
    }
    if negative {
        months = -months;
        millis = -millis;
    }
    let months = i32::try_from(months).map_err(|_| bad())?;
    Ok(Duration::new(months, millis))
}

/// Canonical period text; the parser accepts everything this emits.
pub fn format_duration(d: Duration) -> String {
    if d.months == 0 && d.millis == 0 {
        return "PT0S".to_string();
    }
    let sign = if d.months < 0 || d.millis < 0 { "-" } else { "" };
    let months = d.months.unsigned_abs();
    let mut millis = d.millis.unsigned_abs();
    let mut out = format!("{sign}P");
    if months >= 12 {
        out.push_str(&format!("{}Y", months / 12));
    }
    if months % 12 != 0 {
        out.push_str(&format!("{}M", months % 12));
    }
    let days = millis / 86_400_000;
    millis %= 86_400_000;
    if days > 0 {
        out.push_str(&format!("{days}D"));
    }
    if millis > 0 {
        out.push('T');
        let hours = millis / 3_600_000;
        millis %= 3_600_000;
        let minutes = millis / 60_000;
        millis %= 60_000;
        if hours > 0 {
            out.push_str(&format!("{hours}H"));
        }
        if minutes > 0 {
            out.push_str(&format!("{minutes}M"));
        }
        if millis > 0 {
            if millis % 1000 == 0 {
                out.push_str(&format!("{}S", millis / 1000));
            } else {
                out.push_str(&format!("{}.{:03}S", millis / 1000, millis % 1000));
            }
        }
    }
    out
}

/// Applies calendar months first, then the millisecond remainder.
pub fn datetime_plus_duration(dt: DateTime, d: Duration) -> Result<DateTime, TemporalError> {
    let base = Utc
        .timestamp_millis_opt(dt.epoch_millis)
        .single()
        .ok_or(TemporalError::OutOfRange)?;
    let shifted = if d.months >= 0 {
        base.checked_add_months(Months::new(d.months as u32))
    } else {
        base.checked_sub_months(Months::new(d.months.unsigned_abs()))
    }
    .ok_or(TemporalError::OutOfRange)?;
    let millis = shifted
        .timestamp_millis()
        .checked_add(d.millis)
        .ok_or(TemporalError::OutOfRange)?;
    Ok(DateTime::from_millis(millis))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datetime_round_trip() {
        let dt = parse_datetime("2026-01-02T03:04:05.678Z").unwrap();
        assert_eq!(format_datetime(dt), "2026-01-02T03:04:05.678Z");
        let offset = parse_datetime("2026-01-02T03:04:05+01:00").unwrap();
        assert_eq!(offset.epoch_millis, dt.epoch_millis - 678 - 3_600_000);
    }

    #[test]
    fn duration_round_trip() {
        for (text, months, millis) in [
            ("P2M", 2, 0),
            ("P1Y2M", 14, 0),
            ("P3D", 0, 3 * 86_400_000),
            ("PT1H30M", 0, 90 * 60_000),
            ("-P1M", -1, 0),
        ] {
            let d = parse_duration(text).unwrap();
            assert_eq!((d.months, d.millis), (months, millis), "{text}");
            assert_eq!(parse_duration(&format_duration(d)).unwrap(), d);
        }
        assert!(parse_duration("P").is_err());
        assert!(parse_duration("2M").is_err());
    }

    #[test]
    fn month_arithmetic_clamps_to_calendar() {
        // Jan 31 + 1 month clamps to Feb 28 in a non-leap year.
        let jan31 = parse_datetime("2026-01-31T12:00:00Z").unwrap();
        let shifted = datetime_plus_duration(jan31, Duration::new(1, 0)).unwrap();
        assert_eq!(format_datetime(shifted), "2026-02-28T12:00:00.000Z");
        // Two months land back on the 31st.
        let two = datetime_plus_duration(jan31, Duration::new(2, 0)).unwrap();
        assert_eq!(format_datetime(two), "2026-03-31T12:00:00.000Z");
    }

    #[test]
    fn millis_applied_after_months() {
        let dt = parse_datetime("2026-01-01T00:00:00Z").unwrap();
        let shifted = datetime_plus_duration(dt, Duration::new(2, 1500)).unwrap();
        assert_eq!(format_datetime(shifted), "2026-03-01T00:00:01.500Z");
    }
}
