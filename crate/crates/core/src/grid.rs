//! The daily 5-minute interval grid.
//!
//! Timestamps are UTC epoch seconds. Each day is restricted to 06:00–22:00,
//! i.e. 192 intervals of 300 s.

pub const INTERVAL_SECS: i64 = 300;
pub const DAY_SECS: i64 = 86_400;
pub const DAY_START_SECS: i64 = 6 * 3600;
pub const STEPS_PER_DAY: usize = 192;

/// Days since 1970-01-01.
pub fn day_of(timestamp: i64) -> i64 {
    timestamp.div_euclid(DAY_SECS)
}

/// Position of `timestamp` on its day's grid, if inside 06:00–22:00.
pub fn interval_of(timestamp: i64, steps_per_day: usize) -> Option<(i64, usize)> {
    let day = day_of(timestamp);
    let offset = timestamp - day * DAY_SECS - DAY_START_SECS;
    if offset < 0 {
        return None;
    }
    let idx = (offset / INTERVAL_SECS) as usize;
    (idx < steps_per_day).then_some((day, idx))
}

pub fn interval_start(day: i64, interval: usize) -> i64 {
    day * DAY_SECS + DAY_START_SECS + interval as i64 * INTERVAL_SECS
}

/// Day of week with Monday = 0.
pub fn day_of_week(day: i64) -> usize {
    // 1970-01-01 was a Thursday
    (day + 3).rem_euclid(7) as usize
}

pub fn day_from_date(date: chrono::NaiveDate) -> i64 {
    let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch");
    (date - epoch).num_days()
}

pub fn date_of_day(day: i64) -> chrono::NaiveDate {
    chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch") + chrono::Duration::days(day)
}

/// Parse `YYYY-MM-DD` into a day number.
pub fn parse_day(s: &str) -> crate::Result<i64> {
    chrono::NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map(day_from_date)
        .map_err(|e| crate::Error::Invalid(format!("bad date {s:?}: {e}")))
}
