//! Calendar arithmetic for the `date_calculation` tool.

use chrono::{Datelike, Days, Months, NaiveDate};

use super::EnvError;
use crate::protocol::{Direction, TimeUnit};

/// Offset `base` by `count` units. Month and year steps clamp the day of
/// month to the target month's length (Jan 31 + 1 month = Feb 28/29).
pub fn date_calculation(
    base: NaiveDate,
    count: u32,
    unit: TimeUnit,
    sign: Direction,
) -> Result<NaiveDate, EnvError> {
    check_range(base)?;
    let out = match unit {
        TimeUnit::Day | TimeUnit::Week => {
            let days = u64::from(count) * if unit == TimeUnit::Week { 7 } else { 1 };
            match sign {
                Direction::Forward => base.checked_add_days(Days::new(days)),
                Direction::Backward => base.checked_sub_days(Days::new(days)),
            }
        }
        TimeUnit::Month | TimeUnit::Year => {
            let months = if unit == TimeUnit::Year {
                count.checked_mul(12)
            } else {
                Some(count)
            };
            months.and_then(|m| match sign {
                Direction::Forward => base.checked_add_months(Months::new(m)),
                Direction::Backward => base.checked_sub_months(Months::new(m)),
            })
        }
    };
    let out = out.ok_or(EnvError::OutOfRange)?;
    check_range(out)?;
    Ok(out)
}

/// String-input variant: parses `YYYY-MM-DD` first.
pub fn date_calculation_str(
    base: &str,
    count: u32,
    unit: TimeUnit,
    sign: Direction,
) -> Result<NaiveDate, EnvError> {
    let parsed = NaiveDate::parse_from_str(base.trim(), "%Y-%m-%d")
        .map_err(|_| EnvError::InvalidDate(base.to_string()))?;
    date_calculation(parsed, count, unit, sign)
}

fn check_range(d: NaiveDate) -> Result<(), EnvError> {
    if (1..=9999).contains(&d.year()) {
        Ok(())
    } else {
        Err(EnvError::OutOfRange)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn day_arithmetic() {
        let fwd = Direction::Forward;
        assert_eq!(
            date_calculation(d(2021, 1, 1), 30, TimeUnit::Day, fwd).unwrap(),
            d(2021, 1, 31)
        );
        assert_eq!(
            date_calculation(d(2021, 12, 31), 1, TimeUnit::Day, fwd).unwrap(),
            d(2022, 1, 1)
        );
        assert_eq!(
            date_calculation(d(2024, 2, 28), 1, TimeUnit::Day, fwd).unwrap(),
            d(2024, 2, 29)
        );
        assert_eq!(
            date_calculation(d(2021, 3, 10), 2, TimeUnit::Week, Direction::Backward).unwrap(),
            d(2021, 2, 24)
        );
    }

    #[test]
    fn month_end_clamps() {
        let fwd = Direction::Forward;
        assert_eq!(
            date_calculation(d(2021, 1, 31), 1, TimeUnit::Month, fwd).unwrap(),
            d(2021, 2, 28)
        );
        assert_eq!(
            date_calculation(d(2024, 1, 31), 1, TimeUnit::Month, fwd).unwrap(),
            d(2024, 2, 29)
        );
        assert_eq!(
            date_calculation(d(2024, 2, 29), 1, TimeUnit::Year, fwd).unwrap(),
            d(2025, 2, 28)
        );
    }

    #[test]
    fn errors() {
        assert_eq!(
            date_calculation_str("2021-02-30", 1, TimeUnit::Day, Direction::Forward),
            Err(EnvError::InvalidDate("2021-02-30".into()))
        );
        assert_eq!(
            date_calculation(d(9999, 12, 31), 1, TimeUnit::Day, Direction::Forward),
            Err(EnvError::OutOfRange)
        );
        assert_eq!(
            date_calculation(d(1, 1, 1), 1, TimeUnit::Month, Direction::Backward),
            Err(EnvError::OutOfRange)
        );
        assert_eq!(
            date_calculation(d(2000, 1, 1), u32::MAX, TimeUnit::Year, Direction::Forward),
            Err(EnvError::OutOfRange)
        );
    }

    proptest! {
        #[test]
        fn forward_then_backward_is_identity_without_clamping(
            offset in 0i64..3_000_000,
            count in 0u32..2000,
            unit in 0usize..4,
        ) {
            let unit = [TimeUnit::Day, TimeUnit::Week, TimeUnit::Month, TimeUnit::Year][unit];
            let base = d(1, 1, 1) + chrono::Duration::days(offset);
            if let Ok(there) = date_calculation(base, count, unit, Direction::Forward) {
                let clamped = matches!(unit, TimeUnit::Month | TimeUnit::Year)
                    && there.day() != base.day();
                if !clamped {
                    prop_assert_eq!(
                        date_calculation(there, count, unit, Direction::Backward).unwrap(),
                        base
                    );
                }
            }
        }
    }
}
