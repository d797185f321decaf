//! Known-future covariates (seasonal kernels, event indicators) and lagged
//! target features.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate, Weekday};

use crate::error::{MqError, Result};
use crate::tensor::Tensor;

/// Triangular seasonal kernels: one column per anchor phase `0..period`,
/// equal to `1 - d / width` at circular phase distance `d <= width` and 0
/// beyond. Rows cover `t_start..=t_end`; phase is `t mod period`.
pub fn seasonal_kernels(period: usize, width: usize, t_start: i64, t_end: i64) -> Result<Vec<Vec<f64>>> {
    if period < 2 {
        return Err(MqError::arg(format!("seasonal period {period} < 2")));
    }
    if width < 1 {
        return Err(MqError::arg("kernel width must be >= 1"));
    }
    if 2 * width >= period {
        log::warn!("seasonal kernel width {width} >= period/2 ({period}); kernels overlap fully");
    }
    let p = period as i64;
    let rows = (t_start..=t_end)
        .map(|t| {
            let phase = t.rem_euclid(p);
            (0..p)
                .map(|anchor| {
                    let d = (phase - anchor).abs();
                    let d = d.min(p - d) as f64;
                    (1.0 - d / width as f64).max(0.0)
                })
                .collect()
        })
        .collect();
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub kind: String,
    pub t: i64,
    pub magnitude: Option<f64>,
}

impl Event {
    pub fn point(kind: impl Into<String>, t: i64) -> Self {
        Event {
            kind: kind.into(),
            t,
            magnitude: None,
        }
    }
}

/// One column per event kind (sorted by name) over `t_start..=t_end`:
/// the event magnitude (1 for plain indicators) at event steps, 0 elsewhere.
pub fn event_indicators(events: &[Event], t_start: i64, t_end: i64) -> (Vec<String>, Vec<Vec<f64>>) {
    let kinds: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = events.iter().map(|e| e.kind.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    };
    let len = (t_end - t_start + 1).max(0) as usize;
    let mut rows = vec![vec![0.0; kinds.len()]; len];
    for e in events {
        if e.t < t_start || e.t > t_end {
            log::warn!("event {} at t={} outside [{t_start}, {t_end}], ignored", e.kind, e.t);
            continue;
        }
        rows[(e.t - t_start) as usize][kinds[e.kind.as_str()]] = e.magnitude.unwrap_or(1.0);
    }
    (kinds.keys().map(|k| k.to_string()).collect(), rows)
}

fn nth_weekday(year: i32, month: u32, weekday: Weekday, n: u32) -> NaiveDate {
    let first = NaiveDate::from_ymd_opt(year, month, 1).unwrap();
    let offset = (7 + weekday.num_days_from_monday() - first.weekday().num_days_from_monday()) % 7;
    first + Duration::days(i64::from(offset + 7 * (n - 1)))
}

fn last_weekday(year: i32, month: u32, weekday: Weekday) -> NaiveDate {
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    }
    .unwrap();
    let last = next - Duration::days(1);
    let back = (7 + last.weekday().num_days_from_monday() - weekday.num_days_from_monday()) % 7;
    last - Duration::days(i64::from(back))
}

/// US federal holidays as `us_holiday` point events on a daily index where
/// `t = 0` is `origin`.
pub fn us_federal_holidays(origin: NaiveDate, t_start: i64, t_end: i64) -> Vec<Event> {
    let first = origin + Duration::days(t_start);
    let last = origin + Duration::days(t_end);
    let mut out = Vec::new();
    for year in first.year()..=last.year() {
        let ymd = |m, d| NaiveDate::from_ymd_opt(year, m, d).unwrap();
        let days = [
            ymd(1, 1),
            nth_weekday(year, 1, Weekday::Mon, 3),
            nth_weekday(year, 2, Weekday::Mon, 3),
            last_weekday(year, 5, Weekday::Mon),
            ymd(7, 4),
            nth_weekday(year, 9, Weekday::Mon, 1),
            nth_weekday(year, 10, Weekday::Mon, 2),
            ymd(11, 11),
            nth_weekday(year, 11, Weekday::Thu, 4),
            ymd(12, 25),
        ];
        for d in days {
            let t = (d - origin).num_days();
            if (t_start..=t_end).contains(&t) {
                out.push(Event::point("us_holiday", t));
            }
        }
    }
    out.sort_by_key(|e| e.t);
    out
}

/// Row `t` is `(y_t, y_{t-1}, ..., y_{t-depth})`, zero before the start.
pub fn build_lag_features(y: &[f64], depth: usize) -> Result<Tensor> {
    if depth < 1 {
        return Err(MqError::arg("lag depth must be >= 1"));
    }
    if y.is_empty() {
        return Err(MqError::arg("empty series"));
    }
    let w = depth + 1;
    let mut data = vec![0.0; y.len() * w];
    for t in 0..y.len() {
        for d in 0..=depth.min(t) {
            data[t * w + d] = y[t - d];
        }
    }
    Tensor::matrix(y.len(), w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weekly_width_one_is_one_hot() {
        let k = seasonal_kernels(7, 1, 0, 13).unwrap();
        for (t, row) in k.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                assert_eq!(v, if a == t % 7 { 1.0 } else { 0.0 });
            }
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn kernel_is_triangular_and_circular() {
        let k = seasonal_kernels(12, 3, 0, 11).unwrap();
        for (t, row) in k.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                let d = (t as i64 - a as i64).abs();
                let d = d.min(12 - d) as f64;
                let want = if d <= 3.0 { 1.0 - d / 3.0 } else { 0.0 };
                assert_eq!(v, want);
            }
        }
        // phase 0 and anchor 11 are one step apart around the circle
        assert!((k[0][11] - 2.0 / 3.0).abs() < 1e-15);
        assert!(seasonal_kernels(1, 1, 0, 3).is_err());
        assert!(seasonal_kernels(7, 0, 0, 3).is_err());
    }

    #[test]
    fn negative_time_uses_euclidean_phase() {
        let k = seasonal_kernels(7, 1, -1, -1).unwrap();
        assert_eq!(k[0][6], 1.0);
    }

    #[test]
    fn point_and_magnitude_events() {
        let events = vec![
            Event::point("holiday", 10),
            Event {
                kind: "promo".into(),
                t: 4,
                magnitude: Some(0.3),
            },
            Event::point("holiday", 99),
        ];
        let (names, rows) = event_indicators(&events, 0, 19);
        assert_eq!(names, vec!["holiday", "promo"]);
        for (t, r) in rows.iter().enumerate() {
            assert_eq!(r[0], if t == 10 { 1.0 } else { 0.0 });
            assert_eq!(r[1], if t == 4 { 0.3 } else { 0.0 });
        }
    }

    #[test]
    fn us_holidays_2014() {
        let origin = NaiveDate::from_ymd_opt(2014, 1, 1).unwrap();
        let ev = us_federal_holidays(origin, 0, 364);
        let dates: Vec<String> = ev
            .iter()
            .map(|e| (origin + Duration::days(e.t)).format("%m-%d").to_string())
            .collect();
        assert_eq!(
            dates,
            vec!["01-01", "01-20", "02-17", "05-26", "07-04", "09-01", "10-13", "11-11", "11-27", "12-25"]
        );
    }

    #[test]
    fn lag_rows() {
        let t = build_lag_features(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 2.0, 1.0, 0.0, 3.0, 2.0, 1.0]);

        let c = build_lag_features(&[4.0; 5], 1).unwrap();
        assert_eq!(c.row(0), &[4.0, 0.0]);
        for i in 1..5 {
            assert_eq!(c.row(i), &[4.0, 4.0]);
        }
        assert!(build_lag_features(&[1.0], 0).is_err());
    }

    #[test]
    fn lag_index_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d = 7;
        let t = build_lag_features(&y, d).unwrap();
        for i in 0..y.len() {
            for lag in 0..=d {
                let want = if i >= lag { y[i - lag] } else { 0.0 };
                assert_eq!(t.get2(i, lag), want);
            }
        }
    }
}
