//! Seeded synthetic datasets for demos and tests.
//!
//! `market_csv` follows the column layout of the weekly Dow Jones index
//! data set (30 tickers, 16 columns) with prices as plain numbers.

use std::f64::consts::PI;
use std::fmt::Write;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const TICKERS: [&str; 30] = [
    "AA", "AXP", "BA", "BAC", "CAT", "CSCO", "CVX", "DD", "DIS", "GE", "HD", "HPQ", "IBM", "INTC", "JNJ", "JPM", "KO",
    "KRFT", "MCD", "MMM", "MRK", "MSFT", "PFE", "PG", "T", "TRV", "UTX", "VZ", "WMT", "XOM",
];

pub const MARKET_HEADER: &str = "quarter,stock,date,open,high,low,close,volume,percent_change_price,\
percent_change_volume_over_last_wk,previous_weeks_volume,next_weeks_open,next_weeks_close,\
percent_change_next_weeks_price,days_to_next_dividend,percent_return_next_dividend";

pub const SINE_PERIOD: f64 = 50.0;

/// `sin(2πt / 50) + N(0, noise²)` for `t in 0..steps`.
pub fn noisy_sine(steps: usize, noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("noise must be finite and non-negative");
    (0..steps)
        .map(|t| (2.0 * PI * t as f64 / SINE_PERIOD).sin() + normal.sample(&mut rng))
        .collect()
}

/// A `date,value` CSV of [`noisy_sine`] with one ISO date per step.
pub fn sine_csv(steps: usize, noise: f64, seed: u64) -> String {
    let start = NaiveDate::from_ymd_opt(2011, 1, 1).expect("valid date");
    let mut out = String::from("date,value\n");
    for (t, v) in noisy_sine(steps, noise, seed).into_iter().enumerate() {
        let day = start + Duration::days(t as i64);
        writeln!(out, "{},{v}", day.format("%Y-%m-%d")).expect("string write");
    }
    out
}

struct Walk {
    price: f64,
    next_close: f64,
    volume: f64,
    prev_volume: Option<u64>,
}

/// Weekly rows for all 30 tickers, week-major, starting 1/7/2011.
pub struct MarketRows {
    rng: ChaCha8Rng,
    step: Normal<f64>,
    walks: Vec<Walk>,
    week: i64,
    ticker: usize,
}

impl MarketRows {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = Normal::new(0.0, 0.03).expect("valid");
        let walks = TICKERS
            .iter()
            .map(|_| {
                let price: f64 = rng.random_range(15.0..110.0);
                let next_close = price * (1.0 + step.sample(&mut rng));
                Walk {
                    price,
                    next_close,
                    volume: rng.random_range(5e6..2e8),
                    prev_volume: None,
                }
            })
            .collect();
        Self {
            rng,
            step,
            walks,
            week: 0,
            ticker: 0,
        }
    }
}

impl Iterator for MarketRows {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        let start = NaiveDate::from_ymd_opt(2011, 1, 7).expect("valid date");
        let date = start + Duration::days(7 * self.week);
        let quarter = (date.month() - 1) / 3 + 1;
        let rng = &mut self.rng;
        let w = &mut self.walks[self.ticker];

        let open = w.price;
        let close = w.next_close;
        let next_close = close * (1.0 + self.step.sample(rng)).max(0.5);
        let high = open.max(close) * (1.0 + rng.random_range(0.0..0.02));
        let low = open.min(close) * (1.0 - rng.random_range(0.0..0.02));
        let volume = (w.volume * rng.random_range(0.7..1.3)).round() as u64;
        let prev = w.prev_volume.unwrap_or(volume);
        let vol_change = (volume as f64 - prev as f64) / prev as f64 * 100.0;
        let dividend_days: u32 = rng.random_range(0..120);
        let dividend_return: f64 = rng.random_range(0.1..1.5);

        let row = format!(
            "{quarter},{},{},{open:.2},{high:.2},{low:.2},{close:.2},{volume},{:.5},{vol_change:.5},{prev},{close:.2},{next_close:.2},{:.5},{dividend_days},{dividend_return:.5}",
            TICKERS[self.ticker],
            format_us_date(date),
            (close - open) / open * 100.0,
            (next_close - close) / close * 100.0,
        );

        w.price = close;
        w.next_close = next_close;
        w.prev_volume = Some(volume);
        self.ticker += 1;
        if self.ticker == TICKERS.len() {
            self.ticker = 0;
            self.week += 1;
        }
        Some(row)
    }
}

fn format_us_date(d: NaiveDate) -> String {
    format!("{}/{}/{}", d.month(), d.day(), d.year())
}

/// `weeks` weeks of market rows (30 rows per week).
pub fn market_csv(weeks: usize, seed: u64) -> String {
    let mut out = String::from(MARKET_HEADER);
    out.push('\n');
    for row in MarketRows::new(seed).take(weeks * TICKERS.len()) {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Market CSV of exactly `target` bytes. Whole rows are added while they
/// fit; the remainder is made up with leading zeros on the last row's
/// volume, which leaves every parsed value unchanged.
pub fn market_csv_of_size(target: usize, seed: u64) -> Option<String> {
    let mut out = String::with_capacity(target);
    out.push_str(MARKET_HEADER);
    out.push('\n');
    let mut last_row_start = None;
    for row in MarketRows::new(seed) {
        if out.len() + row.len() + 1 > target {
            break;
        }
        last_row_start = Some(out.len());
        out.push_str(&row);
        out.push('\n');
    }
    let start = last_row_start?;
    let deficit = target - out.len();
    // volume is the eighth field
    let volume_at = start + nth_field_offset(&out[start..], 7);
    out.insert_str(volume_at, &"0".repeat(deficit));
    Some(out)
}

fn nth_field_offset(row: &str, n: usize) -> usize {
    row.match_indices(',')
        .nth(n - 1)
        .map(|(i, _)| i + 1)
        .expect("row has enough fields")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{ColumnKind, TableFrame};

    #[test]
    fn market_layout() {
        let f = TableFrame::parse_csv(market_csv(25, 3).as_bytes()).unwrap();
        assert_eq!((f.row_count(), f.column_count()), (750, 16));
        assert_eq!(f.distinct_values("stock").unwrap()[0], "AA");
        assert_eq!(f.kind("date").unwrap(), ColumnKind::Categorical);
        assert_eq!(f.numeric_columns().len(), 14);
        assert_eq!(f.split_by_index("stock", 0).unwrap().row_count(), 25);
        assert_eq!(f.cell(0, "date").unwrap(), "1/7/2011");
        assert_eq!(f.cell(30, "date").unwrap(), "1/14/2011");
    }

    #[test]
    fn exact_size_padding_preserves_values() {
        for target in [2_000, 2_001, 10_007, 123_456] {
            let s = market_csv_of_size(target, 5).unwrap();
            assert_eq!(s.len(), target);
            let f = TableFrame::parse_csv(s.as_bytes()).unwrap();
            assert!(f.numeric("volume").unwrap().iter().all(|v| *v > 0.0));
        }
        assert!(market_csv_of_size(10, 5).is_none());
    }

    #[test]
    fn sine_is_seeded() {
        assert_eq!(noisy_sine(20, 0.1, 4), noisy_sine(20, 0.1, 4));
        assert_ne!(noisy_sine(20, 0.1, 4), noisy_sine(20, 0.1, 5));
        let clean = noisy_sine(51, 0.0, 0);
        assert!(clean[0].abs() < 1e-12 && (clean[50]).abs() < 1e-12);
        let f = TableFrame::parse_csv(sine_csv(10, 0.1, 1).as_bytes()).unwrap();
        assert_eq!(f.numeric_columns(), ["value"]);
    }
}
