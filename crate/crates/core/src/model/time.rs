//! Time intervals and the time dimension of a rule.

use super::sets::{Cell, CellSet, IntervalSet};
use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use std::fmt;

pub const MINUTE_MAX: u32 = 24 * 60 - 1;
const ALL_DAYS: u8 = 0x7f;

/// Set of weekdays, bit 0 = Monday. The empty set is stored as-is; callers
/// decide whether "no days" means "every day".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Weekdays(pub u8);

impl Weekdays {
    pub const ALL: Weekdays = Weekdays(ALL_DAYS);

    pub fn contains(self, d: Weekday) -> bool {
        self.0 & (1 << d.num_days_from_monday()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 & ALL_DAYS == 0
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let mut bits = 0u8;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let d: Weekday = part.parse().map_err(|_| format!("unknown weekday {part:?}"))?;
            bits |= 1 << d.num_days_from_monday();
        }
        Ok(Weekdays(bits))
    }

    pub fn days(self) -> impl Iterator<Item = Weekday> {
        (0..7u8)
            .filter(move |i| self.0 & (1 << i) != 0)
            .map(|i| Weekday::try_from(i).expect("weekday index"))
    }
}

impl fmt::Display for Weekdays {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.days().map(|d| d.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

/// A time interval object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TimeInterval {
    pub start: Option<NaiveDateTime>,
    pub end: Option<NaiveDateTime>,
    /// Empty means every day.
    pub days: Weekdays,
    /// Minutes of day; `from > to` wraps past midnight.
    pub from: Option<u16>,
    pub to: Option<u16>,
}

impl TimeInterval {
    pub fn is_unrestricted(&self) -> bool {
        self.start.is_none()
            && self.end.is_none()
            && (self.days.is_empty() || self.days == Weekdays::ALL)
            && self.from.is_none()
            && self.to.is_none()
    }

    pub fn effective_days(&self) -> Weekdays {
        if self.days.is_empty() {
            Weekdays::ALL
        } else {
            self.days
        }
    }

    pub fn minutes(&self) -> IntervalSet {
        let from = u32::from(self.from.unwrap_or(0));
        let to = self.to.map_or(MINUTE_MAX, u32::from);
        if from <= to {
            IntervalSet::range(from, to)
        } else {
            IntervalSet::from_intervals([(from, MINUTE_MAX), (0, to)])
        }
    }

    pub fn dates(&self) -> IntervalSet {
        match (self.start, self.end) {
            (None, None) => IntervalSet::full(u32::MAX),
            (s, e) => IntervalSet::range(
                s.map_or(1, date_key),
                e.map_or(u32::MAX, date_key),
            ),
        }
    }

    pub fn cell(&self) -> TimeCell {
        TimeCell {
            dates: self.dates(),
            days: self.effective_days().0,
            minutes: self.minutes(),
        }
    }

    pub fn matches(&self, ts: &Timestamp) -> bool {
        self.cell().contains(ts)
    }
}

/// Point in time carried by a simulated packet. The calendar date is
/// optional; weekday and minute-of-day are always known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Timestamp {
    pub datetime: Option<NaiveDateTime>,
    pub weekday: Weekday,
    pub minute: u16,
}

impl Timestamp {
    pub fn at(datetime: NaiveDateTime) -> Self {
        Timestamp {
            datetime: Some(datetime),
            weekday: datetime.weekday(),
            minute: (datetime.hour() * 60 + datetime.minute()) as u16,
        }
    }

    pub fn weekly(weekday: Weekday, minute: u16) -> Self {
        Timestamp {
            datetime: None,
            weekday,
            minute,
        }
    }

    pub fn date_key(&self) -> u32 {
        self.datetime.map_or(0, date_key)
    }
}

impl Default for Timestamp {
    fn default() -> Self {
        Timestamp::weekly(Weekday::Mon, 0)
    }
}

/// Minutes since 1970-01-01T00:00 plus one, clamped to `[1, u32::MAX]`.
/// Zero is reserved for "no calendar date".
pub fn date_key(dt: NaiveDateTime) -> u32 {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)
        .expect("epoch")
        .and_hms_opt(0, 0, 0)
        .expect("epoch");
    let mins = (dt - epoch).num_minutes();
    (mins + 1).clamp(1, i64::from(u32::MAX)) as u32
}

/// Cell of (date key × weekday × minute-of-day).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimeCell {
    pub dates: IntervalSet,
    pub days: u8,
    pub minutes: IntervalSet,
}

impl TimeCell {
    pub fn full() -> Self {
        TimeCell {
            dates: IntervalSet::full(u32::MAX),
            days: ALL_DAYS,
            minutes: IntervalSet::full(MINUTE_MAX),
        }
    }

    pub fn contains(&self, ts: &Timestamp) -> bool {
        self.days & (1 << ts.weekday.num_days_from_monday()) != 0
            && self.minutes.contains(u32::from(ts.minute))
            && self.dates.contains(ts.date_key())
    }
}

impl Cell for TimeCell {
    fn is_empty(&self) -> bool {
        self.dates.is_empty() || self.days & ALL_DAYS == 0 || self.minutes.is_empty()
    }

    fn intersect(&self, o: &Self) -> Self {
        TimeCell {
            dates: self.dates.intersect(&o.dates),
            days: self.days & o.days,
            minutes: self.minutes.intersect(&o.minutes),
        }
    }

    fn subtract(&self, o: &Self) -> Vec<Self> {
        if self.intersect(o).is_empty() {
            return vec![self.clone()];
        }
        let dates_in = self.dates.intersect(&o.dates);
        [
            TimeCell {
                dates: self.dates.difference(&o.dates),
                days: self.days,
                minutes: self.minutes.clone(),
            },
            TimeCell {
                dates: dates_in.clone(),
                days: self.days & !o.days & ALL_DAYS,
                minutes: self.minutes.clone(),
            },
            TimeCell {
                dates: dates_in,
                days: self.days & o.days,
                minutes: self.minutes.difference(&o.minutes),
            },
        ]
        .into_iter()
        .filter(|c| !c.is_empty())
        .collect()
    }
}

pub type TimeSet = CellSet<TimeCell>;

pub fn time_universe() -> TimeSet {
    TimeSet::from_cell(TimeCell::full())
}

pub fn time_set_contains(set: &TimeSet, ts: &Timestamp) -> bool {
    set.cells().iter().any(|c| c.contains(ts))
}

/// `HH:MM` to minutes of day.
pub fn parse_minute(s: &str) -> Result<u16, String> {
    let (h, m) = s.split_once(':').ok_or_else(|| format!("expected HH:MM, got {s:?}"))?;
    let h: u16 = h.parse().map_err(|_| format!("bad hour in {s:?}"))?;
    let m: u16 = m.parse().map_err(|_| format!("bad minute in {s:?}"))?;
    if h > 23 || m > 59 {
        return Err(format!("time of day out of range: {s:?}"));
    }
    Ok(h * 60 + m)
}

pub fn format_minute(m: u16) -> String {
    format!("{:02}:{:02}", m / 60, m % 60)
}

pub const DATETIME_FMT: &str = "%Y-%m-%dT%H:%M";

pub fn parse_datetime(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s, DATETIME_FMT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d").map(|d| d.and_hms_opt(0, 0, 0).expect("midnight"))
        })
        .map_err(|_| format!("bad date-time {s:?}, expected YYYY-MM-DDTHH:MM"))
}
