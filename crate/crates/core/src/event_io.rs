//! Event stream types and the `.evt` / `.csv` interchange formats.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! header:  "EVT1" | width u16 | height u16 | count u64          (16 bytes)
//! record:  t u64 | x u16 | y u16 | polarity u8 (1 = on, 0 = off) (13 bytes)
//! ```
//!
//! The CSV form has a `width,height` header line followed by one
//! `t,x,y,polarity` line per event.

use std::fmt::Write as _;

use thiserror::Error;

pub const EVT_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT_HEADER_LEN: usize = 16;
pub const EVT_RECORD_LEN: usize = 13;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventIoError {
    #[error("bad magic: expected \"EVT1\"")]
    BadMagic,
    #[error("truncated file: header declares {declared} bytes, found {found}")]
    TruncatedFile { declared: u128, found: usize },
    #[error("event {0} lies outside the sensor")]
    OutOfBounds(usize),
    #[error("event {0} has a timestamp earlier than its predecessor")]
    UnsortedTimestamps(usize),
    #[error("bad polarity byte {0}")]
    BadPolarity(u8),
    #[error("parse error on line {0}")]
    ParseError(usize),
}

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Result<Self, EventIoError> {
        match bit {
            1 => Ok(Polarity::On),
            0 => Ok(Polarity::Off),
            other => Err(EventIoError::BadPolarity(other)),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => 0,
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds since stream start.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Event { t, x, y, polarity }
    }
}

/// A sensor-sized, time-ordered sequence of events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn empty(width: u16, height: u16) -> Self {
        EventStream { width, height, events: Vec::new() }
    }

    /// Builds a stream, checking bounds and temporal order.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self, EventIoError> {
        let stream = EventStream { width, height, events };
        stream.validate()?;
        Ok(stream)
    }

    pub fn validate(&self) -> Result<(), EventIoError> {
        let mut prev = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(EventIoError::OutOfBounds(i));
            }
            if i > 0 && e.t < prev {
                return Err(EventIoError::UnsortedTimestamps(i));
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Inclusive `(first, last)` timestamps, `None` when empty.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&b[at..at + 8]);
    u64::from_le_bytes(buf)
}

pub fn parse_evt(bytes: &[u8]) -> Result<EventStream, EventIoError> {
    if bytes.len() < 4 || &bytes[..4] != EVT_MAGIC {
        return Err(EventIoError::BadMagic);
    }
    if bytes.len() < EVT_HEADER_LEN {
        return Err(EventIoError::TruncatedFile {
            declared: EVT_HEADER_LEN as u128,
            found: bytes.len(),
        });
    }
    let width = read_u16(bytes, 4);
    let height = read_u16(bytes, 6);
    let count = read_u64(bytes, 8);
    let declared = EVT_HEADER_LEN as u128 + count as u128 * EVT_RECORD_LEN as u128;
    if (bytes.len() as u128) < declared {
        return Err(EventIoError::TruncatedFile { declared, found: bytes.len() });
    }
    let count = count as usize;
    let mut events = Vec::with_capacity(count);
    let mut prev = 0u64;
    for i in 0..count {
        let at = EVT_HEADER_LEN + i * EVT_RECORD_LEN;
        let t = read_u64(bytes, at);
        let x = read_u16(bytes, at + 8);
        let y = read_u16(bytes, at + 10);
        let polarity = Polarity::from_bit(bytes[at + 12])?;
        if x >= width || y >= height {
            return Err(EventIoError::OutOfBounds(i));
        }
        if i > 0 && t < prev {
            return Err(EventIoError::UnsortedTimestamps(i));
        }
        prev = t;
        events.push(Event { t, x, y, polarity });
    }
    Ok(EventStream { width, height, events })
}

pub fn write_evt(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVT_HEADER_LEN + stream.events.len() * EVT_RECORD_LEN);
    out.extend_from_slice(EVT_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity.bit());
    }
    out
}

/// Parses the CSV form. Line numbers in errors are 1-based.
pub fn parse_csv(text: &str) -> Result<EventStream, EventIoError> {
    let mut lines = text.lines().enumerate();
    let (width, height) = match lines.next() {
        Some((_, header)) => {
            let mut it = header.trim().split(',');
            let w = it.next().and_then(|s| s.trim().parse::<u16>().ok());
            let h = it.next().and_then(|s| s.trim().parse::<u16>().ok());
            match (w, h, it.next()) {
                (Some(w), Some(h), None) => (w, h),
                _ => return Err(EventIoError::ParseError(1)),
            }
        }
        None => return Err(EventIoError::ParseError(1)),
    };
    let mut events = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(EventIoError::ParseError(lineno));
        }
        let err = || EventIoError::ParseError(lineno);
        let t = fields[0].parse::<u64>().map_err(|_| err())?;
        let x = fields[1].parse::<u16>().map_err(|_| err())?;
        let y = fields[2].parse::<u16>().map_err(|_| err())?;
        let polarity = match fields[3] {
            "1" => Polarity::On,
            "0" => Polarity::Off,
            _ => return Err(err()),
        };
        if x >= width || y >= height {
            return Err(err());
        }
        if events.last().is_some_and(|p: &Event| t < p.t) {
            return Err(err());
        }
        events.push(Event { t, x, y, polarity });
    }
    Ok(EventStream { width, height, events })
}

pub fn write_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 + stream.events.len() * 16);
    let _ = writeln!(out, "{},{}", stream.width, stream.height);
    for e in &stream.events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.polarity.bit());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_encoded_single() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"EVT1");
        b.extend_from_slice(&[16, 0, 16, 0]);
        b.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        b.extend_from_slice(&[5, 0, 0, 0, 0, 0, 0, 0]);
        b.extend_from_slice(&[3, 0, 7, 0, 1]);
        b
    }

    #[test]
    fn empty_header() {
        let s = EventStream::empty(640, 480);
        let bytes = write_evt(&s);
        assert_eq!(bytes.len(), 16);
        let back = parse_evt(&bytes).unwrap();
        assert_eq!(back.width, 640);
        assert_eq!(back.height, 480);
        assert!(back.is_empty());
    }

    #[test]
    fn single_event_bytes() {
        let bytes = hand_encoded_single();
        let s = parse_evt(&bytes).unwrap();
        assert_eq!((s.width, s.height), (16, 16));
        assert_eq!(s.events, vec![Event::new(5, 3, 7, Polarity::On)]);
        assert_eq!(write_evt(&s), bytes);
    }

    #[test]
    fn csv_matches_binary() {
        let a = parse_csv("16,16\n5,3,7,1\n").unwrap();
        let b = parse_evt(&hand_encoded_single()).unwrap();
        assert_eq!(a, b);
        assert_eq!(parse_csv("16,16\n").unwrap(), EventStream::empty(16, 16));
        assert_eq!(parse_csv(&write_csv(&a)).unwrap(), a);
    }

    #[test]
    fn csv_bad_polarity() {
        assert_eq!(parse_csv("16,16\n5,3,7,2\n"), Err(EventIoError::ParseError(2)));
        assert_eq!(parse_csv("16,16\n5,3,7,1\n4,3,7,1\n"), Err(EventIoError::ParseError(3)));
        assert_eq!(parse_csv("16\n"), Err(EventIoError::ParseError(1)));
    }

    #[test]
    fn binary_errors() {
        let mut bad = hand_encoded_single();
        bad[2] = b'X';
        assert_eq!(parse_evt(&bad), Err(EventIoError::BadMagic));

        let good = hand_encoded_single();
        assert!(matches!(
            parse_evt(&good[..good.len() - 1]),
            Err(EventIoError::TruncatedFile { .. })
        ));

        let mut pol = good.clone();
        *pol.last_mut().unwrap() = 2;
        assert_eq!(parse_evt(&pol), Err(EventIoError::BadPolarity(2)));

        let mut oob = good.clone();
        oob[24] = 16;
        assert_eq!(parse_evt(&oob), Err(EventIoError::OutOfBounds(0)));

        let s = EventStream {
            width: 4,
            height: 4,
            events: vec![Event::new(9, 0, 0, Polarity::On), Event::new(3, 1, 1, Polarity::Off)],
        };
        assert_eq!(parse_evt(&write_evt(&s)), Err(EventIoError::UnsortedTimestamps(1)));
    }

    #[test]
    fn huge_count_does_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(b"EVT1");
        b.extend_from_slice(&[1, 0, 1, 0]);
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(parse_evt(&b), Err(EventIoError::TruncatedFile { .. })));
    }
}
