//! Text and packed-binary event formats.
//!
//! Text: one `t_us,x,y,p` record per line, `#` comment lines ignored. A
//! timestamp written with a decimal point or exponent is read as seconds and
//! converted to microseconds with round-half-even.
//!
//! Binary: 16-byte header (`ECPEVT01`, u16 width, u16 height, 4 reserved
//! bytes) followed by 13-byte little-endian records `(u64 t, u16 x, u16 y, i8 p)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const EVENT_MAGIC: &[u8; 8] = b"ECPEVT01";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventFormat {
    TextCsv,
    PackedBinary,
}

impl EventFormat {
    /// Guesses from the file extension: `.bin`/`.evt` are binary, anything
    /// else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("evt") => EventFormat::PackedBinary,
            _ => EventFormat::TextCsv,
        }
    }
}

/// Parses an event source. `dims` is required for text input; for binary
/// input the header dims are used and, if `dims` is given, must agree.
pub fn ingest_events(
    source: &[u8],
    format: EventFormat,
    dims: Option<(u16, u16)>,
) -> Result<EventStream> {
    match format {
        EventFormat::TextCsv => {
            let (w, h) =
                dims.ok_or_else(|| Error::param("sensor dims", "required for text event input"))?;
            parse_text(source, w, h)
        }
        EventFormat::PackedBinary => parse_binary(source, dims),
    }
}

pub fn read_events_file(
    path: &Path,
    format: EventFormat,
    dims: Option<(u16, u16)>,
) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest_events(&bytes, format, dims)
}

fn parse_text(source: &[u8], width: u16, height: u16) -> Result<EventStream> {
    if width == 0 || height == 0 {
        return Err(Error::param(
            "sensor dims",
            "width and height must be positive",
        ));
    }
    let text = std::str::from_utf8(source)
        .map_err(|e| Error::Format(format!("event text is not UTF-8: {e}")))?;
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(malformed(format!(
                "expected 4 fields, found {}",
                fields.len()
            )));
        }
        let t = parse_timestamp(fields[0], line_no)?;
        let x: i64 = fields[1]
            .parse()
            .map_err(|_| malformed(format!("bad x `{}`", fields[1])))?;
        let y: i64 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("bad y `{}`", fields[2])))?;
        let p: i64 = fields[3]
            .parse()
            .map_err(|_| malformed(format!("bad polarity `{}`", fields[3])))?;
        let p = Polarity::from_raw(p)
            .ok_or_else(|| malformed(format!("polarity {p} not in {{-1, 0, 1}}")))?;
        if x < 0 || y < 0 || x >= i64::from(width) || y >= i64::from(height) {
            return Err(Error::OutOfBounds {
                record: line_no,
                x: x.max(0) as u64,
                y: y.max(0) as u64,
                width: width.into(),
                height: height.into(),
            });
        }
        events.push(Event::new(t, x as u16, y as u16, p));
    }
    EventStream::new(events, width, height)
}

fn parse_timestamp(field: &str, line: usize) -> Result<u64> {
    if field.starts_with('-') {
        return Err(Error::NegativeTimestamp { record: line });
    }
    let bad = || Error::MalformedRecord {
        line,
        reason: format!("bad timestamp `{field}`"),
    };
    if field.contains(['e', 'E']) {
        let secs: f64 = field.parse().map_err(|_| bad())?;
        if !secs.is_finite() {
            return Err(bad());
        }
        return Ok((secs * 1e6).round_ties_even() as u64);
    }
    if let Some((whole, frac)) = field.split_once('.') {
        return decimal_seconds_to_us(whole, frac).ok_or_else(bad);
    }
    field.parse().map_err(|_| bad())
}

/// Exact decimal conversion of `whole.frac` seconds to microseconds,
/// rounding the digits past the sixth fractional place half-to-even.
fn decimal_seconds_to_us(whole: &str, frac: &str) -> Option<u64> {
    let digits_ok = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    if !digits_ok(whole) || !digits_ok(frac) || (whole.is_empty() && frac.is_empty()) {
        return None;
    }
    let whole: u64 = if whole.is_empty() {
        0
    } else {
        whole.parse().ok()?
    };
    let (head, tail) = frac.split_at(frac.len().min(6));
    let mut micros: u64 = if head.is_empty() {
        0
    } else {
        head.parse().ok()?
    };
    micros *= 10u64.pow(6 - head.len() as u32);
    let mut us = whole.checked_mul(1_000_000)?.checked_add(micros)?;
    let tail = tail.as_bytes();
    if let Some((&first, rest)) = tail.split_first() {
        let rest_nonzero = rest.iter().any(|&b| b != b'0');
        let round_up = match first.cmp(&b'5') {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => rest_nonzero || us % 2 == 1,
        };
        if round_up {
            us = us.checked_add(1)?;
        }
    }
    Some(us)
}

fn parse_binary(source: &[u8], dims: Option<(u16, u16)>) -> Result<EventStream> {
    if source.len() < HEADER_LEN || &source[..8] != EVENT_MAGIC {
        return Err(Error::Format("missing ECPEVT01 header".into()));
    }
    let width = u16::from_le_bytes([source[8], source[9]]);
    let height = u16::from_le_bytes([source[10], source[11]]);
    if let Some((w, h)) = dims {
        if (w, h) != (width, height) {
            return Err(Error::DimensionMismatch(format!(
                "header says {width}x{height}, caller expects {w}x{h}"
            )));
        }
    }
    let body = &source[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Format(format!(
            "event payload of {} bytes is not a multiple of {RECORD_LEN}",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8-byte slice"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p =
            Polarity::from_raw(i64::from(rec[12] as i8)).ok_or_else(|| Error::MalformedRecord {
                line: i + 1,
                reason: format!("polarity {} not in {{-1, 0, 1}}", rec[12] as i8),
            })?;
        events.push(Event::new(t, x, y, p));
    }
    EventStream::new(events, width, height)
}

pub fn write_events_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.as_i8() as u8);
    }
    out
}

pub fn write_events_csv(stream: &EventStream) -> String {
    let mut out = format!(
        "# t_us,x,y,p sensor={}x{}\n",
        stream.width(),
        stream.height()
    );
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p.as_i8()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_empty_stream() {
        let s = ingest_events(b"", EventFormat::TextCsv, Some((10, 10))).unwrap();
        assert!(s.is_empty());
        assert_eq!((s.t_start(), s.t_end()), (0, 0));
    }

    #[test]
    fn parses_two_records() {
        let s = ingest_events(
            b"100,3,4,1\n200,3,4,-1",
            EventFormat::TextCsv,
            Some((10, 10)),
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[0], Event::new(100, 3, 4, Polarity::Positive));
        assert_eq!(s.events()[1], Event::new(200, 3, 4, Polarity::Negative));
    }

    #[test]
    fn out_of_bounds_names_record() {
        let err = ingest_events(b"100,99,4,1", EventFormat::TextCsv, Some((10, 10))).unwrap_err();
        assert!(
            matches!(
                err,
                Error::OutOfBounds {
                    record: 1,
                    x: 99,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let src = b"# header\n100,1,1,1\n200,1,1\n";
        let err = ingest_events(src, EventFormat::TextCsv, Some((4, 4))).unwrap_err();
        assert!(
            matches!(err, Error::MalformedRecord { line: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn negative_timestamp_rejected() {
        let err = ingest_events(b"-5,1,1,1", EventFormat::TextCsv, Some((4, 4))).unwrap_err();
        assert!(matches!(err, Error::NegativeTimestamp { record: 1 }));
    }

    #[test]
    fn zero_polarity_normalized_and_seconds_converted() {
        let s = ingest_events(
            b"0.0000025,1,1,0\n0.0000035,1,1,1\n",
            EventFormat::TextCsv,
            Some((4, 4)),
        )
        .unwrap();
        // 2.5 us and 3.5 us round half to even
        assert_eq!(s.events()[0].t, 2);
        assert_eq!(s.events()[0].p, Polarity::Negative);
        assert_eq!(s.events()[1].t, 4);
    }

    #[test]
    fn binary_header_checked() {
        assert!(ingest_events(b"NOTMAGIC00000000", EventFormat::PackedBinary, None).is_err());
        let s = EventStream::new(vec![Event::new(7, 1, 2, Polarity::Positive)], 8, 6).unwrap();
        let bytes = write_events_binary(&s);
        assert_eq!(bytes.len(), 16 + 13);
        assert!(matches!(
            ingest_events(&bytes, EventFormat::PackedBinary, Some((9, 6))),
            Err(Error::DimensionMismatch(_))
        ));
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(ingest_events(&truncated, EventFormat::PackedBinary, None).is_err());
    }

    fn arb_events() -> impl Strategy<Value = Vec<(u64, u16, u16, bool)>> {
        proptest::collection::vec((0u64..1_000_000, 0u16..32, 0u16..24, any::<bool>()), 0..200)
    }

    fn build(raw: &[(u64, u16, u16, bool)]) -> EventStream {
        let events = raw
            .iter()
            .map(|&(t, x, y, p)| {
                Event::new(
                    t,
                    x,
                    y,
                    if p {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    },
                )
            })
            .collect();
        EventStream::new(events, 32, 24).unwrap()
    }

    proptest! {
        #[test]
        fn binary_and_text_round_trip(raw in arb_events()) {
            let s = build(&raw);
            let bin = ingest_events(&write_events_binary(&s), EventFormat::PackedBinary, None).unwrap();
            prop_assert_eq!(&bin, &s);
            let txt = ingest_events(write_events_csv(&s).as_bytes(), EventFormat::TextCsv, Some((32, 24))).unwrap();
            prop_assert_eq!(&txt, &s);
        }
    }
}
