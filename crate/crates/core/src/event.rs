//! Event records, on-disk event formats and polarity splitting.
//!
//! Three input formats are supported:
//!
//! * CSV with a `x,y,t,p` header and one integer event per line.
//! * EVB1, a small fixed-layout little-endian binary container.
//! * AEDAT 3.1 polarity packets (other packet types are skipped).
//!
//! Timestamps stay in integer microseconds; normalization happens in the
//! sampler so that parsing is lossless.

use std::io::{Cursor, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const EVB1_MAGIC: &[u8; 4] = b"EVB1";
const EVB1_HEADER_LEN: usize = 4 + 4 + 4 + 8;
const EVB1_RECORD_LEN: usize = 16;

const AEDAT_PACKET_HEADER_LEN: usize = 28;
const AEDAT_POLARITY_TYPE: i16 = 1;
const AEDAT_POLARITY_SIZE: i32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EventError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invalid polarity {value} (expected 0 or 1)")]
    InvalidPolarity { value: u64 },
    #[error("event ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: u64,
        y: u64,
        width: u32,
        height: u32,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated input: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("polarity packet with unsupported event size {0}")]
    UnsupportedEventSize(i32),
    #[error("malformed packet header: {0}")]
    MalformedPacket(String),
    #[error("invalid sensor geometry {width}x{height}")]
    InvalidGeometry { width: u32, height: u32 },
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EventError {
    fn from(e: std::io::Error) -> Self {
        EventError::Io(e.to_string())
    }
}

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    /// 1 = brightness increase, 0 = decrease.
    pub p: u8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: u8) -> Self {
        Event { x, y, t, p }
    }
}

/// Time-ordered events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Validates bounds and polarity, then stably sorts by timestamp.
    pub fn new(mut events: Vec<Event>, width: u32, height: u32) -> Result<Self, EventError> {
        if width == 0 || height == 0 || width > u32::from(u16::MAX) + 1 || height > u32::from(u16::MAX) + 1 {
            return Err(EventError::InvalidGeometry { width, height });
        }
        for e in &events {
            if e.p > 1 {
                return Err(EventError::InvalidPolarity { value: e.p.into() });
            }
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(EventError::OutOfBounds {
                    x: e.x.into(),
                    y: e.y.into(),
                    width,
                    height,
                });
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        EventStream {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

/// Parses `x,y,t,p` CSV text. Blank lines are ignored.
pub fn parse_csv_events(text: &[u8], width: u32, height: u32) -> Result<EventStream, EventError> {
    let text = std::str::from_utf8(text).map_err(|e| EventError::MalformedLine {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "x,y,t,p" => {}
        Some((_, header)) => {
            return Err(EventError::MalformedLine {
                line: 1,
                reason: format!("expected header `x,y,t,p`, found `{header}`"),
            })
        }
        None => return Ok(EventStream::empty(width, height)),
    }

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(EventError::MalformedLine {
                line: lineno,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0u64; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| EventError::MalformedLine {
                line: lineno,
                reason: format!("`{f}` is not a non-negative integer"),
            })?;
        }
        let [x, y, t, p] = vals;
        if p > 1 {
            return Err(EventError::InvalidPolarity { value: p });
        }
        if x >= u64::from(width) || y >= u64::from(height) {
            return Err(EventError::OutOfBounds {
                x,
                y,
                width,
                height,
            });
        }
        events.push(Event::new(x as u16, y as u16, t, p as u8));
    }
    EventStream::new(events, width, height)
}

pub fn write_csv_events<W: Write>(stream: &EventStream, mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y,t,p")?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.p)?;
    }
    Ok(())
}

fn need(bytes: &[u8], pos: usize, len: usize) -> Result<(), EventError> {
    let needed = pos.saturating_add(len);
    if bytes.len() < needed {
        Err(EventError::Truncated {
            needed,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

/// Decodes an EVB1 container.
pub fn parse_binary_events(bytes: &[u8]) -> Result<EventStream, EventError> {
    need(bytes, 0, 4)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if &magic != EVB1_MAGIC {
        return Err(EventError::BadMagic(magic));
    }
    need(bytes, 0, EVB1_HEADER_LEN)?;
    let mut cur = Cursor::new(&bytes[4..]);
    let width = cur.read_u32::<LittleEndian>()?;
    let height = cur.read_u32::<LittleEndian>()?;
    let count = cur.read_u64::<LittleEndian>()?;

    let body = count
        .checked_mul(EVB1_RECORD_LEN as u64)
        .and_then(|b| usize::try_from(b).ok())
        .ok_or(EventError::Truncated {
            needed: usize::MAX,
            found: bytes.len(),
        })?;
    need(bytes, EVB1_HEADER_LEN, body)?;

    let mut events = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let x = cur.read_u16::<LittleEndian>()?;
        let y = cur.read_u16::<LittleEndian>()?;
        let p = cur.read_u8()?;
        let mut pad = [0u8; 3];
        cur.read_exact(&mut pad)?;
        let t = cur.read_u64::<LittleEndian>()?;
        if p > 1 {
            return Err(EventError::InvalidPolarity { value: p.into() });
        }
        events.push(Event::new(x, y, t, p));
    }
    EventStream::new(events, width, height)
}

/// Encodes a stream as EVB1. Padding bytes are written as zero.
pub fn write_binary_events<W: Write>(stream: &EventStream, mut out: W) -> std::io::Result<()> {
    out.write_all(EVB1_MAGIC)?;
    out.write_u32::<LittleEndian>(stream.width)?;
    out.write_u32::<LittleEndian>(stream.height)?;
    out.write_u64::<LittleEndian>(stream.events.len() as u64)?;
    for e in &stream.events {
        out.write_u16::<LittleEndian>(e.x)?;
        out.write_u16::<LittleEndian>(e.y)?;
        out.write_u8(e.p)?;
        out.write_all(&[0u8; 3])?;
        out.write_u64::<LittleEndian>(e.t)?;
    }
    Ok(())
}

pub fn binary_bytes(stream: &EventStream) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EVB1_HEADER_LEN + EVB1_RECORD_LEN * stream.len());
    write_binary_events(stream, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// AEDAT 3.1 files carry no sensor geometry in the binary packets; the
/// `# ... sizeX/sizeY` comments are not standardized either, so the stream
/// is sized to the bounding box of the decoded events (or the DAVIS240
/// default of 240x180 when that is larger).
pub fn parse_aedat31(bytes: &[u8]) -> Result<EventStream, EventError> {
    parse_aedat31_sized(bytes, None)
}

/// Like [`parse_aedat31`] but with an explicit sensor size, which is
/// validated against every decoded event.
pub fn parse_aedat31_sized(bytes: &[u8], size: Option<(u32, u32)>) -> Result<EventStream, EventError> {
    let mut pos = 0usize;
    // ASCII header: consecutive lines starting with '#'.
    while pos < bytes.len() && bytes[pos] == b'#' {
        match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(nl) => pos += nl + 1,
            None => pos = bytes.len(),
        }
    }

    let mut events = Vec::new();
    while pos < bytes.len() {
        need(bytes, pos, AEDAT_PACKET_HEADER_LEN)?;
        let mut cur = Cursor::new(&bytes[pos..pos + AEDAT_PACKET_HEADER_LEN]);
        let event_type = cur.read_i16::<LittleEndian>()?;
        let _event_source = cur.read_i16::<LittleEndian>()?;
        let event_size = cur.read_i32::<LittleEndian>()?;
        let _ts_offset = cur.read_i32::<LittleEndian>()?;
        let ts_overflow = cur.read_i32::<LittleEndian>()?;
        let _capacity = cur.read_i32::<LittleEndian>()?;
        let event_number = cur.read_i32::<LittleEndian>()?;
        let _event_valid = cur.read_i32::<LittleEndian>()?;
        pos += AEDAT_PACKET_HEADER_LEN;

        if event_size < 0 || event_number < 0 {
            return Err(EventError::MalformedPacket(format!(
                "negative packet field (eventSize {event_size}, eventNumber {event_number})"
            )));
        }
        let body = (event_size as usize).saturating_mul(event_number as usize);
        need(bytes, pos, body)?;

        if event_type == AEDAT_POLARITY_TYPE {
            if event_size != AEDAT_POLARITY_SIZE {
                return Err(EventError::UnsupportedEventSize(event_size));
            }
            let overflow = u64::from(ts_overflow as u32) << 31;
            let mut cur = Cursor::new(&bytes[pos..pos + body]);
            for _ in 0..event_number {
                let data = cur.read_u32::<LittleEndian>()?;
                let ts = cur.read_u32::<LittleEndian>()?;
                if data & 1 == 0 {
                    continue;
                }
                let p = ((data >> 1) & 1) as u8;
                let y = ((data >> 2) & 0x7FFF) as u16;
                let x = ((data >> 17) & 0x7FFF) as u16;
                events.push(Event::new(x, y, u64::from(ts) + overflow, p));
            }
        }
        pos += body;
    }

    let (width, height) = match size {
        Some(s) => s,
        None => {
            let w = events.iter().map(|e| u32::from(e.x) + 1).max().unwrap_or(0);
            let h = events.iter().map(|e| u32::from(e.y) + 1).max().unwrap_or(0);
            (w.max(240), h.max(180))
        }
    };
    EventStream::new(events, width, height)
}

/// Encodes events as a single AEDAT 3.1 polarity packet (no ASCII header).
/// Timestamps must fit in 31 bits relative to the packet overflow counter.
pub fn aedat31_polarity_packet(events: &[Event], ts_overflow: i32) -> Vec<u8> {
    let mut buf = Vec::with_capacity(AEDAT_PACKET_HEADER_LEN + 8 * events.len());
    let n = events.len() as i32;
    buf.write_i16::<LittleEndian>(AEDAT_POLARITY_TYPE).unwrap();
    buf.write_i16::<LittleEndian>(0).unwrap();
    buf.write_i32::<LittleEndian>(AEDAT_POLARITY_SIZE).unwrap();
    buf.write_i32::<LittleEndian>(4).unwrap();
    buf.write_i32::<LittleEndian>(ts_overflow).unwrap();
    buf.write_i32::<LittleEndian>(n).unwrap();
    buf.write_i32::<LittleEndian>(n).unwrap();
    buf.write_i32::<LittleEndian>(n).unwrap();
    for e in events {
        let data = 1u32 | (u32::from(e.p) << 1) | (u32::from(e.y) << 2) | (u32::from(e.x) << 17);
        buf.write_u32::<LittleEndian>(data).unwrap();
        buf.write_u32::<LittleEndian>(e.t as u32).unwrap();
    }
    buf
}

/// Partitions a stream into (positive, negative) polarity streams,
/// preserving order within each.
pub fn split_polarity(s: &EventStream) -> (EventStream, EventStream) {
    let (pos, neg): (Vec<Event>, Vec<Event>) = s.events.iter().partition(|e| e.p == 1);
    (
        EventStream {
            events: pos,
            width: s.width,
            height: s.height,
        },
        EventStream {
            events: neg,
            width: s.width,
            height: s.height,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_two_events() {
        let s = parse_csv_events(b"x,y,t,p\n10,20,1000,1\n11,20,1500,0", 64, 64).unwrap();
        assert_eq!(
            s.events(),
            &[Event::new(10, 20, 1000, 1), Event::new(11, 20, 1500, 0)]
        );
    }

    #[test]
    fn csv_header_only_is_empty() {
        let s = parse_csv_events(b"x,y,t,p\n", 64, 64).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn csv_errors() {
        assert_eq!(
            parse_csv_events(b"x,y,t,p\n10,20,1000,2", 64, 64),
            Err(EventError::InvalidPolarity { value: 2 })
        );
        assert!(matches!(
            parse_csv_events(b"x,y,t,p\n10,20,1000", 64, 64),
            Err(EventError::MalformedLine { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv_events(b"x,y,t,p\n10,-2,1000,1", 64, 64),
            Err(EventError::MalformedLine { .. })
        ));
        assert!(matches!(
            parse_csv_events(b"x,y,t,p\n64,0,1000,1", 64, 64),
            Err(EventError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn csv_sorts_stably_by_time() {
        let s = parse_csv_events(b"x,y,t,p\n1,1,5,1\n2,2,3,0\n3,3,5,0", 8, 8).unwrap();
        let xs: Vec<u16> = s.events().iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![2, 1, 3]);
    }

    fn evb1(width: u32, height: u32, count: u64, records: &[(u16, u16, u8, u64)]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"EVB1");
        b.extend_from_slice(&width.to_le_bytes());
        b.extend_from_slice(&height.to_le_bytes());
        b.extend_from_slice(&count.to_le_bytes());
        for &(x, y, p, t) in records {
            b.extend_from_slice(&x.to_le_bytes());
            b.extend_from_slice(&y.to_le_bytes());
            b.push(p);
            b.extend_from_slice(&[0, 0, 0]);
            b.extend_from_slice(&t.to_le_bytes());
        }
        b
    }

    #[test]
    fn binary_single_event() {
        let s = parse_binary_events(&evb1(2, 2, 1, &[(1, 0, 1, 42)])).unwrap();
        assert_eq!(s.events(), &[Event::new(1, 0, 42, 1)]);
        assert_eq!((s.width(), s.height()), (2, 2));
    }

    #[test]
    fn binary_errors() {
        let mut bad = evb1(2, 2, 0, &[]);
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(parse_binary_events(&bad), Err(EventError::BadMagic(*b"XXXX")));
        assert!(matches!(
            parse_binary_events(&evb1(2, 2, 2, &[(1, 0, 1, 42)])),
            Err(EventError::Truncated { .. })
        ));
        assert!(matches!(
            parse_binary_events(b"EVB1\x02\x00"),
            Err(EventError::Truncated { .. })
        ));
        assert_eq!(
            parse_binary_events(&evb1(2, 2, 1, &[(1, 0, 3, 42)])),
            Err(EventError::InvalidPolarity { value: 3 })
        );
        assert!(matches!(
            parse_binary_events(&evb1(2, 2, 1, &[(2, 0, 1, 42)])),
            Err(EventError::OutOfBounds { .. })
        ));
        assert!(matches!(
            parse_binary_events(&evb1(2, 2, u64::MAX, &[])),
            Err(EventError::Truncated { .. })
        ));
    }

    #[test]
    fn binary_round_trip() {
        let bytes = evb1(4, 3, 3, &[(0, 0, 1, 1), (3, 2, 0, 5), (1, 1, 1, 5)]);
        let s = parse_binary_events(&bytes).unwrap();
        assert_eq!(binary_bytes(&s), bytes);
    }

    /// Builds the packet bytes field by field from the documented layout,
    /// independently of `aedat31_polarity_packet`.
    fn manual_packet(event_type: i16, event_size: i32, number: i32, words: &[(u32, u32)]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&event_type.to_le_bytes());
        b.extend_from_slice(&0i16.to_le_bytes());
        b.extend_from_slice(&event_size.to_le_bytes());
        b.extend_from_slice(&4i32.to_le_bytes());
        b.extend_from_slice(&0i32.to_le_bytes());
        b.extend_from_slice(&number.to_le_bytes());
        b.extend_from_slice(&number.to_le_bytes());
        b.extend_from_slice(&number.to_le_bytes());
        for &(w0, w1) in words {
            b.extend_from_slice(&w0.to_le_bytes());
            b.extend_from_slice(&w1.to_le_bytes());
        }
        b
    }

    #[test]
    fn aedat_single_event() {
        // valid=1, polarity=1, y=7, x=5
        let word0 = 1 | (1 << 1) | (7 << 2) | (5 << 17);
        let mut bytes = b"#!AER-DAT3.1\r\n# Format: RAW\r\n".to_vec();
        bytes.extend(manual_packet(1, 8, 1, &[(word0, 1000)]));
        let s = parse_aedat31(&bytes).unwrap();
        assert_eq!(s.events(), &[Event::new(5, 7, 1000, 1)]);
        assert_eq!(bytes[bytes.len() - 36..], aedat31_polarity_packet(s.events(), 0)[..]);
    }

    #[test]
    fn aedat_header_only() {
        let s = parse_aedat31(b"#!AER-DAT3.1\r\n#End Of ASCII Header\r\n").unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn aedat_skips_invalid_and_other_types() {
        let valid = 1 | (3 << 2) | (2 << 17);
        let invalid = (1 << 1) | (4 << 2) | (9 << 17);
        let mut bytes = manual_packet(2, 12, 2, &[]);
        bytes.extend_from_slice(&[0u8; 24]);
        bytes.extend(manual_packet(1, 8, 2, &[(invalid, 5), (valid, 6)]));
        let s = parse_aedat31(&bytes).unwrap();
        assert_eq!(s.events(), &[Event::new(2, 3, 6, 0)]);
    }

    #[test]
    fn aedat_overflow_folds_into_timestamp() {
        let e = Event::new(1, 1, 10, 1);
        let bytes = aedat31_polarity_packet(&[e], 3);
        let s = parse_aedat31(&bytes).unwrap();
        assert_eq!(s.events()[0].t, 10 + 3 * (1u64 << 31));
    }

    #[test]
    fn aedat_errors() {
        let w = 1 | (5 << 17);
        let bytes = manual_packet(1, 8, 2, &[(w, 1)]);
        assert!(matches!(parse_aedat31(&bytes), Err(EventError::Truncated { .. })));
        let bytes = manual_packet(1, 6, 0, &[]);
        assert_eq!(parse_aedat31(&bytes), Err(EventError::UnsupportedEventSize(6)));
        assert!(matches!(
            parse_aedat31(&[1, 0, 8, 0]),
            Err(EventError::Truncated { .. })
        ));
        let w = 1 | (300 << 17);
        let bytes = manual_packet(1, 8, 1, &[(w, 1)]);
        assert!(matches!(
            parse_aedat31_sized(&bytes, Some((240, 180))),
            Err(EventError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn split_counts() {
        let s = EventStream::new(
            vec![
                Event::new(0, 0, 1, 1),
                Event::new(0, 0, 2, 0),
                Event::new(0, 0, 3, 1),
            ],
            4,
            4,
        )
        .unwrap();
        let (p, n) = split_polarity(&s);
        assert_eq!((p.len(), n.len()), (2, 1));

        let all_pos = EventStream::new(vec![Event::new(0, 0, 1, 1)], 4, 4).unwrap();
        assert!(split_polarity(&all_pos).1.is_empty());

        let (p, n) = split_polarity(&EventStream::empty(4, 4));
        assert!(p.is_empty() && n.is_empty());
    }
}
