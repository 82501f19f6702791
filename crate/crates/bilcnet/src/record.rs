//! Canonical on-disk representation of per-subframe physical-channel records.
//!
//! A session file is UTF-8 newline-delimited JSON: the first line is a
//! [`SessionHeader`], every following line one [`PhysicalChannelRecord`].
//! Serialization is canonical (fixed key order, absent optionals omitted,
//! shortest round-tripping decimals), so `parse ∘ serialize` is the identity
//! on valid records and `serialize ∘ parse` canonicalizes any accepted line.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use thiserror::Error;

/// The six standardized 5G physical channels.
///
/// The pipeline consumes PDCCH/PDSCH/PUCCH/PUSCH; PBCH and PRACH parse but
/// are dropped with a counter by [`read_session`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Pdcch,
    Pdsch,
    Pbch,
    Pucch,
    Pusch,
    Prach,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Pdcch => "PDCCH",
            ChannelKind::Pdsch => "PDSCH",
            ChannelKind::Pbch => "PBCH",
            ChannelKind::Pucch => "PUCCH",
            ChannelKind::Pusch => "PUSCH",
            ChannelKind::Prach => "PRACH",
        }
    }

    pub fn from_str_exact(s: &str) -> Option<Self> {
        Some(match s {
            "PDCCH" => ChannelKind::Pdcch,
            "PDSCH" => ChannelKind::Pdsch,
            "PBCH" => ChannelKind::Pbch,
            "PUCCH" => ChannelKind::Pucch,
            "PUSCH" => ChannelKind::Pusch,
            "PRACH" => ChannelKind::Prach,
            _ => return None,
        })
    }

    /// Expected link direction for this channel.
    pub fn direction(self) -> Direction {
        match self {
            ChannelKind::Pdcch | ChannelKind::Pdsch | ChannelKind::Pbch => Direction::Dl,
            ChannelKind::Pucch | ChannelKind::Pusch | ChannelKind::Prach => Direction::Ul,
        }
    }

    /// True for the four channels the classifier consumes.
    pub fn is_pipeline_channel(self) -> bool {
        matches!(
            self,
            ChannelKind::Pdcch | ChannelKind::Pdsch | ChannelKind::Pucch | ChannelKind::Pusch
        )
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Ul,
    Dl,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Ul => "UL",
            Direction::Dl => "DL",
        }
    }
}

/// Traffic class. Integer codes are fixed; they double as class indices in
/// the model head and metric tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TrafficLabel {
    Call = 0,
    Meeting = 1,
    Upload = 2,
    Download = 3,
}

impl TrafficLabel {
    pub const ALL: [TrafficLabel; 4] = [
        TrafficLabel::Call,
        TrafficLabel::Meeting,
        TrafficLabel::Upload,
        TrafficLabel::Download,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TrafficLabel::Call,
            1 => TrafficLabel::Meeting,
            2 => TrafficLabel::Upload,
            3 => TrafficLabel::Download,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrafficLabel::Call => "call",
            TrafficLabel::Meeting => "meeting",
            TrafficLabel::Upload => "upload",
            TrafficLabel::Download => "download",
        }
    }

    pub fn from_str_exact(s: &str) -> Option<Self> {
        Some(match s {
            "call" => TrafficLabel::Call,
            "meeting" => TrafficLabel::Meeting,
            "upload" => TrafficLabel::Upload,
            "download" => TrafficLabel::Download,
            _ => return None,
        })
    }
}

impl fmt::Display for TrafficLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Access-network transmission gain, restricted to the 64..=84 dB grid in
/// 2 dB steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GainLevel {
    gain_db: u16,
}

impl GainLevel {
    pub const MIN_DB: u16 = 64;
    pub const MAX_DB: u16 = 84;
    pub const COUNT: usize = 11;

    pub fn new(gain_db: u16) -> Option<Self> {
        if (Self::MIN_DB..=Self::MAX_DB).contains(&gain_db) && gain_db % 2 == 0 {
            Some(GainLevel { gain_db })
        } else {
            None
        }
    }

    pub fn db(self) -> u16 {
        self.gain_db
    }

    /// Grid position 0..=10 (64 dB → 0, 84 dB → 10).
    pub fn index(self) -> usize {
        ((self.gain_db - Self::MIN_DB) / 2) as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        if index < Self::COUNT {
            Some(GainLevel {
                gain_db: Self::MIN_DB + 2 * index as u16,
            })
        } else {
            None
        }
    }

    pub fn all() -> impl Iterator<Item = GainLevel> {
        (0..Self::COUNT).map(|i| GainLevel::from_index(i).unwrap())
    }
}

impl fmt::Display for GainLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} dB", self.gain_db)
    }
}

/// One per-subframe observation of one physical channel.
///
/// Optional fields are absent on channels where they carry no meaning
/// (e.g. `cce_index` exists only on PDCCH).
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalChannelRecord {
    pub frame: u64,
    pub subframe: u8,
    pub slot: u8,
    pub chan: ChannelKind,
    pub dir: Direction,
    pub mcs: Option<u8>,
    pub mod_order: Option<u8>,
    pub harq_id: Option<u8>,
    pub crc_ok: Option<bool>,
    pub tb_len: Option<u64>,
    pub prb: Option<u32>,
    pub symb_start: Option<u8>,
    pub symb_len: Option<u8>,
    pub snr: Option<f64>,
    pub epre: Option<f64>,
    pub cce_index: Option<u32>,
    pub aggregation_level: Option<u8>,
    pub pucch_format: Option<u8>,
}

impl PhysicalChannelRecord {
    /// Minimal record with only the mandatory fields set.
    pub fn bare(frame: u64, subframe: u8, slot: u8, chan: ChannelKind) -> Self {
        PhysicalChannelRecord {
            frame,
            subframe,
            slot,
            chan,
            dir: chan.direction(),
            mcs: None,
            mod_order: None,
            harq_id: None,
            crc_ok: None,
            tb_len: None,
            prb: None,
            symb_start: None,
            symb_len: None,
            snr: None,
            epre: None,
            cce_index: None,
            aggregation_level: None,
            pucch_format: None,
        }
    }

    fn validate(&self) -> Result<(), RecordError> {
        fn range(field: &'static str, value: i64, lo: i64, hi: i64) -> Result<(), RecordError> {
            if (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(RecordError::RangeViolation {
                    field,
                    value: value.to_string(),
                })
            }
        }
        range("subframe", self.subframe as i64, 0, 9)?;
        range("slot", self.slot as i64, 0, 1)?;
        if let Some(v) = self.mcs {
            range("mcs", v as i64, 0, 28)?;
        }
        if let Some(v) = self.mod_order {
            if !matches!(v, 2 | 4 | 6 | 8) {
                return Err(RecordError::RangeViolation {
                    field: "mod_order",
                    value: v.to_string(),
                });
            }
        }
        if let Some(v) = self.harq_id {
            range("harq_id", v as i64, 0, 15)?;
        }
        if let Some(v) = self.symb_start {
            range("symb_start", v as i64, 0, 13)?;
        }
        if let Some(v) = self.symb_len {
            range("symb_len", v as i64, 1, 14)?;
        }
        if let Some(v) = self.aggregation_level {
            if !matches!(v, 1 | 2 | 4 | 8 | 16) {
                return Err(RecordError::RangeViolation {
                    field: "aggregation_level",
                    value: v.to_string(),
                });
            }
        }
        if let Some(v) = self.pucch_format {
            range("pucch_format", v as i64, 0, 4)?;
        }
        for (field, v) in [("snr", self.snr), ("epre", self.epre)] {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(RecordError::RangeViolation {
                        field,
                        value: x.to_string(),
                    });
                }
            }
        }
        if self.dir != self.chan.direction() {
            return Err(RecordError::RangeViolation {
                field: "dir",
                value: format!("{} on {}", self.dir.as_str(), self.chan),
            });
        }
        Ok(())
    }
}

/// First line of every session file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionHeader {
    pub label: TrafficLabel,
    pub gain: GainLevel,
    pub seed: u64,
    pub schema_version: u32,
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("field {field} out of range: {value}")]
    RangeViolation { field: &'static str, value: String },
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("line is not a record (type {0:?})")]
    NotARecord(String),
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("missing session header")]
    MissingHeader,
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// --- wire structs -----------------------------------------------------------
//
// Field declaration order below IS the canonical key order; serde_json emits
// struct fields in order and ryu prints shortest round-trip decimals.

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum WireLine {
    #[serde(rename = "session")]
    Session(WireSession),
    #[serde(rename = "rec")]
    Rec(WireRecord),
}

#[derive(Serialize, Deserialize)]
struct WireSession {
    label: String,
    gain_db: u16,
    seed: u64,
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    frame: u64,
    subframe: u8,
    slot: u8,
    chan: String,
    dir: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mcs: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mod_order: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    harq_id: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    crc_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tb_len: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    prb: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    symb_start: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    symb_len: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    snr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    epre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cce_index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    aggregation_level: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pucch_format: Option<u8>,
}

fn parse_line(line: &str) -> Result<WireLine, RecordError> {
    serde_json::from_str(line).map_err(|e| RecordError::MalformedLine(e.to_string()))
}

/// Parse one record line. Unknown JSON keys are ignored; all invariants are
/// checked before the record is returned.
pub fn parse_record(line: &str) -> Result<PhysicalChannelRecord, RecordError> {
    match parse_line(line)? {
        WireLine::Rec(w) => record_from_wire(w),
        WireLine::Session(_) => Err(RecordError::NotARecord("session".into())),
    }
}

fn record_from_wire(w: WireRecord) -> Result<PhysicalChannelRecord, RecordError> {
    let chan =
        ChannelKind::from_str_exact(&w.chan).ok_or_else(|| RecordError::UnknownChannel(w.chan.clone()))?;
    let dir = match w.dir.as_str() {
        "UL" => Direction::Ul,
        "DL" => Direction::Dl,
        other => {
            return Err(RecordError::RangeViolation {
                field: "dir",
                value: other.to_string(),
            })
        }
    };
    let rec = PhysicalChannelRecord {
        frame: w.frame,
        subframe: w.subframe,
        slot: w.slot,
        chan,
        dir,
        mcs: w.mcs,
        mod_order: w.mod_order,
        harq_id: w.harq_id,
        crc_ok: w.crc_ok,
        tb_len: w.tb_len,
        prb: w.prb,
        symb_start: w.symb_start,
        symb_len: w.symb_len,
        snr: w.snr,
        epre: w.epre,
        cce_index: w.cce_index,
        aggregation_level: w.aggregation_level,
        pucch_format: w.pucch_format,
    };
    rec.validate()?;
    Ok(rec)
}

/// Emit the canonical wire form of a valid record.
pub fn serialize_record(rec: &PhysicalChannelRecord) -> String {
    let w = WireRecord {
        frame: rec.frame,
        subframe: rec.subframe,
        slot: rec.slot,
        chan: rec.chan.as_str().to_string(),
        dir: rec.dir.as_str().to_string(),
        mcs: rec.mcs,
        mod_order: rec.mod_order,
        harq_id: rec.harq_id,
        crc_ok: rec.crc_ok,
        tb_len: rec.tb_len,
        prb: rec.prb,
        symb_start: rec.symb_start,
        symb_len: rec.symb_len,
        snr: rec.snr,
        epre: rec.epre,
        cce_index: rec.cce_index,
        aggregation_level: rec.aggregation_level,
        pucch_format: rec.pucch_format,
    };
    serde_json::to_string(&WireLine::Rec(w)).expect("record serialization is infallible")
}

/// Emit the canonical wire form of a session header.
pub fn serialize_header(h: &SessionHeader) -> String {
    let w = WireSession {
        label: h.label.as_str().to_string(),
        gain_db: h.gain.db(),
        seed: h.seed,
        schema_version: h.schema_version,
    };
    serde_json::to_string(&WireLine::Session(w)).expect("header serialization is infallible")
}

/// Parse a session header line.
pub fn parse_header(line: &str) -> Result<SessionHeader, RecordError> {
    match parse_line(line)? {
        WireLine::Session(w) => {
            let label = TrafficLabel::from_str_exact(&w.label)
                .ok_or(RecordError::RangeViolation {
                    field: "label",
                    value: w.label.clone(),
                })?;
            let gain = GainLevel::new(w.gain_db).ok_or(RecordError::RangeViolation {
                field: "gain_db",
                value: w.gain_db.to_string(),
            })?;
            Ok(SessionHeader {
                label,
                gain,
                seed: w.seed,
                schema_version: w.schema_version,
            })
        }
        WireLine::Rec(_) => Err(RecordError::NotARecord("rec".into())),
    }
}

/// Per-file load accounting from [`read_session`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// PBCH/PRACH records seen and dropped.
    pub dropped: usize,
    /// Records kept (the four pipeline channels).
    pub kept: usize,
}

/// Read a session file: header, then records in file order. PBCH/PRACH are
/// counted and dropped; parse errors carry the 1-based line number.
pub fn read_session(
    path: &Path,
) -> Result<(SessionHeader, Vec<PhysicalChannelRecord>, LoadReport), SessionError> {
    let file = std::fs::File::open(path)?;
    read_session_from(file)
}

pub fn read_session_from<R: Read>(
    reader: R,
) -> Result<(SessionHeader, Vec<PhysicalChannelRecord>, LoadReport), SessionError> {
    let mut lines = BufReader::new(reader).lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(SessionError::MissingHeader),
    };
    let header = parse_header(&first).map_err(|source| match source {
        RecordError::NotARecord(_) => SessionError::MissingHeader,
        other => SessionError::Record {
            line: 1,
            source: other,
        },
    })?;

    let mut records = Vec::new();
    let mut report = LoadReport::default();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line).map_err(|source| SessionError::Record {
            line: idx + 2,
            source,
        })?;
        if rec.chan.is_pipeline_channel() {
            report.kept += 1;
            records.push(rec);
        } else {
            report.dropped += 1;
        }
    }
    Ok((header, records, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_example_line() {
        let line = r#"{"type":"rec","frame":12,"subframe":3,"slot":0,"chan":"PUSCH","dir":"UL","mcs":16,"tb_len":4096,"prb":20,"snr":21.5,"crc_ok":true,"harq_id":2,"mod_order":4,"symb_start":0,"symb_len":14}"#;
        let rec = parse_record(line).unwrap();
        assert_eq!(rec.frame, 12);
        assert_eq!(rec.subframe, 3);
        assert_eq!(rec.chan, ChannelKind::Pusch);
        assert_eq!(rec.dir, Direction::Ul);
        assert_eq!(rec.mcs, Some(16));
        assert_eq!(rec.tb_len, Some(4096));
        assert_eq!(rec.prb, Some(20));
        assert_eq!(rec.snr, Some(21.5));
        assert_eq!(rec.crc_ok, Some(true));
        assert_eq!(rec.harq_id, Some(2));
        assert_eq!(rec.mod_order, Some(4));
        assert_eq!(rec.symb_start, Some(0));
        assert_eq!(rec.symb_len, Some(14));
        assert_eq!(rec.epre, None);
    }

    #[test]
    fn subframe_out_of_range() {
        let line = r#"{"type":"rec","frame":0,"subframe":10,"slot":0,"chan":"PUSCH","dir":"UL"}"#;
        match parse_record(line) {
            Err(RecordError::RangeViolation { field, .. }) => assert_eq!(field, "subframe"),
            other => panic!("expected RangeViolation, got {other:?}"),
        }
    }

    #[test]
    fn unknown_channel() {
        let line = r#"{"type":"rec","frame":0,"subframe":0,"slot":0,"chan":"PXSCH","dir":"UL"}"#;
        assert!(matches!(
            parse_record(line),
            Err(RecordError::UnknownChannel(_))
        ));
    }

    #[test]
    fn direction_mismatch_rejected() {
        let line = r#"{"type":"rec","frame":0,"subframe":0,"slot":0,"chan":"PUSCH","dir":"DL"}"#;
        assert!(matches!(
            parse_record(line),
            Err(RecordError::RangeViolation { field: "dir", .. })
        ));
    }

    #[test]
    fn unknown_keys_ignored() {
        let line = r#"{"type":"rec","frame":0,"subframe":0,"slot":0,"chan":"PUSCH","dir":"UL","vendor_ext":42}"#;
        assert!(parse_record(line).is_ok());
    }

    #[test]
    fn serialize_pdcch_contains_expected_keys() {
        let mut rec = PhysicalChannelRecord::bare(0, 0, 0, ChannelKind::Pdcch);
        rec.cce_index = Some(4);
        rec.aggregation_level = Some(2);
        let s = serialize_record(&rec);
        assert!(s.contains(r#""chan":"PDCCH""#), "{s}");
        assert!(s.contains(r#""cce_index":4"#), "{s}");
        assert!(!s.contains("mcs"), "absent fields must be omitted: {s}");
    }

    #[test]
    fn canonicalization_is_idempotent() {
        // same content, scrambled key order and extra whitespace
        let messy = r#"{"subframe":3,"type":"rec","chan":"PUSCH","frame":12,"slot":1,  "dir":"UL","snr":21.5}"#;
        let once = serialize_record(&parse_record(messy).unwrap());
        let twice = serialize_record(&parse_record(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn header_roundtrip() {
        let h = SessionHeader {
            label: TrafficLabel::Upload,
            gain: GainLevel::new(84).unwrap(),
            seed: 7,
            schema_version: SCHEMA_VERSION,
        };
        let s = serialize_header(&h);
        assert_eq!(parse_header(&s).unwrap(), h);
        assert!(s.starts_with(r#"{"type":"session""#), "{s}");
    }

    #[test]
    fn read_session_in_order() {
        let mut content = String::new();
        content.push_str(&serialize_header(&SessionHeader {
            label: TrafficLabel::Call,
            gain: GainLevel::new(64).unwrap(),
            seed: 1,
            schema_version: SCHEMA_VERSION,
        }));
        content.push('\n');
        for f in 0..3u64 {
            content.push_str(&serialize_record(&PhysicalChannelRecord::bare(
                f,
                0,
                0,
                ChannelKind::Pusch,
            )));
            content.push('\n');
        }
        let (h, recs, report) = read_session_from(content.as_bytes()).unwrap();
        assert_eq!(h.label, TrafficLabel::Call);
        assert_eq!(recs.len(), 3);
        assert_eq!(report.kept, 3);
        assert!(recs.windows(2).all(|w| w[0].frame < w[1].frame));
    }

    #[test]
    fn prach_dropped_with_counter() {
        let mut content = String::new();
        content.push_str(&serialize_header(&SessionHeader {
            label: TrafficLabel::Call,
            gain: GainLevel::new(64).unwrap(),
            seed: 1,
            schema_version: SCHEMA_VERSION,
        }));
        content.push('\n');
        content.push_str(&serialize_record(&PhysicalChannelRecord::bare(
            0,
            1,
            0,
            ChannelKind::Prach,
        )));
        content.push('\n');
        let (_, recs, report) = read_session_from(content.as_bytes()).unwrap();
        assert!(recs.is_empty());
        assert_eq!(report.dropped, 1);
    }

    #[test]
    fn empty_file_is_missing_header() {
        assert!(matches!(
            read_session_from(&b""[..]),
            Err(SessionError::MissingHeader)
        ));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let mut content = String::new();
        content.push_str(&serialize_header(&SessionHeader {
            label: TrafficLabel::Call,
            gain: GainLevel::new(64).unwrap(),
            seed: 1,
            schema_version: SCHEMA_VERSION,
        }));
        content.push('\n');
        content.push_str("{not json}\n");
        match read_session_from(content.as_bytes()) {
            Err(SessionError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line-annotated error, got {other:?}"),
        }
    }

    #[test]
    fn gain_grid() {
        assert!(GainLevel::new(64).is_some());
        assert!(GainLevel::new(84).is_some());
        assert!(GainLevel::new(63).is_none());
        assert!(GainLevel::new(65).is_none());
        assert!(GainLevel::new(86).is_none());
        assert_eq!(GainLevel::all().count(), 11);
        assert_eq!(GainLevel::new(70).unwrap().index(), 3);
    }
}
