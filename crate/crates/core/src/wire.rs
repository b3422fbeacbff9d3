//! Text frame codec.
//!
//! Every datagram carries exactly one frame:
//!
//! ```text
//! frame  := header "," pseu rest "*"
//! header := one of the 18 message codes
//! pseu   := 8 lowercase hex digits
//! rest   := "," date "," hex                      (beacon, header 01)
//!         | "," date ",00," pseu "," hex           (pseudonym change, header 01)
//!         | "," hex                                (every other header)
//! ```
//!
//! Binary payloads are lowercase hex so `,` and `*` never occur inside a
//! field. The codec is canonical: `serialize(parse(b)) == b` for every
//! accepted `b`.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use thiserror::Error;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const CHANGE_MARKER: &str = "00";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame is not terminated by '*'")]
    MissingTerminator,
    #[error("unknown message header `{0}`")]
    UnknownHeader(String),
    #[error("header {header} does not take {fields} fields")]
    FieldCountMismatch { header: Code, fields: usize },
    #[error("field `{0}` is not canonical lowercase hex")]
    BadHex(String),
    #[error("field `{0}` is not a canonical UTC timestamp")]
    BadTimestamp(String),
    #[error("field `{0}` is not an 8-digit lowercase hex pseudonym")]
    BadPseudonym(String),
    #[error("frame contains a byte outside printable ASCII")]
    NonAscii,
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
}

/// The message header (`COD`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Code {
    Beacon,
    D1,
    D2,
    D3,
    D4,
    D5,
    Z2,
    Z3,
    Z4,
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    T1,
    P1,
    P2,
}

impl Code {
    pub const ALL: [Code; 18] = [
        Code::Beacon,
        Code::D1,
        Code::D2,
        Code::D3,
        Code::D4,
        Code::D5,
        Code::Z2,
        Code::Z3,
        Code::Z4,
        Code::E1,
        Code::E2,
        Code::E3,
        Code::E4,
        Code::E5,
        Code::E6,
        Code::T1,
        Code::P1,
        Code::P2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Code::Beacon => "01",
            Code::D1 => "D1",
            Code::D2 => "D2",
            Code::D3 => "D3",
            Code::D4 => "D4",
            Code::D5 => "D5",
            Code::Z2 => "Z2",
            Code::Z3 => "Z3",
            Code::Z4 => "Z4",
            Code::E1 => "E1",
            Code::E2 => "E2",
            Code::E3 => "E3",
            Code::E4 => "E4",
            Code::E5 => "E5",
            Code::E6 => "E6",
            Code::T1 => "T1",
            Code::P1 => "P1",
            Code::P2 => "P2",
        }
    }

    /// Discovery, zero-knowledge and exchange frames: the authentication
    /// conversation proper.
    pub fn is_auth(self) -> bool {
        matches!(
            self,
            Code::D1
                | Code::D2
                | Code::D3
                | Code::D4
                | Code::D5
                | Code::Z2
                | Code::Z3
                | Code::Z4
                | Code::E1
                | Code::E2
                | Code::E3
                | Code::E4
                | Code::E5
                | Code::E6
        )
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Code {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Code::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| WireError::UnknownHeader(s.to_string()))
    }
}

/// On-wire alias of a node (`PSEU`): 32 bits, printed as 8 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pseudonym(pub u32);

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

impl FromStr for Pseudonym {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ok = s.len() == 8 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if !ok {
            return Err(WireError::BadPseudonym(s.to_string()));
        }
        u32::from_str_radix(s, 16)
            .map(Pseudonym)
            .map_err(|_| WireError::BadPseudonym(s.to_string()))
    }
}

/// UTC wall-clock time with one-second resolution (`DATE`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    /// Four-digit years only, so the textual form stays fixed-width.
    pub const MIN: Timestamp = Timestamp(-62_167_219_200); // 0000-01-01T00:00:00Z
    pub const MAX: Timestamp = Timestamp(253_402_300_799); // 9999-12-31T23:59:59Z

    pub fn unix_seconds(self) -> i64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::from_timestamp(self.0, 0) {
            Some(dt) => write!(f, "{}", dt.format(TIMESTAMP_FORMAT)),
            None => write!(f, "<out-of-range:{}>", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WireError::BadTimestamp(s.to_string());
        let naive = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).map_err(|_| bad())?;
        let ts = Timestamp(naive.and_utc().timestamp());
        // chrono tolerates unpadded fields; only the canonical rendering is accepted.
        if ts.to_string() != s {
            return Err(bad());
        }
        Ok(ts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaconBody {
    pub date: Timestamp,
    /// Encrypted `real_id:key_uid:timestamp` blob.
    pub cta: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangePseuBody {
    pub date: Timestamp,
    pub new_pseu: Pseudonym,
    /// Encrypted `00:timestamp:new_pseu` blob.
    pub cta2: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoBody {
    pub info: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Beacon(BeaconBody),
    ChangePseu(ChangePseuBody),
    Info(InfoBody),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub code: Code,
    pub pseu: Pseudonym,
    pub body: Body,
}

impl Frame {
    pub fn beacon(pseu: Pseudonym, date: Timestamp, cta: Vec<u8>) -> Self {
        Frame {
            code: Code::Beacon,
            pseu,
            body: Body::Beacon(BeaconBody { date, cta }),
        }
    }

    pub fn change_pseu(pseu: Pseudonym, date: Timestamp, new_pseu: Pseudonym, cta2: Vec<u8>) -> Self {
        Frame {
            code: Code::Beacon,
            pseu,
            body: Body::ChangePseu(ChangePseuBody { date, new_pseu, cta2 }),
        }
    }

    pub fn info(code: Code, pseu: Pseudonym, info: Vec<u8>) -> Self {
        Frame {
            code,
            pseu,
            body: Body::Info(InfoBody { info }),
        }
    }

    /// Payload bytes of an info-style frame.
    pub fn info_bytes(&self) -> Option<&[u8]> {
        match &self.body {
            Body::Info(b) => Some(&b.info),
            _ => None,
        }
    }
}

fn check_blob(blob: &[u8]) -> Result<(), WireError> {
    if blob.is_empty() {
        return Err(WireError::InvalidField("binary payload must carry at least one byte"));
    }
    Ok(())
}

fn check_timestamp(ts: Timestamp) -> Result<(), WireError> {
    if ts < Timestamp::MIN || ts > Timestamp::MAX {
        return Err(WireError::InvalidField("timestamp outside years 0000..=9999"));
    }
    Ok(())
}

/// Encodes a frame into its canonical ASCII form.
pub fn serialize(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = format!("{},{}", frame.code, frame.pseu);
    match (&frame.body, frame.code) {
        (Body::Beacon(b), Code::Beacon) => {
            check_timestamp(b.date)?;
            check_blob(&b.cta)?;
            out.push_str(&format!(",{},{}", b.date, hex::encode(&b.cta)));
        }
        (Body::ChangePseu(b), Code::Beacon) => {
            check_timestamp(b.date)?;
            check_blob(&b.cta2)?;
            out.push_str(&format!(
                ",{},{CHANGE_MARKER},{},{}",
                b.date,
                b.new_pseu,
                hex::encode(&b.cta2)
            ));
        }
        (Body::Info(b), code) if code != Code::Beacon => {
            check_blob(&b.info)?;
            out.push(',');
            out.push_str(&hex::encode(&b.info));
        }
        _ => return Err(WireError::InvalidField("body variant does not match header")),
    }
    out.push('*');
    Ok(out.into_bytes())
}

fn parse_hex(field: &str) -> Result<Vec<u8>, WireError> {
    let canonical = !field.is_empty()
        && field.len().is_multiple_of(2)
        && field.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
    if !canonical {
        return Err(WireError::BadHex(field.to_string()));
    }
    hex::decode(field).map_err(|_| WireError::BadHex(field.to_string()))
}

/// Decodes one datagram. Never panics on arbitrary input.
pub fn parse(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.iter().any(|&b| !(0x20..=0x7e).contains(&b)) {
        return Err(WireError::NonAscii);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| WireError::NonAscii)?;
    let inner = text.strip_suffix('*').ok_or(WireError::MissingTerminator)?;
    let fields: Vec<&str> = inner.split(',').collect();

    let code: Code = fields[0].parse()?;
    let mismatch = || WireError::FieldCountMismatch {
        header: code,
        fields: fields.len(),
    };
    if fields.len() < 2 {
        return Err(mismatch());
    }
    let pseu: Pseudonym = fields[1].parse()?;

    let body = match (code, fields.len()) {
        (Code::Beacon, 4) => Body::Beacon(BeaconBody {
            date: fields[2].parse()?,
            cta: parse_hex(fields[3])?,
        }),
        (Code::Beacon, 6) => {
            if fields[3] != CHANGE_MARKER {
                return Err(mismatch());
            }
            Body::ChangePseu(ChangePseuBody {
                date: fields[2].parse()?,
                new_pseu: fields[4].parse()?,
                cta2: parse_hex(fields[5])?,
            })
        }
        (Code::Beacon, _) => return Err(mismatch()),
        (_, 3) => Body::Info(InfoBody {
            info: parse_hex(fields[2])?,
        }),
        _ => return Err(mismatch()),
    };
    Ok(Frame { code, pseu, body })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts() -> Timestamp {
        "2012-04-13T10:00:00Z".parse().unwrap()
    }

    fn deadbeef() -> Pseudonym {
        Pseudonym(0xdead_beef)
    }

    #[test]
    fn beacon_serializes_per_grammar() {
        let f = Frame::beacon(deadbeef(), ts(), vec![0xa1, 0xb2]);
        assert_eq!(serialize(&f).unwrap(), b"01,deadbeef,2012-04-13T10:00:00Z,a1b2*");
    }

    #[test]
    fn change_pseu_serializes_with_marker() {
        let f = Frame::change_pseu(deadbeef(), ts(), Pseudonym(0xcafe_0001), vec![0x00, 0xff]);
        assert_eq!(
            serialize(&f).unwrap(),
            b"01,deadbeef,2012-04-13T10:00:00Z,00,cafe0001,00ff*".to_vec()
        );
    }

    #[test]
    fn t1_info_serializes() {
        let f = Frame::info(Code::T1, deadbeef(), vec![0x49, 0x00]);
        assert_eq!(serialize(&f).unwrap(), b"T1,deadbeef,4900*");
    }

    #[test]
    fn parse_inverts_beacon_example() {
        let f = parse(b"01,deadbeef,2012-04-13T10:00:00Z,a1b2*").unwrap();
        assert_eq!(f, Frame::beacon(deadbeef(), ts(), vec![0xa1, 0xb2]));
    }

    #[test]
    fn beacon_with_cta_00_is_not_a_change() {
        let f = parse(b"01,deadbeef,2012-04-13T10:00:00Z,00*").unwrap();
        assert!(matches!(f.body, Body::Beacon(ref b) if b.cta == vec![0]));
    }

    #[test]
    fn short_beacon_is_field_count_mismatch() {
        assert!(matches!(
            parse(b"01,deadbeef*"),
            Err(WireError::FieldCountMismatch {
                header: Code::Beacon,
                fields: 2
            })
        ));
    }

    #[test]
    fn change_requires_literal_marker() {
        assert!(matches!(
            parse(b"01,deadbeef,2012-04-13T10:00:00Z,01,cafe0001,00ff*"),
            Err(WireError::FieldCountMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_canonical_inputs() {
        assert_eq!(parse(b"D1,deadbeef,ab"), Err(WireError::MissingTerminator));
        assert!(matches!(parse(b"Z1,deadbeef,ab*"), Err(WireError::UnknownHeader(_))));
        assert!(matches!(parse(b"D1,DEADBEEF,ab*"), Err(WireError::BadPseudonym(_))));
        assert!(matches!(parse(b"D1,deadbeef,AB*"), Err(WireError::BadHex(_))));
        assert!(matches!(parse(b"D1,deadbeef,abc*"), Err(WireError::BadHex(_))));
        assert!(matches!(parse(b"D1,deadbeef,*"), Err(WireError::BadHex(_))));
        assert!(matches!(parse(b"D1,deadbeef,ab**"), Err(WireError::BadHex(_))));
        assert!(matches!(
            parse(b"01,deadbeef,2012-4-13T10:00:00Z,ab*"),
            Err(WireError::BadTimestamp(_))
        ));
        assert_eq!(parse("D1,deadbeef,ab\u{e9}*".as_bytes()), Err(WireError::NonAscii));
        assert_eq!(parse(b"D1,deadbeef,ab*\n"), Err(WireError::NonAscii));
        assert!(matches!(parse(b"*"), Err(WireError::UnknownHeader(_))));
        assert!(matches!(parse(b""), Err(WireError::MissingTerminator)));
        assert!(matches!(
            parse(b"D1,deadbeef,ab,cd*"),
            Err(WireError::FieldCountMismatch { .. })
        ));
    }

    #[test]
    fn serialize_rejects_inconsistent_frames() {
        let f = Frame::info(Code::Beacon, deadbeef(), vec![1]);
        assert!(matches!(serialize(&f), Err(WireError::InvalidField(_))));
        let f = Frame {
            code: Code::D1,
            pseu: deadbeef(),
            body: Body::Beacon(BeaconBody {
                date: ts(),
                cta: vec![1],
            }),
        };
        assert!(matches!(serialize(&f), Err(WireError::InvalidField(_))));
        let f = Frame::info(Code::D1, deadbeef(), vec![]);
        assert!(matches!(serialize(&f), Err(WireError::InvalidField(_))));
        let f = Frame::beacon(deadbeef(), Timestamp(i64::MAX / 4), vec![1]);
        assert!(matches!(serialize(&f), Err(WireError::InvalidField(_))));
    }

    #[test]
    fn timestamp_extremes_roundtrip() {
        for t in [Timestamp::MIN, Timestamp::MAX, Timestamp(0)] {
            assert_eq!(t.to_string().parse::<Timestamp>().unwrap(), t);
        }
    }

    #[test]
    fn every_code_roundtrips_through_text() {
        for c in Code::ALL {
            assert_eq!(c.as_str().parse::<Code>().unwrap(), c);
        }
    }
}
