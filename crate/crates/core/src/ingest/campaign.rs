//! Ping-campaign files from a dedicated measurement platform.
//!
//! One JSON object per line:
//!
//! ```text
//! {"vp_id":"<string>","probe_id":<u64>,"timestamp":"<RFC 3339 UTC>","rtt_ms":<f64> | "*"}
//! ```
//!
//! `"*"` marks a ping that timed out. Blank lines and lines starting with
//! `#` are ignored.

use std::io::BufRead;

use serde::Deserialize;

use super::Sample;
use crate::error::{Error, Result};
use crate::registry::{parse_timestamp, LineError, Registry};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CampaignLine {
    vp_id: String,
    probe_id: u64,
    timestamp: String,
    rtt_ms: RttField,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RttField {
    Value(f64),
    Marker(String),
}

#[derive(Debug, Default)]
pub struct CampaignLoad {
    pub samples: Vec<Sample>,
    pub malformed: Vec<LineError>,
    pub timeouts: usize,
}

/// Reads a campaign file. Malformed lines are skipped and tallied; a
/// vantage point absent from `registry` aborts the load.
pub fn load_ping_campaign<R: BufRead>(source: R, registry: &Registry, origin: &str) -> Result<CampaignLoad> {
    let mut out = CampaignLoad::default();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::io(format!("reading {origin}"), e))?;
        let text = text.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let mut malformed = |reason: String| out.malformed.push(LineError { line: line_no, reason });
        let raw: CampaignLine = match serde_json::from_str(text) {
            Ok(raw) => raw,
            Err(e) => {
                malformed(e.to_string());
                continue;
            }
        };
        let Some(timestamp) = parse_timestamp(&raw.timestamp) else {
            malformed(format!("bad timestamp `{}`", raw.timestamp));
            continue;
        };
        let rtt_ms = match raw.rtt_ms {
            RttField::Value(v) => Some(v),
            RttField::Marker(m) if m == "*" => None,
            RttField::Marker(m) => {
                malformed(format!("bad rtt `{m}`"));
                continue;
            }
        };
        if registry.vantage_point(&raw.vp_id).is_none() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: line_no,
                reason: Error::UnknownVantagePoint(raw.vp_id).to_string(),
            });
        }
        if rtt_ms.is_none() {
            out.timeouts += 1;
        }
        out.samples.push(Sample {
            vp_id: raw.vp_id,
            probe_id: raw.probe_id,
            timestamp,
            rtt_ms,
        });
    }
    Ok(out)
}
