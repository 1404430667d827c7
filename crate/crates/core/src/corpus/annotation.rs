//! Voice-activity annotation files.
//!
//! UTF-8 text; a header line `#speakers=<n> duration=<seconds>` followed
//! by one record per line: `speaker_index<TAB>start_seconds<TAB>end_seconds`
//! with times printed to 3 decimal places. The writer emits segments
//! sorted by (speaker, start), so saving a loaded file is byte-stable.

use std::path::Path;

use crate::activity::{VoiceActivitySegment, VoiceActivityTrack};
use crate::error::{Error, Result};

fn ann_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Annotation { path: path.display().to_string(), line, message: message.into() }
}

/// Parse an annotation file into `(speaker_count, duration, segments)`.
/// Segment-level invariants (ordering, speaker range vs. the audio) are
/// checked later when the track is built; structural problems are
/// rejected here with the offending line.
pub fn parse_annotation(path: &Path, text: &str) -> Result<(usize, f64, Vec<VoiceActivitySegment>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ann_err(path, 1, "empty annotation file"))?;
    let header = header.trim();
    let mut speakers: Option<usize> = None;
    let mut duration: Option<f64> = None;
    if let Some(rest) = header.strip_prefix('#') {
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("speakers=") {
                speakers = v.parse().ok();
            } else if let Some(v) = field.strip_prefix("duration=") {
                duration = v.parse().ok();
            }
        }
    }
    let speakers = speakers.ok_or_else(|| ann_err(path, 1, "header must declare speakers=<n>"))?;
    let duration =
        duration.ok_or_else(|| ann_err(path, 1, "header must declare duration=<seconds>"))?;

    let mut segments = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (s, a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(a), Some(b)) => (s, a, b),
            _ => return Err(ann_err(path, line_no, "expected speaker<TAB>start<TAB>end")),
        };
        let speaker: usize =
            s.parse().map_err(|_| ann_err(path, line_no, format!("bad speaker index {s:?}")))?;
        let start: f64 =
            a.parse().map_err(|_| ann_err(path, line_no, format!("bad start time {a:?}")))?;
        let end: f64 =
            b.parse().map_err(|_| ann_err(path, line_no, format!("bad end time {b:?}")))?;
        if !(end > start) || start < 0.0 {
            return Err(ann_err(
                path,
                line_no,
                format!("segment [{start}, {end}) for speaker {speaker} is not a valid interval"),
            ));
        }
        segments.push(VoiceActivitySegment { speaker, start, end });
    }
    Ok((speakers, duration, segments))
}

/// Canonical text form of a track.
pub fn format_annotation(track: &VoiceActivityTrack) -> String {
    let mut s = format!("#speakers={} duration={:.3}\n", track.speaker_count(), track.duration());
    for seg in track.segments() {
        s.push_str(&format!("{}\t{:.3}\t{:.3}\n", seg.speaker, seg.start, seg.end));
    }
    s
}

pub fn read_annotation(path: &Path) -> Result<(usize, f64, Vec<VoiceActivitySegment>)> {
    let text = std::fs::read_to_string(path)?;
    parse_annotation(path, &text)
}

pub fn write_annotation(path: &Path, track: &VoiceActivityTrack) -> Result<()> {
    std::fs::write(path, format_annotation(track))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn parse_and_format_round_trip() {
        let text = "#speakers=3 duration=10.000\n0\t0.000\t1.250\n2\t1.500\t3.000\n";
        let (speakers, duration, segs) =
            parse_annotation(&PathBuf::from("x"), text).unwrap();
        assert_eq!(speakers, 3);
        assert_eq!(duration, 10.0);
        let track = VoiceActivityTrack::new(speakers, duration, segs).unwrap();
        assert_eq!(format_annotation(&track), text);
    }

    #[test]
    fn rejects_inverted_segment_naming_the_line() {
        let text = "#speakers=3 duration=10.000\n0\t2.000\t1.000\n";
        let err = parse_annotation(&PathBuf::from("x"), text).unwrap_err();
        match err {
            Error::Annotation { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("[2, 1)"), "{message}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_header() {
        let text = "0\t0.000\t1.000\n";
        assert!(parse_annotation(&PathBuf::from("x"), text).is_err());
    }
}
