//! Voice-activity data model: segments, frame grids, and occupancy statistics.
//!
//! Activity is represented two ways: as annotated time segments
//! ([`VoiceActivityTrack`]) and as a binary speaker-by-frame matrix
//! ([`FrameGrid`]) sampled at a fixed frame rate (50 Hz by default).

use crate::error::{Error, Result};

/// One contiguous stretch of speech for a single speaker, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoiceActivitySegment {
    pub speaker: usize,
    pub start: f64,
    pub end: f64,
}

impl VoiceActivitySegment {
    pub fn new(speaker: usize, start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end <= start {
            return Err(Error::InvalidSegment { speaker, start, end });
        }
        Ok(Self { speaker, start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// All speech segments of one session, normalized on construction:
/// same-speaker overlapping or touching segments are merged, and the
/// result is sorted by (speaker, start).
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceActivityTrack {
    speaker_count: usize,
    duration: f64,
    segments: Vec<VoiceActivitySegment>,
}

/// Slack allowed when a segment end slightly overshoots the session
/// duration (one 50 Hz frame); anything beyond is an ingestion error.
const DURATION_SLACK: f64 = 0.02;

impl VoiceActivityTrack {
    pub fn new(
        speaker_count: usize,
        duration: f64,
        segments: Vec<VoiceActivitySegment>,
    ) -> Result<Self> {
        if speaker_count == 0 {
            return Err(Error::Config("speaker count must be positive".into()));
        }
        if !duration.is_finite() || duration < 0.0 {
            return Err(Error::Config(format!("invalid duration {duration}")));
        }
        let mut checked = Vec::with_capacity(segments.len());
        for seg in segments {
            // Re-validate: segments may come straight from a parser.
            let seg = VoiceActivitySegment::new(seg.speaker, seg.start, seg.end)?;
            if seg.speaker >= speaker_count {
                return Err(Error::SpeakerOutOfRange { speaker: seg.speaker, speaker_count });
            }
            if seg.end > duration + DURATION_SLACK {
                return Err(Error::SegmentOutsideDuration {
                    start: seg.start,
                    end: seg.end,
                    duration,
                });
            }
            let end = seg.end.min(duration);
            if end > seg.start {
                checked.push(VoiceActivitySegment { end, ..seg });
            }
        }
        checked.sort_by(|a, b| {
            (a.speaker, a.start, a.end)
                .partial_cmp(&(b.speaker, b.start, b.end))
                .expect("finite segment times")
        });
        // Merge overlapping or touching segments of the same speaker.
        let mut merged: Vec<VoiceActivitySegment> = Vec::with_capacity(checked.len());
        for seg in checked {
            match merged.last_mut() {
                Some(last) if last.speaker == seg.speaker && seg.start <= last.end => {
                    last.end = last.end.max(seg.end);
                }
                _ => merged.push(seg),
            }
        }
        Ok(Self { speaker_count, duration, segments: merged })
    }

    /// Track with no speech at all.
    pub fn silent(speaker_count: usize, duration: f64) -> Result<Self> {
        Self::new(speaker_count, duration, Vec::new())
    }

    pub fn speaker_count(&self) -> usize {
        self.speaker_count
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn segments(&self) -> &[VoiceActivitySegment] {
        &self.segments
    }

    pub fn segments_for(&self, speaker: usize) -> impl Iterator<Item = &VoiceActivitySegment> {
        self.segments.iter().filter(move |s| s.speaker == speaker)
    }
}

/// Binary activity matrix, `speaker_count x frame_count`, at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    speaker_count: usize,
    frame_rate: f64,
    frame_count: usize,
    /// Row-major: `frames[s * frame_count + f]` is 0 or 1.
    frames: Vec<u8>,
}

impl FrameGrid {
    pub fn zeros(speaker_count: usize, frame_rate: f64, frame_count: usize) -> Result<Self> {
        if speaker_count == 0 {
            return Err(Error::Config("speaker count must be positive".into()));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::InvalidFrameRate(frame_rate));
        }
        Ok(Self {
            speaker_count,
            frame_rate,
            frame_count,
            frames: vec![0; speaker_count * frame_count],
        })
    }

    /// Build from explicit rows of 0/1 values, one row per speaker.
    pub fn from_rows(frame_rate: f64, rows: &[Vec<u8>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("need at least one speaker row".into()));
        }
        let frame_count = rows[0].len();
        if rows.iter().any(|r| r.len() != frame_count) {
            return Err(Error::ShapeMismatch("speaker rows differ in length".into()));
        }
        let mut grid = Self::zeros(rows.len(), frame_rate, frame_count)?;
        for (s, row) in rows.iter().enumerate() {
            for (f, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::Config(format!("grid entries must be 0 or 1, got {v}")));
                }
                grid.set(s, f, v == 1);
            }
        }
        Ok(grid)
    }

    pub fn speaker_count(&self) -> usize {
        self.speaker_count
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    #[inline]
    pub fn get(&self, speaker: usize, frame: usize) -> bool {
        self.frames[speaker * self.frame_count + frame] != 0
    }

    #[inline]
    pub fn set(&mut self, speaker: usize, frame: usize, active: bool) {
        self.frames[speaker * self.frame_count + frame] = active as u8;
    }

    pub fn row(&self, speaker: usize) -> &[u8] {
        &self.frames[speaker * self.frame_count..(speaker + 1) * self.frame_count]
    }

    /// Number of speakers active at `frame`.
    pub fn active_count(&self, frame: usize) -> usize {
        (0..self.speaker_count).filter(|&s| self.get(s, frame)).count()
    }

    /// New grid with speaker rows reordered so that row `s` of the result
    /// is row `perm[s]` of the original.
    pub fn permute_speakers(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.speaker_count {
            return Err(Error::ShapeMismatch("permutation length != speaker count".into()));
        }
        let mut out = Self::zeros(self.speaker_count, self.frame_rate, self.frame_count)?;
        for (s, &src) in perm.iter().enumerate() {
            if src >= self.speaker_count {
                return Err(Error::ShapeMismatch(format!("permutation entry {src} out of range")));
            }
            let row = self.row(src).to_vec();
            out.frames[s * self.frame_count..(s + 1) * self.frame_count].copy_from_slice(&row);
        }
        Ok(out)
    }
}

/// Fraction of frames with 0, 1, 2, ... simultaneously active speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyStats {
    /// `fractions[k]` is the fraction of frames with exactly `k` active
    /// speakers; length is `speaker_count + 1`.
    pub fractions: Vec<f64>,
}

impl OccupancyStats {
    pub fn silence(&self) -> f64 {
        self.fractions[0]
    }

    pub fn single(&self) -> f64 {
        self.fractions.get(1).copied().unwrap_or(0.0)
    }

    pub fn double(&self) -> f64 {
        self.fractions.get(2).copied().unwrap_or(0.0)
    }

    pub fn triple(&self) -> f64 {
        self.fractions.get(3).copied().unwrap_or(0.0)
    }
}

/// Sample a track onto a frame grid. A frame belongs to a segment iff the
/// frame's center time `(f + 0.5) / frame_rate` lies inside the half-open
/// interval `[start, end)`; this is unambiguous at boundaries and
/// independent of segment order.
pub fn rasterize(track: &VoiceActivityTrack, frame_rate: f64) -> Result<FrameGrid> {
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(Error::InvalidFrameRate(frame_rate));
    }
    let frame_count = (track.duration() * frame_rate).ceil() as usize;
    let mut grid = FrameGrid::zeros(track.speaker_count(), frame_rate, frame_count)?;
    for seg in track.segments() {
        // First frame whose center could reach the segment start.
        let lo = ((seg.start * frame_rate - 0.5).ceil().max(0.0)) as usize;
        for f in lo..frame_count {
            let center = (f as f64 + 0.5) / frame_rate;
            if center >= seg.end {
                break;
            }
            if center >= seg.start {
                grid.set(seg.speaker, f, true);
            }
        }
    }
    Ok(grid)
}

/// Inverse of [`rasterize`]: maximal runs of active frames become segments
/// aligned to frame boundaries.
pub fn segment_extract(grid: &FrameGrid) -> VoiceActivityTrack {
    let rate = grid.frame_rate();
    let mut segments = Vec::new();
    for s in 0..grid.speaker_count() {
        let row = grid.row(s);
        let mut f = 0;
        while f < row.len() {
            if row[f] != 0 {
                let start = f;
                while f < row.len() && row[f] != 0 {
                    f += 1;
                }
                segments.push(VoiceActivitySegment {
                    speaker: s,
                    start: start as f64 / rate,
                    end: f as f64 / rate,
                });
            } else {
                f += 1;
            }
        }
    }
    let duration = grid.frame_count() as f64 / rate;
    VoiceActivityTrack::new(grid.speaker_count(), duration, segments)
        .expect("segments from a valid grid are valid")
}

/// Classify every frame by how many speakers are simultaneously active and
/// return the bucket fractions (`speaker_count + 1` buckets).
pub fn occupancy_stats(grid: &FrameGrid) -> Result<OccupancyStats> {
    if grid.frame_count() == 0 {
        return Err(Error::EmptyGrid);
    }
    let mut buckets = vec![0usize; grid.speaker_count() + 1];
    for f in 0..grid.frame_count() {
        buckets[grid.active_count(f)] += 1;
    }
    let total = grid.frame_count() as f64;
    Ok(OccupancyStats { fractions: buckets.into_iter().map(|c| c as f64 / total).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(speaker: usize, start: f64, end: f64) -> VoiceActivitySegment {
        VoiceActivitySegment::new(speaker, start, end).unwrap()
    }

    #[test]
    fn empty_track_rasterizes_to_zero_grid() {
        let track = VoiceActivityTrack::silent(3, 2.0).unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        assert_eq!(grid.speaker_count(), 3);
        assert_eq!(grid.frame_count(), 100);
        for s in 0..3 {
            assert!(grid.row(s).iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn full_second_covers_all_fifty_frames() {
        let track = VoiceActivityTrack::new(3, 1.0, vec![seg(0, 0.0, 1.0)]).unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        assert_eq!(grid.frame_count(), 50);
        assert!(grid.row(0).iter().all(|&v| v == 1));
        assert!(grid.row(1).iter().all(|&v| v == 0));
        assert!(grid.row(2).iter().all(|&v| v == 0));
    }

    #[test]
    fn center_sampling_rule_on_boundary_segment() {
        // Frame 0 center is 0.01 s, which lies in [0.01, 0.02).
        let track = VoiceActivityTrack::new(1, 1.0, vec![seg(0, 0.01, 0.02)]).unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        assert!(grid.get(0, 0));
        assert!(!grid.get(0, 1));
        // [0.0, 0.01) misses every frame center.
        let track = VoiceActivityTrack::new(1, 1.0, vec![seg(0, 0.0, 0.01)]).unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        assert!(grid.row(0).iter().all(|&v| v == 0));
    }

    #[test]
    fn rejects_nonpositive_frame_rate() {
        let track = VoiceActivityTrack::silent(1, 1.0).unwrap();
        assert!(matches!(rasterize(&track, 0.0), Err(Error::InvalidFrameRate(_))));
        assert!(matches!(rasterize(&track, -2.0), Err(Error::InvalidFrameRate(_))));
    }

    #[test]
    fn segment_validation() {
        assert!(VoiceActivitySegment::new(0, 1.0, 1.0).is_err());
        assert!(VoiceActivitySegment::new(0, 2.0, 1.0).is_err());
        assert!(VoiceActivitySegment::new(0, -0.5, 1.0).is_err());
        assert!(matches!(
            VoiceActivityTrack::new(2, 10.0, vec![seg(2, 0.0, 1.0)]),
            Err(Error::SpeakerOutOfRange { .. })
        ));
        assert!(matches!(
            VoiceActivityTrack::new(2, 10.0, vec![seg(0, 0.0, 11.0)]),
            Err(Error::SegmentOutsideDuration { .. })
        ));
    }

    #[test]
    fn overlapping_same_speaker_segments_merge() {
        let track =
            VoiceActivityTrack::new(2, 5.0, vec![seg(0, 1.0, 2.0), seg(0, 1.5, 3.0), seg(0, 3.0, 4.0)])
                .unwrap();
        assert_eq!(track.segments(), &[seg(0, 1.0, 4.0)]);
    }

    #[test]
    fn extract_on_all_zero_grid_is_empty() {
        let grid = FrameGrid::zeros(3, 50.0, 40).unwrap();
        let track = segment_extract(&grid);
        assert!(track.segments().is_empty());
    }

    #[test]
    fn extract_counts_run_boundaries() {
        let grid = FrameGrid::from_rows(50.0, &[vec![0, 1, 1, 0, 1]]).unwrap();
        let track = segment_extract(&grid);
        assert_eq!(track.segments(), &[seg(0, 0.02, 0.06), seg(0, 0.08, 0.10)]);
    }

    #[test]
    fn aligned_round_trip_is_identity() {
        let track = VoiceActivityTrack::new(
            3,
            2.0,
            vec![seg(0, 0.0, 0.5), seg(1, 0.5, 1.0), seg(2, 1.2, 1.8)],
        )
        .unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        let back = segment_extract(&grid);
        assert_eq!(back.segments(), track.segments());
    }

    #[test]
    fn occupancy_single_speaker_always_active() {
        let track = VoiceActivityTrack::new(3, 2.0, vec![seg(0, 0.0, 2.0)]).unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        let stats = occupancy_stats(&grid).unwrap();
        assert_eq!(stats.single(), 1.0);
        assert_eq!(stats.silence(), 0.0);
        assert_eq!(stats.double(), 0.0);
        assert_eq!(stats.triple(), 0.0);
    }

    #[test]
    fn occupancy_four_frame_quarters() {
        let grid = FrameGrid::from_rows(
            50.0,
            &[vec![0, 1, 1, 1], vec![0, 0, 1, 1], vec![0, 0, 0, 1]],
        )
        .unwrap();
        let stats = occupancy_stats(&grid).unwrap();
        assert_eq!(stats.fractions, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn occupancy_rejects_empty_grid() {
        let grid = FrameGrid::zeros(3, 50.0, 0).unwrap();
        assert!(matches!(occupancy_stats(&grid), Err(Error::EmptyGrid)));
    }
}
