//! The projection-state codec: future voice activity of all speakers,
//! discretized into per-speaker duration bins and packed into a single
//! integer state.
//!
//! Bit layout (version 1): bit `s * B + b` carries speaker `s`'s activity
//! in bin `b`, with bin 0 nearest in time. The layout is recorded in
//! checkpoints so stored labels stay portable.

use crate::activity::FrameGrid;
use crate::error::{Error, Result};

/// Guard against unusably large label spaces.
pub const MAX_STATE_BITS: usize = 24;

/// Version tag for the bit layout above.
pub const BIT_LAYOUT_VERSION: u32 = 1;

/// Geometry of the projection window: how many speakers, how the horizon
/// is sliced into bins, and the frame rate the bins are measured in.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    speaker_count: usize,
    bin_durations: Vec<f64>,
    frame_rate: f64,
    /// Bin lengths in whole frames, derived from `bin_durations`.
    bin_frames: Vec<usize>,
}

impl ProjectionConfig {
    pub fn new(speaker_count: usize, bin_durations: Vec<f64>, frame_rate: f64) -> Result<Self> {
        if speaker_count == 0 {
            return Err(Error::Config("speaker count must be positive".into()));
        }
        if bin_durations.is_empty() {
            return Err(Error::Config("need at least one projection bin".into()));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::InvalidFrameRate(frame_rate));
        }
        if speaker_count * bin_durations.len() > MAX_STATE_BITS {
            return Err(Error::StateSpaceTooLarge {
                speakers: speaker_count,
                bins: bin_durations.len(),
                limit: MAX_STATE_BITS,
            });
        }
        let mut bin_frames = Vec::with_capacity(bin_durations.len());
        for &d in &bin_durations {
            let frames = d * frame_rate;
            let rounded = frames.round();
            if !(d > 0.0) || rounded < 1.0 || (frames - rounded).abs() > 1e-9 {
                return Err(Error::BinNotWholeFrames { duration: d, frame_rate });
            }
            bin_frames.push(rounded as usize);
        }
        Ok(Self { speaker_count, bin_durations, frame_rate, bin_frames })
    }

    /// Three speakers, bins of 0.2 s and 0.4 s, 50 Hz: 64 states over a
    /// 600 ms horizon.
    pub fn default_triadic() -> Self {
        Self::new(3, vec![0.2, 0.4], 50.0).expect("default config is valid")
    }

    pub fn speaker_count(&self) -> usize {
        self.speaker_count
    }

    pub fn bin_count(&self) -> usize {
        self.bin_durations.len()
    }

    pub fn bin_durations(&self) -> &[f64] {
        &self.bin_durations
    }

    pub fn bin_frames(&self) -> &[usize] {
        &self.bin_frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Total projection horizon in seconds.
    pub fn horizon(&self) -> f64 {
        self.bin_durations.iter().sum()
    }

    /// Total projection horizon in frames.
    pub fn horizon_frames(&self) -> usize {
        self.bin_frames.iter().sum()
    }

    /// Number of joint states, `2^(S*B)`.
    pub fn state_count(&self) -> usize {
        1usize << (self.speaker_count * self.bin_count())
    }

    /// Bit position of speaker `s`, bin `b` in a state index.
    #[inline]
    pub fn bit(&self, speaker: usize, bin: usize) -> u32 {
        debug_assert!(speaker < self.speaker_count && bin < self.bin_count());
        (speaker * self.bin_count() + bin) as u32
    }

    /// Duration-proportional weight of each bin: `duration_b / horizon`.
    pub fn bin_weights(&self) -> Vec<f64> {
        let horizon = self.horizon();
        self.bin_durations.iter().map(|d| d / horizon).collect()
    }

    /// Speaker `s`'s bin pattern (bins packed little-endian) inside `state`.
    #[inline]
    pub fn speaker_pattern(&self, state: StateIndex, speaker: usize) -> u32 {
        let b = self.bin_count();
        (state.0 >> (speaker * b)) & ((1u32 << b) - 1)
    }

    /// The state permutation induced by relabeling speakers: entry `i` is
    /// the state whose speaker `s` pattern equals state `i`'s pattern for
    /// speaker `perm[s]`.
    pub fn state_permutation(&self, perm: &[usize]) -> Result<Vec<u32>> {
        if perm.len() != self.speaker_count {
            return Err(Error::ShapeMismatch("permutation length != speaker count".into()));
        }
        let b = self.bin_count();
        let mask = (1u32 << b) - 1;
        let mut out = Vec::with_capacity(self.state_count());
        for i in 0..self.state_count() as u32 {
            let mut mapped = 0u32;
            for (s, &src) in perm.iter().enumerate() {
                let pattern = (i >> (src * b)) & mask;
                mapped |= pattern << (s * b);
            }
            out.push(mapped);
        }
        Ok(out)
    }
}

/// The integer code of one joint future-activity state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateIndex(pub u32);

/// A probability distribution over all `2^(S*B)` states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    probabilities: Vec<f64>,
}

impl StateDistribution {
    pub fn new(probabilities: Vec<f64>, config: &ProjectionConfig) -> Result<Self> {
        if probabilities.len() != config.state_count() {
            return Err(Error::ShapeMismatch(format!(
                "distribution has {} entries, expected {}",
                probabilities.len(),
                config.state_count()
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::NonFinite("state distribution".into()));
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("distribution sums to {sum}, expected 1")));
        }
        Ok(Self { probabilities })
    }

    pub fn point_mass(state: StateIndex, config: &ProjectionConfig) -> Result<Self> {
        if state.0 as usize >= config.state_count() {
            return Err(Error::StateOutOfRange(state.0, config.state_count()));
        }
        let mut p = vec![0.0; config.state_count()];
        p[state.0 as usize] = 1.0;
        Ok(Self { probabilities: p })
    }

    pub fn uniform(config: &ProjectionConfig) -> Self {
        let n = config.state_count();
        Self { probabilities: vec![1.0 / n as f64; n] }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

/// Number of joint states for a config (`2^(S*B)`).
pub fn state_count(config: &ProjectionConfig) -> usize {
    config.state_count()
}

/// Pack a binary `S x B` bin-activity matrix (row-major, `matrix[s*B + b]`)
/// into a state index.
pub fn encode_state(matrix: &[u8], config: &ProjectionConfig) -> Result<StateIndex> {
    let (s_count, b_count) = (config.speaker_count(), config.bin_count());
    if matrix.len() != s_count * b_count {
        return Err(Error::ShapeMismatch(format!(
            "bin matrix has {} entries, expected {}x{}",
            matrix.len(),
            s_count,
            b_count
        )));
    }
    let mut value = 0u32;
    for s in 0..s_count {
        for b in 0..b_count {
            match matrix[s * b_count + b] {
                0 => {}
                1 => value |= 1 << config.bit(s, b),
                v => return Err(Error::Config(format!("bin matrix entries must be 0 or 1, got {v}"))),
            }
        }
    }
    Ok(StateIndex(value))
}

/// Unpack a state index into the binary `S x B` bin-activity matrix.
pub fn decode_state(state: StateIndex, config: &ProjectionConfig) -> Result<Vec<u8>> {
    if state.0 as usize >= config.state_count() {
        return Err(Error::StateOutOfRange(state.0, config.state_count()));
    }
    let (s_count, b_count) = (config.speaker_count(), config.bin_count());
    let mut matrix = vec![0u8; s_count * b_count];
    for s in 0..s_count {
        for b in 0..b_count {
            matrix[s * b_count + b] = ((state.0 >> config.bit(s, b)) & 1) as u8;
        }
    }
    Ok(matrix)
}

/// Discretize the future activity following `at_frame` into a state index.
///
/// Bin `b` of speaker `s` covers the frames `[at_frame + offset_b,
/// at_frame + offset_b + len_b)` and is active iff strictly more than half
/// of those frames are active (an exact half counts as inactive).
pub fn discretize_future(
    grid: &FrameGrid,
    at_frame: usize,
    config: &ProjectionConfig,
) -> Result<StateIndex> {
    let needed = at_frame + config.horizon_frames();
    if needed > grid.frame_count() {
        return Err(Error::InsufficientFuture {
            frame: at_frame,
            needed,
            available: grid.frame_count(),
        });
    }
    if grid.speaker_count() != config.speaker_count() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} speakers, config expects {}",
            grid.speaker_count(),
            config.speaker_count()
        )));
    }
    let mut value = 0u32;
    for s in 0..config.speaker_count() {
        let row = grid.row(s);
        let mut offset = at_frame;
        for (b, &len) in config.bin_frames().iter().enumerate() {
            let active: usize = row[offset..offset + len].iter().map(|&v| v as usize).sum();
            if 2 * active > len {
                value |= 1 << config.bit(s, b);
            }
            offset += len;
        }
    }
    Ok(StateIndex(value))
}

/// Per-speaker probability of future activity implied by a state
/// distribution: expected duration-weighted fraction of active bins.
pub fn speaker_future_probability(
    dist: &StateDistribution,
    config: &ProjectionConfig,
) -> Vec<f64> {
    let weights = config.bin_weights();
    let mut p = vec![0.0; config.speaker_count()];
    for (state, &prob) in dist.probabilities().iter().enumerate() {
        if prob == 0.0 {
            continue;
        }
        for (s, p_s) in p.iter_mut().enumerate() {
            let mut active_weight = 0.0;
            for (b, &w) in weights.iter().enumerate() {
                if (state >> config.bit(s, b)) & 1 == 1 {
                    active_weight += w;
                }
            }
            *p_s += prob * active_weight;
        }
    }
    p
}

/// One state label per frame in `[first_frame, last_frame]`, each produced
/// by [`discretize_future`].
pub fn label_window(
    grid: &FrameGrid,
    first_frame: usize,
    last_frame: usize,
    config: &ProjectionConfig,
) -> Result<Vec<StateIndex>> {
    let mut labels = Vec::with_capacity(last_frame.saturating_sub(first_frame) + 1);
    for f in first_frame..=last_frame {
        labels.push(discretize_future(grid, f, config)?);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::{VoiceActivitySegment, VoiceActivityTrack, rasterize};

    fn triadic() -> ProjectionConfig {
        ProjectionConfig::default_triadic()
    }

    #[test]
    fn state_counts_for_cited_configs() {
        assert_eq!(triadic().state_count(), 64);
        assert_eq!(ProjectionConfig::new(2, vec![0.2; 4], 50.0).unwrap().state_count(), 256);
        assert_eq!(ProjectionConfig::new(4, vec![0.2; 4], 50.0).unwrap().state_count(), 65536);
    }

    #[test]
    fn rejects_oversized_state_space() {
        assert!(matches!(
            ProjectionConfig::new(5, vec![0.2; 5], 50.0),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn rejects_fractional_bin_frames() {
        assert!(matches!(
            ProjectionConfig::new(3, vec![0.21, 0.4], 50.0),
            Err(Error::BinNotWholeFrames { .. })
        ));
        assert!(matches!(
            ProjectionConfig::new(3, vec![0.01], 50.0),
            Err(Error::BinNotWholeFrames { .. })
        ));
    }

    #[test]
    fn encode_trivials() {
        let cfg = triadic();
        assert_eq!(encode_state(&[0; 6], &cfg).unwrap(), StateIndex(0));
        assert_eq!(encode_state(&[1; 6], &cfg).unwrap(), StateIndex(63));
        assert!(encode_state(&[0; 5], &cfg).is_err());
        assert!(encode_state(&[2, 0, 0, 0, 0, 0], &cfg).is_err());
    }

    #[test]
    fn decode_trivials() {
        let cfg = triadic();
        assert_eq!(decode_state(StateIndex(0), &cfg).unwrap(), vec![0; 6]);
        assert_eq!(decode_state(StateIndex(63), &cfg).unwrap(), vec![1; 6]);
        assert!(matches!(decode_state(StateIndex(64), &cfg), Err(Error::StateOutOfRange(..))));
    }

    #[test]
    fn exhaustive_round_trip_triadic() {
        let cfg = triadic();
        for i in 0..cfg.state_count() as u32 {
            let matrix = decode_state(StateIndex(i), &cfg).unwrap();
            assert_eq!(encode_state(&matrix, &cfg).unwrap(), StateIndex(i));
        }
    }

    #[test]
    fn discretize_all_active_is_top_state() {
        let track = VoiceActivityTrack::new(
            3,
            2.0,
            (0..3).map(|s| VoiceActivitySegment::new(s, 0.0, 2.0).unwrap()).collect(),
        )
        .unwrap();
        let grid = rasterize(&track, 50.0).unwrap();
        assert_eq!(discretize_future(&grid, 0, &triadic()).unwrap(), StateIndex(63));
    }

    #[test]
    fn exact_half_bin_counts_inactive() {
        // Bin 1 is 20 frames; speaker 0 active in exactly 10 of them.
        let cfg = triadic();
        let mut grid = FrameGrid::zeros(3, 50.0, 40).unwrap();
        for f in 10..20 {
            grid.set(0, f, true);
        }
        assert_eq!(discretize_future(&grid, 0, &cfg).unwrap(), StateIndex(0));
        // One more frame makes it a strict majority.
        grid.set(0, 20, true);
        assert_eq!(discretize_future(&grid, 0, &cfg).unwrap(), StateIndex(1 << cfg.bit(0, 1)));
    }

    #[test]
    fn five_of_ten_tie_in_first_bin_is_inactive() {
        let cfg = triadic();
        let mut grid = FrameGrid::zeros(3, 50.0, 40).unwrap();
        for f in 0..5 {
            grid.set(0, f, true);
        }
        assert_eq!(discretize_future(&grid, 0, &cfg).unwrap(), StateIndex(0));
        grid.set(0, 5, true);
        assert_eq!(discretize_future(&grid, 0, &cfg).unwrap(), StateIndex(1));
    }

    #[test]
    fn far_speaker_second_bin_sets_bit_five() {
        let cfg = triadic();
        let mut grid = FrameGrid::zeros(3, 50.0, 64).unwrap();
        let at = 4;
        for f in at + 10..at + 30 {
            grid.set(2, f, true);
        }
        assert_eq!(discretize_future(&grid, at, &cfg).unwrap(), StateIndex(32));
    }

    #[test]
    fn insufficient_future_is_an_error() {
        let grid = FrameGrid::zeros(3, 50.0, 29).unwrap();
        assert!(matches!(
            discretize_future(&grid, 0, &triadic()),
            Err(Error::InsufficientFuture { .. })
        ));
    }

    #[test]
    fn probability_point_masses() {
        let cfg = triadic();
        let zero = StateDistribution::point_mass(StateIndex(0), &cfg).unwrap();
        assert_eq!(speaker_future_probability(&zero, &cfg), vec![0.0, 0.0, 0.0]);
        let all = StateDistribution::point_mass(StateIndex(63), &cfg).unwrap();
        let p = speaker_future_probability(&all, &cfg);
        for v in p {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_uniform_is_half_by_brute_force() {
        let cfg = triadic();
        let p = speaker_future_probability(&StateDistribution::uniform(&cfg), &cfg);
        // Independent brute-force: enumerate all states and count bits.
        let weights = cfg.bin_weights();
        for s in 0..3 {
            let mut expect = 0.0;
            for state in 0..64u32 {
                for (b, &w) in weights.iter().enumerate() {
                    if (state >> cfg.bit(s, b)) & 1 == 1 {
                        expect += w / 64.0;
                    }
                }
            }
            assert!((p[s] - expect).abs() < 1e-12);
            assert!((p[s] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn label_window_counts_and_silence() {
        let cfg = triadic();
        let grid = FrameGrid::zeros(3, 50.0, 1030).unwrap();
        let labels = label_window(&grid, 0, 999, &cfg).unwrap();
        assert_eq!(labels.len(), 1000);
        assert!(labels.iter().all(|&l| l == StateIndex(0)));
    }

    #[test]
    fn label_window_translation_equivariance() {
        let cfg = triadic();
        let mut grid = FrameGrid::zeros(3, 50.0, 200).unwrap();
        for f in 40..90 {
            grid.set(1, f, true);
        }
        for f in 100..130 {
            grid.set(2, f, true);
        }
        let a = label_window(&grid, 10, 60, &cfg).unwrap();
        let b = label_window(&grid, 20, 70, &cfg).unwrap();
        assert_eq!(a[10..], b[..41]);
    }

    #[test]
    fn state_permutation_identity_and_swap() {
        let cfg = triadic();
        let id = cfg.state_permutation(&[0, 1, 2]).unwrap();
        assert!(id.iter().enumerate().all(|(i, &v)| i as u32 == v));
        let swap = cfg.state_permutation(&[1, 0, 2]).unwrap();
        // Speaker 0 pattern of the mapped state is speaker 1's original.
        for i in 0..64u32 {
            let m = StateIndex(swap[i as usize]);
            assert_eq!(cfg.speaker_pattern(m, 0), cfg.speaker_pattern(StateIndex(i), 1));
            assert_eq!(cfg.speaker_pattern(m, 1), cfg.speaker_pattern(StateIndex(i), 0));
            assert_eq!(cfg.speaker_pattern(m, 2), cfg.speaker_pattern(StateIndex(i), 2));
        }
    }
}
