//! Seeded synthetic triadic conversations.
//!
//! The turn structure is a Markov process over {hold, switch-to-other,
//! pause, backchannel-overlap} with clamped-exponential durations. Audio
//! is band-limited noise in a per-speaker signature band. Two acoustic
//! regularities make the next-speaker task learnable from sound alone:
//! every turn that yields the floor fades out over its final stretch, and
//! the upcoming speaker emits a low-amplitude cue burst (an inbreath
//! analog) in their own channel just before their onset. Cue bursts and
//! the constant low floor noise are sub-threshold and never annotated;
//! main turns and backchannels are.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::activity::{VoiceActivitySegment, VoiceActivityTrack};
use crate::corpus::{Category, SessionRecord};
use crate::error::{Error, Result};

/// Probability that the floor returns to the same speaker after a pause.
pub const HOLD_PROBABILITY: f64 = 0.25;
/// Bounds for clamped-exponential turn lengths (also the minimum that can
/// qualify as an evaluation-grade utterance).
const MIN_TURN_SECS: f64 = 1.0;
const MAX_TURN_FACTOR: f64 = 4.0;
/// Silence gaps between turns.
const MIN_GAP_SECS: f64 = 0.12;
const MAX_GAP_FACTOR: f64 = 4.0;
/// Overlapped switches: the incomer starts this long before the holder ends.
const OVERLAP_MEAN_SECS: f64 = 0.3;
const OVERLAP_MIN_SECS: f64 = 0.1;
const OVERLAP_MAX_SECS: f64 = 0.8;
/// Backchannels are short and stay well inside the host turn.
const BC_MIN_SECS: f64 = 0.2;
const BC_MAX_SECS: f64 = 0.6;
const BC_TURN_MARGIN: f64 = 0.4;
/// Amplitudes on linear full scale.
const MAIN_AMPLITUDE: f64 = 0.3;
const BC_AMPLITUDE_RATIO: f64 = 0.8;
const FLOOR_AMPLITUDE: f64 = 0.001;
/// Onset ramp that avoids clicks.
const ATTACK_SECS: f64 = 0.01;

/// Spectral signature of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerBand {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

/// Pre-onset cue: the next speaker's channel carries a burst at
/// `amplitude_ratio` of the speech amplitude for `lead_secs` before onset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreOnsetCue {
    pub lead_secs: f64,
    pub amplitude_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisParams {
    pub seed: u64,
    pub session_duration: f64,
    pub mean_turn: f64,
    pub mean_gap: f64,
    pub overlap_probability: f64,
    /// Backchannel events per minute of held turn.
    pub backchannel_rate: f64,
    pub speaker_signatures: Vec<SpeakerBand>,
    pub turn_final_fade: f64,
    pub pre_onset_cue: PreOnsetCue,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            seed: 0,
            session_duration: 300.0,
            mean_turn: 3.0,
            mean_gap: 0.5,
            overlap_probability: 0.15,
            backchannel_rate: 3.0,
            speaker_signatures: vec![
                SpeakerBand { center_hz: 400.0, bandwidth_hz: 200.0 },
                SpeakerBand { center_hz: 1200.0, bandwidth_hz: 400.0 },
                SpeakerBand { center_hz: 3000.0, bandwidth_hz: 800.0 },
            ],
            turn_final_fade: 0.4,
            pre_onset_cue: PreOnsetCue { lead_secs: 0.4, amplitude_ratio: 0.25 },
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleParams(m));
        if !(self.session_duration >= 10.0) {
            return bad(format!("session_duration {} s (need >= 10 s)", self.session_duration));
        }
        if !(self.mean_turn > 0.0 && self.mean_gap > 0.0 && self.turn_final_fade > 0.0) {
            return bad("durations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return bad(format!("overlap_probability {}", self.overlap_probability));
        }
        if self.backchannel_rate < 0.0 {
            return bad(format!("backchannel_rate {}", self.backchannel_rate));
        }
        if !(self.pre_onset_cue.lead_secs > 0.0)
            || !(0.0..1.0).contains(&self.pre_onset_cue.amplitude_ratio)
        {
            return bad("pre_onset_cue needs positive lead and ratio in [0, 1)".into());
        }
        if self.mean_gap < self.pre_onset_cue.lead_secs {
            return bad(format!(
                "mean_gap {} s is shorter than the cue lead {} s",
                self.mean_gap, self.pre_onset_cue.lead_secs
            ));
        }
        if self.speaker_signatures.len() < 2 {
            return bad("need at least two speaker signatures".into());
        }
        let mut bands: Vec<(f64, f64)> = self
            .speaker_signatures
            .iter()
            .map(|b| (b.center_hz - b.bandwidth_hz / 2.0, b.center_hz + b.bandwidth_hz / 2.0))
            .collect();
        for &(lo, hi) in &bands {
            if !(lo > 0.0 && hi < 8000.0) {
                return bad(format!("signature band [{lo}, {hi}] outside (0, 8000) Hz"));
            }
        }
        bands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in bands.windows(2) {
            if w[0].1 >= w[1].0 {
                return bad(format!("signature bands overlap: {:?} and {:?}", w[0], w[1]));
            }
        }
        Ok(())
    }
}

struct Turn {
    speaker: usize,
    start: f64,
    end: f64,
    /// True when the next turn belongs to a different speaker.
    yields: bool,
}

struct Timeline {
    turns: Vec<Turn>,
    /// (speaker, start, end) of annotated backchannels.
    backchannels: Vec<(usize, f64, f64)>,
    /// (speaker, start, end) of unannotated cue bursts.
    cues: Vec<(usize, f64, f64)>,
}

fn clamped_exp(rng: &mut ChaCha8Rng, mean: f64, min: f64, max: f64) -> f64 {
    let u: f64 = rng.gen();
    (-mean * (1.0 - u).ln()).clamp(min, max)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn build_timeline(params: &SynthesisParams, speakers: usize, rng: &mut ChaCha8Rng) -> Timeline {
    let duration = params.session_duration;
    let mut turns: Vec<Turn> = Vec::new();
    let mut backchannels = Vec::new();
    let mut t = clamped_exp(rng, params.mean_gap, MIN_GAP_SECS, params.mean_gap * MAX_GAP_FACTOR);
    let mut speaker = rng.gen_range(0..speakers);
    while t < duration - MIN_TURN_SECS {
        let turn_len =
            clamped_exp(rng, params.mean_turn, MIN_TURN_SECS, params.mean_turn * MAX_TURN_FACTOR);
        let end = (t + turn_len).min(duration);
        // Backchannels from listeners, fully inside the turn.
        let span = end - t - 2.0 * BC_TURN_MARGIN;
        if span > BC_MIN_SECS && params.backchannel_rate > 0.0 {
            let lambda = params.backchannel_rate / 60.0 * span;
            let count = Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0);
            for _ in 0..count {
                let len = rng.gen_range(BC_MIN_SECS..BC_MAX_SECS);
                let latest = end - BC_TURN_MARGIN - len;
                if latest <= t + BC_TURN_MARGIN {
                    continue;
                }
                let start = rng.gen_range(t + BC_TURN_MARGIN..latest);
                let offset = rng.gen_range(0..speakers - 1);
                let who = (speaker + 1 + offset) % speakers;
                backchannels.push((who, start, (start + len).min(duration)));
            }
        }
        let hold = rng.gen::<f64>() < HOLD_PROBABILITY;
        let next = if hold {
            speaker
        } else {
            let offset = rng.gen_range(0..speakers - 1);
            (speaker + 1 + offset) % speakers
        };
        let overlapped = !hold && rng.gen::<f64>() < params.overlap_probability;
        let next_start = if overlapped {
            let depth = clamped_exp(rng, OVERLAP_MEAN_SECS, OVERLAP_MIN_SECS, OVERLAP_MAX_SECS)
                .min(turn_len / 2.0);
            end - depth
        } else {
            end + clamped_exp(rng, params.mean_gap, MIN_GAP_SECS, params.mean_gap * MAX_GAP_FACTOR)
        };
        turns.push(Turn { speaker, start: t, end, yields: next != speaker });
        speaker = next;
        t = next_start;
    }
    if let Some(last) = turns.last_mut() {
        // Nothing follows the final turn.
        last.yields = false;
    }
    let cues = turns
        .iter()
        .map(|turn| {
            let lead = params.pre_onset_cue.lead_secs;
            (turn.speaker, (turn.start - lead).max(0.0), turn.start)
        })
        .filter(|(_, a, b)| b > a)
        .collect();
    Timeline { turns, backchannels, cues }
}

/// Second-order bandpass (constant 0 dB peak gain), then RMS-normalized.
fn band_noise(rng: &mut ChaCha8Rng, n: usize, band: SpeakerBand, sample_rate: f64) -> Vec<f32> {
    let omega = 2.0 * std::f64::consts::PI * band.center_hz / sample_rate;
    let q = (band.center_hz / band.bandwidth_hz).max(0.2);
    let alpha = omega.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let b0 = alpha / a0;
    let b2 = -alpha / a0;
    let a1 = -2.0 * omega.cos() / a0;
    let a2 = (1.0 - alpha) / a0;
    let mut out = vec![0f32; n];
    let (mut x1, mut x2, mut y1, mut y2) = (0f64, 0f64, 0f64, 0f64);
    let mut sumsq = 0f64;
    for o in out.iter_mut() {
        let x: f64 = {
            let g: f64 = StandardNormal.sample(rng);
            g
        };
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        sumsq += y * y;
        *o = y as f32;
    }
    let rms = (sumsq / n.max(1) as f64).sqrt().max(1e-9);
    let scale = (1.0 / rms) as f32;
    for o in out.iter_mut() {
        *o *= scale;
    }
    out
}

struct RenderSegment {
    speaker: usize,
    start: f64,
    end: f64,
    amplitude: f64,
    fade_out: Option<f64>,
}

/// Generate one session. Bit-identical output for identical parameters.
pub fn synthesize_session(
    session_id: &str,
    group_id: &str,
    category: Category,
    params: &SynthesisParams,
) -> Result<SessionRecord> {
    params.validate()?;
    let speakers = params.speaker_signatures.len();
    let sample_rate = 16000u32;
    let mut timeline_rng = ChaCha8Rng::seed_from_u64(splitmix64(params.seed ^ 0x7431));
    let mut audio_rng = ChaCha8Rng::seed_from_u64(splitmix64(params.seed ^ 0xa0d10));
    let timeline = build_timeline(params, speakers, &mut timeline_rng);

    // Annotated activity: main turns plus backchannels.
    let mut segments = Vec::new();
    for turn in &timeline.turns {
        segments.push(VoiceActivitySegment::new(turn.speaker, turn.start, turn.end)?);
    }
    for &(who, a, b) in &timeline.backchannels {
        segments.push(VoiceActivitySegment::new(who, a, b)?);
    }
    let track = VoiceActivityTrack::new(speakers, params.session_duration, segments)?;

    // Render audio: floor noise, then each acoustic segment in a fixed
    // deterministic order.
    let n = (params.session_duration * sample_rate as f64).round() as usize;
    let mut buffers: Vec<Vec<f32>> = Vec::with_capacity(speakers);
    for _ in 0..speakers {
        let mut buf = vec![0f32; n];
        for b in buf.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut audio_rng);
            *b = (g * FLOOR_AMPLITUDE) as f32;
        }
        buffers.push(buf);
    }
    let mut renders: Vec<RenderSegment> = Vec::new();
    for turn in &timeline.turns {
        renders.push(RenderSegment {
            speaker: turn.speaker,
            start: turn.start,
            end: turn.end,
            amplitude: MAIN_AMPLITUDE,
            fade_out: turn.yields.then_some(params.turn_final_fade),
        });
    }
    for &(who, a, b) in &timeline.backchannels {
        renders.push(RenderSegment {
            speaker: who,
            start: a,
            end: b,
            amplitude: MAIN_AMPLITUDE * BC_AMPLITUDE_RATIO,
            fade_out: None,
        });
    }
    for &(who, a, b) in &timeline.cues {
        renders.push(RenderSegment {
            speaker: who,
            start: a,
            end: b,
            amplitude: MAIN_AMPLITUDE * params.pre_onset_cue.amplitude_ratio,
            fade_out: None,
        });
    }
    let sr = sample_rate as f64;
    for seg in &renders {
        let i0 = (seg.start * sr).round() as usize;
        let i1 = ((seg.end * sr).round() as usize).min(n);
        if i1 <= i0 {
            continue;
        }
        let len = i1 - i0;
        let noise = band_noise(
            &mut audio_rng,
            len,
            params.speaker_signatures[seg.speaker],
            sr,
        );
        let attack = (ATTACK_SECS * sr) as usize;
        let fade = seg
            .fade_out
            .map(|f| ((f.min((seg.end - seg.start) * 0.5)) * sr) as usize)
            .unwrap_or(0);
        let buf = &mut buffers[seg.speaker];
        for (i, &v) in noise.iter().enumerate() {
            let mut env = seg.amplitude;
            if i < attack {
                env *= i as f64 / attack as f64;
            }
            if fade > 0 && i + fade >= len {
                env *= (len - i) as f64 / fade as f64;
            }
            buf[i0 + i] += v * env as f32;
        }
    }
    let audio: Vec<Vec<i16>> = buffers
        .into_iter()
        .map(|buf| {
            buf.into_iter()
                .map(|v| (v.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                .collect()
        })
        .collect();

    SessionRecord::new(
        session_id.to_string(),
        group_id.to_string(),
        category,
        sample_rate,
        audio,
        track,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::{occupancy_stats, rasterize};

    fn quick_params(seed: u64) -> SynthesisParams {
        SynthesisParams { seed, session_duration: 60.0, ..SynthesisParams::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = quick_params(7);
        let a = synthesize_session("s", "g", Category::Spontaneous, &p).unwrap();
        let b = synthesize_session("s", "g", Category::Spontaneous, &p).unwrap();
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.track.segments(), b.track.segments());
        let c = synthesize_session("s", "g", Category::Spontaneous, &quick_params(8)).unwrap();
        assert_ne!(a.audio, c.audio);
    }

    #[test]
    fn no_overlap_knobs_means_no_simultaneous_speech() {
        let p = SynthesisParams {
            overlap_probability: 0.0,
            backchannel_rate: 0.0,
            ..quick_params(3)
        };
        let s = synthesize_session("s", "g", Category::Spontaneous, &p).unwrap();
        let grid = rasterize(&s.track, 50.0).unwrap();
        let stats = occupancy_stats(&grid).unwrap();
        assert_eq!(stats.double(), 0.0);
        assert_eq!(stats.triple(), 0.0);
        assert!(stats.single() > 0.5);
    }

    #[test]
    fn rejects_infeasible_params() {
        let p = SynthesisParams { mean_gap: 0.2, ..SynthesisParams::default() };
        assert!(matches!(
            synthesize_session("s", "g", Category::Spontaneous, &p),
            Err(Error::InfeasibleParams(_))
        ));
        let p = SynthesisParams {
            speaker_signatures: vec![
                SpeakerBand { center_hz: 400.0, bandwidth_hz: 300.0 },
                SpeakerBand { center_hz: 500.0, bandwidth_hz: 300.0 },
                SpeakerBand { center_hz: 3000.0, bandwidth_hz: 400.0 },
            ],
            ..SynthesisParams::default()
        };
        assert!(matches!(p.validate(), Err(Error::InfeasibleParams(_))));
    }

    #[test]
    fn speech_is_loud_in_the_signature_band() {
        let p = quick_params(11);
        let s = synthesize_session("s", "g", Category::Spontaneous, &p).unwrap();
        // During an annotated segment the speaker's channel should carry
        // far more energy than during silence.
        let seg = s.track.segments().iter().find(|g| g.duration() > 1.0).unwrap();
        let ch = &s.audio[seg.speaker];
        let mid = ((seg.start + seg.duration() / 2.0) * 16000.0) as usize;
        let speech_rms: f64 = (0..1600)
            .map(|i| (ch[mid + i] as f64 / 32768.0).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(speech_rms > 10.0 * FLOOR_AMPLITUDE * 40.0, "speech rms {speech_rms}");
    }
}
