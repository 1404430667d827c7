//! Session ingestion, 20 s training windows, group-disjoint dataset
//! splits, and the synthetic conversation generator.

pub mod annotation;
pub mod synth;
pub mod wav;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activity::{rasterize, VoiceActivityTrack};
use crate::error::{Error, Result};
use crate::projection::{label_window, ProjectionConfig, StateIndex};

/// Length of one training window in seconds (labels additionally need the
/// projection horizon past the window end).
pub const TRAIN_WINDOW_SECS: f64 = 20.0;

/// Conversation style of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Spontaneous,
    AttentiveListening,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Spontaneous => "spontaneous",
            Category::AttentiveListening => "attentive_listening",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spontaneous" => Some(Category::Spontaneous),
            "attentive_listening" => Some(Category::AttentiveListening),
            _ => None,
        }
    }
}

/// One recorded (or synthesized) session: per-speaker audio plus the
/// voice-activity track.
#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: String,
    pub group_id: String,
    pub category: Category,
    pub sample_rate: u32,
    pub audio: Vec<Vec<i16>>,
    pub track: VoiceActivityTrack,
}

impl SessionRecord {
    pub fn new(
        session_id: String,
        group_id: String,
        category: Category,
        sample_rate: u32,
        audio: Vec<Vec<i16>>,
        track: VoiceActivityTrack,
    ) -> Result<Self> {
        if audio.is_empty() {
            return Err(Error::Ingestion(format!("session {session_id} has no audio channels")));
        }
        let len = audio[0].len();
        if audio.iter().any(|c| c.len() != len) {
            return Err(Error::Ingestion(format!(
                "session {session_id}: audio channels differ in length"
            )));
        }
        if audio.len() != track.speaker_count() {
            return Err(Error::Ingestion(format!(
                "session {session_id}: {} audio channels but {} annotated speakers",
                audio.len(),
                track.speaker_count()
            )));
        }
        // One frame (20 ms) of slack between annotated and audio duration.
        let audio_secs = len as f64 / sample_rate as f64;
        if (track.duration() - audio_secs).abs() > 0.02 + 1e-9 {
            return Err(Error::Ingestion(format!(
                "session {session_id}: annotation duration {:.3} s vs audio {:.3} s",
                track.duration(),
                audio_secs
            )));
        }
        Ok(Self { session_id, group_id, category, sample_rate, audio, track })
    }

    pub fn speaker_count(&self) -> usize {
        self.audio.len()
    }

    pub fn duration(&self) -> f64 {
        self.audio[0].len() as f64 / self.sample_rate as f64
    }
}

/// One 20 s training example: raw audio, per-frame state labels (computed
/// from activity extending one horizon past the audio), and VAD targets.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    pub audio: Vec<Vec<i16>>,
    pub labels: Vec<StateIndex>,
    /// Per speaker, one 0/1 value per frame of the window.
    pub vad_targets: Vec<Vec<u8>>,
    /// Originating session id and window start time in seconds.
    pub source: (String, f64),
}

/// Cut a session into training windows starting at 0, hop, 2*hop, ...;
/// the last window start satisfies `start + 20.6 s <= duration`. Sessions
/// too short for one window yield an empty list (with a warning).
pub fn make_windows(
    session: &SessionRecord,
    projection: &ProjectionConfig,
    hop_secs: f64,
) -> Result<Vec<TrainingWindow>> {
    if !(hop_secs > 0.0) {
        return Err(Error::Config(format!("window hop must be positive, got {hop_secs}")));
    }
    let frame_rate = projection.frame_rate();
    let window_frames = (TRAIN_WINDOW_SECS * frame_rate).round() as usize;
    let window_samples = (TRAIN_WINDOW_SECS * session.sample_rate as f64).round() as usize;
    let needed = TRAIN_WINDOW_SECS + projection.horizon();
    let duration = session.duration();
    if duration + 1e-9 < needed {
        log::warn!(
            "session {} is {:.2} s, shorter than one {:.1} s window; skipping",
            session.session_id,
            duration,
            needed
        );
        return Ok(Vec::new());
    }
    let grid = rasterize(&session.track, frame_rate)?;
    let mut windows = Vec::new();
    let mut start = 0.0f64;
    while start + needed <= duration + 1e-9 {
        let first_frame = (start * frame_rate).round() as usize;
        let last_frame = first_frame + window_frames - 1;
        let labels = label_window(&grid, first_frame, last_frame, projection)?;
        let sample_start = (start * session.sample_rate as f64).round() as usize;
        let audio: Vec<Vec<i16>> = session
            .audio
            .iter()
            .map(|c| c[sample_start..sample_start + window_samples].to_vec())
            .collect();
        let vad_targets: Vec<Vec<u8>> = (0..session.speaker_count())
            .map(|s| grid.row(s)[first_frame..first_frame + window_frames].to_vec())
            .collect();
        windows.push(TrainingWindow {
            audio,
            labels,
            vad_targets,
            source: (session.session_id.clone(), start),
        });
        start += hop_secs;
    }
    Ok(windows)
}

/// Group-disjoint dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl DatasetSplit {
    /// Deterministic text form (used by reports and determinism checks).
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "#split v1 seed={} fractions={:.3},{:.3},{:.3}\n",
            self.seed, self.fractions.0, self.fractions.1, self.fractions.2
        );
        for (name, list) in
            [("train", &self.train), ("validation", &self.validation), ("test", &self.test)]
        {
            s.push_str(&format!("{name}\t{}\n", list.join(",")));
        }
        s
    }
}

/// Shuffle triad groups with a seeded RNG and partition them by cumulative
/// fractions (rounded so that no split is empty). Every session of a group
/// lands in exactly one split.
pub fn split_sessions<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a str)>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let entries: Vec<(String, String)> =
        entries.into_iter().map(|(s, g)| (s.to_string(), g.to_string())).collect();
    let sum = fractions.0 + fractions.1 + fractions.2;
    if !(fractions.0 > 0.0 && fractions.1 > 0.0 && fractions.2 > 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    // Distinct groups in first-appearance order, then a seeded shuffle.
    let mut groups: Vec<String> = Vec::new();
    for (_, g) in &entries {
        if !groups.contains(g) {
            groups.push(g.clone());
        }
    }
    let n = groups.len();
    if n < 3 {
        return Err(Error::TooFewGroups(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let mut c1 = (fractions.0 * n as f64).round() as usize;
    let mut c2 = ((fractions.0 + fractions.1) * n as f64).round() as usize;
    c1 = c1.clamp(1, n - 2);
    c2 = c2.clamp(c1 + 1, n - 1);
    let in_split = |g: &str, lo: usize, hi: usize| groups[lo..hi].iter().any(|x| x == g);
    let collect = |lo: usize, hi: usize| {
        entries
            .iter()
            .filter(|(_, g)| in_split(g, lo, hi))
            .map(|(s, _)| s.clone())
            .collect::<Vec<_>>()
    };
    Ok(DatasetSplit {
        train: collect(0, c1),
        validation: collect(c1, c2),
        test: collect(c2, n),
        fractions,
        seed,
    })
}

/// Manifest row describing where one session lives on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMeta {
    pub session_id: String,
    pub group_id: String,
    pub category: Category,
    /// Either one multichannel file or one mono file per speaker.
    pub audio_paths: Vec<PathBuf>,
    pub annotation_path: PathBuf,
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest { path: path.display().to_string(), line, message: message.into() }
}

/// Read a manifest file; relative paths are resolved against its parent
/// directory.
pub fn read_manifest(path: &Path) -> Result<Vec<SessionMeta>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(manifest_err(
                path,
                line_no,
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let category = Category::parse(fields[2])
            .ok_or_else(|| manifest_err(path, line_no, format!("unknown category {:?}", fields[2])))?;
        let audio_paths: Vec<PathBuf> =
            fields[3].split(';').map(|p| base.join(p)).collect();
        if audio_paths.is_empty() {
            return Err(manifest_err(path, line_no, "no audio paths"));
        }
        out.push(SessionMeta {
            session_id: fields[0].to_string(),
            group_id: fields[1].to_string(),
            category,
            audio_paths,
            annotation_path: base.join(fields[4]),
        });
    }
    if out.is_empty() {
        return Err(manifest_err(path, 1, "manifest lists no sessions"));
    }
    Ok(out)
}

/// Write a manifest with paths relative to its own directory.
pub fn write_manifest(path: &Path, metas: &[SessionMeta]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base).unwrap_or(p).display().to_string()
    };
    let mut s = String::from("#manifest v1\n#session_id\tgroup_id\tcategory\taudio\tannotation\n");
    for m in metas {
        let audio = m.audio_paths.iter().map(|p| rel(p)).collect::<Vec<_>>().join(";");
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            m.session_id,
            m.group_id,
            m.category.as_str(),
            audio,
            rel(&m.annotation_path)
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Load a session: audio from one 3-channel WAV or three mono WAVs, plus
/// its annotation file.
pub fn load_session(meta: &SessionMeta) -> Result<SessionRecord> {
    let mut channels: Vec<Vec<i16>> = Vec::new();
    let mut sample_rate = None;
    for p in &meta.audio_paths {
        let (chans, sr) = wav::read_wav(p)?;
        if *sample_rate.get_or_insert(sr) != sr {
            return Err(Error::Ingestion(format!(
                "session {}: mixed sample rates in audio files",
                meta.session_id
            )));
        }
        if meta.audio_paths.len() > 1 && chans.len() != 1 {
            return Err(Error::Ingestion(format!(
                "session {}: expected mono files, {} has {} channels",
                meta.session_id,
                p.display(),
                chans.len()
            )));
        }
        channels.extend(chans);
    }
    let sample_rate = sample_rate.expect("at least one audio path");
    if sample_rate != 16000 {
        return Err(Error::Ingestion(format!(
            "session {}: sample rate {} Hz, expected 16000",
            meta.session_id, sample_rate
        )));
    }
    let (speakers, ann_duration, segments) = annotation::read_annotation(&meta.annotation_path)?;
    if speakers != channels.len() {
        return Err(Error::Ingestion(format!(
            "session {}: annotation declares {} speakers but audio has {} channels",
            meta.session_id,
            speakers,
            channels.len()
        )));
    }
    let audio_secs = channels[0].len() as f64 / sample_rate as f64;
    if (ann_duration - audio_secs).abs() > 0.02 + 1e-9 {
        return Err(Error::Ingestion(format!(
            "session {}: annotation duration {:.3} s does not match audio {:.3} s",
            meta.session_id, ann_duration, audio_secs
        )));
    }
    // The audio is authoritative for duration.
    let track = VoiceActivityTrack::new(speakers, audio_secs, segments)?;
    SessionRecord::new(
        meta.session_id.clone(),
        meta.group_id.clone(),
        meta.category,
        sample_rate,
        channels,
        track,
    )
}

/// Write a session to `dir` as three mono WAVs plus a canonical annotation
/// file, returning the manifest row.
pub fn save_session(dir: &Path, session: &SessionRecord) -> Result<SessionMeta> {
    std::fs::create_dir_all(dir)?;
    let mut audio_paths = Vec::new();
    for (c, chan) in session.audio.iter().enumerate() {
        let p = dir.join(format!("{}.spk{}.wav", session.session_id, c));
        wav::write_wav(&p, std::slice::from_ref(chan), session.sample_rate)?;
        audio_paths.push(p);
    }
    let annotation_path = dir.join(format!("{}.vad.tsv", session.session_id));
    annotation::write_annotation(&annotation_path, &session.track)?;
    Ok(SessionMeta {
        session_id: session.session_id.clone(),
        group_id: session.group_id.clone(),
        category: session.category,
        audio_paths,
        annotation_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::VoiceActivitySegment;

    fn session_with(duration_secs: f64, segments: Vec<VoiceActivitySegment>) -> SessionRecord {
        let samples = (duration_secs * 16000.0).round() as usize;
        let track = VoiceActivityTrack::new(3, duration_secs, segments).unwrap();
        SessionRecord::new(
            "S1".into(),
            "G1".into(),
            Category::Spontaneous,
            16000,
            vec![vec![0i16; samples]; 3],
            track,
        )
        .unwrap()
    }

    #[test]
    fn windows_exact_fit_and_counts() {
        let proj = ProjectionConfig::default_triadic();
        let s = session_with(20.6, vec![]);
        assert_eq!(make_windows(&s, &proj, 20.0).unwrap().len(), 1);
        let s = session_with(61.2, vec![]);
        let w = make_windows(&s, &proj, 20.0).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].source.1, 0.0);
        assert_eq!(w[1].source.1, 20.0);
        assert_eq!(w[2].source.1, 40.0);
        let s = session_with(20.5, vec![]);
        assert!(make_windows(&s, &proj, 20.0).unwrap().is_empty());
    }

    #[test]
    fn silent_windows_have_zero_labels_and_targets() {
        let proj = ProjectionConfig::default_triadic();
        let s = session_with(25.0, vec![]);
        let w = &make_windows(&s, &proj, 20.0).unwrap()[0];
        assert_eq!(w.labels.len(), 1000);
        assert!(w.labels.iter().all(|&l| l == StateIndex(0)));
        assert!(w.vad_targets.iter().all(|r| r.iter().all(|&v| v == 0)));
        assert_eq!(w.audio[0].len(), 320_000);
    }

    #[test]
    fn window_labels_match_oracle_rederivation() {
        let proj = ProjectionConfig::default_triadic();
        let segs = vec![
            VoiceActivitySegment::new(0, 1.0, 9.3).unwrap(),
            VoiceActivitySegment::new(1, 9.8, 22.0).unwrap(),
            VoiceActivitySegment::new(2, 21.5, 30.0).unwrap(),
        ];
        let s = session_with(45.0, segs);
        let windows = make_windows(&s, &proj, 20.0).unwrap();
        let grid = rasterize(&s.track, 50.0).unwrap();
        for w in &windows {
            let first = (w.source.1 * 50.0).round() as usize;
            for (i, &label) in w.labels.iter().enumerate() {
                let oracle = crate::projection::discretize_future(&grid, first + i, &proj).unwrap();
                assert_eq!(label, oracle);
            }
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let entries: Vec<(String, String)> = (0..30)
            .map(|i| (format!("S{i}"), format!("G{}", i / 3)))
            .collect();
        let pairs = || entries.iter().map(|(s, g)| (s.as_str(), g.as_str()));
        let split = split_sessions(pairs(), (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(split.train.len(), 24);
        assert_eq!(split.validation.len(), 3);
        assert_eq!(split.test.len(), 3);
        let again = split_sessions(pairs(), (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(split, again);
        let different = split_sessions(pairs(), (0.8, 0.1, 0.1), 43).unwrap();
        assert_ne!(split, different);
    }

    #[test]
    fn split_rejects_too_few_groups() {
        let entries = [("a", "g1"), ("b", "g2")];
        assert!(matches!(
            split_sessions(entries.iter().copied(), (0.8, 0.1, 0.1), 0),
            Err(Error::TooFewGroups(2))
        ));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = session_with(
            2.0,
            vec![
                VoiceActivitySegment::new(0, 0.0, 0.5).unwrap(),
                VoiceActivitySegment::new(2, 1.0, 1.75).unwrap(),
            ],
        );
        let meta = save_session(dir.path(), &s).unwrap();
        let back = load_session(&meta).unwrap();
        assert_eq!(back.audio, s.audio);
        assert_eq!(back.track.segments(), s.track.segments());
        // Saving the reloaded session reproduces the annotation bytes.
        let first = std::fs::read(&meta.annotation_path).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let meta2 = save_session(dir2.path(), &back).unwrap();
        let second = std::fs::read(&meta2.annotation_path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn load_rejects_duration_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let s = session_with(2.0, vec![]);
        let mut meta = save_session(dir.path(), &s).unwrap();
        // Rewrite the annotation with a wrong duration.
        std::fs::write(&meta.annotation_path, "#speakers=3 duration=5.000\n").unwrap();
        assert!(matches!(load_session(&meta), Err(Error::Ingestion(_))));
        // And with a wrong speaker count.
        std::fs::write(&meta.annotation_path, "#speakers=2 duration=2.000\n").unwrap();
        assert!(matches!(load_session(&meta), Err(Error::Ingestion(_))));
        meta.annotation_path = dir.path().join("missing.tsv");
        assert!(load_session(&meta).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = session_with(2.0, vec![]);
        let meta = save_session(dir.path(), &s).unwrap();
        let manifest = dir.path().join("manifest.tsv");
        write_manifest(&manifest, std::slice::from_ref(&meta)).unwrap();
        let metas = read_manifest(&manifest).unwrap();
        assert_eq!(metas, vec![meta]);
    }
}
