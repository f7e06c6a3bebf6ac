//! Score ingestion and score-informed initialization: time-aligned note
//! events per source, rasterized to a framewise piano roll, then converted
//! into initial F0 and loudness trajectories.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default initial loudness for frames with an active note (model units).
pub const L_HIGH_DEFAULT: f64 = -6.0;
/// Default initial loudness for silent frames (model units).
pub const L_LOW_DEFAULT: f64 = -10.0;

const SCORE_VERSION: &str = "mixsynth-score/1";

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoteEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub midi_note: u8,
}

/// Monophonic note track for one source.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreTrack {
    #[serde(rename = "source")]
    pub source_index: usize,
    pub events: Vec<NoteEvent>,
}

impl ScoreTrack {
    /// Sorted events, rejecting zero-length notes, overlaps, and note
    /// numbers outside 0..=127.
    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.events.clone();
        sorted.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        for e in &sorted {
            if !(e.onset_s.is_finite() && e.offset_s.is_finite()) || e.onset_s >= e.offset_s {
                return Err(Error::Score(format!(
                    "event at {}s must end after it starts",
                    e.onset_s
                )));
            }
            if e.midi_note > 127 {
                return Err(Error::Score(format!("note {} out of MIDI range", e.midi_note)));
            }
        }
        for w in sorted.windows(2) {
            if w[1].onset_s < w[0].offset_s {
                return Err(Error::Score(format!(
                    "overlapping events at {}s on a monophonic track",
                    w[1].onset_s
                )));
            }
        }
        Ok(())
    }
}

/// Framewise note numbers; -1 encodes silence.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRoll {
    pub notes: Vec<i16>,
}

impl PianoRoll {
    pub fn n_frames(&self) -> usize {
        self.notes.len()
    }
}

/// Sample the track at frame centers: frame `t` covers the note active at
/// `(t + 0.5) * hop`, silence (-1) otherwise.
pub fn rasterize(track: &ScoreTrack, n_frames: usize, hop_ms: u32) -> Result<PianoRoll> {
    track.validate()?;
    let hop_s = hop_ms as f64 / 1000.0;
    let notes = (0..n_frames)
        .map(|t| {
            let center = (t as f64 + 0.5) * hop_s;
            track
                .events
                .iter()
                .find(|e| e.onset_s <= center && center < e.offset_s)
                .map_or(-1, |e| e.midi_note as i16)
        })
        .collect();
    Ok(PianoRoll { notes })
}

/// Equal-tempered note-to-frequency conversion, `440 * 2^((p-69)/12)`,
/// accepting fractional note numbers. Whole-octave steps scale by exact
/// powers of two.
pub fn midi_to_hz(p: f64) -> f64 {
    let rel = p - 69.0;
    let oct = (rel / 12.0).floor();
    let frac = rel - 12.0 * oct;
    440.0 * oct.exp2() * (frac / 12.0).exp2()
}

pub fn hz_to_midi(f: f64) -> f64 {
    69.0 + 12.0 * (f / 440.0).log2()
}

/// Initial F0 from a piano roll. Silent frames take the frequency of the
/// time-averaged note number over all active frames (fractional mean used
/// as-is); an all-silent roll has no such average and is rejected.
pub fn init_f0(roll: &PianoRoll) -> Result<Vec<f64>> {
    let active: Vec<f64> = roll
        .notes
        .iter()
        .filter(|&&p| p >= 0)
        .map(|&p| p as f64)
        .collect();
    if active.is_empty() {
        return Err(Error::Score(
            "all-silent roll: no notes to average for the silence pitch; supply a fallback pitch"
                .to_string(),
        ));
    }
    let p_sil = active.iter().sum::<f64>() / active.len() as f64;
    Ok(roll
        .notes
        .iter()
        .map(|&p| if p >= 0 { midi_to_hz(p as f64) } else { midi_to_hz(p_sil) })
        .collect())
}

/// Initial loudness: `l_high` on active frames, `l_low` on silence.
pub fn init_loudness(roll: &PianoRoll, l_high: f64, l_low: f64) -> Result<Vec<f64>> {
    if l_high <= l_low {
        return Err(Error::invalid(format!(
            "l_high ({l_high}) must exceed l_low ({l_low})"
        )));
    }
    Ok(roll
        .notes
        .iter()
        .map(|&p| if p >= 0 { l_high } else { l_low })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    version: String,
    tracks: Vec<ScoreTrack>,
}

pub fn save_score(tracks: &[ScoreTrack], path: &Path) -> Result<()> {
    let file = ScoreFile { version: SCORE_VERSION.to_string(), tracks: tracks.to_vec() };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_score(path: &Path) -> Result<Vec<ScoreTrack>> {
    let bytes = std::fs::read(path)?;
    let file: ScoreFile = serde_json::from_slice(&bytes)?;
    if file.version != SCORE_VERSION {
        return Err(Error::Score(format!(
            "unsupported score version {:?}, expected {:?}",
            file.version, SCORE_VERSION
        )));
    }
    for t in &file.tracks {
        t.validate()?;
    }
    Ok(file.tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn track(events: Vec<(f64, f64, u8)>) -> ScoreTrack {
        ScoreTrack {
            source_index: 0,
            events: events
                .into_iter()
                .map(|(onset_s, offset_s, midi_note)| NoteEvent { onset_s, offset_s, midi_note })
                .collect(),
        }
    }

    #[test]
    fn rasterize_full_length_note() {
        let roll = rasterize(&track(vec![(0.0, 12.0, 69)]), 375, 32).unwrap();
        assert!(roll.notes.iter().all(|&p| p == 69));
    }

    #[test]
    fn rasterize_empty_track_is_silent() {
        let roll = rasterize(&track(vec![]), 10, 32).unwrap();
        assert!(roll.notes.iter().all(|&p| p == -1));
    }

    #[test]
    fn rasterize_frame_center_rule() {
        // Note from 10 to 20 frame-widths: active exactly where the frame
        // center falls inside [onset, offset).
        let hop_s = 0.032;
        let roll = rasterize(&track(vec![(10.0 * hop_s, 20.0 * hop_s, 60)]), 30, 32).unwrap();
        for (t, &p) in roll.notes.iter().enumerate() {
            let center = (t as f64 + 0.5) * hop_s;
            let expect = if (10.0 * hop_s..20.0 * hop_s).contains(&center) { 60 } else { -1 };
            assert_eq!(p, expect, "frame {t}");
        }
        assert_eq!(roll.notes[9], -1);
        assert_eq!(roll.notes[10], 60);
        assert_eq!(roll.notes[19], 60);
        assert_eq!(roll.notes[20], -1);
    }

    #[test]
    fn rasterize_rejects_overlap() {
        let t = track(vec![(0.0, 1.0, 60), (0.5, 1.5, 62)]);
        assert!(matches!(rasterize(&t, 10, 32), Err(Error::Score(_))));
    }

    #[test]
    fn midi_reference_frequencies() {
        assert_eq!(midi_to_hz(69.0), 440.0);
        assert_eq!(midi_to_hz(57.0), 220.0);
        assert_eq!(midi_to_hz(81.0), 880.0);
        let a4_sharp_ish = midi_to_hz(70.0);
        assert!((a4_sharp_ish - 466.1637615180899).abs() < 1e-9);
    }

    #[test]
    fn silence_pitch_is_fractional_mean() {
        let roll = PianoRoll { notes: vec![69, -1, 81] };
        let f0 = init_f0(&roll).unwrap();
        assert_eq!(f0[0], 440.0);
        assert_eq!(f0[2], 880.0);
        // Mean note 75 -> half an octave above A4.
        let expect = 440.0 * 2f64.powf(0.5);
        assert!((f0[1] - expect).abs() < 1e-9, "{}", f0[1]);
    }

    #[test]
    fn all_silent_roll_rejected() {
        let roll = PianoRoll { notes: vec![-1; 8] };
        assert!(init_f0(&roll).is_err());
    }

    #[test]
    fn loudness_defaults_and_rule() {
        let roll = PianoRoll { notes: vec![69, -1] };
        let l = init_loudness(&roll, L_HIGH_DEFAULT, L_LOW_DEFAULT).unwrap();
        assert_eq!(l, vec![-6.0, -10.0]);

        let active = PianoRoll { notes: vec![60; 5] };
        let l = init_loudness(&active, L_HIGH_DEFAULT, L_LOW_DEFAULT).unwrap();
        assert!(l.iter().all(|&v| v == -6.0));

        assert!(init_loudness(&roll, -10.0, -6.0).is_err());
    }

    #[test]
    fn init_f0_strictly_positive() {
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let notes: Vec<i16> = (0..40)
                .map(|_| if rng.uniform() < 0.3 { -1 } else { rng.below(128) as i16 })
                .collect();
            if notes.iter().all(|&p| p < 0) {
                continue;
            }
            let f0 = init_f0(&PianoRoll { notes }).unwrap();
            assert!(f0.iter().all(|&f| f > 0.0));
        }
    }

    #[test]
    fn octave_transposition_doubles_exactly() {
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let notes: Vec<i16> = (0..20).map(|_| rng.below(110) as i16).collect();
            let up: Vec<i16> = notes.iter().map(|&p| p + 12).collect();
            let f_lo = init_f0(&PianoRoll { notes }).unwrap();
            let f_hi = init_f0(&PianoRoll { notes: up }).unwrap();
            for (a, b) in f_lo.iter().zip(&f_hi) {
                assert_eq!(*b, 2.0 * *a);
            }
        }
    }

    #[test]
    fn shifting_events_by_one_hop_shifts_the_roll() {
        let hop_s = 0.032;
        let t = track(vec![(2.0 * hop_s, 7.0 * hop_s, 64), (9.0 * hop_s, 12.0 * hop_s, 66)]);
        let shifted = ScoreTrack {
            source_index: 0,
            events: t
                .events
                .iter()
                .map(|e| NoteEvent {
                    onset_s: e.onset_s + hop_s,
                    offset_s: e.offset_s + hop_s,
                    midi_note: e.midi_note,
                })
                .collect(),
        };
        let r0 = rasterize(&t, 20, 32).unwrap();
        let r1 = rasterize(&shifted, 20, 32).unwrap();
        for t in 1..20 {
            assert_eq!(r1.notes[t], r0.notes[t - 1], "frame {t}");
        }
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("score.json");
        let tracks = vec![
            track(vec![(0.0, 1.0, 60), (1.0, 2.0, 64)]),
            ScoreTrack { source_index: 1, events: vec![NoteEvent { onset_s: 0.5, offset_s: 1.25, midi_note: 48 }] },
        ];
        save_score(&tracks, &path).unwrap();
        let loaded = load_score(&path).unwrap();
        assert_eq!(loaded, tracks);
    }
}
