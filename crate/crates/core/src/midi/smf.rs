//! Standard MIDI File (format 0/1) parsing into timed note events.

use std::path::Path;

use crate::error::{Error, Result};

pub const LOWEST_KEY: u8 = 21;
pub const HIGHEST_KEY: u8 = 108;
pub const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoteEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub pitch: u8,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn key_index(&self) -> usize {
        (self.pitch - LOWEST_KEY) as usize
    }
}

fn midi_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Midi {
        offset,
        msg: msg.into(),
    }
}

/// Decodes a variable-length quantity starting at `pos`; returns the value and
/// the position after it. At most four bytes are accepted.
pub fn read_vlq(bytes: &[u8], pos: usize, end: usize) -> Result<(u32, usize)> {
    let mut value: u32 = 0;
    let mut p = pos;
    for _ in 0..4 {
        if p >= end {
            return Err(midi_err(p, "truncated variable-length quantity"));
        }
        let b = bytes[p];
        p += 1;
        value = (value << 7) | (b & 0x7f) as u32;
        if b & 0x80 == 0 {
            return Ok((value, p));
        }
    }
    Err(midi_err(pos, "variable-length quantity longer than 4 bytes"))
}

pub fn write_vlq(mut value: u32, out: &mut Vec<u8>) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7f) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

#[derive(Clone, Copy, Debug)]
enum RawKind {
    On { channel: u8, pitch: u8, velocity: u8 },
    Off { channel: u8, pitch: u8 },
    Tempo(u32),
}

#[derive(Clone, Copy, Debug)]
struct RawEvent {
    tick: u64,
    track: usize,
    seq: usize,
    kind: RawKind,
}

enum Timebase {
    /// Ticks per quarter note; seconds depend on tempo.
    Metrical(u16),
    /// Fixed seconds per tick (SMPTE division).
    Absolute(f64),
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_be_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_be_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

/// Parses an SMF byte buffer. Tracks are merged by absolute tick, tempo
/// changes are applied, note-on with velocity 0 counts as note-off, notes
/// still open at the end are closed there, and pitches outside the 88-key
/// range are dropped. Events are sorted by onset then pitch.
pub fn parse_midi(bytes: &[u8]) -> Result<Vec<NoteEvent>> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(midi_err(0, "bad header magic"));
    }
    let header_len = u32_at(bytes, 4) as usize;
    if header_len < 6 || 8 + header_len > bytes.len() {
        return Err(midi_err(4, "chunk-length overrun in header"));
    }
    let format = u16_at(bytes, 8);
    if format > 1 {
        return Err(midi_err(8, format!("unsupported SMF format {format}")));
    }
    let n_tracks = u16_at(bytes, 10) as usize;
    let division = u16_at(bytes, 12);
    let timebase = if division & 0x8000 == 0 {
        if division == 0 {
            return Err(midi_err(12, "zero ticks per quarter note"));
        }
        Timebase::Metrical(division)
    } else {
        let fps = -((division >> 8) as u8 as i8) as f64;
        let per_frame = (division & 0xff) as f64;
        if fps <= 0.0 || per_frame <= 0.0 {
            return Err(midi_err(12, "invalid SMPTE division"));
        }
        Timebase::Absolute(1.0 / (fps * per_frame))
    };

    let mut raw = Vec::new();
    let mut end_tick = 0u64;
    let mut pos = 8 + header_len;
    let mut track = 0;
    while track < n_tracks && pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if len > bytes.len() - body {
            return Err(midi_err(pos + 4, "chunk-length overrun"));
        }
        if id == b"MTrk" {
            let last = parse_track(bytes, body, body + len, track, &mut raw)?;
            end_tick = end_tick.max(last);
            track += 1;
        }
        pos = body + len;
    }
    if track < n_tracks {
        return Err(midi_err(pos, format!("expected {n_tracks} tracks, found {track}")));
    }

    raw.sort_by_key(|e| (e.tick, e.track, e.seq));
    Ok(pair_notes(&raw, end_tick, &timebase))
}

/// Returns the track's final absolute tick.
fn parse_track(
    bytes: &[u8],
    start: usize,
    end: usize,
    track: usize,
    out: &mut Vec<RawEvent>,
) -> Result<u64> {
    let mut pos = start;
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut seq = 0;
    let mut push = |tick: u64, kind: RawKind, out: &mut Vec<RawEvent>| {
        out.push(RawEvent {
            tick,
            track,
            seq,
            kind,
        });
        seq += 1;
    };
    while pos < end {
        let (delta, p) = read_vlq(bytes, pos, end)?;
        tick += delta as u64;
        pos = p;
        if pos >= end {
            return Err(midi_err(pos, "event missing after delta time"));
        }
        let first = bytes[pos];
        match first {
            0xff => {
                running = None;
                if pos + 1 >= end {
                    return Err(midi_err(pos, "truncated meta event"));
                }
                let meta = bytes[pos + 1];
                let (len, p) = read_vlq(bytes, pos + 2, end)?;
                let len = len as usize;
                if len > end - p {
                    return Err(midi_err(p, "chunk-length overrun in meta event"));
                }
                if meta == 0x51 {
                    if len != 3 {
                        return Err(midi_err(p, "set-tempo must have 3 data bytes"));
                    }
                    let tempo = ((bytes[p] as u32) << 16) | ((bytes[p + 1] as u32) << 8) | bytes[p + 2] as u32;
                    if tempo == 0 {
                        return Err(midi_err(p, "zero tempo"));
                    }
                    push(tick, RawKind::Tempo(tempo), out);
                }
                pos = p + len;
                if meta == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let (len, p) = read_vlq(bytes, pos + 1, end)?;
                if len as usize > end - p {
                    return Err(midi_err(p, "chunk-length overrun in sysex"));
                }
                pos = p + len as usize;
            }
            0xf1..=0xfe => {
                return Err(midi_err(pos, format!("system message 0x{first:02x} inside track")));
            }
            _ => {
                let (status, data_at) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, pos + 1)
                } else {
                    match running {
                        Some(s) => (s, pos),
                        None => return Err(midi_err(pos, "dangling running status")),
                    }
                };
                let n_data = match status & 0xf0 {
                    0xc0 | 0xd0 => 1,
                    _ => 2,
                };
                if data_at + n_data > end {
                    return Err(midi_err(data_at, "truncated channel message"));
                }
                let d = &bytes[data_at..data_at + n_data];
                if d.iter().any(|b| b & 0x80 != 0) {
                    return Err(midi_err(data_at, "status byte where data byte expected"));
                }
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x90 if d[1] > 0 => push(
                        tick,
                        RawKind::On {
                            channel,
                            pitch: d[0],
                            velocity: d[1],
                        },
                        out,
                    ),
                    0x90 | 0x80 => push(tick, RawKind::Off { channel, pitch: d[0] }, out),
                    _ => {}
                }
                pos = data_at + n_data;
            }
        }
    }
    Ok(tick)
}

fn pair_notes(raw: &[RawEvent], end_tick: u64, timebase: &Timebase) -> Vec<NoteEvent> {
    // tick -> seconds through the tempo map
    let mut tempo = DEFAULT_TEMPO_US;
    let mut last_tick = 0u64;
    let mut last_s = 0.0f64;
    let to_seconds = |tick: u64, tempo: u32, last_tick: &mut u64, last_s: &mut f64| -> f64 {
        let per_tick = match timebase {
            Timebase::Metrical(tpq) => tempo as f64 * 1e-6 / *tpq as f64,
            Timebase::Absolute(s) => *s,
        };
        *last_s += (tick - *last_tick) as f64 * per_tick;
        *last_tick = tick;
        *last_s
    };

    let mut open: Vec<Vec<(f64, u8)>> = vec![Vec::new(); 16 * 128];
    let mut notes = Vec::new();
    for e in raw {
        let now = to_seconds(e.tick, tempo, &mut last_tick, &mut last_s);
        match e.kind {
            RawKind::Tempo(t) => tempo = t,
            RawKind::On {
                channel,
                pitch,
                velocity,
            } => open[channel as usize * 128 + pitch as usize].push((now, velocity)),
            RawKind::Off { channel, pitch } => {
                let slot = &mut open[channel as usize * 128 + pitch as usize];
                if !slot.is_empty() {
                    let (onset, velocity) = slot.remove(0);
                    notes.push(NoteEvent {
                        onset_s: onset,
                        offset_s: now,
                        pitch,
                        velocity,
                    });
                }
            }
        }
    }
    let end_s = to_seconds(end_tick.max(last_tick), tempo, &mut last_tick, &mut last_s);
    for (i, slot) in open.iter().enumerate() {
        for &(onset, velocity) in slot {
            notes.push(NoteEvent {
                onset_s: onset,
                offset_s: end_s,
                pitch: (i % 128) as u8,
                velocity,
            });
        }
    }
    notes.retain(|n| (LOWEST_KEY..=HIGHEST_KEY).contains(&n.pitch) && n.offset_s > n.onset_s);
    notes.sort_by(|a, b| {
        a.onset_s
            .partial_cmp(&b.onset_s)
            .expect("finite times")
            .then(a.pitch.cmp(&b.pitch))
    });
    notes
}

pub fn read_midi(path: &Path) -> Result<Vec<NoteEvent>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_midi(&bytes)
}

/// Encodes notes as a format-0 SMF at a fixed tempo on channel 0.
pub fn encode_smf(notes: &[NoteEvent], ticks_per_quarter: u16, tempo_us: u32) -> Vec<u8> {
    let ticks_per_s = ticks_per_quarter as f64 * 1e6 / tempo_us as f64;
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::new();
    for n in notes {
        let on = (n.onset_s * ticks_per_s).round() as u64;
        let off = (n.offset_s * ticks_per_s).round() as u64;
        // offs sort before ons at the same tick
        events.push((off, 0, n.pitch, 0));
        events.push((on, 1, n.pitch, n.velocity));
    }
    events.sort();
    let mut track = Vec::new();
    write_vlq(0, &mut track);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&tempo_us.to_be_bytes()[1..]);
    let mut now = 0u64;
    for (tick, kind, pitch, vel) in events {
        write_vlq((tick - now) as u32, &mut track);
        now = tick;
        if kind == 1 {
            track.extend_from_slice(&[0x90, pitch, vel]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    write_vlq(0, &mut track);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(format: u16, division: u16, tracks: &[&[u8]]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&division.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    #[test]
    fn vlq_examples() {
        assert_eq!(read_vlq(&[0x81, 0x48], 0, 2).unwrap(), (200, 2));
        assert_eq!(read_vlq(&[0x00], 0, 1).unwrap(), (0, 1));
        assert_eq!(read_vlq(&[0xff, 0xff, 0xff, 0x7f], 0, 4).unwrap().0, 0x0fff_ffff);
        assert!(read_vlq(&[0x81, 0x81, 0x81, 0x81, 0x01], 0, 5).is_err());
        for v in [0u32, 127, 128, 200, 16383, 16384, 0x0fff_ffff] {
            let mut b = Vec::new();
            write_vlq(v, &mut b);
            assert_eq!(read_vlq(&b, 0, b.len()).unwrap(), (v, b.len()));
        }
    }

    #[test]
    fn one_beat_note_at_120_bpm() {
        // tempo 500000 us/quarter, 480 ticks/quarter; delta 480 = 0x83 0x60
        let track: &[u8] = &[
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // set tempo 500000
            0x00, 0x90, 60, 64, // note on
            0x83, 0x60, 0x90, 60, 0, // note on vel 0 after 480 ticks
            0x00, 0xff, 0x2f, 0x00,
        ];
        let notes = parse_midi(&smf(0, 480, &[track])).unwrap();
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].pitch, 60);
        assert_eq!(notes[0].velocity, 64);
        assert_eq!(notes[0].onset_s, 0.0);
        assert!((notes[0].offset_s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn running_status_and_tempo_change() {
        // two notes using running status; tempo doubles between them
        let track: &[u8] = &[
            0x00, 0x90, 60, 100, // on 60
            0x83, 0x60, 62, 100, // (running) on 62 at 480
            0x00, 60, 0, // (running) off 60 at 480
            0x00, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40, // tempo 1_000_000 at 480
            0x83, 0x60, 0x80, 62, 0, // off 62 at 960
            0x00, 0xff, 0x2f, 0x00,
        ];
        let notes = parse_midi(&smf(0, 480, &[track])).unwrap();
        assert_eq!(notes.len(), 2);
        assert!((notes[0].offset_s - 0.5).abs() < 1e-12);
        assert_eq!(notes[1].pitch, 62);
        assert!((notes[1].onset_s - 0.5).abs() < 1e-12);
        assert!((notes[1].offset_s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn format1_tracks_merge_and_unmatched_notes_close_at_end() {
        let tempo: &[u8] = &[0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, 0x87, 0x40, 0xff, 0x2f, 0x00];
        let notes: &[u8] = &[0x00, 0x90, 72, 90, 0x00, 0x90, 10, 90, 0x00, 0xff, 0x2f, 0x00];
        let out = parse_midi(&smf(1, 480, &[tempo, notes])).unwrap();
        // pitch 10 dropped; 72 open until the tempo track ends at 960 ticks
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].pitch, 72);
        assert!((out[0].offset_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn error_offsets() {
        match parse_midi(b"MThX\0\0\0\x06\0\0\0\x01\x01\xe0") {
            Err(Error::Midi { offset: 0, msg }) => assert!(msg.contains("bad header magic")),
            other => panic!("{other:?}"),
        }
        let mut bad = smf(0, 480, &[&[0x00, 0x90, 60, 64]]);
        let n = bad.len();
        bad[n - 5] = 0x7f; // declared track length far beyond file
        assert!(matches!(parse_midi(&bad), Err(Error::Midi { offset: 18, .. })));
        match parse_midi(&smf(0, 480, &[&[0x00, 60, 64]])) {
            Err(Error::Midi { offset: 23, msg }) => assert!(msg.contains("dangling running status")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_parse_round_trip() {
        let notes = vec![
            NoteEvent { onset_s: 0.0, offset_s: 0.25, pitch: 60, velocity: 80 },
            NoteEvent { onset_s: 0.25, offset_s: 0.5, pitch: 60, velocity: 80 },
            NoteEvent { onset_s: 0.25, offset_s: 1.0, pitch: 67, velocity: 70 },
        ];
        let back = parse_midi(&encode_smf(&notes, 480, 500_000)).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in notes.iter().zip(&back) {
            assert_eq!(a.pitch, b.pitch);
            assert!((a.onset_s - b.onset_s).abs() < 1e-9);
            assert!((a.offset_s - b.offset_s).abs() < 1e-9);
        }
    }
}
