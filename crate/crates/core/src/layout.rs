//! Modality-tagged token layouts and chunked audio token accounting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub token_count: usize,
}

impl Segment {
    pub fn text(token_count: usize) -> Self {
        Self {
            modality: Modality::Text,
            token_count,
        }
    }

    pub fn audio(token_count: usize) -> Self {
        Self {
            modality: Modality::Audio,
            token_count,
        }
    }
}

/// Start and length of the audio run inside a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioWindow {
    pub start: usize,
    pub len: usize,
}

impl AudioWindow {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end()
    }
}

/// Ordered segment list. Adjacent audio segments (one per encoder chunk) form
/// a single audio run; zero-length segments are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    segments: Vec<Segment>,
}

impl SequenceLayout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// `[Text prefix, Audio audio, Text suffix]`.
    pub fn text_audio_text(prefix: usize, audio: usize, suffix: usize) -> Self {
        Self::new(vec![
            Segment::text(prefix),
            Segment::audio(audio),
            Segment::text(suffix),
        ])
    }

    /// Parses `text:4,audio:88,text:2`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (kind, count) = part
                .split_once(':')
                .ok_or_else(|| invalid(format!("segment `{part}` is not modality:count")))?;
            let modality = match kind.trim().to_ascii_lowercase().as_str() {
                "text" | "t" => Modality::Text,
                "audio" | "a" => Modality::Audio,
                other => return Err(invalid(format!("unknown modality `{other}`"))),
            };
            let token_count = count
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad token count in `{part}`")))?;
            segments.push(Segment {
                modality,
                token_count,
            });
        }
        Ok(Self::new(segments))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.token_count).sum()
    }

    pub fn audio_window(&self) -> Result<AudioWindow> {
        locate_audio_window(self)
    }
}

pub fn locate_audio_window(layout: &SequenceLayout) -> Result<AudioWindow> {
    let mut offset = 0;
    let mut window: Option<AudioWindow> = None;
    let mut closed = false;
    for seg in layout.segments.iter().filter(|s| s.token_count > 0) {
        match (seg.modality, window.as_mut()) {
            (Modality::Audio, None) => {
                window = Some(AudioWindow {
                    start: offset,
                    len: seg.token_count,
                })
            }
            (Modality::Audio, Some(_)) if closed => {
                return Err(Error::UnsupportedLayout(
                    "multiple disjoint audio regions".into(),
                ))
            }
            (Modality::Audio, Some(w)) => w.len += seg.token_count,
            (Modality::Text, Some(_)) => closed = true,
            (Modality::Text, None) => {}
        }
        offset += seg.token_count;
    }
    window.ok_or_else(|| Error::UnsupportedLayout("layout contains no audio".into()))
}

/// How raw audio duration maps to encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_seconds: f64,
    pub tokens_per_chunk: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 30.0,
            tokens_per_chunk: 88,
        }
    }
}

impl ChunkingConfig {
    pub fn new(chunk_seconds: f64, tokens_per_chunk: usize) -> Result<Self> {
        if !(chunk_seconds > 0.0) || !chunk_seconds.is_finite() {
            return Err(invalid(format!(
                "chunk_seconds must be positive, got {chunk_seconds}"
            )));
        }
        if tokens_per_chunk == 0 {
            return Err(invalid("tokens_per_chunk must be at least 1"));
        }
        Ok(Self {
            chunk_seconds,
            tokens_per_chunk,
        })
    }

    /// Audio tokens produced for `seconds` of audio.
    pub fn tokens_for(&self, seconds: f64) -> Result<usize> {
        chunk_audio(seconds, self).map(|c| c.audio_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkCount {
    pub num_chunks: usize,
    pub audio_tokens: usize,
}

/// Every chunk, including a trailing partial one, yields a full chunk's tokens.
pub fn chunk_audio(duration_seconds: f64, cfg: &ChunkingConfig) -> Result<ChunkCount> {
    if !(duration_seconds > 0.0) || !duration_seconds.is_finite() {
        return Err(invalid(format!(
            "audio duration must be positive, got {duration_seconds}"
        )));
    }
    let num_chunks = (duration_seconds / cfg.chunk_seconds).ceil() as usize;
    Ok(ChunkCount {
        num_chunks,
        audio_tokens: num_chunks * cfg.tokens_per_chunk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chunk_counts() {
        let salmonn = ChunkingConfig::new(30.0, 88).unwrap();
        let qwen = ChunkingConfig::new(30.0, 750).unwrap();
        assert_eq!(
            chunk_audio(150.0, &salmonn).unwrap(),
            ChunkCount {
                num_chunks: 5,
                audio_tokens: 440
            }
        );
        assert_eq!(
            chunk_audio(600.0, &qwen).unwrap(),
            ChunkCount {
                num_chunks: 20,
                audio_tokens: 15000
            }
        );
        assert_eq!(chunk_audio(30.0, &salmonn).unwrap().audio_tokens, 88);
        // a partial trailing chunk is padded to a full chunk
        assert_eq!(chunk_audio(31.0, &salmonn).unwrap().audio_tokens, 176);
    }

    #[test]
    fn chunk_rejects_non_positive_duration() {
        let cfg = ChunkingConfig::default();
        assert!(chunk_audio(0.0, &cfg).is_err());
        assert!(chunk_audio(-3.0, &cfg).is_err());
        assert!(ChunkingConfig::new(30.0, 0).is_err());
    }

    #[test]
    fn locate_simple_layouts() {
        let l = SequenceLayout::text_audio_text(10, 88, 20);
        assert_eq!(l.audio_window().unwrap(), AudioWindow { start: 10, len: 88 });

        let l = SequenceLayout::new(vec![Segment::audio(750), Segment::text(5)]);
        assert_eq!(l.audio_window().unwrap(), AudioWindow { start: 0, len: 750 });

        let l = SequenceLayout::new(vec![
            Segment::text(3),
            Segment::audio(88),
            Segment::audio(88),
            Segment::text(7),
        ]);
        assert_eq!(l.audio_window().unwrap(), AudioWindow { start: 3, len: 176 });
    }

    #[test]
    fn locate_rejects_missing_or_disjoint_audio() {
        let none = SequenceLayout::new(vec![Segment::text(4)]);
        assert!(matches!(
            none.audio_window(),
            Err(Error::UnsupportedLayout(_))
        ));
        let disjoint = SequenceLayout::parse("audio:4,text:1,audio:4").unwrap();
        assert!(matches!(
            disjoint.audio_window(),
            Err(Error::UnsupportedLayout(_))
        ));
        // empty segments do not split a run
        let joined = SequenceLayout::parse("text:2,audio:4,text:0,audio:4").unwrap();
        assert_eq!(joined.audio_window().unwrap(), AudioWindow { start: 2, len: 8 });
    }

    #[test]
    fn parse_layout_string() {
        let l = SequenceLayout::parse("text:4, audio:8 ,text:2").unwrap();
        assert_eq!(l.total_tokens(), 14);
        assert!(SequenceLayout::parse("video:3").is_err());
        assert!(SequenceLayout::parse("text").is_err());
    }

    proptest! {
        #[test]
        fn window_inside_sequence(pre in 0usize..50, audio in 1usize..50, post in 0usize..50) {
            let l = SequenceLayout::text_audio_text(pre, audio, post);
            let w = l.audio_window().unwrap();
            prop_assert_eq!(w.start, pre);
            prop_assert!(w.end() <= l.total_tokens());
        }

        #[test]
        fn chunking_is_monotone(a in 0.01..5000.0f64, b in 0.01..5000.0f64, tpc in 1usize..1000) {
            let cfg = ChunkingConfig::new(30.0, tpc).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(chunk_audio(lo, &cfg).unwrap().audio_tokens <= chunk_audio(hi, &cfg).unwrap().audio_tokens);
        }
    }
}
