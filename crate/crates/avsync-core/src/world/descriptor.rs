//! Closed-vocabulary scene descriptors.
//!
//! A descriptor is an unordered bag of attribute tokens drawn from a fixed
//! vocabulary (shape, colour, size, trajectory, voice, frequency, timing).
//! The same token type doubles as an edit instruction: an edit names the
//! attribute values the target scene should take.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Radius as a fraction of `min(H, W)`.
    pub fn radius_frac(self) -> f64 {
        match self {
            SizeClass::Small => 0.11,
            SizeClass::Medium => 0.15,
            SizeClass::Large => 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrajKind {
    Bounce,
    Orbit,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoiceKind {
    Tone,
    Chirp,
    NoiseBurst,
}

/// Named colours instances and edits may use.
pub const PALETTE: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("cyan", [0.15, 0.80, 0.80]),
    ("magenta", [0.80, 0.15, 0.80]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.55, 0.55, 0.55]),
];

/// Voice base frequencies (Hz) the vocabulary can name.
pub const FREQS: &[u32] = &[220, 330, 440, 550, 660, 880, 1320, 1760];

/// Periods (frames) the periodic timing tokens can name.
pub const PERIODS: &[u32] = &[2, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimingToken {
    OnBounce,
    OnFlash,
    Periodic(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Shape(Shape),
    /// Index into [`PALETTE`].
    Color(usize),
    Size(SizeClass),
    Trajectory(TrajKind),
    Voice(VoiceKind),
    /// Value must be one of [`FREQS`].
    Freq(u32),
    Timing(TimingToken),
    /// Marks an instance-removal edit.
    Remove,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Shape(Shape::Circle) => write!(f, "shape:circle"),
            Token::Shape(Shape::Square) => write!(f, "shape:square"),
            Token::Shape(Shape::Triangle) => write!(f, "shape:triangle"),
            Token::Color(i) => write!(f, "color:{}", PALETTE[*i].0),
            Token::Size(SizeClass::Small) => write!(f, "size:small"),
            Token::Size(SizeClass::Medium) => write!(f, "size:medium"),
            Token::Size(SizeClass::Large) => write!(f, "size:large"),
            Token::Trajectory(TrajKind::Bounce) => write!(f, "traj:bounce"),
            Token::Trajectory(TrajKind::Orbit) => write!(f, "traj:orbit"),
            Token::Trajectory(TrajKind::Drift) => write!(f, "traj:drift"),
            Token::Voice(VoiceKind::Tone) => write!(f, "voice:tone"),
            Token::Voice(VoiceKind::Chirp) => write!(f, "voice:chirp"),
            Token::Voice(VoiceKind::NoiseBurst) => write!(f, "voice:noise"),
            Token::Freq(hz) => write!(f, "freq:{hz}"),
            Token::Timing(TimingToken::OnBounce) => write!(f, "timing:on_bounce"),
            Token::Timing(TimingToken::OnFlash) => write!(f, "timing:on_flash"),
            Token::Timing(TimingToken::Periodic(k)) => write!(f, "timing:periodic:{k}"),
            Token::Remove => write!(f, "remove"),
        }
    }
}

/// The whole vocabulary in a fixed order; a token's position is its
/// embedding-table index.
pub fn vocabulary() -> Vec<Token> {
    let mut v = Vec::new();
    v.extend([Shape::Circle, Shape::Square, Shape::Triangle].map(Token::Shape));
    v.extend((0..PALETTE.len()).map(Token::Color));
    v.extend([SizeClass::Small, SizeClass::Medium, SizeClass::Large].map(Token::Size));
    v.extend([TrajKind::Bounce, TrajKind::Orbit, TrajKind::Drift].map(Token::Trajectory));
    v.extend([VoiceKind::Tone, VoiceKind::Chirp, VoiceKind::NoiseBurst].map(Token::Voice));
    v.extend(FREQS.iter().map(|&f| Token::Freq(f)));
    v.push(Token::Timing(TimingToken::OnBounce));
    v.push(Token::Timing(TimingToken::OnFlash));
    v.extend(PERIODS.iter().map(|&k| Token::Timing(TimingToken::Periodic(k))));
    v.push(Token::Remove);
    v
}

pub fn vocab_size() -> usize {
    vocabulary().len()
}

/// Embedding index of a token.
pub fn token_index(tok: Token) -> Result<usize> {
    vocabulary()
        .iter()
        .position(|&t| t == tok)
        .ok_or_else(|| CoreError::invalid(format!("token {tok} not in vocabulary")))
}

pub fn parse_token(s: &str) -> Result<Token> {
    let tok = vocabulary().into_iter().find(|t| t.to_string() == s);
    tok.ok_or_else(|| CoreError::invalid(format!("unknown token `{s}`")))
}

/// Maximum descriptor length.
pub const MAX_TOKENS: usize = 16;

/// An ordered token sequence from the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<Token>);

impl Descriptor {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() > MAX_TOKENS {
            return Err(CoreError::invalid(format!(
                "descriptor has {} tokens, max {MAX_TOKENS}",
                tokens.len()
            )));
        }
        for t in &tokens {
            if let Token::Freq(hz) = t {
                if !FREQS.contains(hz) {
                    return Err(CoreError::invalid(format!("freq:{hz} not in vocabulary")));
                }
            }
            if let Token::Timing(TimingToken::Periodic(k)) = t {
                if !PERIODS.contains(k) {
                    return Err(CoreError::invalid(format!("periodic:{k} not in vocabulary")));
                }
            }
            if let Token::Color(i) = t {
                if *i >= PALETTE.len() {
                    return Err(CoreError::invalid(format!("color index {i} out of palette")));
                }
            }
        }
        Ok(Descriptor(tokens))
    }

    pub fn empty() -> Self {
        Descriptor(Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn contains(&self, tok: Token) -> bool {
        self.0.contains(&tok)
    }

    /// Space-joined text form; `parse` round-trips it.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let toks = text
            .split_whitespace()
            .map(parse_token)
            .collect::<Result<Vec<_>>>()?;
        Descriptor::new(toks)
    }

    /// Embedding indices of the tokens.
    pub fn indices(&self) -> Result<Vec<usize>> {
        self.0.iter().map(|&t| token_index(t)).collect()
    }
}

/// Nearest palette index to an RGB triple.
pub fn nearest_palette(rgb: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, (_, c)) in PALETTE.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (rgb[k] - c[k]) * (rgb[k] - c[k])).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Nearest vocabulary frequency to `hz`.
pub fn nearest_freq(hz: f64) -> u32 {
    *FREQS
        .iter()
        .min_by(|a, b| {
            (((**a) as f64) - hz).abs().total_cmp(&((((**b) as f64) - hz).abs()))
        })
        .unwrap()
}
