//! Vibration feedback for notifications.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BodyKind, Notification, NotificationKind, PrivacyState, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternError {
    #[error("pattern is empty")]
    Empty,
    #[error("segment {0} has zero duration")]
    ZeroDuration(usize),
    #[error("segments {0} and {next} have the same kind", next = .0 + 1)]
    RepeatedKind(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Vibrate(u32),
    Pause(u32),
}

impl Segment {
    fn duration(&self) -> u32 {
        match *self {
            Segment::Vibrate(ms) | Segment::Pause(ms) => ms,
        }
    }

    fn same_kind(&self, other: &Segment) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

/// Alternating vibrate/pause segments, all with nonzero duration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VibePattern(Vec<Segment>);

impl VibePattern {
    pub fn new(segments: Vec<Segment>) -> Result<Self, PatternError> {
        if segments.is_empty() {
            return Err(PatternError::Empty);
        }
        for (i, s) in segments.iter().enumerate() {
            if s.duration() == 0 {
                return Err(PatternError::ZeroDuration(i));
            }
        }
        if let Some(i) = segments.windows(2).position(|w| w[0].same_kind(&w[1])) {
            return Err(PatternError::RepeatedKind(i));
        }
        Ok(Self(segments))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.0
    }
}

impl std::fmt::Display for VibePattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match s {
                Segment::Vibrate(ms) => write!(f, "vibrate:{ms}")?,
                Segment::Pause(ms) => write!(f, "pause:{ms}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    /// Gap between the two pulses of the text-note pattern.
    pub text_pause_ms: u32,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self { text_pause_ms: 100 }
    }
}

pub const PERSON_NEARBY_MS: u32 = 500;
pub const AUDIO_NOTE_MS: u32 = 250;
pub const TEXT_NOTE_LEAD_MS: u32 = 50;
pub const TEXT_NOTE_TAIL_MS: u32 = 250;

/// Builds the exact pattern for a notification kind.
pub fn pattern_for(kind: &NotificationKind, config: &FeedbackConfig) -> Result<VibePattern, PatternError> {
    let segments = match kind {
        NotificationKind::PersonNearby(_) => vec![Segment::Vibrate(PERSON_NEARBY_MS)],
        NotificationKind::NoteFired { body: BodyKind::Audio, .. } => vec![Segment::Vibrate(AUDIO_NOTE_MS)],
        NotificationKind::NoteFired { body: BodyKind::Text, .. } => vec![
            Segment::Vibrate(TEXT_NOTE_LEAD_MS),
            Segment::Pause(config.text_pause_ms),
            Segment::Vibrate(TEXT_NOTE_TAIL_MS),
        ],
    };
    VibePattern::new(segments)
}

pub trait FeedbackSink {
    fn play(&mut self, at: Timestamp, pattern: VibePattern);
}

/// Records every emission for later inspection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingSink {
    pub played: Vec<(Timestamp, VibePattern)>,
}

impl FeedbackSink for RecordingSink {
    fn play(&mut self, at: Timestamp, pattern: VibePattern) {
        self.played.push((at, pattern));
    }
}

/// Plays the notification's pattern unless silent mode is on. Returns
/// whether anything reached the sink. History is the caller's concern and is
/// never affected by silent mode.
pub fn emit(
    notification: &Notification,
    privacy: &PrivacyState,
    config: &FeedbackConfig,
    sink: &mut dyn FeedbackSink,
) -> Result<bool, PatternError> {
    let pattern = pattern_for(&notification.kind, config)?;
    if privacy.silent {
        return Ok(false);
    }
    sink.play(notification.at, pattern);
    Ok(true)
}
