//! Token ids of the synthetic language.
//!
//! Ids `0..10` are control words; after them come `classes` value tokens for
//! each attribute slot, in object, sound, speaker order.

use serde::{Deserialize, Serialize};

pub const EOS: u32 = 0;
pub const INSTR: u32 = 1;
pub const DESCRIBE: u32 = 2;
pub const WHAT: u32 = 3;
pub const MOD_VIDEO: u32 = 4;
pub const MOD_AUDIO: u32 = 5;
pub const MOD_AV: u32 = 6;
pub const SLOT_OBJECT: u32 = 7;
pub const SLOT_SOUND: u32 = 8;
pub const SLOT_SPEAKER: u32 = 9;
const FIRST_VALUE: u32 = 10;

pub fn vocab_size(classes: usize) -> usize {
    FIRST_VALUE as usize + 3 * classes
}

/// Compositional attribute slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Object,
    Sound,
    Speaker,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Object, Slot::Sound, Slot::Speaker];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Object => "object",
            Slot::Sound => "sound",
            Slot::Speaker => "speaker",
        }
    }

    fn marker(self) -> u32 {
        [SLOT_OBJECT, SLOT_SOUND, SLOT_SPEAKER][self.index()]
    }
}

/// Class of each slot for one synthetic clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub object: usize,
    pub sound: usize,
    pub speaker: usize,
}

impl Attributes {
    pub fn get(&self, slot: Slot) -> usize {
        match slot {
            Slot::Object => self.object,
            Slot::Sound => self.sound,
            Slot::Speaker => self.speaker,
        }
    }
}

pub fn value_token(slot: Slot, class: usize, classes: usize) -> u32 {
    FIRST_VALUE + (slot.index() * classes + class) as u32
}

/// Inverse of [`value_token`].
pub fn token_value(token: u32, classes: usize) -> Option<(Slot, usize)> {
    let v = token.checked_sub(FIRST_VALUE)? as usize;
    (v < 3 * classes).then(|| (Slot::ALL[v / classes], v % classes))
}

/// Which media an instruction describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Media {
    Video,
    Audio,
    AudioVisual,
}

/// General "describe this" instruction.
pub fn describe(media: Media) -> Vec<u32> {
    let m = match media {
        Media::Video => MOD_VIDEO,
        Media::Audio => MOD_AUDIO,
        Media::AudioVisual => MOD_AV,
    };
    vec![INSTR, DESCRIBE, m, EOS]
}

/// Question about one slot.
pub fn question(slot: Slot) -> Vec<u32> {
    vec![INSTR, WHAT, slot.marker(), EOS]
}

/// The shared prompt used when questions are not shown to the model.
pub fn common_prompt() -> Vec<u32> {
    describe(Media::AudioVisual)
}

/// Caption naming the object, optionally the sound, and the speaker.
pub fn caption(attrs: &Attributes, with_sound: bool, classes: usize) -> Vec<u32> {
    let mut t = vec![value_token(Slot::Object, attrs.object, classes)];
    if with_sound {
        t.push(value_token(Slot::Sound, attrs.sound, classes));
    }
    t.push(value_token(Slot::Speaker, attrs.speaker, classes));
    t.push(EOS);
    t
}

/// Short answer text naming one slot value.
pub fn answer(slot: Slot, class: usize, classes: usize) -> Vec<u32> {
    vec![value_token(slot, class, classes), EOS]
}
