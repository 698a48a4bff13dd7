//! Closed caption vocabulary and whitespace tokenizer.
//!
//! Captions in this project come from a small controlled language (either the
//! built-in annotator or a chat endpoint prompted to stay within it), so the
//! text stack is a fixed word list with three reserved ids: padding, unknown,
//! and an explicit "blank caption" token used when a chunk carries no local
//! text. Blank prompts keep exactly one real token so attention over text
//! always has at least one unmasked position.

use std::collections::HashMap;

/// Token id used to pad prompts to a fixed length. Its embedding row is held
/// at zero and receives no gradient.
pub const PAD_ID: usize = 0;
/// Token id for words outside the vocabulary.
pub const UNK_ID: usize = 1;
/// Token id standing for "no caption for this span".
pub const BLANK_ID: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<blank>"];

/// Every word the caption templates can produce, in frozen id order.
const WORDS: [&str; 100] = [
    // structure
    "a", "the", "ball", "box", "in", "off", "of", "and", "is", "it", "then",
    "while", "with", "at", "no", "not", "never", "to",
    // colors
    "red", "green", "blue", "yellow", "white", "orange", "purple", "cyan",
    // verbs
    "falls", "rises", "moves", "drifts", "bounces", "hits", "passes", "floats",
    "hangs", "speeds", "slows", "stays", "travels", "rests", "sinks", "rebounds",
    "reverses", "keeps", "falling", "rising", "moving", "bouncing", "floating",
    "sliding", "traveling",
    // directions
    "left", "right", "up", "down", "upward", "downward", "leftward", "rightward",
    "sideways",
    // scene nouns
    "floor", "wall", "ceiling", "ground", "air", "corner", "gravity", "arc",
    "path", "speed", "rest", "midair", "side", "top", "bottom",
    // modifiers
    "quickly", "slowly", "fast", "slow", "speeding", "slowing", "still",
    "nearly", "steadily", "gently", "sharply", "freely", "through", "toward",
    "away", "across", "near", "constant", "same", "motionless",
    // structured-annotation field markers and descriptors
    "dynamics", "shape", "optics", "round", "color",
];

/// Fixed word-to-id table. Ids are stable across runs and processes.
#[derive(Debug, Clone)]
pub struct Vocab {
    lookup: HashMap<&'static str, usize>,
}

impl Vocab {
    pub fn standard() -> Self {
        let mut lookup = HashMap::new();
        for (i, w) in SPECIALS.iter().chain(WORDS.iter()).enumerate() {
            let prev = lookup.insert(*w, i);
            debug_assert!(prev.is_none(), "duplicate vocab word {w}");
        }
        Vocab { lookup }
    }

    pub fn size(&self) -> usize {
        SPECIALS.len() + WORDS.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        SPECIALS
            .iter()
            .chain(WORDS.iter())
            .nth(id)
            .copied()
    }

    /// Tokenize into fixed-length ids plus a validity mask. Lowercases,
    /// strips punctuation, maps out-of-vocabulary words to `<unk>`, truncates
    /// to `max_len`, pads the tail with `<pad>` (mask false).
    pub fn encode(&self, text: &str, max_len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = Vec::with_capacity(max_len);
        for raw in text.split_whitespace() {
            if ids.len() == max_len {
                break;
            }
            let word: String = raw
                .chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase();
            if word.is_empty() {
                continue;
            }
            ids.push(self.id(&word).unwrap_or(UNK_ID));
        }
        if ids.is_empty() {
            ids.push(BLANK_ID);
        }
        let used = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < used).collect();
        (ids, mask)
    }

    /// The prompt that stands for "no caption": one `<blank>` token followed
    /// by padding.
    pub fn blank_prompt(&self, max_len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = vec![PAD_ID; max_len];
        ids[0] = BLANK_ID;
        let mask = (0..max_len).map(|i| i == 0).collect();
        (ids, mask)
    }

    /// Inverse of [`encode`] over the real tokens, for debugging output.
    pub fn decode(&self, ids: &[usize], mask: &[bool]) -> String {
        ids.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .filter_map(|(&id, _)| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
