//! Closed question grammar: the token and answer vocabularies are fixed at
//! generation time and compiled in, so files carry only their sizes.

/// Question-token vocabulary; a token id is an index into this table.
pub const WORDS: [&str; 23] = [
    "what", "shape", "is", "the", "red", "green", "blue", "yellow", "magenta", "cyan", "object",
    "on", "left", "closest", "to", "farthest", "from", "how", "many", "objects", "have", "same",
    "as",
];

/// Answer classes; an answer id is an index into this table.
pub const ANSWERS: [&str; 16] = [
    "square", "circle", "yes", "no", "1", "2", "3", "4", "5", "6", "red", "green", "blue",
    "yellow", "magenta", "cyan",
];

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];

/// Token id of a color word (colors occupy a contiguous block).
pub fn color_word(color: usize) -> u16 {
    4 + color as u16
}

/// Fixed-width records pad token sequences to this length.
pub const MAX_QUESTION_LEN: usize = 12;

/// Padding sentinel in stored token sequences.
pub const PAD: u16 = 0xFFFF;

pub fn word_id(word: &str) -> Option<u16> {
    WORDS.iter().position(|&w| w == word).map(|i| i as u16)
}

pub fn answer_id(answer: &str) -> Option<u16> {
    ANSWERS.iter().position(|&a| a == answer).map(|i| i as u16)
}

pub fn decode_question(tokens: &[u16]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != PAD)
        .map(|&t| WORDS[t as usize])
        .collect::<Vec<_>>()
        .join(" ")
}
