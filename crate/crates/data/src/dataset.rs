//! Bit-exact dataset container.
//!
//! Layout (little-endian): magic `HVQA`, u32 version, u32 sample count,
//! u32 image w/h/c, u32 max question length, u32 question vocab size,
//! u32 answer vocab size; then per record the image as f32 row-major, token
//! ids as u16 padded with 0xFFFF, the answer as u16, and the family as u8.

use std::path::Path;

use hvqa_core::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::qa::{make_qa_with, QuestionFamily};
use crate::scene::{generate_scene_with, render, CHANNELS, IMG_SIZE};
use crate::vocab::{ANSWERS, MAX_QUESTION_LEN, PAD, WORDS};
use crate::{DataError, Result};

use hvqa_core::rng;

pub const MAGIC: [u8; 4] = *b"HVQA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[h, w, c]` image with values in [0, 1].
    pub image: Tensor<f32>,
    pub tokens: Vec<u16>,
    pub answer: u16,
    pub family: QuestionFamily,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub img_w: u32,
    pub img_h: u32,
    pub img_c: u32,
    pub max_q_len: u32,
    pub q_vocab: u32,
    pub a_vocab: u32,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset {
            samples,
            img_w: IMG_SIZE as u32,
            img_h: IMG_SIZE as u32,
            img_c: CHANNELS as u32,
            max_q_len: MAX_QUESTION_LEN as u32,
            q_vocab: WORDS.len() as u32,
            a_vocab: ANSWERS.len() as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn record_bytes(&self) -> usize {
        (self.img_w * self.img_h * self.img_c) as usize * 4 + self.max_q_len as usize * 2 + 2 + 1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.samples.len() * self.record_bytes());
        out.extend_from_slice(&MAGIC);
        for v in [
            VERSION,
            self.samples.len() as u32,
            self.img_w,
            self.img_h,
            self.img_c,
            self.max_q_len,
            self.q_vocab,
            self.a_vocab,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            for v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for slot in 0..self.max_q_len as usize {
                let t = s.tokens.get(slot).copied().unwrap_or(PAD);
                out.extend_from_slice(&t.to_le_bytes());
            }
            out.extend_from_slice(&s.answer.to_le_bytes());
            out.push(s.family as u8);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(DataError::format(0, format!("bad magic {magic:?}, expected \"HVQA\"")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DataError::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let img_w = r.u32()?;
        let img_h = r.u32()?;
        let img_c = r.u32()?;
        let max_q_len = r.u32()?;
        let q_vocab = r.u32()?;
        let a_vocab = r.u32()?;
        let pixels = (img_w * img_h * img_c) as usize;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut image = Vec::with_capacity(pixels);
            let raw = r.take(pixels * 4)?;
            for chunk in raw.chunks_exact(4) {
                image.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let mut tokens = Vec::new();
            let raw_tokens = r.take(max_q_len as usize * 2)?;
            for chunk in raw_tokens.chunks_exact(2) {
                let t = u16::from_le_bytes(chunk.try_into().unwrap());
                if t != PAD {
                    tokens.push(t);
                }
            }
            let answer_off = r.offset;
            let answer = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
            if answer as u32 >= a_vocab {
                return Err(DataError::format(
                    answer_off,
                    format!("answer id {answer} outside vocabulary of {a_vocab}"),
                ));
            }
            let family_off = r.offset;
            let family_raw = r.take(1)?[0];
            let family = QuestionFamily::from_u8(family_raw).ok_or_else(|| {
                DataError::format(family_off, format!("unknown question family {family_raw}"))
            })?;
            samples.push(Sample {
                image: Tensor::new(
                    vec![img_h as usize, img_w as usize, img_c as usize],
                    image,
                )
                .map_err(|e| DataError::format(r.offset, e.to_string()))?,
                tokens,
                answer,
                family,
            });
        }
        if r.offset != bytes.len() {
            return Err(DataError::format(
                r.offset,
                format!("{} trailing bytes after the last record", bytes.len() - r.offset),
            ));
        }
        Ok(Dataset {
            samples,
            img_w,
            img_h,
            img_c,
            max_q_len,
            q_vocab,
            a_vocab,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Answer histogram per question family, indexed `[family][answer]`.
    pub fn answer_histograms(&self) -> [[u64; 16]; 3] {
        let mut hist = [[0u64; 16]; 3];
        for s in &self.samples {
            hist[s.family as usize][s.answer as usize] += 1;
        }
        hist
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::format(
                self.offset,
                format!(
                    "truncated: needed {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Generates one sample from its per-index seeds.
fn generate_sample(master_seed: u64, index: u64) -> Result<Sample> {
    let mut scene_rng = rng::stream_rng(rng::mix(master_seed, 2 * index), 0);
    let scene = generate_scene_with(&mut scene_rng)?;
    let image = render(&scene);
    let mut qa_rng = rng::stream_rng(rng::mix(master_seed, 2 * index + 1), 1);
    let qa = make_qa_with(&scene, &mut qa_rng);
    Ok(Sample {
        image,
        tokens: qa.tokens,
        answer: qa.answer,
        family: qa.family,
    })
}

/// Pure function of (seed, n): samples are seed-split per index, so the
/// result is byte-identical whether generation runs sequentially or in
/// parallel.
pub fn generate(n: usize, master_seed: u64) -> Result<Dataset> {
    #[cfg(feature = "parallel")]
    let samples: Result<Vec<Sample>> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(master_seed, i))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let samples: Result<Vec<Sample>> =
        (0..n as u64).map(|i| generate_sample(master_seed, i)).collect();
    Ok(Dataset::new(samples?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = generate(100, 11).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(50, 3).unwrap();
        let b = generate(50, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate(50, 4).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn empty_dataset_valid() {
        let ds = Dataset::new(Vec::new());
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back.len(), 0);
    }

    #[test]
    fn truncation_reports_offset() {
        let ds = generate(2, 5).unwrap();
        let bytes = ds.to_bytes();
        let cut = &bytes[..bytes.len() - 10];
        let err = Dataset::from_bytes(cut).unwrap_err();
        match err {
            DataError::Format { offset, detail } => {
                assert!(offset > 0);
                assert!(detail.contains("truncated"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = generate(1, 6).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(DataError::Format { offset: 0, .. })
        ));
    }
}
