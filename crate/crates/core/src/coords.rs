//! Bounding-box token codecs and the auxiliary detection head.
//!
//! Vocabulary layout, starting at `base`: open mark, close mark, comma, then
//! `bins` coordinate tokens for quantized values `0..bins`.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Var};

pub const DEFAULT_BINS: u32 = 1000;
/// Length of a box in coordinate-token form.
pub const BOX_TOKENS: usize = 7;
/// Length of a box spelled out digit by digit.
pub const DIGIT_BOX_TOKENS: usize = 25;

/// Normalized box with `x1 ≤ x2`, `y1 ≤ y2`, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.x1, self.y1, self.x2, self.y2].into_iter().all(in_unit) {
            bail!(Validation, "box {:?} has a coordinate outside [0, 1]", self);
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            bail!(Validation, "box {:?} has inverted corners", self);
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordVocab {
    /// Id of the open mark; the rest of the vocabulary follows contiguously.
    pub base: u32,
    pub bins: u32,
}

impl Default for CoordVocab {
    fn default() -> Self {
        Self {
            base: 0,
            bins: DEFAULT_BINS,
        }
    }
}

impl CoordVocab {
    pub fn new(base: u32, bins: u32) -> Result<Self> {
        if bins < 2 {
            bail!(Config, "need at least 2 coordinate bins, got {bins}");
        }
        if base.checked_add(3).and_then(|v| v.checked_add(bins)).is_none() {
            bail!(Config, "vocabulary overflows u32");
        }
        Ok(Self { base, bins })
    }

    pub fn open(&self) -> u32 {
        self.base
    }

    pub fn close(&self) -> u32 {
        self.base + 1
    }

    pub fn comma(&self) -> u32 {
        self.base + 2
    }

    pub fn coord(&self, q: u32) -> u32 {
        debug_assert!(q < self.bins);
        self.base + 3 + q
    }

    /// Total number of ids claimed.
    pub fn size(&self) -> u32 {
        3 + self.bins
    }

    /// Quantized value of a coordinate token id.
    pub fn coord_value(&self, id: u32) -> Option<u32> {
        id.checked_sub(self.base + 3).filter(|q| *q < self.bins)
    }

    /// `round(x · (B − 1))`.
    pub fn quantize(&self, x: f64) -> u32 {
        libm::round(x.clamp(0.0, 1.0) * f64::from(self.bins - 1)) as u32
    }

    pub fn dequantize(&self, q: u32) -> f64 {
        f64::from(q) / f64::from(self.bins - 1)
    }
}

/// `[open, x1, y1, comma, x2, y2, close]`.
pub fn encode_box(b: &BBox, v: &CoordVocab) -> [u32; BOX_TOKENS] {
    [
        v.open(),
        v.coord(v.quantize(b.x1)),
        v.coord(v.quantize(b.y1)),
        v.comma(),
        v.coord(v.quantize(b.x2)),
        v.coord(v.quantize(b.y2)),
        v.close(),
    ]
}

fn parse_err(position: usize, reason: &str) -> Error {
    Error::Parse {
        position,
        reason: String::from(reason),
    }
}

/// Inverse of [`encode_box`]; corner order is re-validated.
pub fn decode_box(seq: &[u32], v: &CoordVocab) -> Result<BBox> {
    let expect = |pos: usize, what: &str| -> Result<u32> {
        seq.get(pos)
            .copied()
            .ok_or_else(|| parse_err(pos, &alloc::format!("sequence ended, expected {what}")))
    };
    let mark = |pos: usize, id: u32, what: &str| -> Result<()> {
        if expect(pos, what)? != id {
            return Err(parse_err(pos, &alloc::format!("expected {what}")));
        }
        Ok(())
    };
    let coord = |pos: usize| -> Result<f64> {
        let id = expect(pos, "coordinate token")?;
        v.coord_value(id)
            .map(|q| v.dequantize(q))
            .ok_or_else(|| parse_err(pos, "expected coordinate token"))
    };
    mark(0, v.open(), "open mark")?;
    let x1 = coord(1)?;
    let y1 = coord(2)?;
    mark(3, v.comma(), "comma")?;
    let x2 = coord(4)?;
    let y2 = coord(5)?;
    mark(6, v.close(), "close mark")?;
    if seq.len() > BOX_TOKENS {
        return Err(parse_err(BOX_TOKENS, "trailing tokens after close mark"));
    }
    BBox::new(x1, y1, x2, y2)
}

/// One token of the digit-string box form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DigitToken {
    Open,
    Close,
    Comma,
    Char(char),
}

/// Five characters `0.ddd` for one coordinate, clamped to `0.999`.
pub fn format_coord(x: f64, bins: u32) -> [char; 5] {
    let v = CoordVocab { base: 0, bins };
    let value = v.dequantize(v.quantize(x));
    let milli = (libm::round(value * 1000.0) as u32).min(999);
    let digit = |d: u32| char::from_digit(d, 10).unwrap();
    ['0', '.', digit(milli / 100), digit(milli / 10 % 10), digit(milli % 10)]
}

/// Digit-string form: open, four `0.ddd` numbers separated by commas, close.
pub fn encode_box_digits(b: &BBox) -> Vec<DigitToken> {
    encode_box_digits_with(b, DEFAULT_BINS)
}

pub fn encode_box_digits_with(b: &BBox, bins: u32) -> Vec<DigitToken> {
    let mut out = Vec::with_capacity(DIGIT_BOX_TOKENS);
    out.push(DigitToken::Open);
    for (i, c) in b.coords().into_iter().enumerate() {
        if i > 0 {
            out.push(DigitToken::Comma);
        }
        out.extend(format_coord(c, bins).into_iter().map(DigitToken::Char));
    }
    out.push(DigitToken::Close);
    out
}

/// Renders digit tokens as text, using `<box>`/`</box>` for the marks.
pub fn digits_to_string(tokens: &[DigitToken]) -> String {
    let mut s = String::new();
    for t in tokens {
        match t {
            DigitToken::Open => s.push_str("<box>"),
            DigitToken::Close => s.push_str("</box>"),
            DigitToken::Comma => s.push(','),
            DigitToken::Char(c) => s.push(*c),
        }
    }
    s
}

/// Two-layer MLP plus a linear projection to four box coordinates.
#[derive(Debug, Clone, Copy)]
pub struct DetectionHead {
    fc1: Linear,
    fc2: Linear,
    proj: Linear,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, d_hidden: usize, width: usize, rng: &mut SplitMix64) -> Self {
        Self {
            fc1: Linear::new(store, "det.fc1", d_hidden, width, rng),
            fc2: Linear::new(store, "det.fc2", width, width, rng),
            proj: Linear::new(store, "det.proj", width, 4, rng),
        }
    }

    /// `[n, d_hidden]` hidden states → `[n, 4]` boxes.
    pub fn predict(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, hidden)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, h)?;
        let h = tape.gelu(h)?;
        self.proj.forward(tape, h)
    }

    /// Mean absolute error between predictions and `[n, 4]` targets.
    pub fn loss(&self, tape: &mut Tape, hidden: Var, targets: Var) -> Result<Var> {
        let s = tape.shape(hidden);
        if s.len() != 2 || s[0] == 0 {
            bail!(Contract, "detection loss needs at least one hidden vector, got {:?}", s);
        }
        if tape.shape(targets) != [s[0], 4] {
            bail!(Dimension, "targets {:?} must be [{}, 4]", tape.shape(targets), s[0]);
        }
        let pred = self.predict(tape, hidden)?;
        l1_loss(tape, pred, targets)
    }
}

/// `mean |pred − target|`.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}
