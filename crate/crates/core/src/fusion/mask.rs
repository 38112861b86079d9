//! Cross-attention and self-attention permission masks.
//!
//! Cross-mask columns are laid out as one block of `s_img` visual positions
//! per image followed by a trailing block of `pad_len` all-zero pad keys. At
//! least one image block is always laid out, so a text-only sequence still
//! has `s_img` (never allowed) visual columns in front of the pad.
//!
//! Media slots see only their own image block. Text sees the pad block plus,
//! in image mode, the most recent preceding image or, in video mode, every
//! frame of the clip once at least one frame has been shown. Text ahead of
//! the first frame sees only the pad in both modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sequence::{Element, InterleavedSequence};
use crate::error::{Error, Result};
use crate::numerics::Mask;

pub const DEFAULT_PAD_LEN: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    Image,
    Video,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Image => "image",
            MaskMode::Video => "video",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(MaskMode::Image),
            "video" => Ok(MaskMode::Video),
            _ => Err(Error::config(format!("unknown mask mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossMask {
    pub allow: Mask,
    pub s_img: usize,
    pub pad_len: usize,
    pub num_images: usize,
    pub mode: MaskMode,
}

impl CrossMask {
    pub fn pad_start(&self) -> usize {
        self.allow.cols() - self.pad_len
    }

    /// Plain-text dump: header `rows cols pad_len mode`, then one line of
    /// `1`/`0` per row.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "{} {} {} {}\n",
            self.allow.rows(),
            self.allow.cols(),
            self.pad_len,
            self.mode
        );
        for i in 0..self.allow.rows() {
            out.extend(self.allow.row(i).iter().map(|&a| if a { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

/// Parsed form of [`CrossMask::dump`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskDump {
    pub allow: Mask,
    pub pad_len: usize,
    pub mode: MaskMode,
}

pub fn parse_mask_dump(text: &str) -> Result<MaskDump> {
    let bad = |m: &str| Error::Sequence(format!("mask dump: {m}"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty"))?
        .split_whitespace()
        .collect();
    let [rows, cols, pad, mode] = header.as_slice() else {
        return Err(bad("header needs 4 fields"));
    };
    let rows: usize = rows.parse().map_err(|_| bad("rows"))?;
    let cols: usize = cols.parse().map_err(|_| bad("cols"))?;
    let pad_len: usize = pad.parse().map_err(|_| bad("pad_len"))?;
    let mode: MaskMode = mode.parse()?;
    let mut allow = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next().ok_or_else(|| bad("missing row"))?;
        if line.len() != cols {
            return Err(bad("row width"));
        }
        for c in line.chars() {
            allow.push(match c {
                '1' => true,
                '0' => false,
                _ => return Err(bad("non-binary cell")),
            });
        }
    }
    Ok(MaskDump {
        allow: Mask::new(rows, cols, allow)?,
        pad_len,
        mode,
    })
}

fn check_dims(s_img: usize, pad_len: usize) -> Result<()> {
    if s_img == 0 || pad_len == 0 {
        return Err(Error::config("s_img and pad_len must be positive"));
    }
    Ok(())
}

pub fn build_cross_mask(
    seq: &InterleavedSequence,
    s_img: usize,
    pad_len: usize,
    mode: MaskMode,
) -> Result<CrossMask> {
    check_dims(s_img, pad_len)?;
    let n = seq.num_images();
    let blocks = image_blocks(seq);
    let cols = blocks * s_img + pad_len;
    let pad_start = blocks * s_img;
    let mut allow = Mask::filled(seq.len(), cols, false);
    let mut last_image: Option<usize> = None;
    for (row, e) in seq.elements().iter().enumerate() {
        match *e {
            Element::MediaSlot { image, .. } => {
                for c in image * s_img..(image + 1) * s_img {
                    allow.set(row, c, true);
                }
                last_image = Some(image);
            }
            Element::Text(_) => {
                let visible = match mode {
                    MaskMode::Image => last_image.map_or(0..0, |i| i * s_img..(i + 1) * s_img),
                    MaskMode::Video => 0..last_image.map_or(0, |_| n * s_img),
                };
                for c in visible.chain(pad_start..cols) {
                    allow.set(row, c, true);
                }
            }
        }
    }
    Ok(CrossMask {
        allow,
        s_img,
        pad_len,
        num_images: n,
        mode,
    })
}

/// Image blocks in the column layout of a cross mask for `seq`.
pub fn image_blocks(seq: &InterleavedSequence) -> usize {
    seq.num_images().max(1)
}

/// Media slots see their own image; text sees the latest preceding image and
/// the pad block.
pub fn build_cross_mask_image(
    seq: &InterleavedSequence,
    s_img: usize,
    pad_len: usize,
) -> Result<CrossMask> {
    build_cross_mask(seq, s_img, pad_len, MaskMode::Image)
}

/// Media slots see their own frame; text after the first frame sees every
/// frame and the pad block.
pub fn build_cross_mask_video(
    seq: &InterleavedSequence,
    s_img: usize,
    pad_len: usize,
) -> Result<CrossMask> {
    build_cross_mask(seq, s_img, pad_len, MaskMode::Video)
}

/// Causal mask over the whole interleaved stream.
pub fn build_self_mask(seq: &InterleavedSequence) -> Mask {
    let n = seq.len();
    Mask::from_fn(n, n, |i, j| j <= i)
}
