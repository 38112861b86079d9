use std::collections::HashMap;

use crate::error::{Error, Result};

/// Default number of learnable media tokens standing in for one image.
pub const DEFAULT_MEDIA_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Element {
    Text(usize),
    MediaSlot { image: usize, slot: usize },
}

/// Input before media expansion: text tokens and image markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(usize),
    Image(usize),
}

/// Text tokens interleaved with contiguous runs of media slots, one run per
/// image, in ascending image order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterleavedSequence {
    elements: Vec<Element>,
    media_len: usize,
    num_images: usize,
}

impl InterleavedSequence {
    /// Validates run structure and builds the sequence.
    pub fn new(elements: Vec<Element>, media_len: usize) -> Result<Self> {
        if media_len == 0 {
            return Err(Error::Sequence("media_len must be positive".into()));
        }
        let mut next_image = 0;
        let mut i = 0;
        while i < elements.len() {
            if let Element::MediaSlot { image, .. } = elements[i] {
                if image != next_image {
                    return Err(Error::Sequence(format!(
                        "image {image} appears where image {next_image} was expected"
                    )));
                }
                for slot in 0..media_len {
                    match elements.get(i + slot) {
                        Some(&Element::MediaSlot { image: im, slot: s })
                            if im == image && s == slot => {}
                        _ => {
                            return Err(Error::Sequence(format!(
                                "image {image} run broken at slot {slot}"
                            )))
                        }
                    }
                }
                i += media_len;
                next_image += 1;
            } else {
                i += 1;
            }
        }
        Ok(Self {
            elements,
            media_len,
            num_images: next_image,
        })
    }

    pub fn text_only(tokens: &[usize]) -> Self {
        Self {
            elements: tokens.iter().map(|&t| Element::Text(t)).collect(),
            media_len: DEFAULT_MEDIA_LEN,
            num_images: 0,
        }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn media_len(&self) -> usize {
        self.media_len
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    /// Token ids at text positions, `None` at media slots.
    pub fn text_ids(&self) -> Vec<Option<usize>> {
        self.elements
            .iter()
            .map(|e| match e {
                Element::Text(t) => Some(*t),
                Element::MediaSlot { .. } => None,
            })
            .collect()
    }

    /// Slot indices at media positions, `None` at text.
    pub fn slot_ids(&self) -> Vec<Option<usize>> {
        self.elements
            .iter()
            .map(|e| match e {
                Element::Text(_) => None,
                Element::MediaSlot { slot, .. } => Some(*slot),
            })
            .collect()
    }
}

/// Expands each image marker into `media_len` media slots.
pub fn insert_media_tokens(segments: &[Segment], media_len: usize) -> Result<InterleavedSequence> {
    if media_len == 0 {
        return Err(Error::Sequence("media_len must be positive".into()));
    }
    let mut elements = Vec::new();
    let mut next_image = 0;
    for seg in segments {
        match *seg {
            Segment::Text(t) => elements.push(Element::Text(t)),
            Segment::Image(i) => {
                if i != next_image {
                    return Err(Error::Sequence(format!(
                        "image marker {i} out of order (expected {next_image})"
                    )));
                }
                elements.extend((0..media_len).map(|slot| Element::MediaSlot { image: i, slot }));
                next_image += 1;
            }
        }
    }
    InterleavedSequence::new(elements, media_len)
}

/// Word-to-id table that assigns ids in order of first appearance.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    words: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn id(&mut self, word: &str) -> usize {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Splits `"[IMG0] a photo [IMG1] b"` on whitespace into segments.
pub fn parse_markup(text: &str, vocab: &mut Vocab) -> Result<Vec<Segment>> {
    text.split_whitespace()
        .map(|w| {
            if let Some(n) = w.strip_prefix("[IMG").and_then(|r| r.strip_suffix(']')) {
                n.parse::<usize>()
                    .map(Segment::Image)
                    .map_err(|_| Error::Sequence(format!("bad image marker `{w}`")))
            } else {
                Ok(Segment::Text(vocab.id(w)))
            }
        })
        .collect()
}

/// `I`/`T` mini-language: each `I` is the next image, each `T` a text token.
pub fn parse_seq_spec(spec: &str, media_len: usize) -> Result<InterleavedSequence> {
    let mut segments = Vec::new();
    let mut images = 0;
    for tok in spec.split_whitespace() {
        match tok {
            "I" => {
                segments.push(Segment::Image(images));
                images += 1;
            }
            "T" => segments.push(Segment::Text(0)),
            other => return Err(Error::Sequence(format!("unknown sequence token `{other}`"))),
        }
    }
    if segments.is_empty() {
        return Err(Error::Sequence("empty sequence spec".into()));
    }
    insert_media_tokens(&segments, media_len)
}
