//! Brute-force statement of the cross-mask visibility rules.

use gated_vlm::fusion::{
    build_cross_mask_image, build_cross_mask_video, insert_media_tokens, Element,
    InterleavedSequence, Segment,
};

/// All segment lists whose expansion has at most `max_len` elements and at
/// most `max_images` images.
pub fn enumerate(media_len: usize, max_len: usize, max_images: usize) -> Vec<InterleavedSequence> {
    fn go(
        segs: &mut Vec<Segment>,
        len: usize,
        images: usize,
        media_len: usize,
        max_len: usize,
        max_images: usize,
        out: &mut Vec<InterleavedSequence>,
    ) {
        if len > 0 {
            out.push(insert_media_tokens(segs, media_len).unwrap());
        }
        if len < max_len {
            // two distinct tokens are enough: token ids never affect masks
            for t in 0..2 {
                segs.push(Segment::Text(t));
                go(segs, len + 1, images, media_len, max_len, max_images, out);
                segs.pop();
            }
        }
        if images < max_images && len + media_len <= max_len {
            segs.push(Segment::Image(images));
            go(
                segs,
                len + media_len,
                images + 1,
                media_len,
                max_len,
                max_images,
                out,
            );
            segs.pop();
        }
    }
    let mut out = Vec::new();
    go(
        &mut Vec::new(),
        0,
        0,
        media_len,
        max_len,
        max_images,
        &mut out,
    );
    out
}

#[derive(Clone, Copy, PartialEq)]
pub enum Mode {
    Image,
    Video,
}

/// Visibility of key column `col` from stream position `row`, stated
/// directly from the rules rather than from any block arithmetic shared with
/// the library.
pub fn rule(
    seq: &InterleavedSequence,
    row: usize,
    col: usize,
    s_img: usize,
    pad: usize,
    mode: Mode,
) -> bool {
    let n = seq.num_images();
    let visual_cols = n.max(1) * s_img;
    assert!(col < visual_cols + pad);
    let is_pad = col >= visual_cols;
    let block = col / s_img;
    let els = seq.elements();
    match els[row] {
        Element::MediaSlot { image, .. } => !is_pad && block == image,
        Element::Text(_) => {
            if is_pad {
                return true;
            }
            let seen: Vec<usize> = els[..row]
                .iter()
                .filter_map(|e| match e {
                    Element::MediaSlot { image, .. } => Some(*image),
                    Element::Text(_) => None,
                })
                .collect();
            match mode {
                Mode::Image => seen.last() == Some(&block),
                Mode::Video => !seen.is_empty() && block < n,
            }
        }
    }
}

/// Compares both builders with [`rule`] over every enumerated stream,
/// `s_img` in 1..=3 and `pad_len` in 1..=2, and checks row non-emptiness
/// and single-image mode agreement. Returns the number of masks compared.
pub fn check_exhaustive() -> Result<usize, String> {
    let mut checked = 0usize;
    for media_len in 1..=3 {
        for seq in enumerate(media_len, 8, 3) {
            for s_img in 1..=3 {
                for pad in 1..=2 {
                    let im = build_cross_mask_image(&seq, s_img, pad).map_err(|e| e.to_string())?;
                    let vm = build_cross_mask_video(&seq, s_img, pad).map_err(|e| e.to_string())?;
                    let cols = seq.num_images().max(1) * s_img + pad;
                    for m in [&im.allow, &vm.allow] {
                        if (m.rows(), m.cols()) != (seq.len(), cols) {
                            return Err(format!("{seq:?}: shape {}x{}", m.rows(), m.cols()));
                        }
                    }
                    for r in 0..seq.len() {
                        for c in 0..cols {
                            if im.allow.get(r, c) != rule(&seq, r, c, s_img, pad, Mode::Image) {
                                return Err(format!(
                                    "image mode {seq:?} s_img={s_img} pad={pad} cell ({r},{c})"
                                ));
                            }
                            if vm.allow.get(r, c) != rule(&seq, r, c, s_img, pad, Mode::Video) {
                                return Err(format!(
                                    "video mode {seq:?} s_img={s_img} pad={pad} cell ({r},{c})"
                                ));
                            }
                        }
                        if !im.allow.row(r).iter().any(|&a| a)
                            || !vm.allow.row(r).iter().any(|&a| a)
                        {
                            return Err(format!("{seq:?}: row {r} allows nothing"));
                        }
                    }
                    if seq.num_images() <= 1 && im.allow != vm.allow {
                        return Err(format!("modes disagree on single-image {seq:?}"));
                    }
                    checked += 2;
                }
            }
        }
    }
    Ok(checked)
}
