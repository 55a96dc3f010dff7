//! Mask renderings: `#`/`.` text grids and binary PGM images. Rows are
//! queries (top first), columns are keys; an allowed cell is `#` in text
//! and black in PGM.

use turnpack_core::BoolMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// One cell per segment (4 per turn).
    Segment,
    /// One cell per token.
    Token,
}

pub fn render_mask_ascii(mask: &BoolMask) -> String {
    let side = mask.side();
    let mut out = String::with_capacity(side * (side + 1));
    for q in 0..side {
        for k in 0..side {
            out.push(if mask.allowed(q, k) { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}

/// Binary PGM (`P5`), maxval 255: allowed cells are ink (0), blocked cells
/// are background (255). Width and height equal the mask side exactly.
pub fn render_mask_pgm(mask: &BoolMask) -> Vec<u8> {
    let side = mask.side();
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side);
    for q in 0..side {
        for k in 0..side {
            out.push(if mask.allowed(q, k) { 0 } else { 255 });
        }
    }
    out
}
