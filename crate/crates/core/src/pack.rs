//! The packed layout and its aligned artifacts.
//!
//! An N-turn conversation becomes one token sequence tiled per turn as
//! `h_i, t_i, r_i^in, r_i^out`: the human message, the reasoning, and two
//! copies of the response. `r_i^in` plays the response's history role (later
//! turns attend to it), `r_i^out` plays its generation role (it attends to
//! the same turn's reasoning and carries the response loss). Reasoning is
//! visible only to its own turn's `r_i^out`.
//!
//! Position IDs are chosen so every token keeps the index it has in its own
//! naive per-turn pass; in particular `t_i` and `r_i^in` both start right
//! after `h_i`, and `r_i^out` starts right after `t_i`. Duplicate position
//! values across the two copies are intentional.

use crate::convo::{TokenId, ValidatedConversation};
use crate::mask::BoolMask;
use thiserror::Error;

/// Dense token-mask cap: above this length `pack` keeps only the
/// segment-level mask (the dense one would cost more than cap^2 bytes).
pub const DEFAULT_DENSE_MASK_CAP: usize = 16384;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("dense mask for {len} tokens exceeds cap {cap} ({len}^2 cells)")]
    MaskTooLarge { len: usize, cap: usize },
    #[error("cannot pack an empty batch")]
    EmptyBatch,
    #[error("malformed segment table: {reason}")]
    MalformedSegments { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Human,
    Reasoning,
    ResponseIn,
    ResponseOut,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::Human,
        SegmentKind::Reasoning,
        SegmentKind::ResponseIn,
        SegmentKind::ResponseOut,
    ];

    /// Stable numeric code, also used by the on-disk container.
    pub fn code(self) -> u8 {
        match self {
            SegmentKind::Human => 0,
            SegmentKind::Reasoning => 1,
            SegmentKind::ResponseIn => 2,
            SegmentKind::ResponseOut => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Short label used in renderings: h / t / ri / ro.
    pub fn label(self) -> &'static str {
        match self {
            SegmentKind::Human => "h",
            SegmentKind::Reasoning => "t",
            SegmentKind::ResponseIn => "ri",
            SegmentKind::ResponseOut => "ro",
        }
    }
}

/// Contiguous token range `[start, end)` of one segment in the packed
/// sequence, plus the position ID of its first token. An empty reasoning
/// segment keeps a meaningful `first_pos` (one past its human's last
/// position) so the downstream recurrences stay uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// 1-based turn number.
    pub turn: usize,
    pub start: usize,
    pub end: usize,
    pub first_pos: u32,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Position ID of the last token; for an empty segment, the last
    /// position of the preceding content (`first_pos - 1`).
    pub fn last_pos(&self) -> i64 {
        self.first_pos as i64 + self.len() as i64 - 1
    }
}

/// All 4N segments of a packed conversation, in layout order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentTable {
    segments: Vec<Segment>,
    n_turns: usize,
    total_len: usize,
}

impl SegmentTable {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_turns(&self) -> usize {
        self.n_turns
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segment(&self, kind: SegmentKind, turn: usize) -> &Segment {
        &self.segments[(turn - 1) * 4 + kind.code() as usize]
    }

    /// Index into `segments()` of the segment containing token position `p`.
    pub fn segment_of(&self, p: usize) -> usize {
        debug_assert!(p < self.total_len);
        // 4N is tiny; a linear scan is fine and obviously correct
        self.segments
            .iter()
            .position(|s| s.start <= p && p < s.end)
            .expect("position inside total_len lies in some segment")
    }

    /// 4N x 4N segment-level visibility with the diagonal forced true (the
    /// diagonal stands for the intra-segment causal rule).
    pub fn segment_mask(&self) -> BoolMask {
        BoolMask::from_fn(self.segments.len(), |a, b| {
            a == b || segment_visibility(&self.segments[a], &self.segments[b])
        })
    }

    /// Rebuild a table from its segments (the deserialization path),
    /// re-checking the invariants [`build_layout`] guarantees: four
    /// segments per turn in kind order, ranges tiling the sequence, and
    /// response copies of equal length.
    pub fn from_segments(segments: Vec<Segment>) -> Result<SegmentTable, PackError> {
        let bad = |reason: String| PackError::MalformedSegments { reason };
        if segments.is_empty() || segments.len() % 4 != 0 {
            return Err(bad(format!(
                "expected a positive multiple of 4 segments, got {}",
                segments.len()
            )));
        }
        let mut off = 0usize;
        for (idx, seg) in segments.iter().enumerate() {
            let want_turn = idx / 4 + 1;
            let want_kind = SegmentKind::ALL[idx % 4];
            if seg.turn != want_turn || seg.kind != want_kind {
                return Err(bad(format!(
                    "segment {idx} is {:?} of turn {}, expected {:?} of turn {}",
                    seg.kind, seg.turn, want_kind, want_turn
                )));
            }
            if seg.start != off || seg.end < seg.start {
                return Err(bad(format!("segment {idx} does not tile the sequence")));
            }
            off = seg.end;
        }
        for pair in segments.chunks_exact(4) {
            if pair[2].len() != pair[3].len() {
                return Err(bad(format!(
                    "turn {}: response copies have lengths {} and {}",
                    pair[0].turn,
                    pair[2].len(),
                    pair[3].len()
                )));
            }
        }
        let n_turns = segments.len() / 4;
        Ok(SegmentTable {
            segments,
            n_turns,
            total_len: off,
        })
    }
}

/// Build the 4N-segment layout and each segment's first position ID.
///
/// Ranges tile the packed sequence in order; positions follow the per-turn
/// recurrence: `t_i` and `r_i^in` both continue from `h_i`'s last position,
/// `r_i^out` continues from `t_i`'s last position, and `h_{i+1}` continues
/// from `r_i^in`'s last position (history never contains reasoning).
pub fn build_layout(c: &ValidatedConversation) -> SegmentTable {
    let mut segments = Vec::with_capacity(c.n_turns() * 4);
    let mut off = 0usize;
    let mut next_h_pos: i64 = 0;
    for (i, turn) in c.turns().iter().enumerate() {
        let turn_no = i + 1;
        let (h, t, r) = (turn.human.len(), turn.reasoning.len(), turn.response.len());
        let h_first = next_h_pos;
        let h_last = h_first + h as i64 - 1;
        let t_first = h_last + 1;
        let t_last = t_first + t as i64 - 1; // = h_last when t is empty
        let ri_first = h_last + 1;
        let ri_last = ri_first + r as i64 - 1;
        let ro_first = t_last + 1;
        let mut push = |kind: SegmentKind, len: usize, first_pos: i64| {
            segments.push(Segment {
                kind,
                turn: turn_no,
                start: off,
                end: off + len,
                first_pos: u32::try_from(first_pos).expect("position ids fit in u32"),
            });
            off += len;
        };
        push(SegmentKind::Human, h, h_first);
        push(SegmentKind::Reasoning, t, t_first);
        push(SegmentKind::ResponseIn, r, ri_first);
        push(SegmentKind::ResponseOut, r, ro_first);
        next_h_pos = ri_last + 1;
    }
    SegmentTable {
        segments,
        n_turns: c.n_turns(),
        total_len: off,
    }
}

/// Expand per-segment first positions into one position ID per token
/// (ascending by 1 inside each segment).
pub fn assign_position_ids(table: &SegmentTable) -> Vec<u32> {
    let mut ids = vec![0u32; table.total_len()];
    for seg in table.segments() {
        for (o, slot) in ids[seg.start..seg.end].iter_mut().enumerate() {
            *slot = seg.first_pos + o as u32;
        }
    }
    ids
}

/// May tokens of segment `q` attend tokens of segment `k`? This is the
/// cross-segment rule only; inside a single segment attention is causal
/// (handled by [`build_token_mask`]).
///
/// Later turns see only human messages and context response copies. Within
/// a turn, everything sees the human message, and only the generation copy
/// of the response sees the reasoning.
pub fn segment_visibility(q: &Segment, k: &Segment) -> bool {
    if k.turn > q.turn {
        return false;
    }
    if k.turn < q.turn {
        return matches!(k.kind, SegmentKind::Human | SegmentKind::ResponseIn);
    }
    // same turn
    if k.kind == SegmentKind::Human {
        return true;
    }
    q.kind == SegmentKind::ResponseOut && k.kind == SegmentKind::Reasoning
}

/// Dense L x L token mask: cross-segment cells follow
/// [`segment_visibility`]; same-segment cells are causal (`k <= q`).
///
/// Errors with [`PackError::MaskTooLarge`] when `total_len > cap`, since the
/// dense mask costs `total_len^2` bytes.
pub fn build_token_mask(table: &SegmentTable, cap: usize) -> Result<BoolMask, PackError> {
    let len = table.total_len();
    if len > cap {
        return Err(PackError::MaskTooLarge { len, cap });
    }
    let seg_of: Vec<usize> = (0..len).map(|p| table.segment_of(p)).collect();
    let segs = table.segments();
    Ok(BoolMask::from_fn(len, |q, k| {
        if seg_of[q] == seg_of[k] {
            k <= q
        } else {
            segment_visibility(&segs[seg_of[q]], &segs[seg_of[k]])
        }
    }))
}

/// Next-token targets and the include mask selecting which predictions carry
/// loss. Walking each turn's generation stream `h_i, t_i, r_i^out`, a
/// position is included exactly when its successor lies in `t_i` or
/// `r_i^out`; everything else (history positions, `r_i^in`, final stream
/// tokens) gets no target.
pub fn build_targets(
    c: &ValidatedConversation,
    table: &SegmentTable,
) -> (Vec<Option<TokenId>>, Vec<bool>) {
    let tokens = packed_tokens(c);
    let len = table.total_len();
    let mut targets = vec![None; len];
    let mut include = vec![false; len];
    for turn in 1..=table.n_turns() {
        let stream = [
            table.segment(SegmentKind::Human, turn),
            table.segment(SegmentKind::Reasoning, turn),
            table.segment(SegmentKind::ResponseOut, turn),
        ];
        let positions: Vec<(usize, SegmentKind)> = stream
            .iter()
            .flat_map(|s| (s.start..s.end).map(|p| (p, s.kind)))
            .collect();
        for pair in positions.windows(2) {
            let (p, _) = pair[0];
            let (succ, succ_kind) = pair[1];
            if matches!(succ_kind, SegmentKind::Reasoning | SegmentKind::ResponseOut) {
                targets[p] = Some(tokens[succ]);
                include[p] = true;
            }
        }
    }
    (targets, include)
}

/// Packed token sequence: per turn `h_i, t_i, r_i, r_i` (the response twice).
pub fn packed_tokens(c: &ValidatedConversation) -> Vec<TokenId> {
    let mut out = Vec::new();
    for turn in c.turns() {
        out.extend_from_slice(&turn.human);
        out.extend_from_slice(&turn.reasoning);
        out.extend_from_slice(&turn.response);
        out.extend_from_slice(&turn.response);
    }
    out
}

/// A conversation ready for a single forward pass. `mask` is the dense
/// token-level mask when the sequence fits under the dense cap; the
/// segment-level mask is always available via `table.segment_mask()`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedConversation {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub targets: Vec<Option<TokenId>>,
    pub include: Vec<bool>,
    pub mask: Option<BoolMask>,
    pub table: SegmentTable,
}

impl PackedConversation {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True sequence length before any batch padding.
    pub fn content_len(&self) -> usize {
        self.table.total_len()
    }

    pub fn n_included(&self) -> usize {
        self.include.iter().filter(|&&b| b).count()
    }

    fn pad_to(&mut self, width: usize, pad: TokenId) {
        debug_assert!(width >= self.tokens.len());
        self.tokens.resize(width, pad);
        self.position_ids.resize(width, 0);
        self.targets.resize(width, None);
        self.include.resize(width, false);
        if let Some(mask) = &self.mask {
            self.mask = Some(mask.pad_to(width));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackOptions {
    pub dense_mask_cap: usize,
}

impl Default for PackOptions {
    fn default() -> Self {
        PackOptions {
            dense_mask_cap: DEFAULT_DENSE_MASK_CAP,
        }
    }
}

/// Pack one conversation with the default dense-mask cap.
pub fn pack(c: &ValidatedConversation) -> PackedConversation {
    pack_with(c, &PackOptions::default())
}

pub fn pack_with(c: &ValidatedConversation, opts: &PackOptions) -> PackedConversation {
    let table = build_layout(c);
    let position_ids = assign_position_ids(&table);
    let mask = match build_token_mask(&table, opts.dense_mask_cap) {
        Ok(m) => Some(m),
        Err(PackError::MaskTooLarge { .. }) => None,
        Err(e) => unreachable!("build_token_mask only fails on size: {e}"),
    };
    let (targets, include) = build_targets(c, &table);
    PackedConversation {
        id: c.id().to_string(),
        tokens: packed_tokens(c),
        position_ids,
        targets,
        include,
        mask,
        table,
    }
}

/// A right-padded batch. Every item is padded to the shared `width`; pad
/// positions carry the pad token, position ID 0, no target, include false,
/// and mask rows/columns that are false except the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub width: usize,
    pub pad: TokenId,
    pub items: Vec<PackedConversation>,
}

pub fn pack_batch(
    cs: &[ValidatedConversation],
    pad: TokenId,
) -> Result<PackedBatch, PackError> {
    pack_batch_with(cs, pad, &PackOptions::default())
}

pub fn pack_batch_with(
    cs: &[ValidatedConversation],
    pad: TokenId,
    opts: &PackOptions,
) -> Result<PackedBatch, PackError> {
    if cs.is_empty() {
        return Err(PackError::EmptyBatch);
    }
    let width = cs
        .iter()
        .map(|c| build_layout(c).total_len())
        .max()
        .unwrap();
    // dense masks are all-or-nothing per batch: padding would push every
    // item to width^2 cells anyway
    let item_opts = PackOptions {
        dense_mask_cap: if width > opts.dense_mask_cap {
            0
        } else {
            opts.dense_mask_cap
        },
    };
    let items = cs
        .iter()
        .map(|c| {
            let mut p = pack_with(c, &item_opts);
            p.pad_to(width, pad);
            p
        })
        .collect();
    Ok(PackedBatch { width, pad, items })
}
