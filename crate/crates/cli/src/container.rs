//! Binary tensor container for packed conversations.
//!
//! Layout: 4-byte magic `RPK1`, a little-endian u64 header length, a compact
//! JSON header describing the tensors, then the raw tensor data back to
//! back. All scalars are little-endian; offsets are relative to the start of
//! the data region. The format is deliberately dumb: any training stack can
//! read the header and mmap or slice the tensors without this crate.
//!
//! A `packed` file holds one conversation: `tokens` i32\[L\],
//! `position_ids` i32\[L\], `include` u8\[L\], `targets` i32\[L\] (-1 where
//! no target), the segment table (`segment_kinds` u8\[S\], `segment_turns`
//! i32\[S\], `segment_ranges` i32\[S,2\], `segment_first_pos` i32\[S\]), the
//! segment-level visibility `seg_mask` u8\[S,S\], and, when the sequence is
//! under the dense cap, the token-level `mask` u8\[L,L\].
//!
//! A `batch` file holds right-padded stacks of the per-token tensors with a
//! leading batch dimension, `content_lens` i32\[B\], and the concatenated
//! segment tables with `segment_counts` i32\[B\].

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use turnpack_core::{
    BoolMask, PackError, PackedBatch, PackedConversation, Segment, SegmentKind, SegmentTable,
    TokenId,
};

pub const MAGIC: [u8; 4] = *b"RPK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}': {reason}")]
    BadTensor { name: String, reason: String },
    #[error(transparent)]
    Segments(#[from] PackError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    I32,
    I64,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I32 => 4,
            Dtype::I64 => 8,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad_id: Option<u32>,
    tensors: Vec<TensorMeta>,
}

/// What a container file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Contents {
    Single(PackedConversation),
    Batch(PackedBatch),
}

// ---------------------------------------------------------------- writing

#[derive(Default)]
struct TensorSink {
    metas: Vec<TensorMeta>,
    data: Vec<u8>,
}

impl TensorSink {
    fn push(&mut self, name: &str, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) {
        debug_assert_eq!(
            bytes.len(),
            shape.iter().product::<usize>() * dtype.size(),
            "{name}: byte length must match shape"
        );
        self.metas.push(TensorMeta {
            name: name.to_string(),
            dtype,
            shape,
            byte_offset: self.data.len() as u64,
            byte_len: bytes.len() as u64,
        });
        self.data.extend_from_slice(&bytes);
    }

    fn push_u8(&mut self, name: &str, shape: Vec<usize>, vals: Vec<u8>) {
        self.push(name, Dtype::U8, shape, vals);
    }

    fn push_i32(&mut self, name: &str, shape: Vec<usize>, vals: &[i32]) {
        let mut bytes = Vec::with_capacity(vals.len() * 4);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.push(name, Dtype::I32, shape, bytes);
    }
}

fn to_i32(name: &str, v: u32) -> Result<i32, ContainerError> {
    i32::try_from(v).map_err(|_| ContainerError::BadTensor {
        name: name.to_string(),
        reason: format!("value {v} exceeds the signed 32-bit range"),
    })
}

fn mask_bytes(mask: &BoolMask) -> Vec<u8> {
    let side = mask.side();
    let mut out = Vec::with_capacity(side * side);
    for q in 0..side {
        for k in 0..side {
            out.push(mask.allowed(q, k) as u8);
        }
    }
    out
}

fn token_tensors(
    sink: &mut TensorSink,
    shape: Vec<usize>,
    tokens: &[TokenId],
    position_ids: &[u32],
    include: &[bool],
    targets: &[Option<TokenId>],
) -> Result<(), ContainerError> {
    let toks: Vec<i32> = tokens
        .iter()
        .map(|t| to_i32("tokens", t.0))
        .collect::<Result<_, _>>()?;
    sink.push_i32("tokens", shape.clone(), &toks);
    let pos: Vec<i32> = position_ids
        .iter()
        .map(|&p| to_i32("position_ids", p))
        .collect::<Result<_, _>>()?;
    sink.push_i32("position_ids", shape.clone(), &pos);
    sink.push_u8(
        "include",
        shape.clone(),
        include.iter().map(|&b| b as u8).collect(),
    );
    let tgt: Vec<i32> = targets
        .iter()
        .map(|t| match t {
            Some(tok) => to_i32("targets", tok.0),
            None => Ok(-1),
        })
        .collect::<Result<_, _>>()?;
    sink.push_i32("targets", shape, &tgt);
    Ok(())
}

fn segment_tensors(sink: &mut TensorSink, segments: &[Segment]) -> Result<(), ContainerError> {
    let s = segments.len();
    sink.push_u8(
        "segment_kinds",
        vec![s],
        segments.iter().map(|seg| seg.kind.code()).collect(),
    );
    let turns: Vec<i32> = segments
        .iter()
        .map(|seg| to_i32("segment_turns", seg.turn as u32))
        .collect::<Result<_, _>>()?;
    sink.push_i32("segment_turns", vec![s], &turns);
    let mut ranges = Vec::with_capacity(2 * s);
    for seg in segments {
        ranges.push(to_i32("segment_ranges", seg.start as u32)?);
        ranges.push(to_i32("segment_ranges", seg.end as u32)?);
    }
    sink.push_i32("segment_ranges", vec![s, 2], &ranges);
    let firsts: Vec<i32> = segments
        .iter()
        .map(|seg| to_i32("segment_first_pos", seg.first_pos))
        .collect::<Result<_, _>>()?;
    sink.push_i32("segment_first_pos", vec![s], &firsts);
    Ok(())
}

pub fn write_container_bytes(contents: &Contents) -> Result<Vec<u8>, ContainerError> {
    let mut sink = TensorSink::default();
    let header = match contents {
        Contents::Single(p) => {
            token_tensors(
                &mut sink,
                vec![p.tokens.len()],
                &p.tokens,
                &p.position_ids,
                &p.include,
                &p.targets,
            )?;
            segment_tensors(&mut sink, p.table.segments())?;
            let seg_mask = p.table.segment_mask();
            let s = seg_mask.side();
            sink.push_u8("seg_mask", vec![s, s], mask_bytes(&seg_mask));
            if let Some(mask) = &p.mask {
                let l = mask.side();
                sink.push_u8("mask", vec![l, l], mask_bytes(mask));
            }
            Header {
                version: VERSION,
                kind: "packed".into(),
                ids: vec![p.id.clone()],
                pad_id: None,
                tensors: sink.metas.clone(),
            }
        }
        Contents::Batch(b) => {
            let n = b.items.len();
            let w = b.width;
            let mut tokens = Vec::with_capacity(n * w);
            let mut positions = Vec::with_capacity(n * w);
            let mut include = Vec::with_capacity(n * w);
            let mut targets = Vec::with_capacity(n * w);
            for item in &b.items {
                tokens.extend_from_slice(&item.tokens);
                positions.extend_from_slice(&item.position_ids);
                include.extend_from_slice(&item.include);
                targets.extend_from_slice(&item.targets);
            }
            token_tensors(&mut sink, vec![n, w], &tokens, &positions, &include, &targets)?;
            let lens: Vec<i32> = b
                .items
                .iter()
                .map(|i| to_i32("content_lens", i.content_len() as u32))
                .collect::<Result<_, _>>()?;
            sink.push_i32("content_lens", vec![n], &lens);
            let counts: Vec<i32> = b
                .items
                .iter()
                .map(|i| to_i32("segment_counts", i.table.segments().len() as u32))
                .collect::<Result<_, _>>()?;
            sink.push_i32("segment_counts", vec![n], &counts);
            let all_segments: Vec<Segment> = b
                .items
                .iter()
                .flat_map(|i| i.table.segments().iter().copied())
                .collect();
            segment_tensors(&mut sink, &all_segments)?;
            let have_masks = b.items.iter().filter(|i| i.mask.is_some()).count();
            if have_masks > 0 && have_masks < n {
                return Err(ContainerError::BadTensor {
                    name: "mask".into(),
                    reason: "batch mixes items with and without dense masks".into(),
                });
            }
            if have_masks == n {
                let mut bytes = Vec::with_capacity(n * w * w);
                for item in &b.items {
                    bytes.extend_from_slice(&mask_bytes(item.mask.as_ref().unwrap()));
                }
                sink.push_u8("mask", vec![n, w, w], bytes);
            }
            Header {
                version: VERSION,
                kind: "batch".into(),
                ids: b.items.iter().map(|i| i.id.clone()).collect(),
                pad_id: Some(b.pad.0),
                tensors: sink.metas.clone(),
            }
        }
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header_json.len() + sink.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&sink.data);
    Ok(out)
}

pub fn write_container<P: AsRef<Path>>(
    path: P,
    contents: &Contents,
) -> Result<(), ContainerError> {
    let bytes = write_container_bytes(contents)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------- reading

struct TensorView<'a> {
    meta: &'a TensorMeta,
    bytes: &'a [u8],
}

impl<'a> TensorView<'a> {
    fn expect_shape(&self, want_rank: usize) -> Result<(), ContainerError> {
        if self.meta.shape.len() != want_rank {
            return Err(ContainerError::BadTensor {
                name: self.meta.name.clone(),
                reason: format!(
                    "expected rank {want_rank}, found shape {:?}",
                    self.meta.shape
                ),
            });
        }
        Ok(())
    }

    fn as_u8(&self) -> Result<&'a [u8], ContainerError> {
        if self.meta.dtype != Dtype::U8 {
            return Err(ContainerError::BadTensor {
                name: self.meta.name.clone(),
                reason: format!("expected u8, found {:?}", self.meta.dtype),
            });
        }
        Ok(self.bytes)
    }

    fn as_i32(&self) -> Result<Vec<i32>, ContainerError> {
        if self.meta.dtype != Dtype::I32 {
            return Err(ContainerError::BadTensor {
                name: self.meta.name.clone(),
                reason: format!("expected i32, found {:?}", self.meta.dtype),
            });
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

struct Reader<'a> {
    header: &'a Header,
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn tensor(&self, name: &str) -> Result<TensorView<'a>, ContainerError> {
        let meta = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))?;
        let start = meta.byte_offset as usize;
        let end = start + meta.byte_len as usize;
        if end > self.data.len() || meta.byte_offset.checked_add(meta.byte_len).is_none() {
            return Err(ContainerError::BadTensor {
                name: name.to_string(),
                reason: "byte range exceeds the data region".into(),
            });
        }
        let want = meta.shape.iter().product::<usize>() * meta.dtype.size();
        if want != meta.byte_len as usize {
            return Err(ContainerError::BadTensor {
                name: name.to_string(),
                reason: format!(
                    "shape {:?} needs {want} bytes, header claims {}",
                    meta.shape, meta.byte_len
                ),
            });
        }
        Ok(TensorView {
            meta,
            bytes: &self.data[start..end],
        })
    }

    fn optional(&self, name: &str) -> bool {
        self.header.tensors.iter().any(|t| t.name == name)
    }
}

fn non_negative(name: &str, v: i32) -> Result<u32, ContainerError> {
    u32::try_from(v).map_err(|_| ContainerError::BadTensor {
        name: name.to_string(),
        reason: format!("unexpected negative value {v}"),
    })
}

fn read_segments(
    r: &Reader,
    offset: usize,
    count: usize,
) -> Result<Vec<Segment>, ContainerError> {
    let kinds = r.tensor("segment_kinds")?.as_u8()?;
    let turns = r.tensor("segment_turns")?.as_i32()?;
    let ranges = r.tensor("segment_ranges")?.as_i32()?;
    let firsts = r.tensor("segment_first_pos")?.as_i32()?;
    let total = kinds.len();
    if turns.len() != total || ranges.len() != 2 * total || firsts.len() != total {
        return Err(ContainerError::BadTensor {
            name: "segment_turns".into(),
            reason: "segment tensors disagree on the segment count".into(),
        });
    }
    if offset + count > total {
        return Err(ContainerError::BadTensor {
            name: "segment_counts".into(),
            reason: "segment slice exceeds the stored segments".into(),
        });
    }
    let mut segments = Vec::with_capacity(count);
    for i in offset..offset + count {
        let kind = SegmentKind::from_code(kinds[i]).ok_or_else(|| ContainerError::BadTensor {
            name: "segment_kinds".into(),
            reason: format!("unknown kind code {}", kinds[i]),
        })?;
        segments.push(Segment {
            kind,
            turn: non_negative("segment_turns", turns[i])? as usize,
            start: non_negative("segment_ranges", ranges[2 * i])? as usize,
            end: non_negative("segment_ranges", ranges[2 * i + 1])? as usize,
            first_pos: non_negative("segment_first_pos", firsts[i])?,
        });
    }
    Ok(segments)
}

fn bool_mask_from_bytes(name: &str, side: usize, bytes: &[u8]) -> Result<BoolMask, ContainerError> {
    if bytes.len() != side * side {
        return Err(ContainerError::BadTensor {
            name: name.to_string(),
            reason: format!("expected {side}x{side} cells, found {}", bytes.len()),
        });
    }
    Ok(BoolMask::from_fn(side, |q, k| bytes[q * side + k] != 0))
}

fn item_from_parts(
    id: String,
    tokens: &[i32],
    positions: &[i32],
    include: &[u8],
    targets: &[i32],
    segments: Vec<Segment>,
    mask: Option<BoolMask>,
) -> Result<PackedConversation, ContainerError> {
    let table = SegmentTable::from_segments(segments)?;
    if table.total_len() > tokens.len() {
        return Err(ContainerError::BadTensor {
            name: "segment_ranges".into(),
            reason: format!(
                "segments cover {} tokens but only {} are stored",
                table.total_len(),
                tokens.len()
            ),
        });
    }
    let tokens: Vec<TokenId> = tokens
        .iter()
        .map(|&t| non_negative("tokens", t).map(TokenId))
        .collect::<Result<_, _>>()?;
    let position_ids: Vec<u32> = positions
        .iter()
        .map(|&p| non_negative("position_ids", p))
        .collect::<Result<_, _>>()?;
    let targets: Vec<Option<TokenId>> = targets
        .iter()
        .map(|&t| {
            if t == -1 {
                Ok(None)
            } else {
                non_negative("targets", t).map(|v| Some(TokenId(v)))
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(PackedConversation {
        id,
        tokens,
        position_ids,
        targets,
        include: include.iter().map(|&b| b != 0).collect(),
        mask,
        table,
    })
}

pub fn read_container_bytes(bytes: &[u8]) -> Result<Contents, ContainerError> {
    if bytes.len() < 12 || bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ContainerError::MalformedHeader("header overruns the file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
    if header.version != VERSION {
        return Err(ContainerError::UnsupportedVersion(header.version));
    }
    let r = Reader {
        header: &header,
        data: &bytes[header_end..],
    };

    let tokens_t = r.tensor("tokens")?;
    let positions = r.tensor("position_ids")?.as_i32()?;
    let include = r.tensor("include")?.as_u8()?;
    let targets = r.tensor("targets")?.as_i32()?;
    let tokens = tokens_t.as_i32()?;
    if positions.len() != tokens.len()
        || include.len() != tokens.len()
        || targets.len() != tokens.len()
    {
        return Err(ContainerError::BadTensor {
            name: "tokens".into(),
            reason: "per-token tensors disagree on the sequence length".into(),
        });
    }

    match header.kind.as_str() {
        "packed" => {
            tokens_t.expect_shape(1)?;
            if header.ids.len() != 1 {
                return Err(ContainerError::MalformedHeader(format!(
                    "packed container must hold exactly one id, found {}",
                    header.ids.len()
                )));
            }
            let kinds = r.tensor("segment_kinds")?.as_u8()?;
            let segments = read_segments(&r, 0, kinds.len())?;
            let mask = if r.optional("mask") {
                let t = r.tensor("mask")?;
                t.expect_shape(2)?;
                Some(bool_mask_from_bytes("mask", tokens.len(), t.as_u8()?)?)
            } else {
                None
            };
            let item = item_from_parts(
                header.ids[0].clone(),
                &tokens,
                &positions,
                include,
                &targets,
                segments,
                mask,
            )?;
            // integrity: the stored segment-level mask must match the table
            let seg_mask_t = r.tensor("seg_mask")?;
            let stored = bool_mask_from_bytes(
                "seg_mask",
                item.table.segments().len(),
                seg_mask_t.as_u8()?,
            )?;
            if stored != item.table.segment_mask() {
                return Err(ContainerError::BadTensor {
                    name: "seg_mask".into(),
                    reason: "stored mask disagrees with the segment table".into(),
                });
            }
            Ok(Contents::Single(item))
        }
        "batch" => {
            tokens_t.expect_shape(2)?;
            let n = header.ids.len();
            let w = if n == 0 { 0 } else { tokens.len() / n };
            if tokens.len() != n * w {
                return Err(ContainerError::BadTensor {
                    name: "tokens".into(),
                    reason: "batch tensor is not rectangular".into(),
                });
            }
            let counts = r.tensor("segment_counts")?.as_i32()?;
            if counts.len() != n {
                return Err(ContainerError::BadTensor {
                    name: "segment_counts".into(),
                    reason: format!("expected {n} entries, found {}", counts.len()),
                });
            }
            let masks = if r.optional("mask") {
                let t = r.tensor("mask")?;
                t.expect_shape(3)?;
                let all = t.as_u8()?;
                if all.len() != n * w * w {
                    return Err(ContainerError::BadTensor {
                        name: "mask".into(),
                        reason: format!("expected {n}x{w}x{w} cells, found {}", all.len()),
                    });
                }
                Some(all)
            } else {
                None
            };
            let mut items = Vec::with_capacity(n);
            let mut seg_off = 0usize;
            for (b, id) in header.ids.iter().enumerate() {
                let count = non_negative("segment_counts", counts[b])? as usize;
                let segments = read_segments(&r, seg_off, count)?;
                seg_off += count;
                let mask = match masks {
                    Some(all) => Some(bool_mask_from_bytes(
                        "mask",
                        w,
                        &all[b * w * w..(b + 1) * w * w],
                    )?),
                    None => None,
                };
                items.push(item_from_parts(
                    id.clone(),
                    &tokens[b * w..(b + 1) * w],
                    &positions[b * w..(b + 1) * w],
                    &include[b * w..(b + 1) * w],
                    &targets[b * w..(b + 1) * w],
                    segments,
                    mask,
                )?);
            }
            Ok(Contents::Batch(PackedBatch {
                width: w,
                pad: TokenId(header.pad_id.ok_or_else(|| {
                    ContainerError::MalformedHeader("batch container lacks pad_id".into())
                })?),
                items,
            }))
        }
        other => Err(ContainerError::MalformedHeader(format!(
            "unknown container kind '{other}'"
        ))),
    }
}

pub fn read_container<P: AsRef<Path>>(path: P) -> Result<Contents, ContainerError> {
    let bytes = std::fs::read(path)?;
    read_container_bytes(&bytes)
}
