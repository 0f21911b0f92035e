//! Attention masks: per-stream block-causal masks and the cross-modal
//! future-expanding mask between video queries and audio keys.
//!
//! Indices inside this module are zero-based in storage. The predicates are
//! documented with one-based frame `t ∈ 1..=T_v` and token `s ∈ 1..=T_a`,
//! where video frame `t` sees audio token `s` iff `s ≤ r·(t + W)`. With
//! `W = 0` a frame sees every past token plus its own `r` synchronous tokens.
//!
//! Every mask is an explicit bitmap (`true` = attend).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry shared by every mask in the system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    /// Video frames per streaming block.
    pub frames_per_block: usize,
    /// Audio tokens aligned with one video frame.
    pub tokens_per_frame: usize,
    pub num_video_frames: usize,
    /// Look-ahead window in video frames.
    pub lookahead: usize,
}

impl BlockLayout {
    pub fn new(frames_per_block: usize, tokens_per_frame: usize, num_video_frames: usize, lookahead: usize) -> Result<Self> {
        let layout = Self {
            frames_per_block,
            tokens_per_frame,
            num_video_frames,
            lookahead,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_block == 0 || self.tokens_per_frame == 0 || self.num_video_frames == 0 {
            return Err(Error::Layout(format!(
                "extents must be positive: F={}, r={}, T_v={}",
                self.frames_per_block, self.tokens_per_frame, self.num_video_frames
            )));
        }
        if self.num_video_frames % self.frames_per_block != 0 {
            return Err(Error::Layout(format!(
                "T_v={} is not divisible by F={}",
                self.num_video_frames, self.frames_per_block
            )));
        }
        if self.lookahead > self.num_video_frames {
            return Err(Error::Layout(format!(
                "look-ahead W={} exceeds T_v={}",
                self.lookahead, self.num_video_frames
            )));
        }
        Ok(())
    }

    pub fn num_audio_tokens(&self) -> usize {
        self.tokens_per_frame * self.num_video_frames
    }

    pub fn num_blocks(&self) -> usize {
        self.num_video_frames / self.frames_per_block
    }

    pub fn with_lookahead(mut self, lookahead: usize) -> Self {
        self.lookahead = lookahead;
        self
    }

    pub fn with_frames(mut self, num_video_frames: usize) -> Self {
        self.num_video_frames = num_video_frames;
        self
    }

    /// Zero-based block of a zero-based video frame.
    pub fn video_block(&self, frame: usize) -> usize {
        frame / self.frames_per_block
    }

    /// Zero-based block of a zero-based audio token.
    pub fn audio_block(&self, token: usize) -> usize {
        token / (self.tokens_per_frame * self.frames_per_block)
    }

    /// Zero-based video frame an audio token is aligned with.
    pub fn audio_frame(&self, token: usize) -> usize {
        token / self.tokens_per_frame
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    VideoSelf,
    AudioSelf,
    CondCross,
    VideoFromAudio,
    AudioFromVideo,
}

impl MaskKind {
    pub fn tag(self) -> u8 {
        match self {
            MaskKind::VideoSelf => 0,
            MaskKind::AudioSelf => 1,
            MaskKind::CondCross => 2,
            MaskKind::VideoFromAudio => 3,
            MaskKind::AudioFromVideo => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => MaskKind::VideoSelf,
            1 => MaskKind::AudioSelf,
            2 => MaskKind::CondCross,
            3 => MaskKind::VideoFromAudio,
            4 => MaskKind::AudioFromVideo,
            _ => return None,
        })
    }

    fn is_causal(self) -> bool {
        !matches!(self, MaskKind::CondCross)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Video,
    Audio,
}

/// Boolean attention bitmap, row-major over `query_len × key_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    kind: MaskKind,
    query_len: usize,
    key_len: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(kind: MaskKind, query_len: usize, key_len: usize, mut attend: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(query_len * key_len);
        for q in 0..query_len {
            for k in 0..key_len {
                bits.push(attend(q, k));
            }
        }
        Self {
            kind,
            query_len,
            key_len,
            bits,
        }
    }

    /// Mask over explicit absolute query/key index lists.
    pub fn over_indices(kind: MaskKind, queries: &[usize], keys: &[usize], attend: impl Fn(usize, usize) -> bool) -> Self {
        Self::from_fn(kind, queries.len(), keys.len(), |q, k| attend(queries[q], keys[k]))
    }

    pub fn all_ones(kind: MaskKind, query_len: usize, key_len: usize) -> Self {
        Self::from_fn(kind, query_len, key_len, |_, _| true)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.key_len + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.key_len..(q + 1) * self.key_len]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of visible keys in row `q`.
    pub fn row_visible(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    /// Element-wise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// A later query never sees strictly less than an earlier one.
    pub fn is_monotone(&self) -> bool {
        if !self.kind.is_causal() {
            return true;
        }
        (1..self.query_len).all(|q| self.row(q - 1).iter().zip(self.row(q)).all(|(&prev, &cur)| !prev || cur))
    }

    /// Every row is a prefix of the key axis.
    pub fn rows_are_prefixes(&self) -> bool {
        (0..self.query_len).all(|q| {
            let n = self.row_visible(q);
            self.row(q)[..n].iter().all(|&b| b)
        })
    }
}

/// Visibility predicates over absolute zero-based indices.
///
/// `committed_blocks` switches on streaming semantics: video frames in
/// already committed blocks only see audio up to the end of their own block,
/// which is what they saw when their keys and values entered the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Visibility {
    pub layout: BlockLayout,
    pub committed_blocks: Option<usize>,
    /// When false every predicate is `true` (the bidirectional teacher).
    pub causal: bool,
}

impl Visibility {
    pub fn causal(layout: BlockLayout) -> Self {
        Self {
            layout,
            committed_blocks: None,
            causal: true,
        }
    }

    pub fn bidirectional(layout: BlockLayout) -> Self {
        Self {
            layout,
            committed_blocks: None,
            causal: false,
        }
    }

    pub fn streaming(layout: BlockLayout, committed_blocks: usize) -> Self {
        Self {
            layout,
            committed_blocks: Some(committed_blocks),
            causal: true,
        }
    }

    pub fn video_self(&self, query_frame: usize, key_frame: usize) -> bool {
        !self.causal || self.layout.video_block(key_frame) <= self.layout.video_block(query_frame)
    }

    pub fn audio_self(&self, query_token: usize, key_token: usize) -> bool {
        !self.causal || self.layout.audio_block(key_token) <= self.layout.audio_block(query_token)
    }

    /// Video frame `t` attends audio token `s` iff `s < r·(t + 1 + W)` (zero-based).
    pub fn video_from_audio(&self, frame: usize, token: usize) -> bool {
        if !self.causal {
            return true;
        }
        let l = &self.layout;
        let mut horizon = l.tokens_per_frame * (frame + 1 + l.lookahead);
        if let Some(committed) = self.committed_blocks {
            let block = l.video_block(frame);
            if block < committed {
                horizon = horizon.min(l.tokens_per_frame * l.frames_per_block * (block + 1));
            }
        }
        token < horizon
    }

    /// Audio token `s` attends video frame `t'` iff `t' < F·(block(s) + 1) − W`.
    ///
    /// The `W`-frame lag keeps the composition of cross-modal hops inside the
    /// look-ahead horizon, so deep layers cannot route future video back into
    /// earlier video frames through the audio stream.
    pub fn audio_from_video(&self, token: usize, frame: usize) -> bool {
        if !self.causal {
            return true;
        }
        let l = &self.layout;
        let limit = (l.frames_per_block * (l.audio_block(token) + 1)).saturating_sub(l.lookahead);
        frame < limit
    }
}

/// Cross-modal future-expanding mask `M^{v←a}(W)` over the full layout.
pub fn cross_modal_mask_v_from_a(layout: &BlockLayout) -> Result<Mask> {
    layout.validate()?;
    let vis = Visibility::causal(*layout);
    Ok(Mask::from_fn(
        MaskKind::VideoFromAudio,
        layout.num_video_frames,
        layout.num_audio_tokens(),
        |t, s| vis.video_from_audio(t, s),
    ))
}

/// Audio-query to video-key mask over the full layout.
pub fn cross_modal_mask_a_from_v(layout: &BlockLayout) -> Result<Mask> {
    layout.validate()?;
    let vis = Visibility::causal(*layout);
    Ok(Mask::from_fn(
        MaskKind::AudioFromVideo,
        layout.num_audio_tokens(),
        layout.num_video_frames,
        |s, t| vis.audio_from_video(s, t),
    ))
}

/// Per-stream block-causal self mask; bidirectional inside a block.
pub fn self_mask(layout: &BlockLayout, stream: Stream) -> Result<Mask> {
    layout.validate()?;
    let vis = Visibility::causal(*layout);
    Ok(match stream {
        Stream::Video => {
            let n = layout.num_video_frames;
            Mask::from_fn(MaskKind::VideoSelf, n, n, |i, j| vis.video_self(i, j))
        }
        Stream::Audio => {
            let n = layout.num_audio_tokens();
            Mask::from_fn(MaskKind::AudioSelf, n, n, |i, j| vis.audio_self(i, j))
        }
    })
}

/// Strict block-causal cross mask built frame by frame: each frame sees
/// the tokens of every frame up to and including its own.
fn strict_cross_mask_by_enumeration(layout: &BlockLayout) -> Mask {
    let (tv, r) = (layout.num_video_frames, layout.tokens_per_frame);
    let mut bits = vec![false; tv * tv * r];
    for t in 0..tv {
        for seen_frame in 0..=t {
            for tok in 0..r {
                bits[t * tv * r + seen_frame * r + tok] = true;
            }
        }
    }
    Mask {
        kind: MaskKind::VideoFromAudio,
        query_len: tv,
        key_len: tv * r,
        bits,
    }
}

/// True iff the layout's cross mask equals the strict block-causal mask.
pub fn strict_equivalence_check(layout: &BlockLayout) -> bool {
    match cross_modal_mask_v_from_a(layout) {
        Ok(mask) => mask == strict_cross_mask_by_enumeration(layout),
        Err(_) => false,
    }
}

/// The complete mask set for one forward pass.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub video_self: Mask,
    pub audio_self: Mask,
    pub video_from_audio: Mask,
    pub audio_from_video: Mask,
}

impl MaskSet {
    /// Masks over explicit absolute index lists for queries and keys.
    pub fn for_indices(
        vis: &Visibility,
        video_queries: &[usize],
        audio_queries: &[usize],
        video_keys: &[usize],
        audio_keys: &[usize],
    ) -> Self {
        Self {
            video_self: Mask::over_indices(MaskKind::VideoSelf, video_queries, video_keys, |q, k| vis.video_self(q, k)),
            audio_self: Mask::over_indices(MaskKind::AudioSelf, audio_queries, audio_keys, |q, k| vis.audio_self(q, k)),
            video_from_audio: Mask::over_indices(MaskKind::VideoFromAudio, video_queries, audio_keys, |t, s| {
                vis.video_from_audio(t, s)
            }),
            audio_from_video: Mask::over_indices(MaskKind::AudioFromVideo, audio_queries, video_keys, |s, t| {
                vis.audio_from_video(s, t)
            }),
        }
    }

    /// Masks for a whole clip of `n_frames` frames starting at frame 0.
    pub fn full(vis: &Visibility, n_frames: usize) -> Self {
        let r = vis.layout.tokens_per_frame;
        let v: Vec<usize> = (0..n_frames).collect();
        let a: Vec<usize> = (0..n_frames * r).collect();
        Self::for_indices(vis, &v, &a, &v, &a)
    }
}

const MASK_MAGIC: &[u8; 4] = b"MASK";
const MASK_VERSION: u32 = 1;
const MASK_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4;

/// Serializes a mask. Bits are packed row-major, least significant bit first,
/// with the final byte zero-padded.
pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + mask.bits.len().div_ceil(8));
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.push(mask.kind.tag());
    out.extend_from_slice(&(mask.query_len as u32).to_le_bytes());
    out.extend_from_slice(&(mask.key_len as u32).to_le_bytes());
    let mut bytes = vec![0u8; mask.bits.len().div_ceil(8)];
    for (i, &b) in mask.bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bytes);
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(Error::Format {
                offset: bytes.len(),
                reason: format!("truncated {what}"),
            })
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[0..4] != MASK_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    need(4, 4, "version")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MASK_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    need(8, 1, "kind")?;
    let kind = MaskKind::from_tag(bytes[8]).ok_or_else(|| Error::Format {
        offset: 8,
        reason: format!("unknown kind tag {}", bytes[8]),
    })?;
    need(9, 8, "extents")?;
    let query_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let key_len = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let n = query_len * key_len;
    let payload = n.div_ceil(8);
    need(MASK_HEADER_LEN, payload, "bitmap")?;
    if bytes.len() != MASK_HEADER_LEN + payload {
        return Err(Error::Format {
            offset: MASK_HEADER_LEN + payload,
            reason: "trailing bytes after bitmap".into(),
        });
    }
    let body = &bytes[MASK_HEADER_LEN..];
    let bits = (0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(Mask {
        kind,
        query_len,
        key_len,
        bits,
    })
}

pub fn dump_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(f: usize, r: usize, tv: usize, w: usize) -> BlockLayout {
        BlockLayout::new(f, r, tv, w).unwrap()
    }

    fn visible_prefix(mask: &Mask, q: usize) -> usize {
        assert!(mask.rows_are_prefixes());
        mask.row_visible(q)
    }

    #[test]
    fn w0_frames_see_synchronous_tokens() {
        let m = cross_modal_mask_v_from_a(&layout(1, 5, 3, 0)).unwrap();
        assert_eq!(visible_prefix(&m, 0), 5);
        assert_eq!(visible_prefix(&m, 1), 10);
        assert_eq!(visible_prefix(&m, 2), 15);
    }

    #[test]
    fn w1_reveals_next_five_and_clips_at_end() {
        let m = cross_modal_mask_v_from_a(&layout(1, 5, 3, 1)).unwrap();
        assert_eq!(visible_prefix(&m, 0), 10);
        assert_eq!(visible_prefix(&m, 2), 15);
    }

    #[test]
    fn strict_check() {
        assert!(strict_equivalence_check(&layout(1, 5, 4, 0)));
        assert!(strict_equivalence_check(&layout(2, 3, 4, 0)));
        let l1 = layout(1, 5, 4, 1);
        assert!(!strict_equivalence_check(&l1));
        let extra =
            cross_modal_mask_v_from_a(&l1).unwrap().count_ones() - cross_modal_mask_v_from_a(&l1.with_lookahead(0)).unwrap().count_ones();
        assert_eq!(extra, 5 * 3);
        assert!(strict_equivalence_check(&layout(1, 5, 1, 1)));
    }

    #[test]
    fn video_self_blocks() {
        let m = self_mask(&layout(1, 5, 3, 0), Stream::Video).unwrap();
        for i in 0..3 {
            assert_eq!(visible_prefix(&m, i), i + 1);
        }
        let m = self_mask(&layout(2, 5, 4, 0), Stream::Video).unwrap();
        assert_eq!(m.row(0), &[true, true, false, false]);
        assert_eq!(m.row(1), &[true, true, false, false]);
        assert_eq!(m.row(2), &[true; 4]);
        assert_eq!(m.row(3), &[true; 4]);
    }

    #[test]
    fn audio_self_blocks() {
        let m = self_mask(&layout(1, 5, 2, 0), Stream::Audio).unwrap();
        for q in 0..5 {
            assert_eq!(visible_prefix(&m, q), 5);
        }
        for q in 5..10 {
            assert_eq!(visible_prefix(&m, q), 10);
        }
    }

    #[test]
    fn audio_from_video_strictly_causal() {
        let l = layout(1, 5, 4, 0);
        let m = cross_modal_mask_a_from_v(&l).unwrap();
        assert_eq!(visible_prefix(&m, 2), 1); // token 3 (one-based) sees frame 1
        assert_eq!(visible_prefix(&m, 5), 2); // token 6 sees frames 1-2
        assert_eq!(visible_prefix(&m, 19), 4);
        // with look-ahead the audio side lags by W frames
        let m = cross_modal_mask_a_from_v(&l.with_lookahead(1)).unwrap();
        assert_eq!(visible_prefix(&m, 2), 0);
        assert_eq!(visible_prefix(&m, 5), 1);
    }

    #[test]
    fn streaming_clips_committed_frames() {
        let l = layout(1, 5, 4, 1);
        let vis = Visibility::streaming(l, 2);
        // frame 1 (zero-based) is committed: sees only its own block end
        assert!(vis.video_from_audio(1, 9));
        assert!(!vis.video_from_audio(1, 10));
        // frame 2 is current: full look-ahead
        assert!(vis.video_from_audio(2, 19));
    }

    #[test]
    fn layout_validation() {
        assert!(BlockLayout::new(2, 5, 3, 0).is_err());
        assert!(BlockLayout::new(1, 5, 3, 4).is_err());
        assert!(BlockLayout::new(0, 5, 3, 0).is_err());
    }

    #[test]
    fn encode_decode_and_truncation() {
        let m = cross_modal_mask_v_from_a(&layout(1, 5, 3, 1)).unwrap();
        let bytes = encode_mask(&m);
        assert_eq!(decode_mask(&bytes).unwrap(), m);
        for cut in [0, 3, 8, 12, bytes.len() - 1] {
            let err = decode_mask(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
        }
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(decode_mask(&bad), Err(Error::Format { offset: 8, .. })));
    }
}
