//! Sequence layouts, attention policies and the block-structured attention mask.
//!
//! A sequence is always laid out as `[text | image-condition | generated]`. Each
//! segment has its own intra-segment mode, and a single cross-segment mode
//! governs visibility between segments:
//!
//! * `Causal` cross mode is block-lower-triangular at segment granularity: a
//!   query may read every key of an earlier segment and no key of a later one.
//!   Condition positions therefore never observe generated tokens.
//! * `Bidirectional` cross mode opens every cross-segment pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three segments of a sequence, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Text,
    ImageCond,
    Generated,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Text, Segment::ImageCond, Segment::Generated];

    pub fn index(self) -> usize {
        match self {
            Segment::Text => 0,
            Segment::ImageCond => 1,
            Segment::Generated => 2,
        }
    }
}

/// Segment lengths of one concatenated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentLayout {
    text_len: usize,
    imgcond_len: usize,
    gen_len: usize,
}

impl SegmentLayout {
    pub fn new(text_len: usize, imgcond_len: usize, gen_len: usize) -> Result<Self> {
        if gen_len == 0 {
            return Err(Error::InvalidLayout(
                "the generated segment needs at least one token".into(),
            ));
        }
        Ok(Self {
            text_len,
            imgcond_len,
            gen_len,
        })
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn imgcond_len(&self) -> usize {
        self.imgcond_len
    }

    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    /// Number of condition tokens (text + image-condition).
    pub fn cond_len(&self) -> usize {
        self.text_len + self.imgcond_len
    }

    pub fn total_len(&self) -> usize {
        self.text_len + self.imgcond_len + self.gen_len
    }

    pub fn len_of(&self, segment: Segment) -> usize {
        match segment {
            Segment::Text => self.text_len,
            Segment::ImageCond => self.imgcond_len,
            Segment::Generated => self.gen_len,
        }
    }

    /// Half-open position range occupied by `segment`.
    pub fn range_of(&self, segment: Segment) -> std::ops::Range<usize> {
        match segment {
            Segment::Text => 0..self.text_len,
            Segment::ImageCond => self.text_len..self.cond_len(),
            Segment::Generated => self.cond_len()..self.total_len(),
        }
    }

    /// Segment containing position `pos`. Panics when `pos >= total_len()`.
    pub fn segment_of(&self, pos: usize) -> Segment {
        assert!(pos < self.total_len(), "position {pos} outside layout");
        if pos < self.text_len {
            Segment::Text
        } else if pos < self.cond_len() {
            Segment::ImageCond
        } else {
            Segment::Generated
        }
    }
}

impl fmt::Display for SegmentLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.text_len, self.imgcond_len, self.gen_len)
    }
}

impl FromStr for SegmentLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidLayout(format!(
                "expected `text,imgcond,gen`, got `{s}`"
            )));
        }
        let mut lens = [0usize; 3];
        for (slot, part) in lens.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| Error::InvalidLayout(format!("`{part}` is not a length")))?;
        }
        SegmentLayout::new(lens[0], lens[1], lens[2])
    }
}

/// How positions inside one scope may see each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntraMode {
    Causal,
    Bidirectional,
}

impl IntraMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IntraMode::Causal => "causal",
            IntraMode::Bidirectional => "bidirectional",
        }
    }
}

impl fmt::Display for IntraMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntraMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "causal" | "c" => Ok(IntraMode::Causal),
            "bidirectional" | "bi" | "b" => Ok(IntraMode::Bidirectional),
            other => Err(Error::InvalidPolicy(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Per-segment intra modes plus the cross-segment mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionPolicy {
    pub text_mode: IntraMode,
    pub imgcond_mode: IntraMode,
    pub gen_mode: IntraMode,
    pub cross_mode: IntraMode,
}

impl AttentionPolicy {
    /// Causal text, bidirectional image condition and generated tokens, and
    /// group-causal visibility across segments.
    pub const PAPER_DEFAULT: AttentionPolicy = AttentionPolicy {
        text_mode: IntraMode::Causal,
        imgcond_mode: IntraMode::Bidirectional,
        gen_mode: IntraMode::Bidirectional,
        cross_mode: IntraMode::Causal,
    };

    pub fn new(
        text_mode: IntraMode,
        imgcond_mode: IntraMode,
        gen_mode: IntraMode,
        cross_mode: IntraMode,
    ) -> Self {
        Self {
            text_mode,
            imgcond_mode,
            gen_mode,
            cross_mode,
        }
    }

    pub fn intra_mode(&self, segment: Segment) -> IntraMode {
        match segment {
            Segment::Text => self.text_mode,
            Segment::ImageCond => self.imgcond_mode,
            Segment::Generated => self.gen_mode,
        }
    }

    /// Every combination of the four modes, in a fixed order.
    pub fn all() -> impl Iterator<Item = AttentionPolicy> {
        const MODES: [IntraMode; 2] = [IntraMode::Causal, IntraMode::Bidirectional];
        (0..16usize).map(|bits| {
            AttentionPolicy::new(
                MODES[(bits >> 3) & 1],
                MODES[(bits >> 2) & 1],
                MODES[(bits >> 1) & 1],
                MODES[bits & 1],
            )
        })
    }

    /// Table row (1..=8) this policy corresponds to, if any. The generated
    /// segment must be bidirectional for the policy to appear in the table.
    pub fn ablation_option(&self) -> Option<u8> {
        if self.gen_mode != IntraMode::Bidirectional {
            return None;
        }
        let bit = |m: IntraMode| u8::from(m == IntraMode::Bidirectional);
        Some(1 + 4 * bit(self.text_mode) + 2 * bit(self.imgcond_mode) + bit(self.cross_mode))
    }
}

impl Default for AttentionPolicy {
    fn default() -> Self {
        Self::PAPER_DEFAULT
    }
}

impl fmt::Display for AttentionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.text_mode, self.imgcond_mode, self.gen_mode, self.cross_mode
        )
    }
}

impl FromStr for AttentionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let modes = s
            .split(',')
            .map(IntraMode::from_str)
            .collect::<Result<Vec<_>>>()?;
        match modes.as_slice() {
            [t, c, g, x] => Ok(AttentionPolicy::new(*t, *c, *g, *x)),
            _ => Err(Error::InvalidPolicy(format!(
                "expected `text,imgcond,gen,cross`, got `{s}`"
            ))),
        }
    }
}

/// Policy for ablation row `option` (1..=8). Rows enumerate
/// (text, image-condition, cross) over {causal, bidirectional} with text as the
/// slowest-varying column; the generated segment is always bidirectional.
pub fn ablation_policy(option: u8) -> Result<AttentionPolicy> {
    if !(1..=8).contains(&option) {
        return Err(Error::InvalidPolicy(format!(
            "ablation option must be in 1..=8, got {option}"
        )));
    }
    let bits = option - 1;
    let mode = |bit: u8| {
        if bit == 0 {
            IntraMode::Causal
        } else {
            IntraMode::Bidirectional
        }
    };
    Ok(AttentionPolicy::new(
        mode((bits >> 2) & 1),
        mode((bits >> 1) & 1),
        IntraMode::Bidirectional,
        mode(bits & 1),
    ))
}

/// Square boolean matrix, `allow[q][k]` = query `q` may attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                allow.push(f(q, k));
            }
        }
        Self { n, allow }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidLayout("mask rows must form a square matrix".into()));
        }
        Ok(Self {
            n,
            allow: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |q, k| q == k)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.n..(q + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Submatrix on the given positions (rows and columns), in the given order.
    pub fn select(&self, positions: &[usize]) -> AttentionMask {
        AttentionMask::from_fn(positions.len(), |q, k| self.get(positions[q], positions[k]))
    }

    /// Additive attention bias: 0 where allowed, `blocked` elsewhere.
    pub fn to_bias(&self, blocked: f64) -> Vec<f64> {
        self.allow
            .iter()
            .map(|&a| if a { 0.0 } else { blocked })
            .collect()
    }

    /// Rows rendered as `1`/`0` strings.
    pub fn dump_rows(&self) -> Vec<String> {
        (0..self.n)
            .map(|q| {
                self.row(q)
                    .iter()
                    .map(|&a| if a { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

/// Mask of a single segment of length `n` under `mode`.
pub fn intra_mask(n: usize, mode: IntraMode) -> AttentionMask {
    match mode {
        IntraMode::Causal => AttentionMask::from_fn(n, |q, k| k <= q),
        IntraMode::Bidirectional => AttentionMask::from_fn(n, |_, _| true),
    }
}

/// Full-sequence mask for `layout` under `policy`.
pub fn build_attention_mask(layout: &SegmentLayout, policy: &AttentionPolicy) -> AttentionMask {
    let n = layout.total_len();
    let mut allow = vec![false; n * n];
    for qs in Segment::ALL {
        let q_range = layout.range_of(qs);
        for ks in Segment::ALL {
            let k_range = layout.range_of(ks);
            if qs == ks {
                let block = intra_mask(q_range.len(), policy.intra_mode(qs));
                for (i, q) in q_range.clone().enumerate() {
                    for (j, k) in k_range.clone().enumerate() {
                        allow[q * n + k] = block.get(i, j);
                    }
                }
            } else {
                let open = match policy.cross_mode {
                    IntraMode::Bidirectional => true,
                    IntraMode::Causal => ks < qs,
                };
                if open {
                    for q in q_range.clone() {
                        allow[q * n + k_range.start..q * n + k_range.end].fill(true);
                    }
                }
            }
        }
    }
    AttentionMask { n, allow }
}

/// Influence through `depth` stacked attention layers: entry `[q][k]` is true
/// iff information at input `k` can reach output `q`. Self-loops are always
/// included, so the result is monotone in `depth`.
pub fn reachability(mask: &AttentionMask, depth: usize) -> Result<AttentionMask> {
    if depth == 0 {
        return Err(Error::InvalidArgument("reachability depth must be at least 1".into()));
    }
    let n = mask.n;
    let step = AttentionMask::from_fn(n, |q, k| q == k || mask.get(q, k));
    let mut reach = step.clone();
    for _ in 1..depth {
        let prev = reach;
        reach = AttentionMask::from_fn(n, |q, k| (0..n).any(|m| step.get(q, m) && prev.get(m, k)));
        if reach == prev {
            break;
        }
    }
    Ok(reach)
}

/// Text header line of the mask dump format.
pub fn dump_header(layout: &SegmentLayout, policy: &AttentionPolicy) -> String {
    format!("layout={layout} policy={policy}")
}

/// Header line followed by one `1`/`0` line per query row.
pub fn dump_mask(layout: &SegmentLayout, policy: &AttentionPolicy, mask: &AttentionMask) -> String {
    let mut out = dump_header(layout, policy);
    out.push('\n');
    for row in mask.dump_rows() {
        out.push_str(&row);
        out.push('\n');
    }
    out
}
