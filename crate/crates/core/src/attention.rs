//! Head-averaged attention maps and the `ECPATT01` file format.
//!
//! A map stores the post-softmax rows of the scoring queries over the whole
//! active token sequence, plus a table locating each visual token in the
//! sequence. File layout (little-endian):
//!
//! ```text
//! magic "ECPATT01"
//! u32 layer, u32 n_queries, u32 n_tokens, u32 n_visual
//! f32 x (n_queries * n_tokens)       query rows, row-major
//! (u32 position, u32 frame_index, u32 token_index) x n_visual
//! ```
//!
//! The stored rows are taken to be the last `n_queries` positions of the
//! sequence, i.e. the text tokens that follow the visual block.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ATTENTION_MAGIC: &[u8; 8] = b"ECPATT01";
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Where one visual token sits in the active sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VisualSlot {
    pub position: u32,
    pub frame_index: u32,
    pub token_index: u32,
}

/// Which stored query rows feed the importance readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySelection {
    /// Every stored text-token row.
    #[default]
    AllText,
    /// Only the final position.
    LastToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: u32,
    pub n_tokens: usize,
    pub rows: Vec<Vec<f64>>,
    pub query_positions: Vec<usize>,
    pub visual_index: Vec<VisualSlot>,
}

impl AttentionMap {
    pub fn new(
        layer: u32,
        n_tokens: usize,
        rows: Vec<Vec<f64>>,
        query_positions: Vec<usize>,
        visual_index: Vec<VisualSlot>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("attention map has no query rows"));
        }
        if rows.len() != query_positions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} query positions",
                rows.len(),
                query_positions.len()
            )));
        }
        for (q, row) in rows.iter().enumerate() {
            if row.len() != n_tokens {
                return Err(Error::DimensionMismatch(format!(
                    "query row {q} has {} entries, expected {n_tokens}",
                    row.len()
                )));
            }
            if row.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
                return Err(Error::Format(format!(
                    "query row {q} has a negative or non-finite score"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Format(format!("query row {q} sums to {sum}, not 1")));
            }
        }
        if query_positions.iter().any(|&p| p >= n_tokens) {
            return Err(Error::DimensionMismatch(
                "query position outside the sequence".into(),
            ));
        }
        let mut seen_pos = BTreeSet::new();
        let mut seen_tok = BTreeSet::new();
        for s in &visual_index {
            if s.position as usize >= n_tokens {
                return Err(Error::DimensionMismatch(format!(
                    "visual slot at position {} outside {n_tokens}-token sequence",
                    s.position
                )));
            }
            if !seen_pos.insert(s.position) || !seen_tok.insert((s.frame_index, s.token_index)) {
                return Err(Error::Format(format!("duplicate visual slot {s:?}")));
            }
        }
        Ok(Self {
            layer,
            n_tokens,
            rows,
            query_positions,
            visual_index,
        })
    }

    pub fn frames(&self) -> BTreeSet<u32> {
        self.visual_index.iter().map(|s| s.frame_index).collect()
    }

    /// Sequence positions not occupied by visual tokens.
    pub fn text_positions(&self) -> Vec<usize> {
        let visual: BTreeSet<usize> = self
            .visual_index
            .iter()
            .map(|s| s.position as usize)
            .collect();
        (0..self.n_tokens).filter(|p| !visual.contains(p)).collect()
    }

    pub fn position_of(&self, frame_index: u32, token_index: u32) -> Option<usize> {
        self.visual_index
            .iter()
            .find(|s| s.frame_index == frame_index && s.token_index == token_index)
            .map(|s| s.position as usize)
    }

    pub fn selected_rows(&self, selection: QuerySelection) -> Vec<&[f64]> {
        match selection {
            QuerySelection::AllText => self.rows.iter().map(Vec::as_slice).collect(),
            QuerySelection::LastToken => {
                let last = self
                    .query_positions
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &p)| p)
                    .map(|(i, _)| i)
                    .expect("non-empty rows");
                vec![self.rows[last].as_slice()]
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ATTENTION_MAGIC);
        for v in [
            self.layer,
            self.rows.len() as u32,
            self.n_tokens as u32,
            self.visual_index.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for row in &self.rows {
            for &a in row {
                out.extend_from_slice(&(a as f32).to_le_bytes());
            }
        }
        for s in &self.visual_index {
            for v in [s.position, s.frame_index, s.token_index] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != ATTENTION_MAGIC {
            return Err(Error::Format("missing ECPATT01 header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let layer = word(8);
        let n_queries = word(12) as usize;
        let n_tokens = word(16) as usize;
        let n_visual = word(20) as usize;
        let expected = 24 + 4 * n_queries * n_tokens + 12 * n_visual;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "attention file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        if n_queries > n_tokens {
            return Err(Error::Format(format!(
                "{n_queries} queries exceed {n_tokens} tokens"
            )));
        }
        let mut off = 24;
        let mut rows = Vec::with_capacity(n_queries);
        for _ in 0..n_queries {
            let row = bytes[off..off + 4 * n_tokens]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            rows.push(row);
            off += 4 * n_tokens;
        }
        let visual_index = (0..n_visual)
            .map(|i| {
                let b = off + 12 * i;
                VisualSlot {
                    position: word(b),
                    frame_index: word(b + 4),
                    token_index: word(b + 8),
                }
            })
            .collect();
        let query_positions = (n_tokens - n_queries..n_tokens).collect();
        Self::new(layer, n_tokens, rows, query_positions, visual_index)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| e.in_stage("load-attention", path.display().to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map() -> AttentionMap {
        let rows = vec![vec![0.1, 0.3, 0.2, 0.4], vec![0.3, 0.1, 0.5, 0.1]];
        let slots = vec![
            VisualSlot {
                position: 0,
                frame_index: 0,
                token_index: 0,
            },
            VisualSlot {
                position: 1,
                frame_index: 0,
                token_index: 1,
            },
        ];
        AttentionMap::new(4, 4, rows, vec![2, 3], slots).unwrap()
    }

    #[test]
    fn rejects_rows_that_do_not_sum_to_one() {
        let err = AttentionMap::new(0, 2, vec![vec![0.5, 0.4]], vec![1], vec![]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rejects_duplicate_slots() {
        let slot = VisualSlot {
            position: 0,
            frame_index: 0,
            token_index: 0,
        };
        assert!(AttentionMap::new(0, 2, vec![vec![0.5, 0.5]], vec![1], vec![slot, slot]).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let m = small_map();
        let back = AttentionMap::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.layer, 4);
        assert_eq!(back.visual_index, m.visual_index);
        assert_eq!(back.query_positions, vec![2, 3]);
        for (a, b) in back.rows.iter().flatten().zip(m.rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn last_token_selection_picks_final_row() {
        let m = small_map();
        assert_eq!(
            m.selected_rows(QuerySelection::LastToken),
            vec![&[0.3, 0.1, 0.5, 0.1][..]]
        );
        assert_eq!(m.selected_rows(QuerySelection::AllText).len(), 2);
        assert_eq!(m.text_positions(), vec![2, 3]);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut bytes = small_map().to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(AttentionMap::from_bytes(&bytes).is_err());
    }
}
