use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Embedding, ParameterRegistry};

use super::config::Variant;

/// Learnable per-grid-cell tokens appended after the frame tokens.
#[derive(Clone, Debug)]
pub struct FeatureMapTokens {
    pub table: Embedding,
}

impl FeatureMapTokens {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut rand_chacha::ChaCha8Rng, cells: usize, width: usize) -> Result<Self> {
        Ok(Self {
            table: Embedding::new(reg, rng, "fmt_tokens", cells, width)?,
        })
    }

    pub fn count(&self) -> usize {
        self.table.rows
    }
}

/// Origin of one row of the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenSlot {
    /// Grid cell `cell` (row-major) of frame `t`, oldest frame first.
    Frame { t: usize, cell: usize },
    /// Feature map token for grid cell `cell`.
    FeatureMap { cell: usize },
}

/// Bijection between sequence rows and token origins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    slots: Vec<TokenSlot>,
    frames: usize,
    cells: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, cells: usize, with_feature_map: bool) -> Self {
        let mut slots: Vec<TokenSlot> = (0..frames)
            .flat_map(|t| (0..cells).map(move |cell| TokenSlot::Frame { t, cell }))
            .collect();
        if with_feature_map {
            slots.extend((0..cells).map(|cell| TokenSlot::FeatureMap { cell }));
        }
        Self { slots, frames, cells }
    }

    /// Layout from an explicit slot list; used to audit selection against
    /// malformed layouts.
    pub fn from_slots(slots: Vec<TokenSlot>, frames: usize, cells: usize) -> Self {
        Self { slots, frames, cells }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn slots(&self) -> &[TokenSlot] {
        &self.slots
    }

    pub fn slot(&self, row: usize) -> TokenSlot {
        self.slots[row]
    }

    pub fn index_of(&self, slot: TokenSlot) -> Option<usize> {
        self.slots.iter().position(|&s| s == slot)
    }

    /// Rows feeding the heatmap head, ordered by grid cell. For `Avg` these
    /// are the current-frame rows; the average itself spans all frames.
    pub fn output_rows(&self, variant: Variant) -> Result<Vec<usize>> {
        let want = |cell| match variant {
            Variant::Fmt => TokenSlot::FeatureMap { cell },
            Variant::Slice | Variant::Avg => TokenSlot::Frame { t: self.frames.saturating_sub(1), cell },
        };
        (0..self.cells)
            .map(|cell| {
                self.index_of(want(cell))
                    .ok_or_else(|| Error::InvalidArgument(format!("token layout has no row for {:?}", want(cell))))
            })
            .collect()
    }

    /// Start of the contiguous, cell-ordered block selected by `variant`.
    fn contiguous_block(&self, variant: Variant) -> Result<usize> {
        let rows = self.output_rows(variant)?;
        let start = rows[0];
        if rows.iter().enumerate().any(|(i, &r)| r != start + i) {
            return Err(Error::InvalidArgument(format!("{variant} rows are not contiguous in the token layout")));
        }
        Ok(start)
    }

    fn frames_are_row_major(&self) -> bool {
        self.slots.len() >= self.frames * self.cells
            && self.slots[..self.frames * self.cells]
                .iter()
                .enumerate()
                .all(|(i, &s)| s == TokenSlot::Frame { t: i / self.cells, cell: i % self.cells })
    }
}

/// Token matrix `[S, d]` with its layout.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub layout: TokenLayout,
}

impl TokenSequence {
    /// Reduces the sequence to one `[cells, d]` token per grid cell.
    pub fn select(&self, tape: &mut Tape, variant: Variant) -> Result<Var> {
        let len = self.layout.len();
        if tape.shape(self.tokens).first() != Some(&len) {
            return Err(Error::Shape {
                context: "token sequence rows vs layout".into(),
                expected: vec![len],
                found: tape.shape(self.tokens).to_vec(),
            });
        }
        let cells = self.layout.cells();
        match variant {
            Variant::Fmt | Variant::Slice => {
                let start = self.layout.contiguous_block(variant)?;
                Ok(tape.slice(self.tokens, 0, start, start + cells)?)
            }
            Variant::Avg => {
                if !self.layout.frames_are_row_major() {
                    return Err(Error::InvalidArgument("frame tokens are not in time-major order".into()));
                }
                let frames = self.layout.frames();
                let d = tape.shape(self.tokens)[1];
                let x = tape.slice(self.tokens, 0, 0, frames * cells)?;
                let x = tape.reshape(x, &[frames, cells, d])?;
                Ok(tape.reduce_mean(x, 0)?)
            }
        }
    }
}

pub(crate) fn embed_frames(
    tape: &mut Tape,
    p: &BoundParams,
    features: Var,
    spatial: &Embedding,
    temporal: &Embedding,
    fmt: Option<&FeatureMapTokens>,
) -> Result<TokenSequence> {
    let shape = tape.shape(features).to_vec();
    let &[frames, d, h, w] = shape.as_slice() else {
        return Err(Error::Shape {
            context: "feature maps [T, d, h, w]".into(),
            expected: vec![temporal.rows, spatial.width, 0, 0],
            found: shape,
        });
    };
    let cells = h * w;
    if frames != temporal.rows || cells != spatial.rows || d != spatial.width {
        return Err(Error::Shape {
            context: "feature maps vs embedding tables".into(),
            expected: vec![temporal.rows, spatial.width, spatial.rows],
            found: vec![frames, d, cells],
        });
    }
    let x = tape.permute(features, &[0, 2, 3, 1])?;
    let x = tape.reshape(x, &[frames, cells, d])?;
    let sp = tape.reshape(spatial.all(p), &[1, cells, d])?;
    let sp = tape.broadcast(sp, &[frames, cells, d])?;
    let tm = tape.reshape(temporal.all(p), &[frames, 1, d])?;
    let tm = tape.broadcast(tm, &[frames, cells, d])?;
    let x = tape.add(x, sp)?;
    let x = tape.add(x, tm)?;
    let mut tokens = tape.reshape(x, &[frames * cells, d])?;
    if let Some(fmt) = fmt {
        let k = tape.add(fmt.table.all(p), spatial.all(p))?;
        tokens = tape.concat(&[tokens, k], 0)?;
    }
    Ok(TokenSequence {
        tokens,
        layout: TokenLayout::new(frames, cells, fmt.is_some()),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;

    proptest! {
        #[test]
        fn layout_is_a_bijection(frames in 1usize..6, cells in 1usize..20, fmt in any::<bool>()) {
            let layout = TokenLayout::new(frames, cells, fmt);
            prop_assert_eq!(layout.len(), frames * cells + if fmt { cells } else { 0 });
            for row in 0..layout.len() {
                prop_assert_eq!(layout.index_of(layout.slot(row)), Some(row));
            }
            let mut seen = std::collections::HashSet::new();
            prop_assert!(layout.slots().iter().all(|s| seen.insert(*s)));
        }

        #[test]
        fn slice_rows_belong_to_the_last_frame(frames in 1usize..6, cells in 1usize..20, fmt in any::<bool>()) {
            let layout = TokenLayout::new(frames, cells, fmt);
            for row in layout.output_rows(Variant::Slice).unwrap() {
                let last = matches!(layout.slot(row), TokenSlot::Frame { t, .. } if t == frames - 1);
                prop_assert!(last);
            }
            if fmt {
                for row in layout.output_rows(Variant::Fmt).unwrap() {
                    prop_assert!(row >= frames * cells);
                }
            }
        }
    }

    #[test]
    fn selection_picks_expected_rows() {
        let (frames, cells, d) = (3, 2, 2);
        let n = frames * cells + cells;
        let x = Tensor::from_fn(&[n, d], |i| i as f64);
        let mut tape = Tape::new();
        let tokens = tape.constant(&x);
        let seq = TokenSequence { tokens, layout: TokenLayout::new(frames, cells, true) };

        let fmt = seq.select(&mut tape, Variant::Fmt).unwrap();
        assert_eq!(tape.value(fmt), &[12.0, 13.0, 14.0, 15.0]);
        let slice = seq.select(&mut tape, Variant::Slice).unwrap();
        assert_eq!(tape.value(slice), &[8.0, 9.0, 10.0, 11.0]);
        let avg = seq.select(&mut tape, Variant::Avg).unwrap();
        assert_eq!(tape.value(avg), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn malformed_layouts_are_rejected() {
        let mut slots = TokenLayout::new(2, 2, false).slots().to_vec();
        slots.swap(2, 3);
        let layout = TokenLayout::from_slots(slots, 2, 2);
        let mut tape = Tape::new();
        let tokens = tape.constant(&Tensor::zeros(&[4, 3]));
        let seq = TokenSequence { tokens, layout };
        assert!(seq.select(&mut tape, Variant::Slice).is_err());
        assert!(seq.select(&mut tape, Variant::Avg).is_err());
        assert!(seq.select(&mut tape, Variant::Fmt).is_err());

        let short = TokenSequence { tokens, layout: TokenLayout::new(3, 2, false) };
        assert!(short.select(&mut tape, Variant::Slice).is_err());
    }
}
