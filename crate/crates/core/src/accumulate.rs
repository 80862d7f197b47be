//! Streaming direct and correlation images.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Frame, FrameKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccumulateError {
    #[error("frame has {found} pixels, accumulator expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("accumulator layouts differ: {0:?} vs {1:?}")]
    LayoutMismatch(Layout, Layout),
    #[error("need at least {needed} frames, have {have}")]
    InsufficientFrames { needed: u64, have: u64 },
}

/// Which products are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// All `N × N` products of one pixel line.
    Full { n: usize },
    /// Two pixel lines stored back to back in each frame (`n_a` then `n_b`
    /// values); only the `n_a × n_b` cross products are kept.
    Cross { n_a: usize, n_b: usize },
}

impl Layout {
    pub fn frame_len(&self) -> usize {
        match *self {
            Layout::Full { n } => n,
            Layout::Cross { n_a, n_b } => n_a + n_b,
        }
    }

    /// Shape of the correlation matrices.
    pub fn corr_shape(&self) -> (usize, usize) {
        match *self {
            Layout::Full { n } => (n, n),
            Layout::Cross { n_a, n_b } => (n_a, n_b),
        }
    }
}

/// Running sums over a frame stream.
///
/// In the full layout only the upper triangle of the same-frame products is
/// updated; [`MomentAccumulator::sum_xx`] mirrors it on read.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    layout: Layout,
    n_frames: u64,
    sum_x: Vec<f64>,
    sum_sq: Vec<f64>,
    sum_xx: Array2<f64>,
    sum_x_next: Array2<f64>,
    first_frame: Option<Vec<f64>>,
    last_frame: Option<Vec<f64>>,
    /// Scratch list of non-zero pixel indices.
    support: Vec<usize>,
    previous_support: Vec<usize>,
    /// Whether `support` describes `last_frame`.
    support_current: bool,
}

/// Equality of the accumulated statistics; scratch state is ignored.
impl PartialEq for MomentAccumulator {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.n_frames == other.n_frames
            && self.sum_x == other.sum_x
            && self.sum_sq == other.sum_sq
            && self.sum_xx == other.sum_xx
            && self.sum_x_next == other.sum_x_next
            && self.first_frame == other.first_frame
            && self.last_frame == other.last_frame
    }
}

impl MomentAccumulator {
    pub fn new(n: usize) -> Self {
        Self::with_layout(Layout::Full { n })
    }

    pub fn cross(n_a: usize, n_b: usize) -> Self {
        Self::with_layout(Layout::Cross { n_a, n_b })
    }

    pub fn with_layout(layout: Layout) -> Self {
        let len = layout.frame_len();
        Self {
            layout,
            n_frames: 0,
            sum_x: vec![0.0; len],
            sum_sq: vec![0.0; len],
            sum_xx: Array2::zeros(layout.corr_shape()),
            sum_x_next: Array2::zeros(layout.corr_shape()),
            first_frame: None,
            last_frame: None,
            support: Vec::new(),
            previous_support: Vec::new(),
            support_current: false,
        }
    }

    /// Rebuilds an accumulator from stored sums.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layout: Layout,
        n_frames: u64,
        sum_x: Vec<f64>,
        sum_sq: Vec<f64>,
        sum_xx: Array2<f64>,
        sum_x_next: Array2<f64>,
        first_frame: Option<Vec<f64>>,
        last_frame: Option<Vec<f64>>,
    ) -> Result<Self, AccumulateError> {
        let len = layout.frame_len();
        let shape = layout.corr_shape();
        let check = |found: usize| {
            if found == len {
                Ok(())
            } else {
                Err(AccumulateError::ShapeMismatch { expected: len, found })
            }
        };
        check(sum_x.len())?;
        check(sum_sq.len())?;
        for f in first_frame.iter().chain(last_frame.iter()) {
            check(f.len())?;
        }
        for m in [&sum_xx, &sum_x_next] {
            if m.dim() != shape {
                return Err(AccumulateError::ShapeMismatch {
                    expected: shape.0 * shape.1,
                    found: m.len(),
                });
            }
        }
        let mut sum_xx = sum_xx;
        if let Layout::Full { n } = layout {
            // Keep the internal upper-triangle convention.
            for i in 0..n {
                for j in 0..i {
                    sum_xx[[i, j]] = 0.0;
                }
            }
        }
        Ok(Self {
            layout,
            n_frames,
            sum_x,
            sum_sq,
            sum_xx,
            sum_x_next,
            first_frame,
            last_frame,
            support: Vec::new(),
            previous_support: Vec::new(),
            support_current: false,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n_frames(&self) -> u64 {
        self.n_frames
    }

    pub fn frame_len(&self) -> usize {
        self.layout.frame_len()
    }

    pub fn first_frame(&self) -> Option<&[f64]> {
        self.first_frame.as_deref()
    }

    pub fn last_frame(&self) -> Option<&[f64]> {
        self.last_frame.as_deref()
    }

    pub fn push(&mut self, frame: &Frame) -> Result<(), AccumulateError> {
        self.push_values(&frame.values, frame.kind == FrameKind::Binary)
    }

    /// Adds one frame given as raw values; `sparse` selects the path that
    /// skips zero pixels, which pays off for binary frames.
    pub fn push_values(&mut self, x: &[f64], sparse: bool) -> Result<(), AccumulateError> {
        let len = self.frame_len();
        if x.len() != len {
            return Err(AccumulateError::ShapeMismatch {
                expected: len,
                found: x.len(),
            });
        }
        for ((s, q), &v) in self.sum_x.iter_mut().zip(self.sum_sq.iter_mut()).zip(x) {
            *s += v;
            *q += v * v;
        }

        let previous_sparse = self.support_current;
        std::mem::swap(&mut self.support, &mut self.previous_support);
        self.support.clear();
        if sparse {
            self.support.extend(x.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i));
        }
        self.support_current = sparse;
        let both_sparse = sparse && previous_sparse;

        match self.layout {
            Layout::Full { n } => {
                if sparse {
                    for (a, &i) in self.support.iter().enumerate() {
                        let xi = x[i];
                        let mut row = self.sum_xx.row_mut(i);
                        for &j in &self.support[a..] {
                            row[j] += xi * x[j];
                        }
                    }
                } else {
                    for i in 0..n {
                        let xi = x[i];
                        let mut row = self.sum_xx.row_mut(i);
                        for j in i..n {
                            row[j] += xi * x[j];
                        }
                    }
                }
                if let Some(prev) = &self.last_frame {
                    outer_add(
                        &mut self.sum_x_next,
                        prev,
                        x,
                        both_sparse.then_some((&self.previous_support[..], &self.support[..])),
                    );
                }
            }
            Layout::Cross { n_a, .. } => {
                let (a, b) = x.split_at(n_a);
                let split = |s: &[usize]| -> (Vec<usize>, Vec<usize>) {
                    let k = s.partition_point(|&i| i < n_a);
                    (s[..k].to_vec(), s[k..].iter().map(|&j| j - n_a).collect())
                };
                let (sa, sb) = split(&self.support);
                outer_add(&mut self.sum_xx, a, b, sparse.then_some((&sa[..], &sb[..])));
                if let Some(prev) = &self.last_frame {
                    let (pa, _) = split(&self.previous_support);
                    outer_add(
                        &mut self.sum_x_next,
                        &prev[..n_a],
                        b,
                        both_sparse.then_some((&pa[..], &sb[..])),
                    );
                }
            }
        }

        if self.first_frame.is_none() {
            self.first_frame = Some(x.to_vec());
        }
        match &mut self.last_frame {
            Some(last) => last.copy_from_slice(x),
            None => self.last_frame = Some(x.to_vec()),
        }
        self.n_frames += 1;
        Ok(())
    }

    /// Combines `self` with `later`, whose frames follow `self`'s in the stream.
    pub fn merge(mut self, later: &MomentAccumulator) -> Result<Self, AccumulateError> {
        self.merge_in_place(later)?;
        Ok(self)
    }

    pub fn merge_in_place(&mut self, later: &MomentAccumulator) -> Result<(), AccumulateError> {
        if self.layout != later.layout {
            return Err(AccumulateError::LayoutMismatch(self.layout, later.layout));
        }
        if later.n_frames == 0 {
            return Ok(());
        }
        if self.n_frames == 0 {
            *self = later.clone();
            return Ok(());
        }
        for (a, b) in self.sum_x.iter_mut().zip(&later.sum_x) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&later.sum_sq) {
            *a += b;
        }
        self.sum_xx += &later.sum_xx;
        self.sum_x_next += &later.sum_x_next;
        if let (Some(last), Some(first)) = (&self.last_frame, &later.first_frame) {
            match self.layout {
                Layout::Full { .. } => outer_add(&mut self.sum_x_next, last, first, None),
                Layout::Cross { n_a, .. } => {
                    outer_add(&mut self.sum_x_next, &last[..n_a], &first[n_a..], None)
                }
            }
        }
        self.last_frame = later.last_frame.clone();
        self.support.clone_from(&later.support);
        self.support_current = later.support_current;
        self.n_frames += later.n_frames;
        Ok(())
    }

    pub fn sum_x(&self) -> &[f64] {
        &self.sum_x
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    /// Same-frame products `Σ_l x_i x_j` (symmetric in the full layout).
    pub fn sum_xx(&self) -> Array2<f64> {
        let mut m = self.sum_xx.clone();
        if let Layout::Full { n } = self.layout {
            for i in 0..n {
                for j in 0..i {
                    m[[i, j]] = m[[j, i]];
                }
            }
        }
        m
    }

    /// Successive-frame products `Σ_l x_i^(l) x_j^(l+1)`.
    pub fn sum_x_next(&self) -> &Array2<f64> {
        &self.sum_x_next
    }

    fn require(&self, needed: u64) -> Result<(), AccumulateError> {
        if self.n_frames < needed {
            Err(AccumulateError::InsufficientFrames {
                needed,
                have: self.n_frames,
            })
        } else {
            Ok(())
        }
    }

    /// `⟨x_i⟩` over every pixel of the frame.
    pub fn mean_direct(&self) -> Result<Vec<f64>, AccumulateError> {
        self.require(1)?;
        let m = self.n_frames as f64;
        Ok(self.sum_x.iter().map(|s| s / m).collect())
    }

    /// `⟨x_i²⟩`.
    pub fn mean_square(&self) -> Result<Vec<f64>, AccumulateError> {
        self.require(1)?;
        let m = self.n_frames as f64;
        Ok(self.sum_sq.iter().map(|s| s / m).collect())
    }

    /// Mean direct images of the row and column lines of the correlation
    /// matrix (identical in the full layout).
    pub fn mean_lines(&self) -> Result<(Vec<f64>, Vec<f64>), AccumulateError> {
        let mean = self.mean_direct()?;
        Ok(match self.layout {
            Layout::Full { .. } => (mean.clone(), mean),
            Layout::Cross { n_a, .. } => {
                let (a, b) = mean.split_at(n_a);
                (a.to_vec(), b.to_vec())
            }
        })
    }

    /// `⟨x_i x_j⟩` from same-frame products.
    pub fn mean_corr(&self) -> Result<Array2<f64>, AccumulateError> {
        self.require(1)?;
        Ok(self.sum_xx() / self.n_frames as f64)
    }

    /// `⟨x_i^(l) x_j^(l+1)⟩`, normalized by the `M − 1` available products.
    pub fn mean_corr_successive(&self) -> Result<Array2<f64>, AccumulateError> {
        self.require(2)?;
        Ok(&self.sum_x_next / (self.n_frames - 1) as f64)
    }
}

/// `m[i, j] += a[i] b[j]`, optionally restricted to non-zero index lists.
fn outer_add(
    m: &mut Array2<f64>,
    a: &[f64],
    b: &[f64],
    support: Option<(&[usize], &[usize])>,
) {
    match support {
        Some((sa, sb)) => {
            for &i in sa {
                let ai = a[i];
                let mut row = m.row_mut(i);
                for &j in sb {
                    row[j] += ai * b[j];
                }
            }
        }
        None => {
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let mut row = m.row_mut(i);
                for (r, &bj) in row.iter_mut().zip(b) {
                    *r += ai * bj;
                }
            }
        }
    }
}
