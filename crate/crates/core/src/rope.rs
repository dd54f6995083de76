//! Rotary position embeddings: vanilla 1D RoPE and M-RoPE, with optional
//! partial retention of rotary subspaces.
//!
//! Subspace `k` is the dimension pair `[2k, 2k+1]` of a head vector and
//! rotates at `θ_k = β^(−2k/d_head)`. Under M-RoPE the subspaces are split
//! into temporal / height / width groups, each driven by its own position id.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeKind {
    #[serde(rename = "vanilla_1d")]
    Vanilla1d,
    Mrope,
}

/// Which position id drives a subspace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Temporal,
    Height,
    Width,
}

/// `(t, h, w)` position triple. Text tokens carry `t == h == w`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub t: u64,
    pub h: u64,
    pub w: u64,
}

impl Position {
    pub fn uniform(i: u64) -> Self {
        Self { t: i, h: i, w: i }
    }

    pub fn shifted(self, s: u64) -> Self {
        Self {
            t: self.t + s,
            h: self.h + s,
            w: self.w + s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeSpec {
    pub kind: RopeKind,
    pub base: f64,
    pub d_head: usize,
}

impl RopeSpec {
    pub fn new(kind: RopeKind, base: f64, d_head: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::Config(format!("d_head {d_head} must be even and positive")));
        }
        if kind == RopeKind::Mrope && !d_head.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "M-RoPE needs d_head divisible by 16, got {d_head}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::Config(format!("rope base {base} must be > 1")));
        }
        Ok(Self { kind, base, d_head })
    }

    pub fn n_subspaces(&self) -> usize {
        self.d_head / 2
    }

    /// `θ_k = exp(−2k·ln β / d_head)`.
    pub fn theta(&self, k: usize) -> f64 {
        (-2.0 * k as f64 * self.base.ln() / self.d_head as f64).exp()
    }

    /// Subspace groups are `[0, d/8)`, `[d/8, 5d/16)`, `[5d/16, d/2)` under
    /// M-RoPE; everything is temporal under vanilla RoPE.
    pub fn axis_of(&self, k: usize) -> Axis {
        match self.kind {
            RopeKind::Vanilla1d => Axis::Temporal,
            RopeKind::Mrope => {
                if k < self.d_head / 8 {
                    Axis::Temporal
                } else if k < 5 * self.d_head / 16 {
                    Axis::Height
                } else {
                    Axis::Width
                }
            }
        }
    }

    pub fn angle(&self, k: usize, pos: Position) -> f64 {
        let p = match self.axis_of(k) {
            Axis::Temporal => pos.t,
            Axis::Height => pos.h,
            Axis::Width => pos.w,
        };
        p as f64 * self.theta(k)
    }

    /// Rotate chunk `j` of `vec` by the angle of frequency `freqs[j]`.
    ///
    /// This is the rope-first layout used after conversion, where the
    /// retained subspaces sit at the front of the head vector but keep their
    /// original frequencies. Chunks past `freqs.len()` are left untouched.
    pub fn rotate_chunks(&self, vec: &mut [f64], pos: Position, freqs: &[usize], inverse: bool) {
        debug_assert!(2 * freqs.len() <= vec.len());
        for (j, &k) in freqs.iter().enumerate() {
            let mut angle = self.angle(k, pos);
            if angle == 0.0 {
                continue;
            }
            if inverse {
                angle = -angle;
            }
            let (sin, cos) = angle.sin_cos();
            let (x0, x1) = (vec[2 * j], vec[2 * j + 1]);
            vec[2 * j] = x0 * cos - x1 * sin;
            vec[2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
}

/// Set of subspaces that keep their rotation.
#[derive(Clone, Copy, Debug)]
pub enum Retained<'a> {
    All,
    Subset(&'a [usize]),
}

impl Retained<'_> {
    fn check(&self, spec: &RopeSpec) -> Result<()> {
        if let Retained::Subset(s) = self {
            if let Some(k) = s.iter().find(|&&k| k >= spec.n_subspaces()) {
                return Err(Error::InvalidArgument(format!(
                    "retained subspace {k} out of range [0, {})",
                    spec.n_subspaces()
                )));
            }
        }
        Ok(())
    }

    fn contains(&self, k: usize) -> bool {
        match self {
            Retained::All => true,
            Retained::Subset(s) => s.contains(&k),
        }
    }
}

/// Rotate the retained subspaces of `vec` in place (original layout:
/// subspace `k` lives at `[2k, 2k+1]`); the rest pass through as NoPE.
pub fn apply_rope(spec: &RopeSpec, vec: &[f64], pos: Position, retained: Retained<'_>) -> Result<Vec<f64>> {
    if vec.len() != spec.d_head {
        return Err(Error::Shape(format!(
            "head vector has {} dims, expected {}",
            vec.len(),
            spec.d_head
        )));
    }
    retained.check(spec)?;
    let mut out = vec.to_vec();
    for k in 0..spec.n_subspaces() {
        if !retained.contains(k) {
            continue;
        }
        let angle = spec.angle(k, pos);
        if angle == 0.0 {
            continue;
        }
        let (sin, cos) = angle.sin_cos();
        let (x0, x1) = (out[2 * k], out[2 * k + 1]);
        out[2 * k] = x0 * cos - x1 * sin;
        out[2 * k + 1] = x0 * sin + x1 * cos;
    }
    Ok(out)
}

/// Attention logit (unscaled) between a rotated query and rotated key.
pub fn relative_score(
    spec: &RopeSpec,
    q: &[f64],
    k: &[f64],
    pos_q: Position,
    pos_k: Position,
    retained: Retained<'_>,
) -> Result<f64> {
    let rq = apply_rope(spec, q, pos_q, retained)?;
    let rk = apply_rope(spec, k, pos_k, retained)?;
    Ok(crate::numerics::dot(&rq, &rk))
}

/// `(frame, row, col)` cell of a visual grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// A contiguous run of tokens in a multimodal sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text { len: usize },
    /// An image (`frames == 1`) or video; `cells` lists one grid cell per
    /// token, in token order.
    Visual {
        frames: usize,
        rows: usize,
        cols: usize,
        cells: Vec<GridCell>,
    },
}

impl Segment {
    pub fn text(len: usize) -> Self {
        Segment::Text { len }
    }

    /// Raster-ordered image grid.
    pub fn image(rows: usize, cols: usize) -> Self {
        Self::video(1, rows, cols)
    }

    /// Frame-major, raster-ordered video grid.
    pub fn video(frames: usize, rows: usize, cols: usize) -> Self {
        let cells = (0..frames)
            .flat_map(|frame| {
                (0..rows).flat_map(move |row| (0..cols).map(move |col| GridCell { frame, row, col }))
            })
            .collect();
        Segment::Visual {
            frames,
            rows,
            cols,
            cells,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Segment::Text { len } => *len,
            Segment::Visual { cells, .. } => cells.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assign `(t, h, w)` ids and modality tags to a segment layout.
///
/// Vanilla RoPE flattens everything into one running index. Under M-RoPE
/// text gets `t = h = w = running index`; a visual segment starting at
/// running index `s` gets `t = s + frame` with 0-based `(row, col)`, after
/// which the running index advances by `max(frames, rows, cols)`.
pub fn assign_positions(kind: RopeKind, layout: &[Segment]) -> Result<(Vec<Position>, Vec<Modality>)> {
    let mut positions = Vec::new();
    let mut modality = Vec::new();
    let mut next: u64 = 0;
    for (si, seg) in layout.iter().enumerate() {
        match seg {
            Segment::Text { len } => {
                for _ in 0..*len {
                    positions.push(Position::uniform(next));
                    modality.push(Modality::Text);
                    next += 1;
                }
            }
            Segment::Visual {
                frames,
                rows,
                cols,
                cells,
            } => {
                let mut last_frame = 0;
                for cell in cells {
                    if cell.frame >= *frames || cell.row >= *rows || cell.col >= *cols {
                        return Err(Error::InvalidArgument(format!(
                            "segment {si}: cell {cell:?} outside {frames}x{rows}x{cols} grid"
                        )));
                    }
                    if cell.frame < last_frame {
                        return Err(Error::InvalidArgument(format!(
                            "segment {si}: frames must be contiguous and ascending"
                        )));
                    }
                    last_frame = cell.frame;
                }
                match kind {
                    RopeKind::Vanilla1d => {
                        for _ in cells {
                            positions.push(Position::uniform(next));
                            modality.push(Modality::Visual);
                            next += 1;
                        }
                    }
                    RopeKind::Mrope => {
                        for cell in cells {
                            positions.push(Position {
                                t: next + cell.frame as u64,
                                h: cell.row as u64,
                                w: cell.col as u64,
                            });
                            modality.push(Modality::Visual);
                        }
                        if !cells.is_empty() {
                            next += (*frames).max(*rows).max(*cols) as u64;
                        }
                    }
                }
            }
        }
    }
    Ok((positions, modality))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: RopeKind, d: usize) -> RopeSpec {
        RopeSpec::new(kind, 10000.0, d).unwrap()
    }

    #[test]
    fn mrope_group_boundaries() {
        let s = spec(RopeKind::Mrope, 128);
        assert_eq!(s.axis_of(15), Axis::Temporal);
        assert_eq!(s.axis_of(16), Axis::Height);
        assert_eq!(s.axis_of(39), Axis::Height);
        assert_eq!(s.axis_of(40), Axis::Width);
        assert_eq!(s.axis_of(63), Axis::Width);
        assert!(RopeSpec::new(RopeKind::Mrope, 10000.0, 8).is_err());
    }

    #[test]
    fn frequencies_decrease() {
        let s = spec(RopeKind::Vanilla1d, 16);
        assert_eq!(s.theta(0), 1.0);
        for k in 1..8 {
            assert!(s.theta(k) < s.theta(k - 1));
        }
    }

    #[test]
    fn direct_rotation_matrix_oracle() {
        let s = spec(RopeKind::Vanilla1d, 4);
        let v = [1.0, 0.0, 1.0, 0.0];
        let out = apply_rope(&s, &v, Position::uniform(1), Retained::All).unwrap();
        // chunk0 by 1 rad, chunk1 by 10000^(-1/2) rad, via explicit 2x2 products
        for (chunk, angle) in [(0usize, 1.0f64), (1, 10000f64.powf(-0.5))] {
            let r = [[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
            let x = [v[2 * chunk], v[2 * chunk + 1]];
            let expect = [r[0][0] * x[0] + r[0][1] * x[1], r[1][0] * x[0] + r[1][1] * x[1]];
            assert!((out[2 * chunk] - expect[0]).abs() < 1e-15);
            assert!((out[2 * chunk + 1] - expect[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_cases() {
        let s = spec(RopeKind::Mrope, 16);
        let v: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        assert_eq!(apply_rope(&s, &v, Position::default(), Retained::All).unwrap(), v);
        assert_eq!(
            apply_rope(&s, &v, Position { t: 3, h: 9, w: 1 }, Retained::Subset(&[])).unwrap(),
            v
        );
    }

    #[test]
    fn out_of_range_subspace() {
        let s = spec(RopeKind::Vanilla1d, 8);
        let v = vec![0.0; 8];
        assert!(apply_rope(&s, &v, Position::default(), Retained::Subset(&[4])).is_err());
        assert!(apply_rope(&s, &v[..6], Position::default(), Retained::All).is_err());
    }

    #[test]
    fn retained_subset_leaves_others_untouched() {
        let s = spec(RopeKind::Vanilla1d, 8);
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        let out = apply_rope(&s, &v, Position::uniform(7), Retained::Subset(&[1, 3])).unwrap();
        assert_eq!(&out[0..2], &v[0..2]);
        assert_eq!(&out[4..6], &v[4..6]);
        assert_ne!(&out[2..4], &v[2..4]);
    }

    #[test]
    fn rotate_chunks_matches_original_layout() {
        let s = spec(RopeKind::Mrope, 16);
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let pos = Position { t: 4, h: 2, w: 9 };
        let full = apply_rope(&s, &v, pos, Retained::All).unwrap();
        let mut chunked = v.clone();
        let freqs: Vec<usize> = (0..8).collect();
        s.rotate_chunks(&mut chunked, pos, &freqs, false);
        assert_eq!(full, chunked);
        s.rotate_chunks(&mut chunked, pos, &freqs, true);
        for (a, b) in chunked.iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn positions_for_text() {
        let (p, m) = assign_positions(RopeKind::Mrope, &[Segment::text(3)]).unwrap();
        assert_eq!(p, vec![Position::uniform(0), Position::uniform(1), Position::uniform(2)]);
        assert!(m.iter().all(|&x| x == Modality::Text));
    }

    #[test]
    fn positions_for_image_after_text() {
        let (p, m) = assign_positions(RopeKind::Mrope, &[Segment::text(1), Segment::image(2, 2), Segment::text(1)]).unwrap();
        assert_eq!(m[1..5], [Modality::Visual; 4]);
        let hw: Vec<(u64, u64)> = p[1..5].iter().map(|q| (q.h, q.w)).collect();
        assert_eq!(hw, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(p[1..5].iter().all(|q| q.t == 1));
        assert_eq!(p[5], Position::uniform(3));
    }

    #[test]
    fn positions_for_video() {
        let (p, _) = assign_positions(RopeKind::Mrope, &[Segment::video(2, 1, 1)]).unwrap();
        assert_eq!(p[1].t, p[0].t + 1);
    }

    #[test]
    fn vanilla_flattens_visual_tokens() {
        let (p, m) = assign_positions(RopeKind::Vanilla1d, &[Segment::text(1), Segment::image(1, 2)]).unwrap();
        assert_eq!(p, vec![Position::uniform(0), Position::uniform(1), Position::uniform(2)]);
        assert_eq!(m[2], Modality::Visual);
    }

    #[test]
    fn out_of_grid_cell_is_rejected() {
        let seg = Segment::Visual {
            frames: 1,
            rows: 2,
            cols: 2,
            cells: vec![GridCell { frame: 0, row: 2, col: 0 }],
        };
        assert!(assign_positions(RopeKind::Mrope, &[seg]).is_err());
    }
}
