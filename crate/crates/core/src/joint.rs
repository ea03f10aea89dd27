//! Joint four-directional skip scan over an image pair, its inverse merge and
//! the gated convolutional aggregator.
//!
//! Feature maps are `[H, W, C]`. The pair is concatenated twice: side by side
//! into the horizontal grid `X^h = [F_A | F_B]` (`[H, 2W, C]`) and stacked into
//! the vertical grid `X^v = [F_A ; F_B]` (`[2H, W, C]`). Direction `i` slices
//! its grid at offset `(m, n) = ((i-1) / 2, (i-1) % 2)` with step 2:
//!
//! | dir | grid       | traversal     | flipped |
//! |-----|------------|---------------|---------|
//! | 1   | horizontal | row-major     | no      |
//! | 2   | horizontal | row-major     | yes     |
//! | 3   | vertical   | column-major  | yes     |
//! | 4   | vertical   | column-major  | no      |
//!
//! so the four sequences partition the `2HW` joint positions and each holds
//! `HW / 2` tokens.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamStore, Scope};
use crate::ssm::{self, SsmBlockParams, SsmDims};
use crate::tensor::{Tensor, Var};

/// Skip step of the slicing.
pub const STEP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Grid {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Image {
    A,
    B,
}

/// A per-image position `(image, row, col)`.
pub type Cell = (Image, usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Direction {
    /// 1-based direction number.
    pub index: usize,
    pub grid: Grid,
    pub offset: (usize, usize),
    pub flip: bool,
    /// Joint-grid coordinates in sequence order, flip already applied.
    pub order: Vec<(usize, usize)>,
}

/// Index permutations for the scan and merge of one pair of `h x w` maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanLayout {
    pub h: usize,
    pub w: usize,
    pub dirs: [Direction; 4],
}

/// Start offsets of the four directions.
pub fn offsets() -> [(usize, usize); 4] {
    std::array::from_fn(|k| (k / STEP, k % STEP))
}

impl ScanLayout {
    /// Layout for `h x w` maps; both must be even.
    pub fn build(h: usize, w: usize) -> Result<Self> {
        Self::with_flips(h, w, [false, true, true, false])
    }

    /// The same four slices traversed forward only: row-major on the
    /// horizontal grid and column-major on the vertical grid, no reversal.
    pub fn forward_only(h: usize, w: usize) -> Result<Self> {
        Self::with_flips(h, w, [false; 4])
    }

    fn with_flips(h: usize, w: usize, flips: [bool; 4]) -> Result<Self> {
        if h == 0 || w == 0 || h % STEP != 0 || w % STEP != 0 {
            return Err(Error::invalid(
                "scan layout",
                format!("grid {h}x{w} must be nonzero and divisible by {STEP}"),
            ));
        }
        let offs = offsets();
        let dirs = std::array::from_fn(|k| {
            let (m, n) = offs[k];
            let grid = if k < 2 { Grid::Horizontal } else { Grid::Vertical };
            let (rows, cols) = match grid {
                Grid::Horizontal => (h, 2 * w),
                Grid::Vertical => (2 * h, w),
            };
            let rs: Vec<usize> = (m..rows).step_by(STEP).collect();
            let cs: Vec<usize> = (n..cols).step_by(STEP).collect();
            let mut order: Vec<(usize, usize)> = match grid {
                Grid::Horizontal => rs.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect(),
                Grid::Vertical => cs.iter().flat_map(|&c| rs.iter().map(move |&r| (r, c))).collect(),
            };
            if flips[k] {
                order.reverse();
            }
            Direction {
                index: k + 1,
                grid,
                offset: (m, n),
                flip: flips[k],
                order,
            }
        });
        Ok(Self { h, w, dirs })
    }

    /// The layout seen with the two images exchanged: every coordinate moves
    /// to the other image's half of its grid, sequence order unchanged.
    pub fn swap_images(&self) -> Self {
        let mut out = self.clone();
        for d in &mut out.dirs {
            for rc in &mut d.order {
                *rc = match d.grid {
                    Grid::Horizontal => (rc.0, (rc.1 + self.w) % (2 * self.w)),
                    Grid::Vertical => ((rc.0 + self.h) % (2 * self.h), rc.1),
                };
            }
        }
        out
    }

    /// A deliberately broken layout: the first token of direction 4 is
    /// redirected onto the first position of direction 3.
    pub fn with_merge_fault(&self) -> Self {
        let mut out = self.clone();
        let stolen = *out.dirs[2].order.last().unwrap();
        out.dirs[3].order[0] = stolen;
        out
    }

    /// Tokens per direction.
    pub fn seq_len(&self) -> usize {
        2 * self.h * self.w / (STEP * STEP)
    }

    /// Joint positions, `2hw`.
    pub fn tokens(&self) -> usize {
        2 * self.h * self.w
    }

    pub fn cell(&self, grid: Grid, (r, c): (usize, usize)) -> Cell {
        match grid {
            Grid::Horizontal if c < self.w => (Image::A, r, c),
            Grid::Horizontal => (Image::B, r, c - self.w),
            Grid::Vertical if r < self.h => (Image::A, r, c),
            Grid::Vertical => (Image::B, r - self.h, c),
        }
    }

    /// Per-image positions of direction `k` (0-based) in sequence order.
    pub fn cells(&self, k: usize) -> Vec<Cell> {
        let d = &self.dirs[k];
        d.order.iter().map(|&rc| self.cell(d.grid, rc)).collect()
    }

    fn grid_cols(&self, grid: Grid) -> usize {
        match grid {
            Grid::Horizontal => 2 * self.w,
            Grid::Vertical => self.w,
        }
    }

    fn flat_index(&self, k: usize) -> Vec<usize> {
        let d = &self.dirs[k];
        let cols = self.grid_cols(d.grid);
        d.order.iter().map(|&(r, c)| r * cols + c).collect()
    }

    /// Whether the four directions cover every joint position exactly once.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![0usize; self.tokens()];
        for k in 0..4 {
            for (img, r, c) in self.cells(k) {
                if r >= self.h || c >= self.w {
                    return false;
                }
                seen[cell_id(self.h, self.w, (img, r, c))] += 1;
            }
        }
        seen.iter().all(|&n| n == 1)
    }
}

/// Flat id of a per-image position: image A rows first, then image B.
pub fn cell_id(h: usize, w: usize, (img, r, c): Cell) -> usize {
    let base = if img == Image::A { 0 } else { h * w };
    base + r * w + c
}

impl fmt::Display for ScanLayout {
    /// One `dir i: (m,n) flip len [coords...]` line per direction, with
    /// joint-grid coordinates in sequence order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.dirs {
            let coords: Vec<String> = d.order.iter().map(|(r, c)| format!("({r},{c})")).collect();
            writeln!(
                f,
                "dir {}: ({},{}) {} {} [{}]",
                d.index,
                d.offset.0,
                d.offset.1,
                if d.flip { "flip" } else { "raw" },
                d.order.len(),
                coords.join(" ")
            )?;
        }
        Ok(())
    }
}

fn map_dims(op: &'static str, x: &Var<'_>) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// `(X^h, X^v)`: the pair side by side and stacked.
pub fn joint_concat<'g>(fa: &Var<'g>, fb: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (sa, sb) = (fa.shape(), fb.shape());
    if sa != sb || sa.len() != 3 {
        return Err(Error::shape("joint_concat", format!("{sa:?} vs {sb:?}")));
    }
    Ok((Var::concat(&[*fa, *fb], 1)?, Var::concat(&[*fa, *fb], 0)?))
}

/// The four directional sequences, each `[hw/2, C]`.
pub fn jego_scan<'g>(xh: &Var<'g>, xv: &Var<'g>, layout: &ScanLayout) -> Result<[Var<'g>; 4]> {
    let (h, w2, c) = map_dims("jego_scan", xh)?;
    let (h2, w, cv) = map_dims("jego_scan", xv)?;
    if h != layout.h || w2 != 2 * layout.w || h2 != 2 * layout.h || w != layout.w || c != cv {
        return Err(Error::shape(
            "jego_scan",
            format!("grids {:?} {:?} for a {}x{} layout", xh.shape(), xv.shape(), layout.h, layout.w),
        ));
    }
    let flat_h = xh.reshape(&[h * w2, c])?;
    let flat_v = xv.reshape(&[h2 * w, c])?;
    let mut out = Vec::with_capacity(4);
    for k in 0..4 {
        let src = match layout.dirs[k].grid {
            Grid::Horizontal => &flat_h,
            Grid::Vertical => &flat_v,
        };
        out.push(src.gather_rows(&layout.flat_index(k))?);
    }
    Ok(out.try_into().unwrap())
}

/// Inverse of [`jego_scan`]: every sequence goes back to its grid positions,
/// the horizontal grid is split by columns and the vertical one by rows, and
/// the two halves are summed per image.
pub fn jego_merge<'g>(seqs: &[Var<'g>; 4], layout: &ScanLayout) -> Result<(Var<'g>, Var<'g>)> {
    let (h, w) = (layout.h, layout.w);
    let c = match seqs[0].shape()[..] {
        [_, c] => c,
        ref s => return Err(Error::shape("jego_merge", format!("sequence shape {s:?}"))),
    };
    let mut grids: [Option<Var<'g>>; 2] = [None, None];
    for (k, seq) in seqs.iter().enumerate() {
        let n = layout.dirs[k].order.len();
        if seq.shape() != [n, c] {
            return Err(Error::shape(
                "jego_merge",
                format!("direction {} has {:?}, layout expects [{n}, {c}]", k + 1, seq.shape()),
            ));
        }
        let slot = (layout.dirs[k].grid == Grid::Vertical) as usize;
        let placed = seq.scatter_rows(&layout.flat_index(k), 2 * h * w)?;
        grids[slot] = Some(match grids[slot] {
            Some(acc) => acc.add(&placed)?,
            None => placed,
        });
    }
    let yh = grids[0].unwrap().reshape(&[h, 2 * w, c])?;
    let yv = grids[1].unwrap().reshape(&[2 * h, w, c])?;
    let fa = yh.narrow(1, 0, w)?.add(&yv.narrow(0, 0, h)?)?;
    let fb = yh.narrow(1, w, w)?.add(&yv.narrow(0, h, h)?)?;
    Ok((fa, fb))
}

/// Adds the three `3x3` convolutions of an aggregator under `prefix`.
pub fn init_aggregator<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) {
    for part in ["gate", "value", "out"] {
        let p = join(prefix, part);
        store.init_uniform(join(&p, "w"), &[3, 3, channels, channels], 9 * channels, rng);
        store.insert(join(&p, "b"), Tensor::zeros(&[channels]));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AggregatorParams<'g> {
    pub gate: (Var<'g>, Var<'g>),
    pub value: (Var<'g>, Var<'g>),
    pub out: (Var<'g>, Var<'g>),
}

impl<'g> AggregatorParams<'g> {
    pub fn bind(scope: &Scope<'_, 'g>) -> Result<Self> {
        let pair = |p: &str| -> Result<_> { Ok((scope.pp(p).get("w")?, scope.pp(p).get("b")?)) };
        Ok(Self {
            gate: pair("gate")?,
            value: pair("value")?,
            out: pair("out")?,
        })
    }
}

/// `conv_out(GELU(conv_gate(F)) * conv_value(F))` on one `[H, W, C]` map.
pub fn aggregate<'g>(f: &Var<'g>, p: &AggregatorParams<'g>) -> Result<Var<'g>> {
    let gate = f.conv2d(&p.gate.0, Some(&p.gate.1), 1)?.gelu();
    let value = f.conv2d(&p.value.0, Some(&p.value.1), 1)?;
    gate.mul(&value)?.conv2d(&p.out.0, Some(&p.out.1), 1)
}

/// Adds one joint layer under `prefix`: blocks `dir1..dir4` and `agg`.
pub fn init_layer<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: SsmDims, rng: &mut R) -> Result<()> {
    for i in 1..=4 {
        ssm::init_block(store, &join(prefix, &format!("dir{i}")), dims, rng)?;
    }
    init_aggregator(store, &join(prefix, "agg"), dims.model, rng);
    Ok(())
}

/// Output of one joint layer.
pub struct LayerOutput<'g> {
    pub fa: Var<'g>,
    pub fb: Var<'g>,
    /// Tokens pushed through the four sequence models.
    pub tokens: usize,
}

/// Zero-pads `[H, W, C]` at the bottom and right up to even extents.
fn pad_even<'g>(f: &Var<'g>) -> Result<Var<'g>> {
    let (h, w, c) = map_dims("pad", f)?;
    let g = f.graph();
    let mut out = *f;
    if w % 2 == 1 {
        out = Var::concat(&[out, g.constant(Tensor::zeros(&[h, 1, c]))], 1)?;
    }
    if h % 2 == 1 {
        out = Var::concat(&[out, g.constant(Tensor::zeros(&[1, w + w % 2, c]))], 0)?;
    }
    Ok(out)
}

/// Concat, scan, one sequence model per direction, merge, then `agg` on each
/// image. Odd maps are zero padded to even size and cropped afterwards.
pub fn joint_layer_with<'g>(
    fa: &Var<'g>,
    fb: &Var<'g>,
    layout: &ScanLayout,
    block: impl Fn(usize, &Var<'g>) -> Result<Var<'g>>,
    agg: impl Fn(&Var<'g>) -> Result<Var<'g>>,
) -> Result<LayerOutput<'g>> {
    let (h, w, _) = map_dims("joint_layer", fa)?;
    let (pa, pb) = (pad_even(fa)?, pad_even(fb)?);
    let (xh, xv) = joint_concat(&pa, &pb)?;
    let seqs = jego_scan(&xh, &xv, layout)?;
    let mut tokens = 0;
    let mut outs = Vec::with_capacity(4);
    for (k, s) in seqs.iter().enumerate() {
        tokens += s.shape()[0];
        outs.push(block(k, s)?);
    }
    let (ma, mb) = jego_merge(&outs.try_into().unwrap(), layout)?;
    let crop = |v: Var<'g>| -> Result<Var<'g>> {
        if (h, w) == (layout.h, layout.w) {
            Ok(v)
        } else {
            v.narrow(0, 0, h)?.narrow(1, 0, w)
        }
    };
    Ok(LayerOutput {
        fa: agg(&crop(ma)?)?,
        fb: agg(&crop(mb)?)?,
        tokens,
    })
}

/// Layout for `h x w` maps after padding to even extents.
pub fn padded_layout(h: usize, w: usize) -> Result<ScanLayout> {
    ScanLayout::build(h + h % 2, w + w % 2)
}

/// One joint layer with parameters under `scope` (`dir1..dir4`, `agg`).
pub fn joint_mamba_layer<'g>(fa: &Var<'g>, fb: &Var<'g>, scope: &Scope<'_, 'g>) -> Result<LayerOutput<'g>> {
    let (h, w, _) = map_dims("joint_mamba_layer", fa)?;
    let layout = padded_layout(h, w)?;
    let blocks: Vec<SsmBlockParams<'g>> = (1..=4)
        .map(|i| SsmBlockParams::bind(&scope.pp(&format!("dir{i}"))))
        .collect::<Result<_>>()?;
    let agg = AggregatorParams::bind(&scope.pp("agg"))?;
    joint_layer_with(
        fa,
        fb,
        &layout,
        |k, s| ssm::mamba_block(s, &blocks[k]),
        |f| aggregate(f, &agg),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{probe, GradCheck};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    const GRIDS: [usize; 4] = [2, 4, 6, 8];

    fn map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[h, w, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn offsets_follow_the_skip_pattern() {
        assert_eq!(offsets(), [(0, 0), (0, 1), (1, 0), (1, 1)]);
        let l = ScanLayout::build(4, 4).unwrap();
        let got: Vec<_> = l.dirs.iter().map(|d| d.offset).collect();
        assert_eq!(got, offsets());
    }

    #[test]
    fn sequence_lengths() {
        let l = ScanLayout::build(8, 8).unwrap();
        assert!(l.dirs.iter().all(|d| d.order.len() == 32));
        assert_eq!(l.dirs.iter().map(|d| d.order.len()).sum::<usize>(), 128);
        for h in GRIDS {
            for w in GRIDS {
                let l = ScanLayout::build(h, w).unwrap();
                assert!(l.dirs.iter().all(|d| d.order.len() == l.tokens() / 4));
            }
        }
    }

    #[test]
    fn two_by_two_enumeration() {
        use Image::{A, B};
        let l = ScanLayout::build(2, 2).unwrap();
        assert_eq!(l.cells(0), vec![(A, 0, 0), (B, 0, 0)]);
        assert_eq!(l.cells(1), vec![(B, 0, 1), (A, 0, 1)]);
        assert_eq!(l.cells(2), vec![(B, 1, 0), (A, 1, 0)]);
        assert_eq!(l.cells(3), vec![(A, 1, 1), (B, 1, 1)]);
    }

    #[test]
    fn rejects_odd_or_empty_grids() {
        assert!(ScanLayout::build(3, 4).is_err());
        assert!(ScanLayout::build(0, 4).is_err());
    }

    #[test]
    fn directions_partition_the_joint_grid() {
        for h in GRIDS {
            for w in GRIDS {
                let l = ScanLayout::build(h, w).unwrap();
                assert!(l.is_partition(), "{h}x{w}");
                let sets: Vec<BTreeSet<Cell>> = (0..4).map(|k| l.cells(k).into_iter().collect()).collect();
                for i in 0..4 {
                    for j in i + 1..4 {
                        assert!(sets[i].is_disjoint(&sets[j]));
                    }
                }
                assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), 2 * h * w);
            }
        }
    }

    #[test]
    fn merge_inverts_scan() {
        for h in GRIDS {
            for w in GRIDS {
                let l = ScanLayout::build(h, w).unwrap();
                let g = Graph::new();
                let (a, b) = (map(h, w, 3, 1), map(h, w, 3, 2));
                let (xh, xv) = joint_concat(&g.constant(a.clone()), &g.constant(b.clone())).unwrap();
                let seqs = jego_scan(&xh, &xv, &l).unwrap();
                let (ma, mb) = jego_merge(&seqs, &l).unwrap();
                assert_eq!(*ma.value(), a);
                assert_eq!(*mb.value(), b);
            }
        }
    }

    #[test]
    fn concat_shapes_and_inverse() {
        let g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 1, 1], 1.0));
        let b = g.constant(Tensor::full(&[1, 1, 1], 2.0));
        let (xh, xv) = joint_concat(&a, &b).unwrap();
        assert_eq!(xh.shape(), [1, 2, 1]);
        assert_eq!(xh.value().data(), &[1.0, 2.0]);
        assert_eq!(xv.shape(), [2, 1, 1]);
        assert_eq!(xv.value().data(), &[1.0, 2.0]);

        let (fa, fb) = (map(4, 6, 2, 3), map(4, 6, 2, 4));
        let (xh, xv) = joint_concat(&g.constant(fa.clone()), &g.constant(fb.clone())).unwrap();
        assert_eq!(xh.shape(), [4, 12, 2]);
        assert_eq!(xv.shape(), [8, 6, 2]);
        assert_eq!(*xh.narrow(1, 0, 6).unwrap().value(), fa);
        assert_eq!(*xh.narrow(1, 6, 6).unwrap().value(), fb);
        assert!(joint_concat(&g.constant(fa), &g.constant(map(4, 4, 2, 0))).is_err());
    }

    #[test]
    fn scan_gathers_the_enumerated_cells() {
        let g = Graph::new();
        // value = 100 * image + 10 * row + col
        let tag = |img: f64| {
            let d = (0..4).map(|i| 100.0 * img + 10.0 * (i / 2) as f64 + (i % 2) as f64).collect();
            Tensor::new(&[2, 2, 1], d).unwrap()
        };
        let (xh, xv) = joint_concat(&g.constant(tag(0.0)), &g.constant(tag(1.0))).unwrap();
        let s = jego_scan(&xh, &xv, &ScanLayout::build(2, 2).unwrap()).unwrap();
        assert_eq!(s[0].value().data(), &[0.0, 100.0]);
        assert_eq!(s[1].value().data(), &[101.0, 1.0]);
        assert_eq!(s[2].value().data(), &[110.0, 10.0]);
        assert_eq!(s[3].value().data(), &[11.0, 111.0]);
    }

    #[test]
    fn constant_maps_give_constant_sequences() {
        let g = Graph::new();
        let f = g.constant(Tensor::full(&[4, 6, 2], 0.5));
        let (xh, xv) = joint_concat(&f, &f).unwrap();
        let l = ScanLayout::build(4, 6).unwrap();
        let seqs = jego_scan(&xh, &xv, &l).unwrap();
        assert!(seqs.iter().all(|s| s.value().data().iter().all(|&v| v == 0.5)));
        assert_eq!(seqs.iter().map(|s| s.shape()[0]).sum::<usize>(), 48);
    }

    #[test]
    fn merge_of_zero_and_of_one_token() {
        let l = ScanLayout::build(4, 4).unwrap();
        let g = Graph::new();
        let zeros: [Var<'_>; 4] = std::array::from_fn(|_| g.constant(Tensor::zeros(&[8, 2])));
        let (a, b) = jego_merge(&zeros, &l).unwrap();
        assert!(a.value().data().iter().chain(b.value().data()).all(|&v| v == 0.0));

        for t in 0..8 {
            let mut seqs = zeros;
            let mut s3 = Tensor::zeros(&[8, 2]);
            s3.set(&[t, 1], 7.0);
            seqs[2] = g.constant(s3);
            let (a, b) = jego_merge(&seqs, &l).unwrap();
            let (img, r, c) = l.cells(2)[t];
            let mut expect_a = Tensor::zeros(&[4, 4, 2]);
            let mut expect_b = Tensor::zeros(&[4, 4, 2]);
            match img {
                Image::A => expect_a.set(&[r, c, 1], 7.0),
                Image::B => expect_b.set(&[r, c, 1], 7.0),
            }
            assert_eq!(*a.value(), expect_a);
            assert_eq!(*b.value(), expect_b);
        }
    }

    #[test]
    fn merge_rejects_wrong_lengths() {
        let l = ScanLayout::build(4, 4).unwrap();
        let g = Graph::new();
        let mut seqs: [Var<'_>; 4] = std::array::from_fn(|_| g.constant(Tensor::zeros(&[8, 2])));
        seqs[1] = g.constant(Tensor::zeros(&[7, 2]));
        assert!(jego_merge(&seqs, &l).is_err());
    }

    #[test]
    fn images_alternate_within_each_scanned_row() {
        for h in GRIDS {
            for w in GRIDS {
                let l = ScanLayout::build(h, w).unwrap();
                let cells = l.cells(0);
                let mut run = 1;
                let mut longest = 1;
                for pair in cells.windows(2) {
                    run = if pair[0].0 == pair[1].0 { run + 1 } else { 1 };
                    longest = longest.max(run);
                }
                assert!(longest <= w / STEP, "{h}x{w}: run {longest}");
                let changes = cells.windows(2).filter(|p| p[0].0 != p[1].0).count();
                assert!(changes >= h / STEP);
            }
        }
    }

    #[test]
    fn sequence_ends_are_balanced() {
        for h in GRIDS {
            for w in GRIDS {
                let l = ScanLayout::build(h, w).unwrap();
                let classes: BTreeSet<(usize, usize)> = (0..4)
                    .map(|k| {
                        let (_, r, c) = *l.cells(k).last().unwrap();
                        (r % 2, c % 2)
                    })
                    .collect();
                assert_eq!(classes.len(), 4, "{h}x{w}");
                // every aligned 2x2 block holds one position of each direction
                let mut owner = vec![usize::MAX; 2 * h * w];
                for k in 0..4 {
                    for cell in l.cells(k) {
                        owner[cell_id(h, w, cell)] = k;
                    }
                }
                for img in [Image::A, Image::B] {
                    for r in (0..h).step_by(2) {
                        for c in (0..w).step_by(2) {
                            let ks: BTreeSet<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                .iter()
                                .map(|(dr, dc)| owner[cell_id(h, w, (img, r + dr, c + dc))])
                                .collect();
                            assert_eq!(ks.len(), 4);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn layout_dump_golden() {
        let l = ScanLayout::build(2, 2).unwrap();
        assert_eq!(
            l.to_string(),
            "dir 1: (0,0) raw 2 [(0,0) (0,2)]\n\
             dir 2: (0,1) flip 2 [(0,3) (0,1)]\n\
             dir 3: (1,0) flip 2 [(3,0) (1,0)]\n\
             dir 4: (1,1) raw 2 [(1,1) (3,1)]\n"
        );
    }

    #[test]
    fn merge_fault_breaks_the_partition() {
        let l = ScanLayout::build(4, 4).unwrap();
        assert!(!l.with_merge_fault().is_partition());
        assert!(l.swap_images().is_partition());
    }

    fn agg_store(c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_aggregator(&mut store, "agg", c, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn aggregator_zero_and_shape() {
        let store = agg_store(3, 1);
        let g = Graph::new();
        let bound = store.bind(&g, false);
        let p = AggregatorParams::bind(&bound.scope("agg")).unwrap();
        let zero = g.constant(Tensor::zeros(&[4, 5, 3]));
        let out = aggregate(&zero, &p).unwrap();
        assert_eq!(out.shape(), [4, 5, 3]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregator_matches_composed_ops() {
        let store = agg_store(2, 2);
        let f = map(4, 4, 2, 9);
        let g = Graph::new();
        let bound = store.bind(&g, false);
        let p = AggregatorParams::bind(&bound.scope("agg")).unwrap();
        let got = aggregate(&g.constant(f.clone()), &p).unwrap().value();

        let w = |n: &str| g.constant(store.get(n).unwrap().clone());
        let x = g.constant(f);
        let sigma = x.conv2d(&w("agg.gate.w"), Some(&w("agg.gate.b")), 1).unwrap().gelu();
        let v = x.conv2d(&w("agg.value.w"), Some(&w("agg.value.b")), 1).unwrap();
        let expect = sigma
            .mul(&v)
            .unwrap()
            .conv2d(&w("agg.out.w"), Some(&w("agg.out.b")), 1)
            .unwrap()
            .value();
        assert_eq!(*got, *expect);
    }

    #[test]
    fn identity_layer_is_identity() {
        for (h, w) in [(4, 4), (3, 5), (6, 2)] {
            let g = Graph::new();
            let (a, b) = (map(h, w, 3, 11), map(h, w, 3, 12));
            let out = joint_layer_with(
                &g.constant(a.clone()),
                &g.constant(b.clone()),
                &padded_layout(h, w).unwrap(),
                |_, s| Ok(*s),
                |f| Ok(*f),
            )
            .unwrap();
            assert_eq!(*out.fa.value(), a);
            assert_eq!(*out.fb.value(), b);
        }
    }

    #[test]
    fn zero_output_projection_makes_blocks_identity() {
        let dims = SsmDims {
            model: 2,
            expanded: 2,
            state: 2,
            window: 4,
        };
        let mut store = ParamStore::new();
        init_layer(&mut store, "l0", dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 1..=4 {
            let w = store.get_mut(&format!("l0.dir{i}.w_out")).unwrap();
            w.data_mut().fill(0.0);
        }
        let (a, b) = (map(4, 4, 2, 5), map(4, 4, 2, 6));
        let g = Graph::new();
        let bound = store.bind(&g, false);
        let scope = bound.scope("l0");
        let blocks: Vec<_> = (1..=4)
            .map(|i| SsmBlockParams::bind(&scope.pp(&format!("dir{i}"))).unwrap())
            .collect();
        let out = joint_layer_with(
            &g.constant(a.clone()),
            &g.constant(b.clone()),
            &ScanLayout::build(4, 4).unwrap(),
            |k, s| ssm::mamba_block(s, &blocks[k]),
            |f| Ok(*f),
        )
        .unwrap();
        assert_eq!(*out.fa.value(), a);
        assert_eq!(*out.fb.value(), b);
    }

    #[test]
    fn swapping_images_commutes_with_relabeled_layout() {
        let dims = SsmDims {
            model: 2,
            expanded: 3,
            state: 2,
            window: 4,
        };
        let mut store = ParamStore::new();
        ssm::init_block(&mut store, "shared", dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        init_aggregator(&mut store, "agg", 2, &mut ChaCha8Rng::seed_from_u64(4));
        let (a, b) = (map(4, 4, 2, 7), map(4, 4, 2, 8));
        let l = ScanLayout::build(4, 4).unwrap();
        let run = |x: &Tensor, y: &Tensor, layout: &ScanLayout| {
            let g = Graph::new();
            let bound = store.bind(&g, false);
            let blk = SsmBlockParams::bind(&bound.scope("shared")).unwrap();
            let agg = AggregatorParams::bind(&bound.scope("agg")).unwrap();
            let out = joint_layer_with(
                &g.constant(x.clone()),
                &g.constant(y.clone()),
                layout,
                |_, s| ssm::mamba_block(s, &blk),
                |f| aggregate(f, &agg),
            )
            .unwrap();
            ((*out.fa.value()).clone(), (*out.fb.value()).clone())
        };
        let (oa, ob) = run(&a, &b, &l);
        let (sa, sb) = run(&b, &a, &l.swap_images());
        assert_eq!(oa, sb);
        assert_eq!(ob, sa);
    }

    #[test]
    fn layer_counts_every_joint_position_once() {
        let dims = SsmDims {
            model: 2,
            expanded: 2,
            state: 2,
            window: 4,
        };
        let mut store = ParamStore::new();
        init_layer(&mut store, "l", dims, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (h, w) in [(2, 2), (4, 6), (8, 8)] {
            let g = Graph::new();
            let bound = store.bind(&g, false);
            let out = joint_mamba_layer(
                &g.constant(map(h, w, 2, 1)),
                &g.constant(map(h, w, 2, 2)),
                &bound.scope("l"),
            )
            .unwrap();
            assert_eq!(out.tokens, 2 * h * w);
            assert_eq!(out.fa.shape(), [h, w, 2]);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let dims = SsmDims {
            model: 2,
            expanded: 2,
            state: 2,
            window: 4,
        };
        let mut store = ParamStore::new();
        init_layer(&mut store, "l", dims, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let extra = [map(2, 4, 2, 3), map(2, 4, 2, 4)];
        let check = GradCheck {
            max_elements: Some(12),
            ..GradCheck::default()
        };
        let report = check
            .run_with_store(&store, &extra, |bound, x| {
                let out = joint_mamba_layer(&x[0], &x[1], &bound.scope("l"))?;
                probe(&out.fa, 1)?.add(&probe(&out.fb, 2)?)
            })
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
