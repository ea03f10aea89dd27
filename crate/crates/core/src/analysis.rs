//! Token accounting for scan strategies and discrete receptive fields of a
//! joint layer, modeled as reachability through the causal scan cones plus one
//! hop of the per-image 3x3 aggregator.

use std::fmt::Write as _;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};
use crate::joint::{cell_id, Cell, Image, ScanLayout};
use crate::pgm::Gray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    Transformer,
    EvMamba,
    Vim,
    VMamba,
    Jego,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Transformer,
        Strategy::EvMamba,
        Strategy::Vim,
        Strategy::VMamba,
        Strategy::Jego,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Transformer => "transformer",
            Strategy::EvMamba => "evmamba",
            Strategy::Vim => "vim",
            Strategy::VMamba => "vmamba",
            Strategy::Jego => "jego",
        }
    }

    /// Distinct traversal orders; none for attention.
    pub fn directions(self) -> usize {
        match self {
            Strategy::Transformer => 0,
            Strategy::EvMamba | Strategy::Vim => 2,
            Strategy::VMamba | Strategy::Jego => 4,
        }
    }

    /// `None` where the notion does not apply.
    pub fn omnidirectional(self) -> Option<bool> {
        match self {
            Strategy::Transformer => None,
            Strategy::EvMamba | Strategy::Vim => Some(false),
            Strategy::VMamba | Strategy::Jego => Some(true),
        }
    }

    pub fn global(self) -> bool {
        self != Strategy::EvMamba
    }

    /// Complexity in terms of `N`.
    pub fn complexity(self) -> &'static str {
        match self {
            Strategy::Transformer => "N^2",
            Strategy::EvMamba | Strategy::Jego => "N",
            Strategy::Vim => "2N",
            Strategy::VMamba => "4N",
        }
    }

    /// Tokens processed for `n` features; pairwise interactions for attention.
    pub fn tokens_for(self, n: u64) -> u64 {
        match self {
            Strategy::Transformer => n * n,
            Strategy::EvMamba | Strategy::Jego => n,
            Strategy::Vim => 2 * n,
            Strategy::VMamba => 4 * n,
        }
    }
}

/// Tokens for a pair of `h x w` maps (`N = 2hw`) with skip step `p`.
pub fn strategy_tokens(strategy: Strategy, h: usize, w: usize, p: usize) -> Result<u64> {
    if p == 0 {
        return Err(Error::invalid("strategy_tokens", "skip step must be positive"));
    }
    Ok(strategy.tokens_for(2 * h as u64 * w as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub strategy: Strategy,
    pub n: u64,
    pub tokens: u64,
}

/// One row per strategy for `h x w` maps.
pub fn strategy_ledger(h: usize, w: usize, p: usize) -> Result<Vec<LedgerRow>> {
    Strategy::ALL
        .iter()
        .map(|&s| {
            Ok(LedgerRow {
                strategy: s,
                n: 2 * h as u64 * w as u64,
                tokens: strategy_tokens(s, h, w, p)?,
            })
        })
        .collect()
}

pub const LEDGER_HEADER: &str = "strategy,n,tokens,complexity,directions,omnidirectional,global";

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut s = format!("{LEDGER_HEADER}\n");
    for r in rows {
        let omni = match r.strategy.omnidirectional() {
            Some(v) => v.to_string(),
            None => "-".into(),
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.strategy.name(),
            r.n,
            r.tokens,
            r.strategy.complexity(),
            r.strategy.directions(),
            omni,
            r.strategy.global()
        )
        .unwrap();
    }
    s
}

/// Reachability queries over one layout; positions are [`cell_id`]s.
pub struct Reach<'a> {
    layout: &'a ScanLayout,
    /// Cell ids of each direction in sequence order.
    seqs: [Vec<usize>; 4],
    /// `(direction, index)` of every cell id.
    place: Vec<(usize, usize)>,
}

impl<'a> Reach<'a> {
    pub fn new(layout: &'a ScanLayout) -> Self {
        let (h, w) = (layout.h, layout.w);
        let seqs: [Vec<usize>; 4] =
            std::array::from_fn(|k| layout.cells(k).into_iter().map(|c| cell_id(h, w, c)).collect());
        let mut place = vec![(usize::MAX, usize::MAX); layout.tokens()];
        for (k, s) in seqs.iter().enumerate() {
            for (i, &id) in s.iter().enumerate() {
                place[id] = (k, i);
            }
        }
        Self { layout, seqs, place }
    }

    pub fn len(&self) -> usize {
        self.layout.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The causal cone: every position up to and including `id` in its
    /// directional sequence.
    pub fn scan(&self, id: usize) -> FixedBitSet {
        let mut set = FixedBitSet::with_capacity(self.len());
        let (k, i) = self.place[id];
        for &p in &self.seqs[k][..=i] {
            set.insert(p);
        }
        set
    }

    /// Ids of the `(2r+1)^2` same-image neighborhood of `id`, clipped.
    pub fn neighborhood(&self, id: usize, radius: usize) -> Vec<usize> {
        let (h, w) = (self.layout.h, self.layout.w);
        let (img, local) = if id < h * w { (Image::A, id) } else { (Image::B, id - h * w) };
        let (r, c) = (local / w, local % w);
        let rows = r.saturating_sub(radius)..(r + radius + 1).min(h);
        rows.flat_map(|y| {
            let cols = c.saturating_sub(radius)..(c + radius + 1).min(w);
            cols.map(move |x| cell_id(h, w, (img, y, x)))
        })
        .collect()
    }

    /// Union of the scan cones over the neighborhood of `id`.
    pub fn aggregated(&self, id: usize, radius: usize) -> FixedBitSet {
        let mut set = FixedBitSet::with_capacity(self.len());
        let mut best = [None::<usize>; 4];
        for n in self.neighborhood(id, radius) {
            let (k, i) = self.place[n];
            best[k] = Some(best[k].map_or(i, |b: usize| b.max(i)));
        }
        for (k, b) in best.iter().enumerate() {
            if let Some(i) = *b {
                for &p in &self.seqs[k][..=i] {
                    set.insert(p);
                }
            }
        }
        set
    }
}

pub fn scan_receptive(layout: &ScanLayout, cell: Cell) -> FixedBitSet {
    Reach::new(layout).scan(cell_id(layout.h, layout.w, cell))
}

pub fn aggregated_receptive(layout: &ScanLayout, cell: Cell) -> FixedBitSet {
    Reach::new(layout).aggregated(cell_id(layout.h, layout.w, cell), 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutKind {
    Jego,
    /// Four forward-only slices: the restricted layout for comparison.
    ForwardOnly,
}

impl LayoutKind {
    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::Jego => "jego",
            LayoutKind::ForwardOnly => "forward",
        }
    }

    pub fn build(self, h: usize, w: usize) -> Result<ScanLayout> {
        match self {
            LayoutKind::Jego => ScanLayout::build(h, w),
            LayoutKind::ForwardOnly => ScanLayout::forward_only(h, w),
        }
    }
}

/// Fraction of the joint grid reached from each position, by [`cell_id`].
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    pub h: usize,
    pub w: usize,
    pub radius: usize,
    pub coverage: Vec<f64>,
}

fn min_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
}

impl CoverageReport {
    pub fn is_empty(&self) -> bool {
        self.coverage.is_empty()
    }

    pub fn at(&self, cell: Cell) -> f64 {
        self.coverage[cell_id(self.h, self.w, cell)]
    }

    pub fn min(&self) -> Option<f64> {
        min_of(self.coverage.iter().copied())
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.coverage.iter().sum::<f64>() / self.coverage.len() as f64)
    }

    fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        [Image::A, Image::B]
            .into_iter()
            .flat_map(move |img| (0..self.h).flat_map(move |r| (0..self.w).map(move |c| (img, r, c))))
    }

    /// Minimum over positions off the image borders.
    pub fn interior_min(&self) -> Option<f64> {
        let (h, w) = (self.h, self.w);
        min_of(
            self.cells()
                .filter(|&(_, r, c)| r > 0 && c > 0 && r + 1 < h && c + 1 < w)
                .map(|cell| self.at(cell)),
        )
    }

    /// `image,row,col,coverage` per position, image A first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,row,col,coverage\n");
        for cell in self.cells() {
            let (img, r, c) = cell;
            let name = if img == Image::A { "A" } else { "B" };
            writeln!(s, "{name},{r},{c},{}", self.at(cell)).unwrap();
        }
        s
    }

    /// `2w x h` heatmap with the two images side by side, 255 = full coverage.
    pub fn heatmap(&self) -> Result<Gray> {
        let (h, w) = (self.h, self.w);
        let mut data = vec![0u8; 2 * w * h];
        for cell in self.cells() {
            let (img, r, c) = cell;
            let x = if img == Image::A { c } else { w + c };
            data[r * 2 * w + x] = (self.at(cell) * 255.0).round() as u8;
        }
        Gray::new(2 * w, h, data)
    }
}

/// Coverage of every position of an `h x w` pair. A `0 x 0` grid yields an
/// empty report.
pub fn coverage_report(kind: LayoutKind, h: usize, w: usize, radius: usize) -> Result<CoverageReport> {
    if h == 0 && w == 0 {
        return Ok(CoverageReport {
            h,
            w,
            radius,
            coverage: Vec::new(),
        });
    }
    let layout = kind.build(h, w)?;
    let reach = Reach::new(&layout);
    let total = reach.len() as f64;
    let coverage = (0..reach.len())
        .map(|id| reach.aggregated(id, radius).count_ones(..) as f64 / total)
        .collect();
    Ok(CoverageReport { h, w, radius, coverage })
}

/// Coverage after `layers` joint layers applied in sequence, each one scan
/// plus one aggregation hop of `radius`.
pub fn stacked_coverage(kind: LayoutKind, h: usize, w: usize, radius: usize, layers: usize) -> Result<CoverageReport> {
    let mut report = coverage_report(kind, h, w, radius)?;
    if report.is_empty() || layers <= 1 {
        return Ok(report);
    }
    let layout = kind.build(h, w)?;
    let reach = Reach::new(&layout);
    let one: Vec<FixedBitSet> = (0..reach.len()).map(|id| reach.aggregated(id, radius)).collect();
    let mut current = one.clone();
    for _ in 1..layers {
        current = current
            .iter()
            .map(|set| {
                let mut next = FixedBitSet::with_capacity(reach.len());
                for j in set.ones() {
                    next.union_with(&one[j]);
                }
                next
            })
            .collect();
    }
    let total = reach.len() as f64;
    report.coverage = current.iter().map(|s| s.count_ones(..) as f64 / total).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::joint_layer_with;
    use crate::tensor::{Graph, Tensor, Var};

    #[test]
    fn ledger_matches_the_complexity_table() {
        let rows = strategy_ledger(8, 8, 2).unwrap();
        let tokens: Vec<(Strategy, u64)> = rows.iter().map(|r| (r.strategy, r.tokens)).collect();
        assert_eq!(
            tokens,
            vec![
                (Strategy::Transformer, 128 * 128),
                (Strategy::EvMamba, 128),
                (Strategy::Vim, 256),
                (Strategy::VMamba, 512),
                (Strategy::Jego, 128),
            ]
        );
        for (h, w) in [(1, 1), (2, 6), (12, 12), (7, 3)] {
            let j = strategy_tokens(Strategy::Jego, h, w, 2).unwrap();
            assert_eq!(strategy_tokens(Strategy::VMamba, h, w, 2).unwrap(), 4 * j);
        }
        assert_eq!(strategy_tokens(Strategy::Jego, 1, 1, 1).unwrap(), 2);
        assert!(strategy_tokens(Strategy::Jego, 1, 1, 0).is_err());
        let csv = ledger_csv(&rows);
        assert!(csv.starts_with(LEDGER_HEADER));
        assert!(csv.contains("jego,128,128,N,4,true,true\n"));
        assert!(csv.contains("transformer,128,16384,N^2,0,-,true\n"));
    }

    #[test]
    fn scan_cones_are_prefixes() {
        let layout = ScanLayout::build(4, 4).unwrap();
        let reach = Reach::new(&layout);
        for k in 0..4 {
            let ids: Vec<usize> = layout.cells(k).into_iter().map(|c| cell_id(4, 4, c)).collect();
            for (i, &id) in ids.iter().enumerate() {
                let cone: Vec<usize> = reach.scan(id).ones().collect();
                let mut prefix = ids[..=i].to_vec();
                prefix.sort();
                assert_eq!(cone, prefix);
            }
            assert_eq!(reach.scan(ids[0]).count_ones(..), 1);
            assert_eq!(reach.scan(*ids.last().unwrap()).count_ones(..), ids.len());
        }
    }

    #[test]
    fn aggregation_contains_the_scan_cone() {
        for kind in [LayoutKind::Jego, LayoutKind::ForwardOnly] {
            let layout = kind.build(6, 4).unwrap();
            let reach = Reach::new(&layout);
            for id in 0..reach.len() {
                assert!(reach.scan(id).is_subset(&reach.aggregated(id, 1)));
                assert_eq!(reach.scan(id), reach.aggregated(id, 0));
                assert!(reach.aggregated(id, 1).contains(id));
            }
        }
    }

    #[test]
    fn interior_neighborhoods_span_every_direction() {
        for (h, w) in [(4, 4), (6, 8), (8, 8)] {
            let layout = ScanLayout::build(h, w).unwrap();
            let reach = Reach::new(&layout);
            for img in [Image::A, Image::B] {
                for r in 1..h - 1 {
                    for c in 1..w - 1 {
                        let id = cell_id(h, w, (img, r, c));
                        let dirs: std::collections::BTreeSet<usize> =
                            reach.neighborhood(id, 1).iter().map(|&n| reach.place[n].0).collect();
                        assert!(dirs.len() >= 3);
                    }
                }
            }
        }
    }

    /// Row-major raster of `h x w`; forward and backward cones of two
    /// neighbors in raster order.
    #[test]
    fn forward_and_backward_raster_cones_cover_the_grid() {
        for h in 1..=8 {
            for w in 1..=8 {
                let n: usize = h * w;
                for x in 0..n {
                    for y in [x.wrapping_sub(1), x + 1] {
                        if y >= n {
                            continue;
                        }
                        let mut set = FixedBitSet::with_capacity(n);
                        set.insert_range(..x + 1);
                        set.insert_range(y..);
                        assert_eq!(set.count_ones(..), n, "{h}x{w} {x} {y}");
                    }
                }
            }
        }
    }

    fn cumsum<'g>(_: usize, s: &Var<'g>) -> Result<Var<'g>> {
        let len = s.shape()[0];
        let mut tri = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in 0..=i {
                tri.set(&[i, j], 1.0);
            }
        }
        s.graph().constant(tri).matmul(s)
    }

    /// Dependence pattern of the real scan and merge with a causal cumulative
    /// sum per direction and a 3x3 box aggregator.
    fn dependency_oracle(layout: &ScanLayout) -> Vec<FixedBitSet> {
        let (h, w) = (layout.h, layout.w);
        let n = layout.tokens();
        let mut out = Vec::with_capacity(n);
        for target in 0..n {
            let g = Graph::new();
            let fa = g.param(Tensor::full(&[h, w, 1], 1.0));
            let fb = g.param(Tensor::full(&[h, w, 1], 1.0));
            let box3 = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
            let layer = joint_layer_with(&fa, &fb, layout, cumsum, |f| f.conv2d(&box3, None, 1)).unwrap();
            let flat = Var::concat(&[layer.fa.reshape(&[h * w]).unwrap(), layer.fb.reshape(&[h * w]).unwrap()], 0).unwrap();
            let grads = g.backward(flat.gather_flat(&[target]).unwrap().sum()).unwrap();
            let mut set = FixedBitSet::with_capacity(n);
            for (k, v) in grads.get(fa).data().iter().chain(grads.get(fb).data()).enumerate() {
                if *v != 0.0 {
                    set.insert(k);
                }
            }
            out.push(set);
        }
        out
    }

    #[test]
    fn reachability_matches_the_differentiated_layer() {
        for kind in [LayoutKind::Jego, LayoutKind::ForwardOnly] {
            for (h, w) in [(2, 2), (4, 4), (4, 6)] {
                let layout = kind.build(h, w).unwrap();
                let reach = Reach::new(&layout);
                for (id, expected) in dependency_oracle(&layout).into_iter().enumerate() {
                    assert_eq!(reach.aggregated(id, 1), expected, "{kind:?} {h}x{w} id {id}");
                }
            }
        }
    }

    fn oracle_report(kind: LayoutKind, h: usize, w: usize) -> CoverageReport {
        let layout = kind.build(h, w).unwrap();
        let deps = dependency_oracle(&layout);
        let total = layout.tokens() as f64;
        CoverageReport {
            h,
            w,
            radius: 1,
            coverage: deps.iter().map(|d| d.count_ones(..) as f64 / total).collect(),
        }
    }

    #[test]
    fn golden_4x4_coverage_matches_the_oracle() {
        let golden = include_str!("../tests/golden/coverage_4x4.csv");
        if std::env::var_os("JEGO_WRITE_GOLDEN").is_some() {
            let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/coverage_4x4.csv");
            std::fs::write(path, oracle_report(LayoutKind::Jego, 4, 4).to_csv()).unwrap();
            return;
        }
        assert_eq!(oracle_report(LayoutKind::Jego, 4, 4).to_csv(), golden);
        assert_eq!(coverage_report(LayoutKind::Jego, 4, 4, 1).unwrap().to_csv(), golden);
    }

    #[test]
    fn sequence_starts_without_aggregation_cover_themselves() {
        let layout = ScanLayout::build(8, 8).unwrap();
        let reach = Reach::new(&layout);
        for k in 0..4 {
            let first = layout.cells(k)[0];
            let id = cell_id(8, 8, first);
            assert_eq!(reach.aggregated(id, 0).ones().collect::<Vec<_>>(), vec![id]);
        }
    }

    #[test]
    fn forward_only_layout_is_restricted_toward_the_start() {
        let r = coverage_report(LayoutKind::ForwardOnly, 8, 8, 1).unwrap();
        let j = coverage_report(LayoutKind::Jego, 8, 8, 1).unwrap();
        assert_eq!(r.at((Image::B, 7, 7)), 1.0);
        assert!(r.at((Image::A, 0, 0)) < 0.1);
        assert!(r.min().unwrap() < j.min().unwrap());
        assert!(r.interior_min().unwrap() < j.interior_min().unwrap());
    }

    #[test]
    fn one_layer_coverage_on_8x8() {
        let j = coverage_report(LayoutKind::Jego, 8, 8, 1).unwrap();
        assert_eq!(j.interior_min(), Some(0.53125));
        assert_eq!(j.min(), Some(0.515625));
    }

    #[test]
    fn two_stacked_layers_reach_everything() {
        let j = stacked_coverage(LayoutKind::Jego, 8, 8, 1, 2).unwrap();
        assert_eq!(j.min(), Some(1.0));
        let r = stacked_coverage(LayoutKind::ForwardOnly, 8, 8, 1, 2).unwrap();
        assert!(r.min().unwrap() < 0.5);
        assert_eq!(
            stacked_coverage(LayoutKind::Jego, 4, 4, 1, 1).unwrap(),
            coverage_report(LayoutKind::Jego, 4, 4, 1).unwrap()
        );
    }

    #[test]
    fn empty_grid_gives_an_empty_report() {
        let r = coverage_report(LayoutKind::Jego, 0, 0, 1).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.min(), None);
        assert_eq!(r.mean(), None);
        assert_eq!(r.to_csv(), "image,row,col,coverage\n");
        assert!(coverage_report(LayoutKind::Jego, 3, 4, 1).is_err());
    }

    #[test]
    fn heatmap_layout() {
        let r = coverage_report(LayoutKind::Jego, 2, 4, 1).unwrap();
        let map = r.heatmap().unwrap();
        assert_eq!((map.width, map.height), (8, 2));
        assert_eq!(map.get(5, 1), (r.at((Image::B, 1, 1)) * 255.0).round() as u8);
        assert_eq!(r.to_csv().lines().count(), 1 + 16);
    }
}
