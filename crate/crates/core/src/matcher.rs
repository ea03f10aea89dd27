//! The correspondence pipeline: a small convolutional encoder, joint Mamba
//! layers on the coarse maps, bidirectional coarse matching, windowed fine
//! matching with an MLP-Mixer and tanh-bounded sub-pixel refinement.
//!
//! Grid conventions: coarse cell `(r, c)` (flat index `r * w + c`, row-major)
//! sits at pixel `(8c, 8r)`; fine cell `(r, c)` sits at pixel `(2c, 2r)`; a
//! coarse cell maps to fine cell `(4r, 4c)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, Settings};
use crate::error::{Error, Result};
use crate::joint;
use crate::params::{join, Bound, ParamStore, Scope};
use crate::pgm::Gray;
use crate::ssm::SsmDims;
use crate::tensor::{Graph, Tensor, Var};

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;
/// Fine cells per coarse cell along each axis.
pub const FINE_PER_COARSE: usize = COARSE_STRIDE / FINE_STRIDE;
pub const CONFIG_FILE: &str = "matcher.cfg";

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    pub temperature: f64,
    pub coarse_threshold: f64,
    pub fine_window: usize,
    pub coarse_channels: usize,
    pub fine_channels: usize,
    pub expanded_channels: usize,
    pub state_channels: usize,
    pub conv_window: usize,
    pub joint_layers: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            coarse_threshold: 0.2,
            fine_window: 5,
            coarse_channels: SsmDims::DESK.model,
            fine_channels: 16,
            expanded_channels: SsmDims::DESK.expanded,
            state_channels: SsmDims::DESK.state,
            conv_window: SsmDims::DESK.window,
            joint_layers: 1,
        }
    }
}

impl MatcherConfig {
    pub fn ssm_dims(&self) -> SsmDims {
        SsmDims {
            model: self.coarse_channels,
            expanded: self.expanded_channels,
            state: self.state_channels,
            window: self.conv_window,
        }
    }

    pub fn window_cells(&self) -> usize {
        self.fine_window * self.fine_window
    }

    /// Window index of the center cell.
    pub fn window_center(&self) -> usize {
        self.window_cells() / 2
    }
}

impl Settings for MatcherConfig {
    fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
        use config::value;
        Some(match key {
            "temperature" => value(v).map(|x| self.temperature = x),
            "coarse_threshold" => value(v).map(|x| self.coarse_threshold = x),
            "fine_window" => value(v).map(|x| self.fine_window = x),
            "coarse_channels" => value(v).map(|x| self.coarse_channels = x),
            "fine_channels" => value(v).map(|x| self.fine_channels = x),
            "expanded_channels" => value(v).map(|x| self.expanded_channels = x),
            "state_channels" => value(v).map(|x| self.state_channels = x),
            "conv_window" => value(v).map(|x| self.conv_window = x),
            "joint_layers" => value(v).map(|x| self.joint_layers = x),
            _ => return None,
        })
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("temperature", self.temperature.to_string()),
            ("coarse_threshold", self.coarse_threshold.to_string()),
            ("fine_window", self.fine_window.to_string()),
            ("coarse_channels", self.coarse_channels.to_string()),
            ("fine_channels", self.fine_channels.to_string()),
            ("expanded_channels", self.expanded_channels.to_string()),
            ("state_channels", self.state_channels.to_string()),
            ("conv_window", self.conv_window.to_string()),
            ("joint_layers", self.joint_layers.to_string()),
        ]
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.coarse_threshold > 0.0 && self.coarse_threshold < 1.0) {
            return Err(format!("coarse_threshold must lie in (0, 1), got {}", self.coarse_threshold));
        }
        if self.fine_window % 2 == 0 {
            return Err(format!("fine_window must be odd, got {}", self.fine_window));
        }
        if self.fine_channels == 0 {
            return Err("fine_channels must be positive".into());
        }
        self.ssm_dims().validate().map_err(|e| e.to_string())
    }
}

fn init_conv(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    store.init_uniform(join(prefix, "w"), &[3, 3, cin, cout], 9 * cin, rng);
    store.insert(join(prefix, "b"), Tensor::zeros(&[cout]));
}

/// Two-stage MLP-Mixer parameters for `tokens x channels` inputs.
pub fn init_mixer(store: &mut ParamStore, prefix: &str, tokens: usize, channels: usize, rng: &mut ChaCha8Rng) {
    let p = |n: &str| join(prefix, n);
    store.init_uniform(p("tok.w1"), &[tokens, tokens], tokens, rng);
    store.insert(p("tok.b1"), Tensor::zeros(&[tokens]));
    store.init_uniform(p("tok.w2"), &[tokens, tokens], tokens, rng);
    store.insert(p("tok.b2"), Tensor::zeros(&[tokens]));
    store.init_uniform(p("ch.w1"), &[channels, 2 * channels], channels, rng);
    store.insert(p("ch.b1"), Tensor::zeros(&[2 * channels]));
    store.init_uniform(p("ch.w2"), &[2 * channels, channels], 2 * channels, rng);
    store.insert(p("ch.b2"), Tensor::zeros(&[channels]));
}

/// Weights and configuration of a matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: MatcherConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: MatcherConfig, seed: u64) -> Result<Self> {
        config
            .validate()
            .map_err(|d| Error::invalid("matcher config", d))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c1, c2) = (config.coarse_channels, config.fine_channels);
        init_conv(&mut store, "enc.c1", 1, c2, &mut rng);
        init_conv(&mut store, "enc.c2", c2, c2, &mut rng);
        init_conv(&mut store, "enc.c3", c2, c1, &mut rng);
        init_conv(&mut store, "enc.c4", c1, c1, &mut rng);
        for (name, c) in [("enc.norm_f", c2), ("enc.norm_c", c1)] {
            store.insert(join(name, "scale"), Tensor::ones(&[c]));
            store.insert(join(name, "shift"), Tensor::zeros(&[c]));
        }
        for k in 0..config.joint_layers {
            joint::init_layer(&mut store, &format!("joint{k}"), config.ssm_dims(), &mut rng)?;
        }
        init_mixer(&mut store, "fine.mixer", 2 * config.window_cells(), c2, &mut rng);
        init_mixer(&mut store, "sub.mixer", 1, 2 * c2, &mut rng);
        store.init_uniform("sub.head.w", &[2 * c2, 4], 2 * c2, &mut rng);
        store.insert("sub.head.b", Tensor::zeros(&[4]));
        Ok(Self { config, params: store })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, config::render(&self.config)).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut config = MatcherConfig::default();
        config::apply(&text, &mut [&mut config])?;
        let params = ParamStore::load(dir)?;
        let reference = Model::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format {
                        path: dir.to_path_buf(),
                        detail: format!("{name}: expected {:?}, found {:?}", t.shape(), p.shape()),
                    })
                }
                None => return Err(Error::MissingParam(name.to_string())),
            }
        }
        Ok(Self { config, params })
    }
}

fn conv<'g>(x: &Var<'g>, scope: &Scope<'_, 'g>, stride: usize) -> Result<Var<'g>> {
    x.conv2d(&scope.get("w")?, Some(&scope.get("b")?), stride)
}

/// Pads an `[H, W, 1]` image with zeros to multiples of the coarse stride.
pub fn pad_image(t: &Tensor) -> Result<Tensor> {
    let &[h, w, 1] = t.shape() else {
        return Err(Error::shape("pad_image", format!("expected [H, W, 1], got {:?}", t.shape())));
    };
    if h == 0 || w == 0 {
        return Err(Error::invalid("encode", "empty image"));
    }
    let (ph, pw) = (h.div_ceil(COARSE_STRIDE) * COARSE_STRIDE, w.div_ceil(COARSE_STRIDE) * COARSE_STRIDE);
    let mut out = Tensor::zeros(&[ph, pw, 1]);
    for r in 0..h {
        out.data_mut()[r * pw..r * pw + w].copy_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Ok(out)
}

fn norm<'g>(x: &Var<'g>, scope: &Scope<'_, 'g>) -> Result<Var<'g>> {
    x.layer_norm(&scope.get("scale")?, &scope.get("shift")?, 1e-5)
}

/// `(coarse [H/8, W/8, C1], fine [H/2, W/2, C2])` of an `[H, W, 1]` image whose
/// sides are multiples of 8. Both maps are layer-normalized over channels.
pub fn encode<'g>(img: &Var<'g>, scope: &Scope<'_, 'g>) -> Result<(Var<'g>, Var<'g>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[0] % COARSE_STRIDE != 0 || s[1] % COARSE_STRIDE != 0 {
        return Err(Error::shape("encode", format!("expected [8k, 8l, 1], got {s:?}")));
    }
    let x = conv(img, &scope.pp("c1"), 2)?.gelu();
    let x = conv(&x, &scope.pp("c2"), 1)?;
    let fine = norm(&x, &scope.pp("norm_f"))?;
    let x = conv(&x.gelu(), &scope.pp("c3"), 2)?.gelu();
    let coarse = norm(&conv(&x, &scope.pp("c4"), 2)?, &scope.pp("norm_c"))?;
    Ok((coarse, fine))
}

/// `S[i, j] = <a_i, b_j> / temperature` for `[n_A, C]` and `[n_B, C]` rows.
pub fn coarse_similarity<'g>(a: &Var<'g>, b: &Var<'g>, temperature: f64) -> Result<Var<'g>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("coarse_similarity", format!("temperature {temperature}")));
    }
    Ok(a.matmul(&b.transpose_last2()?)?.scale(1.0 / temperature))
}

/// Row and column softmax of a similarity matrix.
pub fn match_probabilities<'g>(sim: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let rank = sim.shape().len();
    Ok((sim.softmax(rank - 1)?, sim.softmax(rank - 2)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Union of row maxima of `p_ab` and column maxima of `p_ba` that reach
/// `threshold`, sorted by `(i, j)`. A pair found by both keeps the larger
/// probability as its confidence.
pub fn coarse_match(p_ab: &Tensor, p_ba: &Tensor, threshold: f64) -> Vec<CoarseMatch> {
    let &[n, m] = p_ab.shape() else {
        return Vec::new();
    };
    let mut conf = vec![f64::NAN; n * m];
    for i in 0..n {
        let row = &p_ab.data()[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (j, &p) in row.iter().enumerate() {
            if p == max && p >= threshold {
                conf[i * m + j] = p;
            }
        }
    }
    for j in 0..m {
        let max = (0..n).map(|i| p_ba.data()[i * m + j]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            let p = p_ba.data()[i * m + j];
            if p == max && p >= threshold {
                let c = &mut conf[i * m + j];
                *c = if c.is_nan() { p } else { c.max(p) };
            }
        }
    }
    conf.iter()
        .enumerate()
        .filter(|(_, c)| !c.is_nan())
        .map(|(k, &confidence)| CoarseMatch {
            i: k / m,
            j: k % m,
            confidence,
        })
        .collect()
}

/// [`coarse_match`] straight from a similarity matrix.
pub fn coarse_match_from_similarity(sim: &Tensor, threshold: f64) -> Vec<CoarseMatch> {
    let g = Graph::new();
    let (p_ab, p_ba) = match_probabilities(&g.constant(sim.clone())).expect("rank-2 similarity");
    coarse_match(&p_ab.value(), &p_ba.value(), threshold)
}

/// Fine cells covered by a `size x size` window around `center`, row-major;
/// coordinates may fall outside the map.
pub fn window_cells(center: (usize, usize), size: usize) -> Vec<(isize, isize)> {
    let half = (size / 2) as isize;
    let (r0, c0) = (center.0 as isize, center.1 as isize);
    (-half..=half)
        .flat_map(|dr| (-half..=half).map(move |dc| (r0 + dr, c0 + dc)))
        .collect()
}

/// `[M, size^2, C]` windows of an `[h, w, C]` map around each center, zero
/// outside the map.
pub fn crop_windows<'g>(fine: &Var<'g>, centers: &[(usize, usize)], size: usize) -> Result<Var<'g>> {
    let &[h, w, c] = fine.shape().as_slice() else {
        return Err(Error::shape("crop_windows", format!("{:?}", fine.shape())));
    };
    let zero_row = h * w;
    let padded = Var::concat(
        &[fine.reshape(&[h * w, c])?, fine.graph().constant(Tensor::zeros(&[1, c]))],
        0,
    )?;
    let mut index = Vec::with_capacity(centers.len() * size * size);
    for &center in centers {
        for (r, col) in window_cells(center, size) {
            let inside = r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w;
            index.push(if inside { r as usize * w + col as usize } else { zero_row });
        }
    }
    padded
        .gather_rows(&index)?
        .reshape(&[centers.len(), size * size, c])
}

/// `F + MLP_tok(F)` over the token axis, then `+ MLP_ch` over channels, on
/// `[M, T, C]` inputs.
pub fn mixer<'g>(x: &Var<'g>, scope: &Scope<'_, 'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let tokens = scope.get("tok.w1")?.shape()[0];
    if s.len() != 3 || s[1] != tokens {
        return Err(Error::shape("mixer", format!("expected [M, {tokens}, C], got {s:?}")));
    }
    let t = x.transpose_last2()?;
    let t = t
        .linear(&scope.get("tok.w1")?, Some(&scope.get("tok.b1")?))?
        .gelu()
        .linear(&scope.get("tok.w2")?, Some(&scope.get("tok.b2")?))?;
    let mid = x.add(&t.transpose_last2()?)?;
    let ch = mid
        .linear(&scope.get("ch.w1")?, Some(&scope.get("ch.b1")?))?
        .gelu()
        .linear(&scope.get("ch.w2")?, Some(&scope.get("ch.b2")?))?;
    mid.add(&ch)
}

/// Mixed window features and the fine matching probabilities `P_f`
/// (`[M, K, K]`, row softmax times column softmax).
pub struct FineOut<'g> {
    pub win_a: Var<'g>,
    pub win_b: Var<'g>,
    pub prob: Var<'g>,
}

pub fn fine_probabilities<'g>(
    win_a: &Var<'g>,
    win_b: &Var<'g>,
    scope: &Scope<'_, 'g>,
    temperature: f64,
) -> Result<FineOut<'g>> {
    let s = win_a.shape();
    if s.len() != 3 || win_b.shape() != s {
        return Err(Error::shape("fine_match", format!("{s:?} vs {:?}", win_b.shape())));
    }
    let (k, c) = (s[1], s[2]);
    let mixed = mixer(&Var::concat(&[*win_a, *win_b], 1)?, scope)?;
    let (ma, mb) = (mixed.narrow(1, 0, k)?, mixed.narrow(1, k, k)?);
    let norm = 1.0 / (c as f64).sqrt();
    let sim = ma
        .scale(norm)
        .matmul(&mb.scale(norm).transpose_last2()?)?
        .scale(1.0 / temperature);
    let (row, col) = match_probabilities(&sim)?;
    Ok(FineOut {
        win_a: ma,
        win_b: mb,
        prob: row.mul(&col)?,
    })
}

/// The mutual-nearest pair of one `[K, K]` probability matrix with the
/// largest probability; ties go to the pair closest to the window center.
pub fn select_fine(p: &[f64], k: usize, center: usize) -> Option<(usize, usize, f64)> {
    // values this close count as equal, so rounding in the softmax sums
    // cannot break exact ties
    let same = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs());
    let side = (k as f64).sqrt().round() as isize;
    let dist = |x: usize| {
        let (r, c) = ((x as isize) / side, (x as isize) % side);
        let (cr, cc) = ((center as isize) / side, (center as isize) % side);
        (r - cr).pow(2) + (c - cc).pow(2)
    };
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..k {
        let row = &p[a * k..(a + 1) * k];
        let rmax = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for b in 0..k {
            let v = row[b];
            if !same(v, rmax) {
                continue;
            }
            let cmax = (0..k).map(|r| p[r * k + b]).fold(f64::NEG_INFINITY, f64::max);
            if !same(v, cmax) {
                continue;
            }
            let better = match best {
                None => true,
                Some((ba, bb, bv)) if same(v, bv) => dist(a) + dist(b) < dist(ba) + dist(bb),
                Some((_, _, bv)) => v > bv,
            };
            if better {
                best = Some((a, b, v));
            }
        }
    }
    best
}

/// `[M, 4]` offsets `(dx_A, dy_A, dx_B, dy_B)` in `[-1, 1]` for the picked
/// window cells.
pub fn subpixel_offsets<'g>(
    win_a: &Var<'g>,
    win_b: &Var<'g>,
    picks: &[(usize, usize, usize)],
    scope: &Scope<'_, 'g>,
) -> Result<Var<'g>> {
    let s = win_a.shape();
    let (k, c) = (s[1], s[2]);
    let fa = win_a.reshape(&[s[0] * k, c])?;
    let fb = win_b.reshape(&[s[0] * k, c])?;
    let ia: Vec<usize> = picks.iter().map(|&(m, a, _)| m * k + a).collect();
    let ib: Vec<usize> = picks.iter().map(|&(m, _, b)| m * k + b).collect();
    let f = Var::concat(&[fa.gather_rows(&ia)?, fb.gather_rows(&ib)?], 1)?.reshape(&[picks.len(), 1, 2 * c])?;
    let mixed = mixer(&f, &scope.pp("mixer"))?.reshape(&[picks.len(), 2 * c])?;
    Ok(mixed
        .linear(&scope.get("head.w")?, Some(&scope.get("head.b")?))?
        .tanh())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineMatch {
    /// Index into [`MatchSet::coarse`].
    pub coarse: usize,
    pub a: usize,
    pub b: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubpixelMatch {
    /// Index into [`MatchSet::fine`].
    pub fine: usize,
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
    Subpixel,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Coarse => "coarse",
            Level::Fine => "fine",
            Level::Subpixel => "subpixel",
        }
    }
}

/// Correspondences of one image pair at all three levels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// Coarse grid `(rows, cols)`, shared by both images.
    pub coarse_grid: (usize, usize),
    /// Original image `(height, width)`.
    pub image: (usize, usize),
    pub window: usize,
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
    pub subpixel: Vec<SubpixelMatch>,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.coarse.is_empty()
    }

    pub fn coarse_cell(&self, i: usize) -> (usize, usize) {
        (i / self.coarse_grid.1, i % self.coarse_grid.1)
    }

    /// Pixel `(x, y)` of a coarse cell.
    pub fn coarse_pixel(&self, i: usize) -> (f64, f64) {
        let (r, c) = self.coarse_cell(i);
        ((COARSE_STRIDE * c) as f64, (COARSE_STRIDE * r) as f64)
    }

    /// Fine cell `(row, col)` of window index `k` around coarse cell `i`.
    pub fn fine_cell(&self, i: usize, k: usize) -> (isize, isize) {
        let (r, c) = self.coarse_cell(i);
        window_cells((r * FINE_PER_COARSE, c * FINE_PER_COARSE), self.window)[k]
    }

    fn fine_pixels(&self, f: &FineMatch) -> ((f64, f64), (f64, f64)) {
        let cm = &self.coarse[f.coarse];
        let px = |(r, c): (isize, isize)| ((FINE_STRIDE as isize * c) as f64, (FINE_STRIDE as isize * r) as f64);
        (px(self.fine_cell(cm.i, f.a)), px(self.fine_cell(cm.j, f.b)))
    }

    /// `(x_A, y_A, x_B, y_B, confidence, level)` for every match, coarse
    /// records first, then fine, then sub-pixel.
    pub fn records(&self) -> Vec<(f64, f64, f64, f64, f64, Level)> {
        let mut out = Vec::new();
        for m in &self.coarse {
            let ((xa, ya), (xb, yb)) = (self.coarse_pixel(m.i), self.coarse_pixel(m.j));
            out.push((xa, ya, xb, yb, m.confidence, Level::Coarse));
        }
        for f in &self.fine {
            let ((xa, ya), (xb, yb)) = self.fine_pixels(f);
            out.push((xa, ya, xb, yb, f.confidence, Level::Fine));
        }
        for s in &self.subpixel {
            let conf = self.fine[s.fine].confidence;
            out.push((s.xa, s.ya, s.xb, s.yb, conf, Level::Subpixel));
        }
        out
    }

    /// One `x_A y_A x_B y_B conf level` line per record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (xa, ya, xb, yb, conf, level) in self.records() {
            writeln!(s, "{xa:.3} {ya:.3} {xb:.3} {yb:.3} {conf:.6} {}", level.name()).unwrap();
        }
        s
    }
}

/// Everything up to the coarse probabilities, for one image pair.
pub struct CoarseOut<'g> {
    pub grid: (usize, usize),
    pub feat_a: Var<'g>,
    pub feat_b: Var<'g>,
    pub fine_a: Var<'g>,
    pub fine_b: Var<'g>,
    pub p_ab: Var<'g>,
    pub p_ba: Var<'g>,
    pub tokens: usize,
}

/// Rows of `[n, C]` scaled to unit length.
pub fn l2_normalize_rows<'g>(x: &Var<'g>) -> Result<Var<'g>> {
    let inv = x.square().sum_axis(1)?.add_scalar(1e-12).log().scale(-0.5).exp();
    x.transpose_last2()?.mul_broadcast(&inv)?.transpose_last2()
}

/// Encoder, joint layers and coarse probabilities. Features are normalized
/// to unit length before the inner product.
pub fn forward_coarse<'g>(
    bound: &Bound<'g>,
    config: &MatcherConfig,
    img_a: &Var<'g>,
    img_b: &Var<'g>,
) -> Result<CoarseOut<'g>> {
    if img_a.shape() != img_b.shape() {
        return Err(Error::shape(
            "match_pair",
            format!("images differ in size: {:?} vs {:?}", img_a.shape(), img_b.shape()),
        ));
    }
    let enc = bound.scope("enc");
    let (mut ca, fine_a) = encode(img_a, &enc)?;
    let (mut cb, fine_b) = encode(img_b, &enc)?;
    let &[h, w, c] = ca.shape().as_slice() else { unreachable!() };
    let mut tokens = 0;
    for k in 0..config.joint_layers {
        let out = joint::joint_mamba_layer(&ca, &cb, &bound.scope(&format!("joint{k}")))?;
        (ca, cb, tokens) = (out.fa, out.fb, tokens + out.tokens);
    }
    let feat_a = l2_normalize_rows(&ca.reshape(&[h * w, c])?)?;
    let feat_b = l2_normalize_rows(&cb.reshape(&[h * w, c])?)?;
    let sim = coarse_similarity(&feat_a, &feat_b, config.temperature)?;
    let (p_ab, p_ba) = match_probabilities(&sim)?;
    Ok(CoarseOut {
        grid: (h, w),
        feat_a,
        feat_b,
        fine_a,
        fine_b,
        p_ab,
        p_ba,
        tokens,
    })
}

/// Fine-grid centers of the windows of coarse pairs `(i, j)`.
pub fn window_centers(pairs: &[(usize, usize)], grid: (usize, usize)) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let at = |i: usize| ((i / grid.1) * FINE_PER_COARSE, (i % grid.1) * FINE_PER_COARSE);
    pairs.iter().map(|&(i, j)| (at(i), at(j))).unzip()
}

/// Whether the `8 x 8` pixel footprint of each coarse cell holds any
/// intensity variation; cells lying wholly in padding are flat.
pub fn textured_cells(img: &Gray, grid: (usize, usize)) -> Vec<bool> {
    let s = COARSE_STRIDE;
    (0..grid.0 * grid.1)
        .map(|i| {
            let (r, c) = (i / grid.1, i % grid.1);
            let ys = (r * s).min(img.height)..((r + 1) * s).min(img.height);
            let xs = (c * s).min(img.width)..((c + 1) * s).min(img.width);
            let mut values = ys.flat_map(|y| xs.clone().map(move |x| (x, y))).map(|(x, y)| img.get(x, y));
            match values.next() {
                Some(first) => values.any(|v| v != first),
                None => false,
            }
        })
        .collect()
}

/// Matches one pair of equally sized images. Coarse matches touching a cell
/// without intensity variation in either image are dropped.
pub fn match_pair(model: &Model, img_a: &Gray, img_b: &Gray) -> Result<MatchSet> {
    if (img_a.width, img_a.height) != (img_b.width, img_b.height) {
        return Err(Error::invalid(
            "match_pair",
            format!(
                "images differ in size: {}x{} vs {}x{}",
                img_a.width, img_a.height, img_b.width, img_b.height
            ),
        ));
    }
    let cfg = &model.config;
    let g = Graph::new();
    let bound = model.params.bind(&g, false);
    let ta = g.constant(pad_image(&img_a.to_tensor())?);
    let tb = g.constant(pad_image(&img_b.to_tensor())?);
    let co = forward_coarse(&bound, cfg, &ta, &tb)?;
    let mut set = MatchSet {
        coarse_grid: co.grid,
        image: (img_a.height, img_a.width),
        window: cfg.fine_window,
        coarse: coarse_match(&co.p_ab.value(), &co.p_ba.value(), cfg.coarse_threshold),
        ..MatchSet::default()
    };
    g.check_finite()?;
    let (rich_a, rich_b) = (textured_cells(img_a, co.grid), textured_cells(img_b, co.grid));
    set.coarse.retain(|m| rich_a[m.i] && rich_b[m.j]);
    if set.coarse.is_empty() {
        return Ok(set);
    }
    let pairs: Vec<(usize, usize)> = set.coarse.iter().map(|m| (m.i, m.j)).collect();
    let (ca, cb) = window_centers(&pairs, co.grid);
    let wa = crop_windows(&co.fine_a, &ca, cfg.fine_window)?;
    let wb = crop_windows(&co.fine_b, &cb, cfg.fine_window)?;
    let fo = fine_probabilities(&wa, &wb, &bound.scope("fine.mixer"), cfg.temperature)?;
    let kk = cfg.window_cells();
    let prob = fo.prob.value();
    let mut picks = Vec::new();
    for m in 0..pairs.len() {
        let p = &prob.data()[m * kk * kk..(m + 1) * kk * kk];
        if let Some((a, b, confidence)) = select_fine(p, kk, cfg.window_center()) {
            set.fine.push(FineMatch {
                coarse: m,
                a,
                b,
                confidence,
            });
            picks.push((m, a, b));
        }
    }
    let delta = subpixel_offsets(&fo.win_a, &fo.win_b, &picks, &bound.scope("sub"))?.value();
    g.check_finite()?;
    let (h, w) = set.image;
    let clamp = |v: f64, hi: usize| v.clamp(0.0, hi.saturating_sub(1) as f64);
    for (n, f) in set.fine.clone().iter().enumerate() {
        let ((xa, ya), (xb, yb)) = set.fine_pixels(f);
        let d = &delta.data()[n * 4..n * 4 + 4];
        let s = FINE_STRIDE as f64;
        set.subpixel.push(SubpixelMatch {
            fine: n,
            xa: clamp(xa + d[0] * s, w),
            ya: clamp(ya + d[1] * s, h),
            xb: clamp(xb + d[2] * s, w),
            yb: clamp(yb + d[3] * s, h),
        });
    }
    Ok(set)
}
