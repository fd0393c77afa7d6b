//! Feature extractors: dense layers, the bidirectional recurrent phrase
//! encoder, coordinate-map spatial features and union-mask features.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::params::{ParamId, ParamKind, ParameterStore};
use crate::tape::{CellRect, Tape, Var};

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Word list with the unknown token at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::new(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut list = vec![UNKNOWN_TOKEN.to_owned()];
        let mut index = HashMap::new();
        index.insert(UNKNOWN_TOKEN.to_owned(), 0);
        for w in words {
            let w = w.into().to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), list.len());
                list.push(w);
            }
        }
        Vocab { words: list, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// Affine layer `x W^T + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize, seed: u64) -> Self {
        let w = store.init_uniform(&format!("{name}.w"), ParamKind::Weight, output, input, input, seed);
        let b = store.init_uniform(&format!("{name}.b"), ParamKind::Bias, 1, output, input, seed);
        Linear { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(x, self.w, Some(self.b))
    }
}

/// Stack of affine layers with rectifiers between them; the last layer is
/// affine only.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, name: &str, dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], seed))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Gated recurrent cell with gate blocks stacked as reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, seed: u64) -> Self {
        let h3 = 3 * hidden;
        GruCell {
            w_ih: store.init_uniform(&format!("{name}.w_ih"), ParamKind::Weight, h3, input, hidden, seed),
            w_hh: store.init_uniform(&format!("{name}.w_hh"), ParamKind::Weight, h3, hidden, hidden, seed),
            b_ih: store.init_uniform(&format!("{name}.b_ih"), ParamKind::Bias, 1, h3, hidden, seed),
            b_hh: store.init_uniform(&format!("{name}.b_hh"), ParamKind::Bias, 1, h3, hidden, seed),
            input,
            hidden,
        }
    }

    /// One step given the precomputed input projection `gi` (1 x 3H).
    fn step(&self, tape: &mut Tape, gi: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gh = tape.linear(h, self.w_hh, Some(self.b_hh));
        let gi_r = tape.slice_cols(gi, 0, hd);
        let gh_r = tape.slice_cols(gh, 0, hd);
        let gi_z = tape.slice_cols(gi, hd, 2 * hd);
        let gh_z = tape.slice_cols(gh, hd, 2 * hd);
        let gi_n = tape.slice_cols(gi, 2 * hd, 3 * hd);
        let gh_n = tape.slice_cols(gh, 2 * hd, 3 * hd);
        let r_pre = tape.add(gi_r, gh_r);
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(gi_z, gh_z);
        let z = tape.sigmoid(z_pre);
        let gated = tape.mul(r, gh_n);
        let n_pre = tape.add(gi_n, gated);
        let n = tape.tanh(n_pre);
        let keep = tape.one_minus(z);
        let fresh = tape.mul(keep, n);
        let carried = tape.mul(z, h);
        tape.add(fresh, carried)
    }

    /// Hidden states after visiting the rows of `x` in `order`, returned in
    /// visiting order.
    pub fn run(&self, tape: &mut Tape, x: Var, order: &[usize]) -> Vec<Var> {
        let gi_all = tape.linear(x, self.w_ih, Some(self.b_ih));
        let mut h = tape.zeros(1, self.hidden);
        let mut states = Vec::with_capacity(order.len());
        for &t in order {
            let gi = tape.row(gi_all, t);
            h = self.step(tape, gi, h);
            states.push(h);
        }
        states
    }
}

/// Bidirectional encoder; both directions share one cell so a reversed
/// sequence swaps the two halves exactly.
#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub cell: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize, seed: u64) -> Self {
        assert!(output.is_multiple_of(2), "bidirectional output must split evenly");
        BiGru { cell: GruCell::new(store, name, input, output / 2, seed) }
    }

    /// `T x 2H` states, row `t` being `[forward_t; backward_t]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Var {
        let t_len = tape.shape(x).0;
        assert!(t_len > 0, "cannot encode an empty sequence");
        let fwd_order: Vec<usize> = (0..t_len).collect();
        let bwd_order: Vec<usize> = (0..t_len).rev().collect();
        let fwd = self.cell.run(tape, x, &fwd_order);
        let mut bwd = self.cell.run(tape, x, &bwd_order);
        bwd.reverse();
        let f = tape.concat_rows(&fwd);
        let b = tape.concat_rows(&bwd);
        tape.concat_cols(&[f, b])
    }
}

/// Average of the encoder states over `start..end`.
pub fn phrase_pool(tape: &mut Tape, states: Var, start: usize, end: usize) -> Var {
    tape.mean_rows(states, start, end)
}

/// Two-channel grid of cell coordinates over a canvas, normalized so the
/// center is 0 and the outermost cell centers are -1 and +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateMap {
    pub size: usize,
    pub canvas: BBox,
}

impl CoordinateMap {
    pub fn new(size: usize, canvas: BBox) -> Self {
        assert!(size >= 2);
        CoordinateMap { size, canvas }
    }

    /// Value of channel `ch` (0 = x, 1 = y) at cell `(row, col)`.
    pub fn cell(&self, ch: usize, row: usize, col: usize) -> f64 {
        let half = (self.size as f64 - 1.0) / 2.0;
        let idx = if ch == 0 { col } else { row } as f64;
        (idx - half) / half
    }

    /// Bilinear sample at scene point `(x, y)`, clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let n = self.size as f64;
        let u = ((x - self.canvas.x1) / self.canvas.width() * n - 0.5).clamp(0.0, n - 1.0);
        let v = ((y - self.canvas.y1) / self.canvas.height() * n - 0.5).clamp(0.0, n - 1.0);
        let c0 = (u.floor() as usize).min(self.size - 2);
        let r0 = (v.floor() as usize).min(self.size - 2);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let mut out = [0.0; 2];
        for (ch, o) in out.iter_mut().enumerate() {
            let top = self.cell(ch, r0, c0) * (1.0 - fu) + self.cell(ch, r0, c0 + 1) * fu;
            let bottom = self.cell(ch, r0 + 1, c0) * (1.0 - fu) + self.cell(ch, r0 + 1, c0 + 1) * fu;
            *o = top * (1.0 - fv) + bottom * fv;
        }
        out
    }

    /// Samples at the centers of an `res x res` grid inside `b`, laid out as
    /// all x values (row-major) followed by all y values.
    pub fn crop(&self, b: &BBox, res: usize) -> Vec<f64> {
        let mut out = vec![0.0; 2 * res * res];
        for i in 0..res {
            let y = b.y1 + (i as f64 + 0.5) * b.height() / res as f64;
            for j in 0..res {
                let x = b.x1 + (j as f64 + 0.5) * b.width() / res as f64;
                let s = self.sample(x, y);
                out[i * res + j] = s[0];
                out[res * res + i * res + j] = s[1];
            }
        }
        out
    }
}

/// Spatial features for a set of boxes: coordinate-map crops through an MLP.
pub fn object_spatial_feature(tape: &mut Tape, mlp: &Mlp, map: &CoordinateMap, boxes: &[BBox], res: usize) -> Var {
    let mut input = Array2::zeros((boxes.len(), 2 * res * res));
    for (n, b) in boxes.iter().enumerate() {
        for (c, v) in map.crop(b, res).into_iter().enumerate() {
            input[[n, c]] = v;
        }
    }
    let x = tape.constant(input);
    mlp.forward(tape, x)
}

/// Half-open range of grid cells along one axis whose centers fall inside
/// `[lo, hi]`, for a grid of `cells` cells spanning `[start, start + extent]`.
fn covered_cells(lo: f64, hi: f64, start: f64, extent: f64, cells: usize) -> (usize, usize) {
    let step = extent / cells as f64;
    let first = ((lo - start) / step - 0.5).ceil().max(0.0);
    let last = ((hi - start) / step - 0.5).floor().min(cells as f64 - 1.0);
    if last < first {
        (0, 0)
    } else {
        (first as usize, last as usize + 1)
    }
}

/// Destination range hit by nearest-neighbour resizing of source range
/// `[a, b)` from `src` cells to `dst` cells.
fn resized_range(a: usize, b: usize, src: usize, dst: usize) -> (usize, usize) {
    let mut lo = None;
    let mut hi = 0;
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
        if s >= a && s < b {
            lo.get_or_insert(d);
            hi = d + 1;
        }
    }
    match lo {
        Some(l) => (l, hi),
        None => (0, 0),
    }
}

/// Cells of a `dst x dst` mask covered by `b` after rasterizing it on a
/// `src x src` grid over `canvas` and resizing by nearest neighbour.
pub fn mask_rect(b: &BBox, canvas: &BBox, src: usize, dst: usize) -> CellRect {
    let (c0, c1) = covered_cells(b.x1, b.x2, canvas.x1, canvas.width(), src);
    let (r0, r1) = covered_cells(b.y1, b.y2, canvas.y1, canvas.height(), src);
    let (c0, c1) = resized_range(c0, c1, src, dst);
    let (r0, r1) = resized_range(r0, r1, src, dst);
    CellRect { r0, r1, c0, c1 }
}

/// Binary raster of `b` on a `grid x grid` raster over `canvas`.
pub fn rasterize(b: &BBox, canvas: &BBox, grid: usize) -> Array2<f64> {
    let (c0, c1) = covered_cells(b.x1, b.x2, canvas.x1, canvas.width(), grid);
    let (r0, r1) = covered_cells(b.y1, b.y2, canvas.y1, canvas.height(), grid);
    let mut m = Array2::zeros((grid, grid));
    for r in r0..r1 {
        for c in c0..c1 {
            m[[r, c]] = 1.0;
        }
    }
    m
}

/// Nearest-neighbour resize of a square mask.
pub fn resize_nearest(m: &Array2<f64>, dst: usize) -> Array2<f64> {
    let src = m.nrows();
    Array2::from_shape_fn((dst, dst), |(r, c)| {
        let sr = ((r as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
        let sc = ((c as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
        m[[sr.min(src - 1), sc.min(src - 1)]]
    })
}

/// Flattened two-channel union mask, channel of `first` then `second`.
pub fn union_mask(first: &BBox, second: &BBox, canvas: &BBox, src: usize, dst: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * dst * dst);
    for b in [first, second] {
        out.extend(resize_nearest(&rasterize(b, canvas, src), dst).iter());
    }
    out
}

/// Encoder for two-channel union masks. The first layer consumes the
/// rasterized mask directly as cell rectangles; covered cells carry the
/// value `1 / grid` so the response stays bounded for large boxes.
#[derive(Debug, Clone)]
pub struct MaskEncoder {
    pub w: ParamId,
    pub b: ParamId,
    pub tail: Mlp,
    pub grid: usize,
    pub source_grid: usize,
}

impl MaskEncoder {
    pub fn new(store: &mut ParameterStore, name: &str, grid: usize, source_grid: usize, out: usize, seed: u64) -> Self {
        let fan_in = 2 * grid * grid;
        let w = store.init_uniform(&format!("{name}.0.w"), ParamKind::Weight, out, fan_in, 1, seed);
        let b = store.init_uniform(&format!("{name}.0.b"), ParamKind::Bias, 1, out, fan_in, seed);
        let tail = Mlp { layers: vec![Linear::new(store, &format!("{name}.1"), out, out, seed)] };
        MaskEncoder { w, b, tail, grid, source_grid }
    }

    /// Features for `(first, second, canvas)` triples.
    pub fn forward(&self, tape: &mut Tape, pairs: &[(BBox, BBox, BBox)]) -> Var {
        let rects = pairs
            .iter()
            .map(|(a, b, canvas)| {
                vec![
                    mask_rect(a, canvas, self.source_grid, self.grid),
                    mask_rect(b, canvas, self.source_grid, self.grid),
                ]
            })
            .collect();
        let h = tape.rect_linear(self.w, self.b, self.grid, 1.0 / self.grid as f64, rects);
        let h = tape.relu(h);
        self.tail.forward(tape, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w, self.b];
        ids.extend(self.tail.param_ids());
        ids
    }
}

/// `mlp([appearance; spatial])`, row by row.
pub fn fuse(tape: &mut Tape, mlp: &Mlp, appearance: Var, spatial: Var) -> Var {
    let joint = tape.concat_cols(&[appearance, spatial]);
    mlp.forward(tape, joint)
}
