//! Window partition and fold, cyclic shifts, and point counting per window.
//!
//! Two flavours exist: plain [`Tensor`] functions operating on `[C, H, W]`
//! maps, and gather-based graph ops driven by a [`WindowLayout`] so that
//! partition, fold and shift stay differentiable inside a [`Graph`].

use std::sync::Arc;

use limm_tensor::{Graph, Tensor, Var, GATHER_ZERO};
use rand::Rng;

use crate::data::CrowdScene;
use crate::error::{invalid, Result};

/// A stack of equal square windows cut from one `[C, H, W]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    /// `[rows * cols, C, ws, ws]`, row-major over the grid.
    pub windows: Tensor,
    pub ws: usize,
    pub grid: (usize, usize),
    /// Zero rows added at the bottom and zero columns added at the right.
    pub pad: (usize, usize),
    pub orig_shape: (usize, usize, usize),
    /// Cyclic shift applied to the padded map before cutting.
    pub shift_offset: (i64, i64),
}

/// Number of window rows and columns covering an `h x w` map.
pub fn grid_dims(h: usize, w: usize, ws: usize) -> (usize, usize) {
    (h.div_ceil(ws), w.div_ceil(ws))
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(invalid!("expected a [C, H, W] map, got {s:?}")),
    }
}

pub fn partition(x: &Tensor, ws: usize) -> Result<WindowGrid> {
    partition_shifted(x, ws, 0, 0)
}

/// Pads to whole windows, rolls the padded map by `(dy, dx)` and cuts it.
pub fn partition_shifted(x: &Tensor, ws: usize, dy: i64, dx: i64) -> Result<WindowGrid> {
    if ws == 0 {
        return Err(invalid!("window size must be positive"));
    }
    let (c, h, w) = dims3(x)?;
    let (rows, cols) = grid_dims(h, w, ws);
    let layout = WindowLayout { channels: c, rows, cols, side: ws };
    let padded = pad_to(x, layout.height(), layout.width());
    let padded = cyclic_shift(&padded, dy, dx)?;
    let index = layout.partition_index(layout.height(), layout.width());
    let data = index.iter().map(|&i| padded.data()[i]).collect();
    Ok(WindowGrid {
        windows: Tensor::new(&[rows * cols, c, ws, ws], data)?,
        ws,
        grid: (rows, cols),
        pad: (rows * ws - h, cols * ws - w),
        orig_shape: (c, h, w),
        shift_offset: (dy, dx),
    })
}

/// Reassembles the padded map, undoes any recorded shift and removes padding.
pub fn fold(g: &WindowGrid) -> Result<Tensor> {
    let (c, h, w) = g.orig_shape;
    let (rows, cols) = g.grid;
    if g.ws == 0
        || g.windows.shape() != [rows * cols, c, g.ws, g.ws]
        || rows * g.ws != h + g.pad.0
        || cols * g.ws != w + g.pad.1
    {
        return Err(invalid!(
            "inconsistent window grid: windows {:?}, grid {:?}, pad {:?}, original {:?}",
            g.windows.shape(),
            g.grid,
            g.pad,
            g.orig_shape
        ));
    }
    let layout = WindowLayout { channels: c, rows, cols, side: g.ws };
    let index = layout.fold_index();
    let data = index.iter().map(|&i| g.windows.data()[i]).collect();
    let full = Tensor::new(&[c, layout.height(), layout.width()], data)?;
    let full = cyclic_shift(&full, -g.shift_offset.0, -g.shift_offset.1)?;
    Ok(crop(&full, h, w))
}

fn pad_to(x: &Tensor, hp: usize, wp: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (hp, wp) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.data_mut()[(ch * hp + y) * wp..(ch * hp + y) * wp + w].copy_from_slice(src);
        }
    }
    out
}

fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, hp, wp) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (hp, wp) {
        return x.clone();
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        x.data()[(ch * hp + rest / w) * wp + rest % w]
    })
}

/// Toroidal roll of the spatial axes: `out[y][x] = x[(y - dy) mod H][(x - dx) mod W]`.
pub fn cyclic_shift(x: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let (c, h, w) = dims3(x)?;
    let (sy, sx) = (dy.rem_euclid(h as i64) as usize, dx.rem_euclid(w as i64) as usize);
    if (sy, sx) == (0, 0) {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.data()[(ch * h + (y + h - sy) % h) * w + (xx + w - sx) % w]
    }))
}

pub fn unshift(x: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    cyclic_shift(x, -dy, -dx)
}

/// Geometry of a window stack `[rows * cols, channels, side, side]` and of
/// the folded map `[channels, rows * side, cols * side]` it tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
}

impl WindowLayout {
    pub fn n_windows(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.side
    }

    pub fn width(&self) -> usize {
        self.cols * self.side
    }

    pub fn stack_shape(&self) -> [usize; 4] {
        [self.n_windows(), self.channels, self.side, self.side]
    }

    pub fn map_shape(&self) -> [usize; 4] {
        [1, self.channels, self.height(), self.width()]
    }

    /// Same grid at `side / factor` resolution with `channels` channels.
    pub fn downscaled(&self, channels: usize, factor: usize) -> Result<Self> {
        if factor == 0 || self.side % factor != 0 {
            return Err(invalid!("window side {} not divisible by {factor}", self.side));
        }
        Ok(Self { channels, side: self.side / factor, ..*self })
    }

    /// Gather index producing the stack from a `[channels, map_h, map_w]`
    /// map; positions beyond the map read as zero.
    pub fn partition_index(&self, map_h: usize, map_w: usize) -> Arc<[usize]> {
        let (s, c) = (self.side, self.channels);
        let mut index = Vec::with_capacity(self.n_windows() * c * s * s);
        for r in 0..self.rows {
            for q in 0..self.cols {
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            let (gy, gx) = (r * s + y, q * s + x);
                            index.push(if gy < map_h && gx < map_w { (ch * map_h + gy) * map_w + gx } else { GATHER_ZERO });
                        }
                    }
                }
            }
        }
        index.into()
    }

    /// Gather index producing the full map from the stack.
    pub fn fold_index(&self) -> Arc<[usize]> {
        let (s, c, h, w) = (self.side, self.channels, self.height(), self.width());
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for gy in 0..h {
                for gx in 0..w {
                    let n = (gy / s) * self.cols + gx / s;
                    index.push(((n * c + ch) * s + gy % s) * s + gx % s);
                }
            }
        }
        index.into()
    }

    /// Index pair `(forward, inverse)` on the stack: `forward` re-cuts the
    /// folded map after a cyclic roll by `(dy, dx)`, `inverse` undoes it.
    pub fn shift_index(&self, dy: i64, dx: i64) -> (Arc<[usize]>, Arc<[usize]>) {
        let (s, c, h, w) = (self.side, self.channels, self.height(), self.width());
        let (sy, sx) = (dy.rem_euclid(h as i64) as usize, dx.rem_euclid(w as i64) as usize);
        let stack_pos = |ch: usize, gy: usize, gx: usize| {
            let n = (gy / s) * self.cols + gx / s;
            ((n * c + ch) * s + gy % s) * s + gx % s
        };
        let total = c * h * w;
        let mut forward = vec![0; total];
        let mut inverse = vec![0; total];
        for ch in 0..c {
            for gy in 0..h {
                for gx in 0..w {
                    let dst = stack_pos(ch, gy, gx);
                    let src = stack_pos(ch, (gy + h - sy) % h, (gx + w - sx) % w);
                    forward[dst] = src;
                    inverse[src] = dst;
                }
            }
        }
        (forward.into(), inverse.into())
    }
}

/// Cuts a `[C, H, W]` or `[1, C, H, W]` graph value into the window stack.
pub fn partition_var(g: &mut Graph, x: Var, layout: &WindowLayout) -> Result<Var> {
    let (c, h, w) = match *g.shape(x) {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        ref s => return Err(invalid!("partition_var expects one map, got {s:?}")),
    };
    if c != layout.channels || h > layout.height() || w > layout.width() {
        return Err(invalid!("map {c}x{h}x{w} does not fit layout {layout:?}"));
    }
    Ok(g.gather(x, layout.partition_index(h, w), &layout.stack_shape())?)
}

/// Folds a window stack into a `[1, C, rows * side, cols * side]` map.
pub fn fold_var(g: &mut Graph, x: Var, layout: &WindowLayout) -> Result<Var> {
    if g.shape(x) != layout.stack_shape() {
        return Err(invalid!("stack {:?} does not match layout {layout:?}", g.shape(x)));
    }
    Ok(g.gather(x, layout.fold_index(), &layout.map_shape())?)
}

/// A feature tensor together with the window grid it lives on: either a
/// window stack `[nWin, C, side, side]` or, for unpartitioned models, the
/// whole map `[1, C, rows * side, cols * side]`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureStack {
    pub var: Var,
    pub layout: WindowLayout,
    pub windowed: bool,
}

impl FeatureStack {
    /// Same geometry, new value with `channels` channels.
    pub fn with_var(&self, var: Var, channels: usize) -> Self {
        Self { var, layout: WindowLayout { channels, ..self.layout }, windowed: self.windowed }
    }

    pub fn to_map(&self, g: &mut Graph) -> Result<Var> {
        if self.windowed {
            fold_var(g, self.var, &self.layout)
        } else {
            Ok(self.var)
        }
    }

    pub fn to_windows(&self, g: &mut Graph) -> Result<Var> {
        if self.windowed {
            Ok(self.var)
        } else {
            partition_var(g, self.var, &self.layout)
        }
    }

    /// Stack `[picks.len(), C, side, side]` of the chosen grid windows.
    pub fn select(&self, g: &mut Graph, picks: &[usize]) -> Result<Var> {
        let l = self.layout;
        let per = l.channels * l.side * l.side;
        let mut index = Vec::with_capacity(picks.len() * per);
        for &n in picks {
            if n >= l.n_windows() {
                return Err(invalid!("window {n} outside a grid of {}", l.n_windows()));
            }
            if self.windowed {
                index.extend(n * per..(n + 1) * per);
            } else {
                let (r, q) = (n / l.cols, n % l.cols);
                for ch in 0..l.channels {
                    for y in 0..l.side {
                        let row = (ch * l.height() + r * l.side + y) * l.width() + q * l.side;
                        index.extend(row..row + l.side);
                    }
                }
            }
        }
        Ok(g.gather(self.var, index.into(), &[picks.len(), l.channels, l.side, l.side])?)
    }
}

/// Zero-pads a `[C, H, W]` or `[1, C, H, W]` value to `[1, C, hp, wp]`.
pub fn pad_var(g: &mut Graph, x: Var, hp: usize, wp: usize) -> Result<Var> {
    let (c, h, w) = match *g.shape(x) {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        ref s => return Err(invalid!("pad_var expects one map, got {s:?}")),
    };
    if hp < h || wp < w {
        return Err(invalid!("cannot pad {h}x{w} down to {hp}x{wp}"));
    }
    let mut index = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for y in 0..hp {
            for x in 0..wp {
                index.push(if y < h && x < w { (ch * h + y) * w + x } else { GATHER_ZERO });
            }
        }
    }
    Ok(g.gather(x, index.into(), &[1, c, hp, wp])?)
}

/// Point count of every grid window (half-open bounds), row-major.
pub fn window_counts(points: &[[f64; 2]], h: usize, w: usize, ws: usize) -> Result<Vec<usize>> {
    if ws == 0 {
        return Err(invalid!("window size must be positive"));
    }
    let (rows, cols) = grid_dims(h, w, ws);
    let mut counts = vec![0; rows * cols];
    for &[x, y] in points {
        if !(x >= 0.0 && y >= 0.0) {
            return Err(invalid!("point ({x}, {y}) has a negative coordinate"));
        }
        let (q, r) = ((x / ws as f64) as usize, (y / ws as f64) as usize);
        if r >= rows || q >= cols {
            return Err(invalid!("point ({x}, {y}) lies outside the {h}x{w} grid"));
        }
        counts[r * cols + q] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledWindow {
    /// Row-major grid index.
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub count: usize,
}

/// Picks `s` distinct grid windows uniformly without replacement.
pub fn sample_windows<R: Rng + ?Sized>(scene: &CrowdScene, ws: usize, s: usize, rng: &mut R) -> Result<Vec<SampledWindow>> {
    let (h, w) = scene.dims();
    let counts = window_counts(&scene.points, h, w, ws)?;
    let (_, cols) = grid_dims(h, w, ws);
    if s > counts.len() {
        return Err(invalid!("cannot sample {s} windows from a grid of {}", counts.len()));
    }
    Ok(rand::seq::index::sample(rng, counts.len(), s)
        .into_iter()
        .map(|index| SampledWindow { index, row: index / cols, col: index % cols, count: counts[index] })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_index_matches_plain_roll() {
        let layout = WindowLayout { channels: 2, rows: 2, cols: 3, side: 4 };
        let map = Tensor::from_fn(&[2, 8, 12], |i| i as f64);
        let stack = partition(&map, 4).unwrap().windows;
        let (fwd, inv) = layout.shift_index(-2, -2);
        let shifted: Vec<f64> = fwd.iter().map(|&i| stack.data()[i]).collect();
        let expect = partition_shifted(&map, 4, -2, -2).unwrap().windows;
        assert_eq!(shifted, expect.data());
        let back: Vec<f64> = inv.iter().map(|&i| shifted[i]).collect();
        assert_eq!(back, stack.data());
    }

    #[test]
    fn partition_index_zero_fills_padding() {
        let layout = WindowLayout { channels: 1, rows: 1, cols: 1, side: 3 };
        let idx = layout.partition_index(2, 2);
        assert_eq!(&idx[..], &[0, 1, GATHER_ZERO, 2, 3, GATHER_ZERO, GATHER_ZERO, GATHER_ZERO, GATHER_ZERO]);
    }
}
