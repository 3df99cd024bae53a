//! Image <-> patch-grid conversion, linear positions and window selection.
//!
//! Grid coordinates are 1-based throughout this module: patch `(i, j)` is the
//! patch in row `i` and column `j`, with `1 <= i <= N` and `1 <= j <= M`.

use rand::Rng;

use crate::error::{IntraError, Result};
use crate::image::{Dihedral, Image};

/// An image cut into an `N x M` grid of flattened `K x K x C` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    patch_side: usize,
    channels: usize,
    /// `rows * cols` patches of `patch_dim()` values, row-major over the grid.
    patches: Vec<f32>,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    /// Patch `(i, j)`, 1-based.
    pub fn patch(&self, i: usize, j: usize) -> &[f32] {
        assert!((1..=self.rows).contains(&i) && (1..=self.cols).contains(&j));
        let p = self.patch_dim();
        let idx = (i - 1) * self.cols + (j - 1);
        &self.patches[idx * p..(idx + 1) * p]
    }

    pub fn patch_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        assert!((1..=self.rows).contains(&i) && (1..=self.cols).contains(&j));
        let p = self.patch_dim();
        let idx = (i - 1) * self.cols + (j - 1);
        &mut self.patches[idx * p..(idx + 1) * p]
    }

    pub fn zeros(rows: usize, cols: usize, patch_side: usize, channels: usize) -> Self {
        PatchGrid {
            rows,
            cols,
            patch_side,
            channels,
            patches: vec![0.0; rows * cols * patch_side * patch_side * channels],
        }
    }

    /// Reassembles the source image.
    pub fn assemble(&self) -> Image {
        let k = self.patch_side;
        let c = self.channels;
        let (h, w) = (self.rows * k, self.cols * k);
        let mut data = vec![0.0; h * w * c];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let patch = self.patch(i + 1, j + 1);
                for py in 0..k {
                    let dst = ((i * k + py) * w + j * k) * c;
                    data[dst..dst + k * c].copy_from_slice(&patch[py * k * c..(py + 1) * k * c]);
                }
            }
        }
        Image::new(h, w, c, data).expect("assembled image")
    }
}

/// Splits a square image into `K x K` patches.
///
/// Patch `(i, j)` holds pixel rows `[(i-1)K, iK)` and columns `[(j-1)K, jK)`,
/// flattened row-major with channels last.
pub fn split_into_patches(image: &Image, patch_side: usize) -> Result<PatchGrid> {
    let (h, w) = (image.height(), image.width());
    if patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 {
        return Err(IntraError::invalid(format!(
            "patch side {patch_side} does not divide image size {h}x{w}; resize the image to a multiple of {patch_side}"
        )));
    }
    if h != w {
        return Err(IntraError::invalid(format!(
            "image is {h}x{w}; only square working resolutions are supported"
        )));
    }
    let k = patch_side;
    let c = image.channels();
    let (rows, cols) = (h / k, w / k);
    let mut grid = PatchGrid::zeros(rows, cols, k, c);
    for i in 0..rows {
        for j in 0..cols {
            let patch = grid.patch_mut(i + 1, j + 1);
            for py in 0..k {
                let src = ((i * k + py) * w + j * k) * c;
                patch[py * k * c..(py + 1) * k * c].copy_from_slice(&image.data()[src..src + k * c]);
            }
        }
    }
    Ok(grid)
}

/// `f(i, j) = (i - 1) * N + j`, the 1-based position index of patch `(i, j)`
/// on a square `N x N` grid.
pub fn linear_position(i: usize, j: usize, n: usize) -> Result<usize> {
    if !(1..=n).contains(&i) || !(1..=n).contains(&j) {
        return Err(IntraError::invalid(format!(
            "grid position ({i}, {j}) outside a {n}x{n} grid"
        )));
    }
    Ok((i - 1) * n + j)
}

/// An `L x L` window with upper-left patch `(r, s)` and the patch `(t, u)`
/// to inpaint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub r: usize,
    pub s: usize,
    pub side: usize,
    pub target: (usize, usize),
}

impl WindowSpec {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.r..self.r + self.side).contains(&i) && (self.s..self.s + self.side).contains(&j)
    }

    /// Grid positions covered by the window, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.r..self.r + self.side).flat_map(move |i| (self.s..self.s + self.side).map(move |j| (i, j)))
    }

    /// Index of the target inside the row-major cell list.
    pub fn target_slot(&self) -> usize {
        (self.target.0 - self.r) * self.side + (self.target.1 - self.s)
    }
}

/// Window placing `(t, u)` as close to the window center as the grid allows.
pub fn select_window(t: usize, u: usize, n: usize, m: usize, side: usize) -> Result<WindowSpec> {
    if side == 0 || side > n || side > m {
        return Err(IntraError::invalid(format!(
            "window side {side} does not fit a {n}x{m} grid"
        )));
    }
    if !(1..=n).contains(&t) || !(1..=m).contains(&u) {
        return Err(IntraError::invalid(format!(
            "target ({t}, {u}) outside a {n}x{m} grid"
        )));
    }
    let g = |c: usize| c.saturating_sub(side / 2).max(1);
    let anchor = |c: usize, extent: usize| g(c) - (g(c) + side).saturating_sub(extent + 1);
    Ok(WindowSpec {
        r: anchor(t, n),
        s: anchor(u, m),
        side,
        target: (t, u),
    })
}

/// Uniform window anchor, then a uniform target inside it.
pub fn sample_window_spec<R: Rng + ?Sized>(n: usize, m: usize, side: usize, rng: &mut R) -> Result<WindowSpec> {
    if side == 0 || side > n || side > m {
        return Err(IntraError::invalid(format!(
            "window side {side} does not fit a {n}x{m} grid"
        )));
    }
    let r = rng.gen_range(1..=n - side + 1);
    let s = rng.gen_range(1..=m - side + 1);
    let t = r + rng.gen_range(0..side);
    let u = s + rng.gen_range(0..side);
    Ok(WindowSpec {
        r,
        s,
        side,
        target: (t, u),
    })
}

/// A patch sequence ready for embedding: `seq_len` patches with their 1-based
/// linear positions. The slot `target_slot` is the patch to inpaint; its
/// content is never read by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub patches: Vec<f32>,
    pub positions: Vec<usize>,
    pub target_slot: usize,
    /// Ground-truth content of the target patch.
    pub target: Vec<f32>,
}

impl WindowSample {
    pub fn seq_len(&self) -> usize {
        self.positions.len()
    }

    /// Reorders the sequence; element `i` of the result is element `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> WindowSample {
        let p = self.target.len();
        let mut patches = Vec::with_capacity(self.patches.len());
        for &src in perm {
            patches.extend_from_slice(&self.patches[src * p..(src + 1) * p]);
        }
        WindowSample {
            patches,
            positions: perm.iter().map(|&src| self.positions[src]).collect(),
            target_slot: perm.iter().position(|&src| src == self.target_slot).expect("permutation"),
            target: self.target.clone(),
        }
    }
}

/// Cuts the window `spec` out of `grid` (row-major over the window).
pub fn window_from_grid(grid: &PatchGrid, spec: &WindowSpec) -> Result<WindowSample> {
    check_spec(spec, grid.rows(), grid.cols())?;
    let p = grid.patch_dim();
    let slot = spec.target_slot();
    let mut patches = Vec::with_capacity(spec.side * spec.side * p);
    let mut positions = Vec::with_capacity(spec.side * spec.side);
    for (idx, (i, j)) in spec.cells().enumerate() {
        if idx == slot {
            patches.extend(std::iter::repeat_n(0.0, p));
        } else {
            patches.extend_from_slice(grid.patch(i, j));
        }
        positions.push(linear_position(i, j, grid.rows())?);
    }
    Ok(WindowSample {
        patches,
        positions,
        target_slot: slot,
        target: grid.patch(spec.target.0, spec.target.1).to_vec(),
    })
}

/// Cuts the window `spec` out of `transform(image)` without materializing
/// the transformed image.
pub fn window_from_image(image: &Image, patch_side: usize, transform: Dihedral, spec: &WindowSpec) -> Result<WindowSample> {
    let n = image.height();
    if image.width() != n || !n.is_multiple_of(patch_side) {
        return Err(IntraError::invalid(format!(
            "image {}x{} is not a square multiple of patch side {patch_side}",
            n,
            image.width()
        )));
    }
    let grid_side = n / patch_side;
    check_spec(spec, grid_side, grid_side)?;
    let inverse = transform.inverse();
    let k = patch_side;
    let c = image.channels();
    let p = k * k * c;
    let read_patch = |i: usize, j: usize, out: &mut Vec<f32>| {
        for py in 0..k {
            for px in 0..k {
                let (sy, sx) = inverse.map((i - 1) * k + py, (j - 1) * k + px, n);
                for ch in 0..c {
                    out.push(image.get(sy, sx, ch));
                }
            }
        }
    };
    let slot = spec.target_slot();
    let mut patches = Vec::with_capacity(spec.side * spec.side * p);
    let mut positions = Vec::with_capacity(spec.side * spec.side);
    for (idx, (i, j)) in spec.cells().enumerate() {
        if idx == slot {
            patches.extend(std::iter::repeat_n(0.0, p));
        } else {
            read_patch(i, j, &mut patches);
        }
        positions.push(linear_position(i, j, grid_side)?);
    }
    let mut target = Vec::with_capacity(p);
    read_patch(spec.target.0, spec.target.1, &mut target);
    Ok(WindowSample {
        patches,
        positions,
        target_slot: slot,
        target,
    })
}

/// Draws a uniformly placed training window from `grid`.
pub fn sample_training_window<R: Rng + ?Sized>(grid: &PatchGrid, side: usize, rng: &mut R) -> Result<(WindowSample, WindowSpec)> {
    let spec = sample_window_spec(grid.rows(), grid.cols(), side, rng)?;
    Ok((window_from_grid(grid, &spec)?, spec))
}

fn check_spec(spec: &WindowSpec, n: usize, m: usize) -> Result<()> {
    let ok = spec.side >= 1
        && spec.r >= 1
        && spec.s >= 1
        && spec.r + spec.side <= n + 1
        && spec.s + spec.side <= m + 1
        && spec.contains(spec.target.0, spec.target.1);
    if ok {
        Ok(())
    } else {
        Err(IntraError::invalid(format!("window {spec:?} invalid for a {n}x{m} grid")))
    }
}
