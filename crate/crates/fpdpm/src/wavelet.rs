//! Separable orthonormal discrete wavelet transforms on dyadic grids.
//!
//! Supports 1-D signals of length 2^p and square 2-D images of side 2^p,
//! decomposed to full depth. Detail coefficients are grouped by resolution
//! level j = 0..J (coarse → fine): in 1-D level j holds 2^j coefficients,
//! in 2-D it holds the three subbands of scale j for a total of 3·4^j.
//!
//! Storage conventions, fixed for reproducibility:
//! - flat coefficient order: `[scaling, level 0, level 1, ..., level J]`;
//! - within a 2-D level: subbands (LH, HL, HH) where LH = detail along the
//!   column index only, HL = detail along the row index only, HH = both;
//!   row-major inside each subband;
//! - 2-D images flatten column-major (column index outer, row index inner).

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("structure error: {0}")]
    Structure(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WaveletFamily {
    /// Piecewise-constant orthonormal family; exact on any dyadic grid.
    Haar,
    /// Four-tap Daubechies filter with periodic boundary extension.
    Daubechies4,
}

impl WaveletFamily {
    /// (lowpass, highpass) analysis filter taps.
    fn filters(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            WaveletFamily::Haar => {
                let a = std::f64::consts::FRAC_1_SQRT_2;
                (vec![a, a], vec![a, -a])
            }
            WaveletFamily::Daubechies4 => {
                let s3 = 3.0_f64.sqrt();
                let z = 4.0 * std::f64::consts::SQRT_2;
                let h = vec![(1.0 + s3) / z, (3.0 + s3) / z, (3.0 - s3) / z, (1.0 - s3) / z];
                let g = vec![h[3], -h[2], h[1], -h[0]];
                (h, g)
            }
        }
    }
}

/// Dyadic evaluation grid: 1-D length 2^p or square 2-D side 2^p.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(dims: Vec<usize>) -> Result<Grid, WaveletError> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(WaveletError::Dimension(format!(
                "grid must be 1-D or 2-D, got {} axes",
                dims.len()
            )));
        }
        for &d in &dims {
            if d < 2 || !d.is_power_of_two() {
                return Err(WaveletError::Dimension(format!(
                    "axis length {d} is not a power of two >= 2"
                )));
            }
        }
        if dims.len() == 2 && dims[0] != dims[1] {
            return Err(WaveletError::Dimension(format!(
                "2-D grids must be square for full-depth decomposition, got {}x{}",
                dims[0], dims[1]
            )));
        }
        let g = Grid { dims };
        if g.len() < 4 {
            return Err(WaveletError::Dimension(
                "grid must contain at least 4 points".into(),
            ));
        }
        Ok(g)
    }

    pub fn square(side: usize) -> Result<Grid, WaveletError> {
        Grid::new(vec![side, side])
    }

    pub fn line(len: usize) -> Result<Grid, WaveletError> {
        Grid::new(vec![len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total number of grid points L.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Finest level index J; levels run 0..=J.
    pub fn max_level(&self) -> usize {
        self.dims[0].trailing_zeros() as usize - 1
    }

    pub fn n_levels(&self) -> usize {
        self.max_level() + 1
    }

    /// Number of detail coefficients in level j.
    pub fn level_size(&self, j: usize) -> usize {
        match self.ndim() {
            1 => 1 << j,
            _ => 3 << (2 * j),
        }
    }

    /// Offset of level j in the flat coefficient order (scaling is slot 0).
    pub fn level_offset(&self, j: usize) -> usize {
        1 + (0..j).map(|l| self.level_size(l)).sum::<usize>()
    }

    /// Flattens a 2-D image column-major; identity layout for 1-D.
    pub fn flatten(&self, image: &Array2<f64>) -> Result<Vec<f64>, WaveletError> {
        let (r, c) = (image.nrows(), image.ncols());
        if self.ndim() == 2 {
            if r != self.dims[0] || c != self.dims[1] {
                return Err(WaveletError::Dimension(format!(
                    "image is {r}x{c}, grid is {}x{}",
                    self.dims[0], self.dims[1]
                )));
            }
        } else if r * c != self.len() || (r != 1 && c != 1) {
            return Err(WaveletError::Dimension(format!(
                "expected a length-{} vector, got {r}x{c}",
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(r * c);
        for col in 0..c {
            for row in 0..r {
                out.push(image[(row, col)]);
            }
        }
        Ok(out)
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<Array2<f64>, WaveletError> {
        if flat.len() != self.len() {
            return Err(WaveletError::Dimension(format!(
                "flat length {} != grid size {}",
                flat.len(),
                self.len()
            )));
        }
        let (r, c) = match self.ndim() {
            1 => (self.dims[0], 1),
            _ => (self.dims[0], self.dims[1]),
        };
        let mut out = Array2::<f64>::zeros((r, c));
        let mut k = 0;
        for col in 0..c {
            for row in 0..r {
                out[(row, col)] = flat[k];
                k += 1;
            }
        }
        Ok(out)
    }
}

/// Embedding record produced by [`pad_to_dyadic`]; inverts the padding.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PaddingRecord {
    pub original: [usize; 2],
    pub offsets: [usize; 2],
}

impl PaddingRecord {
    /// Extracts the original window from a padded image.
    pub fn crop(&self, padded: &Array2<f64>) -> Result<Array2<f64>, WaveletError> {
        let [r0, c0] = self.offsets;
        let [rn, cn] = self.original;
        if r0 + rn > padded.nrows() || c0 + cn > padded.ncols() {
            return Err(WaveletError::Dimension(
                "padding record does not fit the given image".into(),
            ));
        }
        let mut out = Array2::<f64>::zeros((rn, cn));
        for r in 0..rn {
            for c in 0..cn {
                out[(r, c)] = padded[(r0 + r, c0 + c)];
            }
        }
        Ok(out)
    }
}

/// Zero-pads `image` into the top-left corner of a `target` canvas.
pub fn pad_to_dyadic(
    image: &Array2<f64>,
    target: [usize; 2],
) -> Result<(Array2<f64>, PaddingRecord), WaveletError> {
    let (r, c) = (image.nrows(), image.ncols());
    for (i, &t) in target.iter().enumerate() {
        if !t.is_power_of_two() {
            return Err(WaveletError::Dimension(format!(
                "target axis {i} length {t} is not a power of two"
            )));
        }
    }
    if target[0] < r || target[1] < c {
        return Err(WaveletError::Dimension(format!(
            "target {}x{} is smaller than image {r}x{c}",
            target[0], target[1]
        )));
    }
    let mut out = Array2::<f64>::zeros((target[0], target[1]));
    for i in 0..r {
        for j in 0..c {
            out[(i, j)] = image[(i, j)];
        }
    }
    Ok((
        out,
        PaddingRecord {
            original: [r, c],
            offsets: [0, 0],
        },
    ))
}

/// Wavelet coefficients grouped by resolution level.
#[derive(Clone, Debug)]
pub struct WaveletCoefficients {
    pub scaling: f64,
    pub levels: Vec<Vec<f64>>,
    pub family: WaveletFamily,
    pub grid: Grid,
}

impl WaveletCoefficients {
    pub fn from_flat(flat: &[f64], grid: &Grid, family: WaveletFamily) -> Self {
        debug_assert_eq!(flat.len(), grid.len());
        let mut levels = Vec::with_capacity(grid.n_levels());
        for j in 0..grid.n_levels() {
            let off = grid.level_offset(j);
            levels.push(flat[off..off + grid.level_size(j)].to_vec());
        }
        WaveletCoefficients {
            scaling: flat[0],
            levels,
            family,
            grid: grid.clone(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.grid.len());
        flat.push(self.scaling);
        for lv in &self.levels {
            flat.extend_from_slice(lv);
        }
        flat
    }

    fn check(&self) -> Result<(), WaveletError> {
        if self.levels.len() != self.grid.n_levels() {
            return Err(WaveletError::Structure(format!(
                "{} levels present, grid requires {}",
                self.levels.len(),
                self.grid.n_levels()
            )));
        }
        for (j, lv) in self.levels.iter().enumerate() {
            if lv.len() != self.grid.level_size(j) {
                return Err(WaveletError::Structure(format!(
                    "level {j} has {} coefficients, expected {}",
                    lv.len(),
                    self.grid.level_size(j)
                )));
            }
        }
        Ok(())
    }
}

/// One analysis stage on `x[0..2*half]`: approximation into the first half,
/// detail into the second. Periodic extension.
fn stage_forward(x: &mut [f64], half: usize, h: &[f64], g: &[f64], scratch: &mut [f64]) {
    let m = 2 * half;
    for k in 0..half {
        let mut s = 0.0;
        let mut d = 0.0;
        for (t, (&ht, &gt)) in h.iter().zip(g).enumerate() {
            let v = x[(2 * k + t) % m];
            s += ht * v;
            d += gt * v;
        }
        scratch[k] = s;
        scratch[half + k] = d;
    }
    x[..m].copy_from_slice(&scratch[..m]);
}

/// Inverse of [`stage_forward`] (transpose of the orthonormal stage).
fn stage_inverse(x: &mut [f64], half: usize, h: &[f64], g: &[f64], scratch: &mut [f64]) {
    let m = 2 * half;
    scratch[..m].fill(0.0);
    for k in 0..half {
        let s = x[k];
        let d = x[half + k];
        for (t, (&ht, &gt)) in h.iter().zip(g).enumerate() {
            scratch[(2 * k + t) % m] += ht * s + gt * d;
        }
    }
    x[..m].copy_from_slice(&scratch[..m]);
}

fn forward_1d_in_place(x: &mut [f64], family: WaveletFamily) {
    let (h, g) = family.filters();
    let mut scratch = vec![0.0; x.len()];
    let mut size = x.len();
    while size >= 2 {
        stage_forward(x, size / 2, &h, &g, &mut scratch);
        size /= 2;
    }
}

fn inverse_1d_in_place(x: &mut [f64], family: WaveletFamily) {
    let (h, g) = family.filters();
    let mut scratch = vec![0.0; x.len()];
    let mut size = 2;
    while size <= x.len() {
        stage_inverse(x, size / 2, &h, &g, &mut scratch);
        size *= 2;
    }
}

fn forward_2d_in_place(a: &mut Array2<f64>, family: WaveletFamily) {
    let (h, g) = family.filters();
    let side = a.nrows();
    let mut row = vec![0.0; side];
    let mut scratch = vec![0.0; side];
    let mut size = side;
    while size >= 2 {
        for r in 0..size {
            for c in 0..size {
                row[c] = a[(r, c)];
            }
            stage_forward(&mut row, size / 2, &h, &g, &mut scratch);
            for c in 0..size {
                a[(r, c)] = row[c];
            }
        }
        for c in 0..size {
            for r in 0..size {
                row[r] = a[(r, c)];
            }
            stage_forward(&mut row, size / 2, &h, &g, &mut scratch);
            for r in 0..size {
                a[(r, c)] = row[r];
            }
        }
        size /= 2;
    }
}

fn inverse_2d_in_place(a: &mut Array2<f64>, family: WaveletFamily) {
    let (h, g) = family.filters();
    let side = a.nrows();
    let mut row = vec![0.0; side];
    let mut scratch = vec![0.0; side];
    let mut size = 2;
    while size <= side {
        for c in 0..size {
            for r in 0..size {
                row[r] = a[(r, c)];
            }
            stage_inverse(&mut row, size / 2, &h, &g, &mut scratch);
            for r in 0..size {
                a[(r, c)] = row[r];
            }
        }
        for r in 0..size {
            for c in 0..size {
                row[c] = a[(r, c)];
            }
            stage_inverse(&mut row, size / 2, &h, &g, &mut scratch);
            for c in 0..size {
                a[(r, c)] = row[c];
            }
        }
        size *= 2;
    }
}

/// Copies the Mallat-layout 2-D array into the flat level-grouped order.
fn mallat_to_flat(a: &Array2<f64>, grid: &Grid) -> Vec<f64> {
    let mut flat = Vec::with_capacity(grid.len());
    flat.push(a[(0, 0)]);
    for j in 0..grid.n_levels() {
        let s = 1 << j;
        // LH: detail along the column index
        for r in 0..s {
            for c in 0..s {
                flat.push(a[(r, s + c)]);
            }
        }
        // HL: detail along the row index
        for r in 0..s {
            for c in 0..s {
                flat.push(a[(s + r, c)]);
            }
        }
        // HH
        for r in 0..s {
            for c in 0..s {
                flat.push(a[(s + r, s + c)]);
            }
        }
    }
    flat
}

fn flat_to_mallat(flat: &[f64], grid: &Grid) -> Array2<f64> {
    let side = grid.dims()[0];
    let mut a = Array2::<f64>::zeros((side, side));
    a[(0, 0)] = flat[0];
    let mut k = 1;
    for j in 0..grid.n_levels() {
        let s = 1 << j;
        for r in 0..s {
            for c in 0..s {
                a[(r, s + c)] = flat[k];
                k += 1;
            }
        }
        for r in 0..s {
            for c in 0..s {
                a[(s + r, c)] = flat[k];
                k += 1;
            }
        }
        for r in 0..s {
            for c in 0..s {
                a[(s + r, s + c)] = flat[k];
                k += 1;
            }
        }
    }
    a
}

/// Full-depth forward transform of flattened grid data; returns coefficients
/// in the flat level-grouped order.
pub fn forward_flat(
    data: &[f64],
    grid: &Grid,
    family: WaveletFamily,
) -> Result<Vec<f64>, WaveletError> {
    if data.len() != grid.len() {
        return Err(WaveletError::Dimension(format!(
            "data length {} != grid size {}",
            data.len(),
            grid.len()
        )));
    }
    match grid.ndim() {
        1 => {
            let mut x = data.to_vec();
            forward_1d_in_place(&mut x, family);
            Ok(x)
        }
        _ => {
            let mut a = grid.unflatten(data)?;
            forward_2d_in_place(&mut a, family);
            Ok(mallat_to_flat(&a, grid))
        }
    }
}

/// Exact inverse of [`forward_flat`].
pub fn inverse_flat(
    coeffs: &[f64],
    grid: &Grid,
    family: WaveletFamily,
) -> Result<Vec<f64>, WaveletError> {
    if coeffs.len() != grid.len() {
        return Err(WaveletError::Dimension(format!(
            "coefficient length {} != grid size {}",
            coeffs.len(),
            grid.len()
        )));
    }
    match grid.ndim() {
        1 => {
            let mut x = coeffs.to_vec();
            inverse_1d_in_place(&mut x, family);
            Ok(x)
        }
        _ => {
            let mut a = flat_to_mallat(coeffs, grid);
            inverse_2d_in_place(&mut a, family);
            grid.flatten(&a)
        }
    }
}

/// Forward transform of a 2-D image (must match a dyadic square grid).
pub fn forward_dwt(
    image: &Array2<f64>,
    family: WaveletFamily,
) -> Result<WaveletCoefficients, WaveletError> {
    let grid = Grid::square(image.nrows())?;
    if image.ncols() != image.nrows() {
        return Err(WaveletError::Dimension(format!(
            "image is {}x{}, expected square dyadic",
            image.nrows(),
            image.ncols()
        )));
    }
    let flat = grid.flatten(image)?;
    let c = forward_flat(&flat, &grid, family)?;
    Ok(WaveletCoefficients::from_flat(&c, &grid, family))
}

/// Forward transform of a 1-D signal of dyadic length.
pub fn forward_dwt_1d(
    signal: &Array1<f64>,
    family: WaveletFamily,
) -> Result<WaveletCoefficients, WaveletError> {
    let grid = Grid::line(signal.len())?;
    let c = forward_flat(signal.as_slice().unwrap(), &grid, family)?;
    Ok(WaveletCoefficients::from_flat(&c, &grid, family))
}

/// Reconstructs the flattened grid data from grouped coefficients.
pub fn inverse_dwt(coeffs: &WaveletCoefficients) -> Result<Array1<f64>, WaveletError> {
    coeffs.check()?;
    let flat = coeffs.to_flat();
    Ok(Array1::from(inverse_flat(&flat, &coeffs.grid, coeffs.family)?))
}

/// Reconstructs a 2-D image from grouped coefficients.
pub fn inverse_dwt_image(coeffs: &WaveletCoefficients) -> Result<Array2<f64>, WaveletError> {
    let flat = inverse_dwt(coeffs)?;
    coeffs.grid.unflatten(flat.as_slice().unwrap())
}

/// Ψ_j β_j: zero-embeds a level-j coefficient vector and inverts.
/// Returns the flattened image; linear in β_j.
pub fn synthesize_level(
    j: usize,
    beta: &[f64],
    grid: &Grid,
    family: WaveletFamily,
) -> Result<Array1<f64>, WaveletError> {
    if j >= grid.n_levels() {
        return Err(WaveletError::Dimension(format!(
            "level {j} out of range, grid has levels 0..={}",
            grid.max_level()
        )));
    }
    if beta.len() != grid.level_size(j) {
        return Err(WaveletError::Dimension(format!(
            "level {j} expects {} coefficients, got {}",
            grid.level_size(j),
            beta.len()
        )));
    }
    let mut flat = vec![0.0; grid.len()];
    let off = grid.level_offset(j);
    flat[off..off + beta.len()].copy_from_slice(beta);
    Ok(Array1::from(inverse_flat(&flat, grid, family)?))
}
