use super::{HsiCube, HsiError, LabelMap};

/// Symmetric (edge-repeating) reflection of `i` into `0..n`: `-1 → 0`, `n → n-1`.
pub fn mirror_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// A `size × size × bands` block around a labeled pixel, row-major `(row, col, band)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchWindow {
    pub center: (usize, usize),
    pub size: usize,
    pub bands: usize,
    pub data: Vec<f64>,
    pub label: u16,
}

impl PatchWindow {
    pub fn value(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.size + col) * self.bands + band]
    }
}

/// Window covering rows `[r - W/2, r + W/2)` and the same for columns, so the
/// center pixel sits at window position `(W/2, W/2)`. Out-of-range positions
/// are mirrored back into the cube.
pub fn extract_window(
    cube: &HsiCube,
    labels: &LabelMap,
    center: (usize, usize),
    size: usize,
) -> Result<PatchWindow, HsiError> {
    if !labels.matches(cube) {
        return Err(HsiError::DimensionMismatch {
            cube: (cube.rows(), cube.cols()),
            labels: (labels.rows(), labels.cols()),
        });
    }
    let (r, c) = center;
    if r >= cube.rows() || c >= cube.cols() {
        return Err(HsiError::OutOfBounds { row: r, col: c });
    }
    if size == 0 || !size.is_multiple_of(2) {
        return Err(HsiError::OddWindow(size));
    }
    if size > cube.rows().min(cube.cols()) {
        return Err(HsiError::WindowTooLarge {
            size,
            rows: cube.rows(),
            cols: cube.cols(),
        });
    }
    let label = labels.get(r, c);
    if label == 0 {
        return Err(HsiError::UnlabeledCenter { row: r, col: c });
    }
    let half = (size / 2) as isize;
    let bands = cube.bands();
    let mut data = Vec::with_capacity(size * size * bands);
    for dr in -half..half {
        let row = mirror_index(r as isize + dr, cube.rows());
        for dc in -half..half {
            let col = mirror_index(c as isize + dc, cube.cols());
            data.extend(cube.spectrum(row, col).iter().map(|&v| v as f64));
        }
    }
    Ok(PatchWindow {
        center,
        size,
        bands,
        data,
        label,
    })
}

/// Windows for a list of pixel indices (`row·cols + col`).
pub fn extract_windows(
    cube: &HsiCube,
    labels: &LabelMap,
    indices: &[usize],
    size: usize,
) -> Result<Vec<PatchWindow>, HsiError> {
    indices
        .iter()
        .map(|&i| {
            if i >= labels.labels().len() {
                return Err(HsiError::IndexOutOfRange(i));
            }
            extract_window(cube, labels, labels.coords(i), size)
        })
        .collect()
}
