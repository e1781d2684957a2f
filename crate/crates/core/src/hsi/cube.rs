use std::fs;
use std::path::Path;

use super::HsiError;

pub const CUBE_MAGIC: [u8; 4] = *b"HSIC";
pub const LABEL_MAGIC: [u8; 4] = *b"HSIL";

const CUBE_HEADER_LEN: usize = 16;
const LABEL_HEADER_LEN: usize = 12;

/// Reflectance cube stored row-major as `(row, col, band)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f32>) -> Result<Self, HsiError> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(HsiError::ZeroDimension);
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(bands))
            .ok_or(HsiError::DimensionOverflow)?;
        if data.len() != expected {
            return Err(HsiError::Truncated {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(HsiError::NonFinite { index });
        }
        Ok(HsiCube {
            rows,
            cols,
            bands,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.cols + col) * self.bands + band]
    }

    /// Multiply every value by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self, HsiError> {
        HsiCube::new(
            self.rows,
            self.cols,
            self.bands,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Parse an HSIC byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HsiError> {
        let (dims, payload) = read_header(bytes, CUBE_MAGIC, 3)?;
        let (rows, cols, bands) = (dims[0], dims[1], dims[2]);
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(HsiError::ZeroDimension);
        }
        let count = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(bands))
            .ok_or(HsiError::DimensionOverflow)?;
        let byte_len = count.checked_mul(4).ok_or(HsiError::DimensionOverflow)?;
        check_payload(payload.len(), byte_len, CUBE_HEADER_LEN)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        HsiCube::new(rows, cols, bands, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CUBE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&CUBE_MAGIC);
        for dim in [self.rows, self.cols, self.bands] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Per-pixel class ids; 0 marks an unlabeled pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    labels: Vec<u16>,
    classes: usize,
}

impl LabelMap {
    /// Validates that the nonzero labels are exactly `1..=C` for some `C`.
    pub fn new(rows: usize, cols: usize, labels: Vec<u16>) -> Result<Self, HsiError> {
        if rows == 0 || cols == 0 {
            return Err(HsiError::ZeroDimension);
        }
        let expected = rows.checked_mul(cols).ok_or(HsiError::DimensionOverflow)?;
        if labels.len() != expected {
            return Err(HsiError::Truncated {
                expected,
                actual: labels.len(),
            });
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; max + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&c| !seen[c]) {
            return Err(HsiError::LabelGap { missing: missing as u16 });
        }
        Ok(LabelMap {
            rows,
            cols,
            labels,
            classes: max,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Number of classes `C`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.cols + col]
    }

    pub fn at_index(&self, index: usize) -> u16 {
        self.labels[index]
    }

    /// `index = row·cols + col` to `(row, col)`.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != 0).collect()
    }

    /// Pixel count per class, index 0 holding unlabeled pixels.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn matches(&self, cube: &HsiCube) -> bool {
        self.rows == cube.rows() && self.cols == cube.cols()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HsiError> {
        let (dims, payload) = read_header(bytes, LABEL_MAGIC, 2)?;
        let (rows, cols) = (dims[0], dims[1]);
        if rows == 0 || cols == 0 {
            return Err(HsiError::ZeroDimension);
        }
        let count = rows.checked_mul(cols).ok_or(HsiError::DimensionOverflow)?;
        let byte_len = count.checked_mul(2).ok_or(HsiError::DimensionOverflow)?;
        check_payload(payload.len(), byte_len, LABEL_HEADER_LEN)?;
        let labels = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        LabelMap::new(rows, cols, labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_HEADER_LEN + self.labels.len() * 2);
        out.extend_from_slice(&LABEL_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }
}

fn read_header(bytes: &[u8], magic: [u8; 4], dims: usize) -> Result<(Vec<usize>, &[u8]), HsiError> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(HsiError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != magic {
        return Err(HsiError::BadMagic {
            expected: magic,
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes.len() < header_len {
        return Err(HsiError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let values = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((values, &bytes[header_len..]))
}

fn check_payload(actual: usize, expected: usize, header: usize) -> Result<(), HsiError> {
    if actual < expected {
        return Err(HsiError::Truncated {
            expected: header + expected,
            actual: header + actual,
        });
    }
    if actual > expected {
        return Err(HsiError::TrailingBytes { extra: actual - expected });
    }
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube, HsiError> {
    HsiCube::from_bytes(&fs::read(path)?)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<(), HsiError> {
    fs::write(path, cube.to_bytes())?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap, HsiError> {
    LabelMap::from_bytes(&fs::read(path)?)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<(), HsiError> {
    fs::write(path, labels.to_bytes())?;
    Ok(())
}
