use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// "Same" padding of a 3-tap window along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamePadding {
    pub len: usize,
    pub out: usize,
    /// Zero-point samples inserted before the first real one.
    pub before: usize,
    /// Length of the padded axis.
    pub padded: usize,
}

impl SamePadding {
    pub fn new(len: usize, stride: usize) -> Self {
        let out = len.div_ceil(stride);
        let total = ((out - 1) * stride + 3).saturating_sub(len);
        SamePadding { len, out, before: total / 2, padded: len + total }
    }

    fn contains(&self, padded_index: usize) -> bool {
        padded_index >= self.before && padded_index < self.before + self.len
    }
}

/// Two-row line buffer feeding a 3×3 window register.
///
/// Pixels arrive once each in raster order. The two stored rows hold the
/// previous lines; as a pixel at column `c` arrives, column `c` of both rows
/// and the new pixel shift into the right edge of the window, and the rows
/// move up by one line at that column.
#[derive(Debug, Clone)]
pub struct LineBuffer {
    lanes: usize,
    width: usize,
    rows: [Vec<u8>; 2],
    window: Vec<u8>,
    row: usize,
    col: usize,
}

impl LineBuffer {
    pub fn new(width: usize, lanes: usize, fill: u8) -> Self {
        LineBuffer {
            lanes,
            width,
            rows: [vec![fill; width * lanes], vec![fill; width * lanes]],
            window: vec![fill; 9 * lanes],
            row: 0,
            col: 0,
        }
    }

    /// Pushes the next pixel and returns its (row, col) position.
    pub fn push(&mut self, px: &[u8]) -> (usize, usize) {
        debug_assert_eq!(px.len(), self.lanes);
        let l = self.lanes;
        for ky in 0..3 {
            let base = ky * 3 * l;
            self.window.copy_within(base + l..base + 3 * l, base);
        }
        let c = self.col;
        let span = c * l..(c + 1) * l;
        self.window[2 * l..3 * l].copy_from_slice(&self.rows[0][span.clone()]);
        self.window[5 * l..6 * l].copy_from_slice(&self.rows[1][span.clone()]);
        self.window[8 * l..9 * l].copy_from_slice(px);
        let (upper, lower) = self.rows.split_at_mut(1);
        upper[0][span.clone()].copy_from_slice(&lower[0][span.clone()]);
        lower[0][span].copy_from_slice(px);

        let pos = (self.row, self.col);
        self.col += 1;
        if self.col == self.width {
            self.col = 0;
            self.row += 1;
        }
        pos
    }

    /// The current window, `[ky][kx][lane]` flattened.
    pub fn window(&self) -> &[u8] {
        &self.window
    }

    /// Bytes of row storage (two rows of `width · lanes`).
    pub fn storage_bytes(&self) -> usize {
        2 * self.width * self.lanes
    }
}

/// Streams a frame once through a line buffer, calling `emit(oy, ox, window)`
/// for every output position of a 3×3 "same"-padded convolution.
///
/// `pixels` must yield exactly `height · width` slices of `lanes` values in
/// raster order; border samples are synthesised from `zero`.
pub(crate) fn stream_3x3<'a, I, F>(
    pixels: I,
    height: usize,
    width: usize,
    lanes: usize,
    stride: usize,
    zero: u8,
    mut emit: F,
) -> Result<()>
where
    I: IntoIterator<Item = &'a [u8]>,
    F: FnMut(usize, usize, &[u8]),
{
    let ay = SamePadding::new(height, stride);
    let ax = SamePadding::new(width, stride);
    let pad = vec![zero; lanes];
    let mut lb = LineBuffer::new(ax.padded, lanes, zero);
    let mut src = pixels.into_iter();
    for r in 0..ay.padded {
        for c in 0..ax.padded {
            let px = if ay.contains(r) && ax.contains(c) {
                src.next().ok_or_else(|| Error::Sequencing("pixel stream ended early".into()))?
            } else {
                &pad[..]
            };
            lb.push(px);
            if r >= 2 && c >= 2 && (r - 2) % stride == 0 && (c - 2) % stride == 0 {
                let (oy, ox) = ((r - 2) / stride, (c - 2) / stride);
                if oy < ay.out && ox < ax.out {
                    emit(oy, ox, lb.window());
                }
            }
        }
    }
    if src.next().is_some() {
        return Err(Error::Sequencing("pixel stream has extra pixels".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        assert_eq!(SamePadding::new(224, 2), SamePadding { len: 224, out: 112, before: 0, padded: 225 });
        assert_eq!(SamePadding::new(7, 1), SamePadding { len: 7, out: 7, before: 1, padded: 9 });
        assert_eq!(SamePadding::new(7, 2), SamePadding { len: 7, out: 4, before: 1, padded: 9 });
        assert_eq!(SamePadding::new(1, 1), SamePadding { len: 1, out: 1, before: 1, padded: 3 });
    }

    #[test]
    fn windows_match_direct_indexing() {
        let (h, w) = (5, 6);
        let frame: Vec<u8> = (0..h * w).map(|i| i as u8 + 1).collect();
        for stride in [1, 2] {
            let ay = SamePadding::new(h, stride);
            let ax = SamePadding::new(w, stride);
            let mut seen = 0;
            stream_3x3(frame.chunks(1), h, w, 1, stride, 0, |oy, ox, win| {
                seen += 1;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * stride + ky) as isize - ay.before as isize;
                        let x = (ox * stride + kx) as isize - ax.before as isize;
                        let expected = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            0
                        } else {
                            frame[y as usize * w + x as usize]
                        };
                        assert_eq!(win[ky * 3 + kx], expected, "stride {stride} at ({oy},{ox})");
                    }
                }
            })
            .unwrap();
            assert_eq!(seen, ay.out * ax.out);
        }
    }

    #[test]
    fn stream_length_is_checked() {
        let frame = [1u8; 8];
        assert!(stream_3x3(frame.chunks(1), 3, 3, 1, 1, 0, |_, _, _| {}).is_err());
        let frame = [1u8; 10];
        assert!(stream_3x3(frame.chunks(1), 3, 3, 1, 1, 0, |_, _, _| {}).is_err());
    }

    #[test]
    fn two_rows_of_storage() {
        let lb = LineBuffer::new(224, 3, 0);
        assert_eq!(lb.storage_bytes(), 2 * 224 * 3);
    }
}
