//! Binary masks, COCO run-length encoding and the small raster toolkit the
//! rest of the pipeline is built on.
//!
//! Masks are stored row-major with one byte per pixel (0 or 1). COCO RLE is
//! column-major and always starts with a run of zeros.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("run-length counts sum to {got}, expected {expected}")]
    RleLength { got: u64, expected: u64 },
    #[error("malformed compressed RLE string")]
    RleString,
    #[error("polygon has {0} coordinates; need an even count of at least 6")]
    Polygon(usize),
}

/// Axis-aligned integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &PixelBox) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// COCO `[x, y, w, h]` representation.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.w as f64, self.h as f64]
    }
}

/// A binary raster, one byte per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.data[(y * width + x) as usize] = 1;
                }
            }
        }
        m
    }

    /// Builds a mask from raw bytes, treating any non-zero byte as set.
    pub fn from_raw(width: u32, height: u32, raw: &[u8]) -> Self {
        assert_eq!(raw.len(), width as usize * height as usize);
        Self {
            width,
            height,
            data: raw.iter().map(|&v| u8::from(v != 0)).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    /// Out-of-range coordinates read as unset.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as u64) < self.width as u64
            && (y as u64) < self.height as u64
            && self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = u8::from(v);
    }

    pub fn area(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<PixelBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for y in 0..self.height {
            let row = &self.data[(y * self.width) as usize..((y + 1) * self.width) as usize];
            if let Some(first) = row.iter().position(|&v| v != 0) {
                let last = row.iter().rposition(|&v| v != 0).unwrap();
                any = true;
                x0 = x0.min(first as u32);
                x1 = x1.max(last as u32);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        any.then(|| PixelBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// Centroid in continuous coordinates (pixel `i` spans `[i, i+1)`).
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0u64);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn intersect(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let (mut inter, mut uni) = (0u64, 0u64);
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as u64;
            uni += (a | b) as u64;
        }
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Dilation with a square structuring element of Chebyshev radius `r`.
    pub fn dilate(&self, r: u32) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as i64, self.height as i64);
        let r = r as i64;
        let mut horiz = vec![0u8; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let lo = (x - r).max(0);
                let hi = (x + r).min(w - 1);
                let row = (y * w) as usize;
                if (lo..=hi).any(|xx| self.data[row + xx as usize] != 0) {
                    horiz[row + x as usize] = 1;
                }
            }
        }
        let mut out = vec![0u8; self.data.len()];
        for y in 0..h {
            let lo = (y - r).max(0);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                if (lo..=hi).any(|yy| horiz[(yy * w + x) as usize] != 0) {
                    out[(y * w + x) as usize] = 1;
                }
            }
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    /// Erosion with a square structuring element; pixels beyond the frame
    /// count as background.
    pub fn erode(&self, r: u32) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as i64, self.height as i64);
        let r = r as i64;
        let mut horiz = vec![0u8; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let row = (y * w) as usize;
                if x - r >= 0
                    && x + r < w
                    && ((x - r)..=(x + r)).all(|xx| self.data[row + xx as usize] != 0)
                {
                    horiz[row + x as usize] = 1;
                }
            }
        }
        let mut out = vec![0u8; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                if y - r >= 0
                    && y + r < h
                    && ((y - r)..=(y + r)).all(|yy| horiz[(yy * w + x) as usize] != 0)
                {
                    out[(y * w + x) as usize] = 1;
                }
            }
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    /// Labels 8-connected components. Returns the label image (0 = background)
    /// and the pixel count of each component, labels starting at 1.
    pub fn label_components(&self) -> (Vec<u32>, Vec<u64>) {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut labels = vec![0u32; self.data.len()];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || labels[start] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0u64;
            labels[start] = label;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                size += 1;
                let (x, y) = ((idx as i64) % w, (idx as i64) / w);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let n = (ny * w + nx) as usize;
                        if self.data[n] != 0 && labels[n] == 0 {
                            labels[n] = label;
                            stack.push(n);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    pub fn component_count(&self) -> usize {
        self.label_components().1.len()
    }

    /// Largest 8-connected component; ties go to the component met first in
    /// row-major order.
    pub fn largest_component(&self) -> BinaryMask {
        let (labels, sizes) = self.label_components();
        let Some(best) = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32 + 1)
        else {
            return self.clone();
        };
        BinaryMask {
            width: self.width,
            height: self.height,
            data: labels.iter().map(|&l| u8::from(l == best)).collect(),
        }
    }

    /// Copies out the rectangle `rect`, which must lie inside the frame.
    pub fn crop(&self, rect: PixelBox) -> BinaryMask {
        assert!(rect.right() <= self.width && rect.bottom() <= self.height);
        let mut out = BinaryMask::new(rect.w, rect.h);
        for y in 0..rect.h {
            let src = ((rect.y + y) * self.width + rect.x) as usize;
            let dst = (y * rect.w) as usize;
            out.data[dst..dst + rect.w as usize]
                .copy_from_slice(&self.data[src..src + rect.w as usize]);
        }
        out
    }

    /// Places `self` at (`x`, `y`) inside an empty frame of the given size.
    pub fn embed(&self, frame_w: u32, frame_h: u32, x: u32, y: u32) -> BinaryMask {
        assert!(x + self.width <= frame_w && y + self.height <= frame_h);
        let mut out = BinaryMask::new(frame_w, frame_h);
        for yy in 0..self.height {
            let src = (yy * self.width) as usize;
            let dst = ((y + yy) * frame_w + x) as usize;
            out.data[dst..dst + self.width as usize]
                .copy_from_slice(&self.data[src..src + self.width as usize]);
        }
        out
    }

    /// Nearest-neighbour resampling with pixel-centre alignment.
    pub fn resize_nearest(&self, new_w: u32, new_h: u32) -> BinaryMask {
        let xs: Vec<u32> = (0..new_w)
            .map(|x| nearest_source(x, self.width, new_w))
            .collect();
        let mut out = BinaryMask::new(new_w, new_h);
        for y in 0..new_h {
            let sy = nearest_source(y, self.height, new_h);
            let src_row = (sy * self.width) as usize;
            let dst_row = (y * new_w) as usize;
            for (x, &sx) in xs.iter().enumerate() {
                out.data[dst_row + x] = self.data[src_row + sx as usize];
            }
        }
        out
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }

    /// 8-bit grayscale rendering (0 / 255).
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

#[inline]
fn nearest_source(dst: u32, src_len: u32, dst_len: u32) -> u32 {
    let s = ((dst as u64 * 2 + 1) * src_len as u64) / (dst_len as u64 * 2);
    (s as u32).min(src_len - 1)
}

/// COCO uncompressed run-length encoding: column-major runs, first run counts
/// zeros.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`, as in COCO.
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    pub fn encode(mask: &BinaryMask) -> Rle {
        let (w, h) = mask.dims();
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = mask.data[(y * w + x) as usize];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [h, w],
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, RasterError> {
        let (h, w) = (self.size[0], self.size[1]);
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = w as u64 * h as u64;
        if total != expected {
            return Err(RasterError::RleLength {
                got: total,
                expected,
            });
        }
        let mut mask = BinaryMask::new(w, h);
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + c as u64 {
                    let (x, y) = ((p / h as u64) as u32, (p % h as u64) as u32);
                    mask.data[(y * w + x) as usize] = 1;
                }
            }
            pos += c as u64;
        }
        Ok(mask)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Decodes the LEB128-like string form used by compressed COCO RLE.
    pub fn from_compressed(size: [u32; 2], s: &str) -> Result<Rle, RasterError> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u32> = Vec::new();
        let mut p = 0usize;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0u32;
            loop {
                let Some(&b) = bytes.get(p) else {
                    return Err(RasterError::RleString);
                };
                if !(48..=111).contains(&b) {
                    return Err(RasterError::RleString);
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                let more = c & 0x20 != 0;
                p += 1;
                k += 1;
                if !more {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            let n = counts.len();
            if n > 2 {
                x += counts[n - 2] as i64;
            }
            if x < 0 {
                return Err(RasterError::RleString);
            }
            counts.push(x as u32);
        }
        Ok(Rle { size, counts })
    }

    pub fn to_compressed(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = c as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut b = x & 0x1f;
                x >>= 5;
                let more = if b & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    b |= 0x20;
                }
                out.push((b as u8 + 48) as char);
                if !more {
                    break;
                }
            }
        }
        out
    }
}

/// Rasterizes a list of COCO polygons (flat `[x0, y0, x1, y1, ...]`) into a
/// `width × height` mask. Each polygon is filled with the even–odd rule by
/// sampling pixel centres; separate polygons are unioned.
pub fn rasterize_polygons(
    polygons: &[Vec<f64>],
    width: u32,
    height: u32,
) -> Result<BinaryMask, RasterError> {
    let mut mask = BinaryMask::new(width, height);
    let mut xs: Vec<f64> = Vec::new();
    for poly in polygons {
        if poly.len() < 6 || poly.len() % 2 != 0 {
            return Err(RasterError::Polygon(poly.len()));
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let row_lo = (ymin - 0.5).ceil().max(0.0) as i64;
        let row_hi = ((ymax - 0.5).floor() as i64).min(height as i64 - 1);
        for row in row_lo..=row_hi {
            let yc = row as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= yc) != (y1 <= yc) {
                    xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                // pixel centres x + 0.5 in [a, b)
                let start = (pair[0] - 0.5).ceil().max(0.0) as i64;
                let end = ((pair[1] - 0.5).ceil() as i64).min(width as i64);
                for x in start..end {
                    mask.set(x as u32, row as u32, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Bilinear resampling with pixel-centre alignment and clamped borders.
pub fn resize_bilinear(src: &RgbImage, new_w: u32, new_h: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let mut out = RgbImage::new(new_w, new_h);
    if sw == new_w && sh == new_h {
        out.copy_from_slice(src.as_raw());
        return out;
    }
    let axis = |len_dst: u32, len_src: u32| -> Vec<(u32, u32, f32)> {
        let scale = len_src as f64 / len_dst as f64;
        (0..len_dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as u32).min(len_src - 1);
                let i1 = (i0 + 1).min(len_src - 1);
                (i0, i1, (s - i0 as f64).min(1.0) as f32)
            })
            .collect()
    };
    let xs = axis(new_w, sw);
    let ys = axis(new_h, sh);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = src.get_pixel(x0, y0).0;
            let p10 = src.get_pixel(x1, y0).0;
            let p01 = src.get_pixel(x0, y1).0;
            let p11 = src.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
                let bot = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

/// Copies a rectangle out of an RGB image.
pub fn crop_rgb(src: &RgbImage, rect: PixelBox) -> RgbImage {
    image::imageops::crop_imm(src, rect.x, rect.y, rect.w, rect.h).to_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(w: u32, h: u32, x0: u32, y0: u32, side: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
        })
    }

    #[test]
    fn rle_is_column_major_and_starts_with_zeros() {
        // 2x2 with only (1,0) set: column 0 = [0,0], column 1 = [1,0]
        let m = BinaryMask::from_fn(2, 2, |x, y| x == 1 && y == 0);
        let rle = m.to_rle();
        assert_eq!(rle.size, [2, 2]);
        assert_eq!(rle.counts, vec![2, 1, 1]);
        assert_eq!(rle.decode().unwrap(), m);
        let full = BinaryMask::from_fn(2, 2, |_, _| true);
        assert_eq!(full.to_rle().counts, vec![0, 4]);
    }

    #[test]
    fn rle_rejects_wrong_length() {
        let rle = Rle {
            size: [2, 2],
            counts: vec![1, 1],
        };
        assert!(matches!(rle.decode(), Err(RasterError::RleLength { .. })));
    }

    #[test]
    fn compressed_rle_known_value() {
        // 3x3 mask with only the centre set: counts [4, 1, 4] -> "414"
        let m = BinaryMask::from_fn(3, 3, |x, y| x == 1 && y == 1);
        let rle = m.to_rle();
        assert_eq!(rle.counts, vec![4, 1, 4]);
        let s = rle.to_compressed();
        assert_eq!(s, "414");
        assert_eq!(Rle::from_compressed([3, 3], &s).unwrap(), rle);
    }

    #[test]
    fn polygon_square_rasterizes_exact_pixels() {
        let poly = vec![vec![2.0, 2.0, 6.0, 2.0, 6.0, 5.0, 2.0, 5.0]];
        let m = rasterize_polygons(&poly, 10, 10).unwrap();
        assert_eq!(m.area(), 12);
        assert_eq!(m.bbox(), Some(PixelBox::new(2, 2, 4, 3)));
    }

    #[test]
    fn polygon_even_odd_self_overlap() {
        // bow-tie style double-wound square: inner region counted twice => hole
        let outer = vec![0.0, 0.0, 8.0, 0.0, 8.0, 8.0, 0.0, 8.0];
        let m = rasterize_polygons(std::slice::from_ref(&outer), 8, 8).unwrap();
        assert_eq!(m.area(), 64);
        let ring = vec![
            0.0, 0.0, 8.0, 0.0, 8.0, 8.0, 0.0, 8.0, 0.0, 0.0, 2.0, 2.0, 2.0, 6.0, 6.0, 6.0, 6.0,
            2.0, 2.0, 2.0,
        ];
        let m = rasterize_polygons(&[ring], 8, 8).unwrap();
        assert_eq!(m.area(), 64 - 16);
        assert!(!m.get(3, 3));
    }

    #[test]
    fn polygon_too_short_is_an_error() {
        assert_eq!(
            rasterize_polygons(&[vec![0.0, 0.0, 1.0, 1.0]], 4, 4),
            Err(RasterError::Polygon(4))
        );
    }

    #[test]
    fn dilate_erode_square() {
        let m = square(20, 20, 5, 5, 6);
        assert_eq!(m.dilate(1).area(), 64);
        assert_eq!(m.erode(1).area(), 16);
        assert!(m.erode(1).is_subset_of(&m));
        assert!(m.is_subset_of(&m.dilate(3)));
        // frame border counts as background
        let full = BinaryMask::from_fn(5, 5, |_, _| true);
        assert_eq!(full.erode(1).area(), 9);
    }

    #[test]
    fn components_use_eight_connectivity() {
        let diag = BinaryMask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(diag.component_count(), 1);
        let two = BinaryMask::from_fn(5, 1, |x, _| x == 0 || x == 4);
        assert_eq!(two.component_count(), 2);
        let mut m = square(20, 20, 0, 0, 3);
        m = m.union(&square(20, 20, 10, 10, 5));
        let big = m.largest_component();
        assert_eq!(big.area(), 25);
    }

    #[test]
    fn centroid_and_bbox() {
        let m = square(10, 10, 2, 4, 2);
        assert_eq!(m.centroid(), Some((3.0, 5.0)));
        assert_eq!(m.bbox(), Some(PixelBox::new(2, 4, 2, 2)));
        assert_eq!(BinaryMask::new(3, 3).bbox(), None);
    }

    #[test]
    fn nearest_resize_doubles_exactly() {
        let m = square(4, 4, 1, 1, 2);
        let up = m.resize_nearest(8, 8);
        assert_eq!(up.area(), 16);
        assert_eq!(up.resize_nearest(4, 4), m);
    }

    #[test]
    fn bilinear_constant_image_is_constant() {
        let img = RgbImage::from_pixel(7, 5, Rgb([10, 20, 30]));
        let out = resize_bilinear(&img, 13, 3);
        assert!(out.pixels().all(|p| p.0 == [10, 20, 30]));
    }

    #[test]
    fn box_iou() {
        let a = PixelBox::new(0, 0, 10, 10);
        let b = PixelBox::new(5, 0, 10, 10);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&PixelBox::new(20, 20, 1, 1)), 0.0);
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..24, h in 1u32..24, bits in proptest::collection::vec(any::<bool>(), 576)) {
            let m = BinaryMask::from_fn(w, h, |x, y| bits[(y * 24 + x) as usize]);
            let rle = m.to_rle();
            prop_assert_eq!(rle.area(), m.area());
            prop_assert_eq!(rle.decode().unwrap(), m);
            let s = rle.to_compressed();
            prop_assert_eq!(Rle::from_compressed(rle.size, &s).unwrap(), rle);
        }
    }
}
