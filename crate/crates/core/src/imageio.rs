//! 8-bit grayscale image I/O and overlay rendering.
//!
//! In-memory convention: tensors are `[1, H, W]` with values in `[0, 1]`,
//! coordinate `x` is the row and `y` the column. Image files use the usual
//! (column, row) pixel addressing; the conversion happens here and nowhere
//! else. Every renderer has a `*_png` variant producing the encoded bytes,
//! so callers can stage all outputs before touching the filesystem.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::postprocess::HeatMap;
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(bytes.into_inner())
}

fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(bytes.into_inner())
}

fn gray_base(input: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if c != 1 {
        return Err(Error::Image(format!(
            "grayscale rendering needs a single channel, got {}",
            c
        )));
    }
    Ok((h, w))
}

/// Loads an 8-bit grayscale image as a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn load_grayscale(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for x in 0..h {
        for y in 0..w {
            data.push(img.get_pixel(y, x).0[0] as f32 / 255.0);
        }
    }
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// PNG bytes of a `[1, H, W]` tensor with values in `[0, 1]`.
pub fn grayscale_png(tensor: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = gray_base(tensor)?;
    let mut img = GrayImage::new(w as u32, h as u32);
    for x in 0..h {
        for y in 0..w {
            img.put_pixel(
                y as u32,
                x as u32,
                image::Luma([to_u8(tensor.at3(0, x, y))]),
            );
        }
    }
    encode_gray(&img)
}

pub fn save_grayscale(tensor: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, grayscale_png(tensor)?)?;
    Ok(())
}

/// PNG bytes of a heat map as 8-bit grayscale: value 1.0 becomes pixel 255.
pub fn heatmap_png(map: &HeatMap) -> Result<Vec<u8>> {
    let mut img = GrayImage::new(map.width() as u32, map.height() as u32);
    for x in 0..map.height() {
        for y in 0..map.width() {
            img.put_pixel(y as u32, x as u32, image::Luma([to_u8(map.at(x, y))]));
        }
    }
    encode_gray(&img)
}

pub fn save_heatmap(map: &HeatMap, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_png(map)?)?;
    Ok(())
}

/// RGB overlay: the heat map modulates a red channel over the input image.
pub fn heatmap_overlay_png(map: &HeatMap, input: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = gray_base(input)?;
    if h != map.height() || w != map.width() {
        return Err(Error::Shape(format!(
            "overlay needs a matching [1, {}, {}] input, got {:?}",
            map.height(),
            map.width(),
            input.shape()
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for x in 0..h {
        for y in 0..w {
            let base = input.at3(0, x, y).clamp(0.0, 1.0);
            let heat = map.at(x, y).clamp(0.0, 1.0);
            let red = to_u8(base + (1.0 - base) * heat);
            let other = to_u8(base * (1.0 - heat));
            img.put_pixel(y as u32, x as u32, image::Rgb([red, other, other]));
        }
    }
    encode_rgb(&img)
}

pub fn save_heatmap_overlay(map: &HeatMap, input: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_overlay_png(map, input)?)?;
    Ok(())
}

/// RGB overlay marking each fixation as a red pixel dilated to 3x3 for
/// visibility.
pub fn fixation_overlay_png(points: &[(usize, usize)], input: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = gray_base(input)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for x in 0..h {
        for y in 0..w {
            let g = to_u8(input.at3(0, x, y));
            img.put_pixel(y as u32, x as u32, image::Rgb([g, g, g]));
        }
    }
    for &(px, py) in points {
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let x = px as i64 + dx;
                let y = py as i64 + dy;
                if x >= 0 && (x as usize) < h && y >= 0 && (y as usize) < w {
                    img.put_pixel(y as u32, x as u32, image::Rgb([255, 0, 0]));
                }
            }
        }
    }
    encode_rgb(&img)
}

pub fn save_fixation_overlay(points: &[(usize, usize)], input: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, fixation_overlay_png(points, input)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data: Vec<f32> = (0..64).map(|i| (i as f32) / 63.0).collect();
        let tensor = Tensor::new(vec![1, 8, 8], data).unwrap();
        save_grayscale(&tensor, &path).unwrap();
        let back = load_grayscale(&path).unwrap();
        assert_eq!(back.shape(), &[1, 8, 8]);
        for (a, b) in tensor.data().iter().zip(back.data()) {
            // one u8 quantization step of slack
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn heatmap_peak_writes_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let map = crate::postprocess::heatmap_from_fixations(&[(3, 4)], (8, 8), 1.0).unwrap();
        save_heatmap(&map, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.pixels().map(|p| p.0[0]).max(), Some(255));
        // peak lands at (row 3, col 4), i.e. pixel (x=4, y=3)
        assert_eq!(img.get_pixel(4, 3).0[0], 255);
    }

    #[test]
    fn fixation_overlay_dilates_to_3x3() {
        let input = Tensor::zeros(vec![1, 8, 8]);
        let bytes = fixation_overlay_png(&[(4, 4)], &input).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        let red = img.pixels().filter(|p| p.0 == [255, 0, 0]).count();
        assert_eq!(red, 9);
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let map =
            crate::postprocess::heatmap_from_fixations(&[(2, 2), (5, 6)], (9, 9), 1.5).unwrap();
        assert_eq!(heatmap_png(&map).unwrap(), heatmap_png(&map).unwrap());
    }
}
