//! PNG dumps of images and label maps arranged in grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Display colors for background, road, vehicle, vulnerable.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[40, 40, 40], [128, 64, 128], [0, 0, 142], [220, 20, 60]];

/// A tile: interleaved RGB8 pixels of a fixed size.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

pub fn image_tile(image: &Tensor<f32>) -> Result<Tile> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::invalid_shape(image.shape(), "expected an RGB image"));
    }
    let mut rgb = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            rgb.push((image.channel(ch)[p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(Tile { height: h, width: w, rgb })
}

pub fn label_tile(labels: &Tensor<u8>) -> Result<Tile> {
    let (h, w) = labels.dims2()?;
    let rgb = labels
        .data()
        .iter()
        .flat_map(|&l| CLASS_COLORS.get(l as usize).copied().unwrap_or([255, 255, 255]))
        .collect();
    Ok(Tile { height: h, width: w, rgb })
}

/// Write `rows` of equally sized tiles with a 2-pixel white gutter.
pub fn save_grid(path: impl AsRef<Path>, rows: &[Vec<Tile>]) -> Result<()> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty image grid".into()))?;
    let (th, tw) = (first.height, first.width);
    if rows.iter().flatten().any(|t| t.height != th || t.width != tw) {
        return Err(Error::InvalidConfig("grid tiles differ in size".into()));
    }
    let gutter = 2;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * (tw + gutter) + gutter;
    let height = rows.len() * (th + gutter) + gutter;
    let mut canvas = vec![255u8; 3 * width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (oy, ox) = (gutter + r * (th + gutter), gutter + c * (tw + gutter));
            for y in 0..th {
                let dst = 3 * ((oy + y) * width + ox);
                canvas[dst..dst + 3 * tw].copy_from_slice(&tile.rgb[3 * y * tw..3 * (y + 1) * tw]);
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&canvas).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let img = image_tile(&Tensor::full([3, 4, 5], 0.5)).unwrap();
        let lab = label_tile(&Tensor::full([4, 5], 1u8)).unwrap();
        save_grid(&path, &[vec![img.clone(), lab], vec![img]]).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (2 * 7 + 2, 2 * 6 + 2));
    }
}
