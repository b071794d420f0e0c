//! PNG encoding and traversal grids.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::deformator::Deformator;
use crate::generators::{render, Generator};
use crate::latent::ShiftRequest;
use crate::rng::latent_from_seed;
use crate::{Error, Result, Scalar};

/// Gap between grid cells, in pixels.
pub const GRID_PADDING: usize = 2;

/// Maps a pixel value in `[-1, 1]` to `0..=255`.
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    let x = v.as_f64().clamp(-1.0, 1.0);
    ((x + 1.0) * 127.5).round() as u8
}

/// Converts a `(C, H, W)` image with values in `[-1, 1]` to bytes.
pub fn quantize<T: Scalar>(img: ArrayView3<'_, T>) -> Array3<u8> {
    img.mapv(to_u8)
}

/// Encodes a `(C, H, W)` byte image with one (grey) or three (RGB) channels.
pub fn encode_png(img: ArrayView3<'_, u8>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(Error::Image(format!("cannot encode {c}-channel images"))),
    };
    // PNG wants interleaved rows
    let interleaved: Vec<u8> = img.permuted_axes([1, 2, 0]).iter().copied().collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&interleaved, w as u32, h as u32, color)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn image_png<T: Scalar>(img: ArrayView3<'_, T>) -> Result<Vec<u8>> {
    encode_png(quantize(img).view())
}

/// Tiles equally sized `(C, H, W)` cells row by row on a black background.
pub fn tile(rows: &[Vec<Array3<u8>>], padding: usize) -> Result<Array3<u8>> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Input("empty grid".into()))?;
    let (c, h, w) = first.dim();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let height = rows.len() * h + (rows.len() + 1) * padding;
    let width = cols * w + (cols + 1) * padding;
    let mut canvas = Array3::zeros((c, height, width));
    for (i, row) in rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if cell.dim() != (c, h, w) {
                return Err(Error::Shape(format!(
                    "grid cell has shape {:?}, expected {:?}",
                    cell.dim(),
                    (c, h, w)
                )));
            }
            let y = padding + i * (h + padding);
            let x = padding + j * (w + padding);
            canvas.slice_mut(s![.., y..y + h, x..x + w]).assign(cell);
        }
    }
    Ok(canvas)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive; `n = 1` gives `[lo]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Renders `z` under the shift stacks `base ++ [(k, ε)]` for each ε, in order.
pub fn sweep<T: Scalar>(
    deformator: &Deformator<T>,
    gen: &dyn Generator<T>,
    z: ndarray::ArrayView1<'_, T>,
    base: &[ShiftRequest],
    direction: usize,
    magnitudes: &[f64],
) -> Result<Vec<Array3<T>>> {
    deformator.spec().check_direction(direction)?;
    let n = magnitudes.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let base_shift = deformator.stacked_shift(base)?;
    let reqs: Vec<ShiftRequest> = magnitudes.iter().map(|&e| ShiftRequest::new(direction, e)).collect();
    let mut shifts = deformator.shifts_for(&reqs)?;
    shifts += &base_shift;
    let zs = Array2::from_shape_fn((n, z.len()), |(_, j)| z[j]);
    let images = render(gen, zs.view(), shifts.view())?;
    Ok(images.outer_iter().map(|img| img.to_owned()).collect())
}

/// What a traversal grid shows.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    /// One row per seed; each seed picks its latent code.
    pub seeds: Vec<u64>,
    pub direction: usize,
    pub magnitudes: Vec<f64>,
    /// A second direction swept from the end point of the first sweep.
    pub second: Option<(usize, Vec<f64>)>,
}

/// The images of a traversal, row by row: the first sweep, then (if
/// requested) the second sweep composed onto the last shift of the first.
pub fn traversal_images<T: Scalar>(
    deformator: &Deformator<T>,
    gen: &dyn Generator<T>,
    t: &Traversal,
) -> Result<Vec<Vec<Array3<T>>>> {
    deformator.spec().check_direction(t.direction)?;
    if let Some((k2, _)) = &t.second {
        deformator.spec().check_direction(*k2)?;
    }
    t.seeds
        .iter()
        .map(|&seed| {
            let z = latent_from_seed::<T>(seed, gen.latent_dim());
            let mut row = sweep(deformator, gen, z.view(), &[], t.direction, &t.magnitudes)?;
            if let Some((k2, mags2)) = &t.second {
                let base: Vec<ShiftRequest> = t
                    .magnitudes
                    .last()
                    .map(|&e| ShiftRequest::new(t.direction, e))
                    .into_iter()
                    .collect();
                row.extend(sweep(deformator, gen, z.view(), &base, *k2, mags2)?);
            }
            Ok(row)
        })
        .collect()
}

/// The traversal as one tiled PNG.
pub fn traversal_png<T: Scalar>(deformator: &Deformator<T>, gen: &dyn Generator<T>, t: &Traversal) -> Result<Vec<u8>> {
    let rows: Vec<Vec<Array3<u8>>> = traversal_images(deformator, gen, t)?
        .iter()
        .map(|row| row.iter().map(|img| quantize(img.view())).collect())
        .collect();
    encode_png(tile(&rows, GRID_PADDING)?.view())
}

/// Cuts a tiled grid back into its cells.
pub fn untile(grid: ArrayView3<'_, u8>, cell_height: usize, cell_width: usize, padding: usize) -> Vec<Vec<Array3<u8>>> {
    let (_, height, width) = grid.dim();
    let rows = (height - padding) / (cell_height + padding);
    let cols = (width - padding) / (cell_width + padding);
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let y = padding + i * (cell_height + padding);
                    let x = padding + j * (cell_width + padding);
                    grid.slice(s![.., y..y + cell_height, x..x + cell_width]).to_owned()
                })
                .collect()
        })
        .collect()
}

/// Decodes a PNG into a `(C, H, W)` byte image (grey or RGB).
pub fn decode_png(bytes: &[u8]) -> Result<Array3<u8>> {
    let img =
        image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img.color().channel_count() {
        1 => (1, img.into_luma8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    let hwc = Array3::from_shape_vec((h, w, c), raw).map_err(|e| Error::Image(e.to_string()))?;
    Ok(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
}

/// Mean over channels of a byte image, as a `(H, W)` map.
pub fn luminance(img: ArrayView3<'_, u8>) -> Array2<f64> {
    img.mapv(f64::from).mean_axis(Axis(0)).expect("at least one channel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_endpoints() {
        assert_eq!(to_u8(-1.0f64), 0);
        assert_eq!(to_u8(1.0f64), 255);
        assert_eq!(to_u8(0.0f64), 128);
        assert_eq!(to_u8(7.0f32), 255);
    }

    #[test]
    fn png_roundtrip_grey_and_rgb() {
        for c in [1, 3] {
            let img = Array3::from_shape_fn((c, 5, 7), |(ch, y, x)| (ch * 50 + y * 7 + x) as u8);
            let back = decode_png(&encode_png(img.view()).unwrap()).unwrap();
            assert_eq!(back, img);
        }
        assert!(encode_png(Array3::<u8>::zeros((2, 4, 4)).view()).is_err());
    }

    #[test]
    fn tile_untile_roundtrip() {
        let cell = |v: u8| Array3::from_elem((1, 3, 4), v);
        let rows = vec![vec![cell(1), cell(2), cell(3)], vec![cell(4), cell(5), cell(6)]];
        let grid = tile(&rows, 2).unwrap();
        assert_eq!(grid.dim(), (1, 2 * 3 + 3 * 2, 3 * 4 + 4 * 2));
        assert_eq!(untile(grid.view(), 3, 4, 2), rows);
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(-2.0, 2.0, 5), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(linspace(0.0, 0.0, 1), vec![0.0]);
        assert_eq!(linspace(-3.0, 3.0, 7)[3], 0.0);
    }
}
