//! Procedural tile sprites for simulated screenshots.
//!
//! A layout is a grid of sprite ids written as hex digits, one string per
//! row (`"00a7"`). Each cell is filled with its sprite scaled to the cell, so
//! the same layout renders identically at any resolution on any platform.

use image::{Rgb, RgbImage};

pub const SPRITE_COUNT: u8 = 16;

pub fn parse_layout(rows: &[String]) -> Result<Vec<Vec<u8>>, String> {
    if rows.is_empty() {
        return Err("layout has no rows".into());
    }
    let grid: Vec<Vec<u8>> = rows
        .iter()
        .map(|r| {
            r.chars()
                .map(|c| {
                    c.to_digit(16)
                        .map(|d| d as u8)
                        .ok_or_else(|| format!("bad sprite id {c:?} in layout row {r:?}"))
                })
                .collect::<Result<Vec<u8>, String>>()
        })
        .collect::<Result<_, _>>()?;
    let cols = grid[0].len();
    if cols == 0 || grid.iter().any(|r| r.len() != cols) {
        return Err("layout rows must be non-empty and equally long".into());
    }
    Ok(grid)
}

/// Colour of sprite `id` at cell-local coordinates `u, v` in `[0, 1)`.
pub fn sprite_pixel(id: u8, u: f32, v: f32) -> [u8; 3] {
    const BG: [u8; 3] = [232, 232, 236];
    const INK: [u8; 3] = [36, 40, 58];
    let band = |t: f32, n: f32| ((t * n) as u32) % 2 == 0;
    let (du, dv) = (u - 0.5, v - 0.5);
    let r = (du * du + dv * dv).sqrt();
    match id % SPRITE_COUNT {
        0 => BG,
        1 => INK,
        2 => if band(v, 6.0) { [40, 90, 200] } else { [250, 250, 250] },
        3 => if band(u, 6.0) { [200, 60, 50] } else { [250, 250, 250] },
        4 => if band(u, 4.0) ^ band(v, 4.0) { [20, 20, 20] } else { [240, 240, 240] },
        5 => if band(u + v, 5.0) { [30, 150, 80] } else { [245, 245, 230] },
        6 => if r < 0.35 { [220, 140, 20] } else { BG },
        7 => {
            if u < 0.08 || u > 0.92 || v < 0.12 || v > 0.88 {
                [60, 60, 200]
            } else {
                [200, 210, 250]
            }
        }
        8 => {
            let g = (u * 255.0) as u8;
            [g, g, 255 - g]
        }
        9 => {
            let g = (v * 255.0) as u8;
            [255 - g, g, g / 2]
        }
        10 => {
            if (v * 8.0) as u32 % 2 == 1 && u > 0.1 && u < 0.9 {
                INK
            } else {
                [255, 255, 255]
            }
        }
        11 => if du.abs() < 0.08 || dv.abs() < 0.08 { [180, 20, 120] } else { BG },
        12 => if v > 0.2 && u > 0.5 - (v - 0.2) * 0.6 && u < 0.5 + (v - 0.2) * 0.6 { [10, 120, 160] } else { BG },
        13 => {
            let (fu, fv) = ((u * 5.0).fract() - 0.5, (v * 5.0).fract() - 0.5);
            if fu * fu + fv * fv < 0.06 { [90, 30, 30] } else { [250, 240, 200] }
        }
        14 => if (0.25..0.4).contains(&r) { [100, 40, 160] } else { BG },
        _ => if r < 0.35 { [250, 250, 250] } else { [70, 20, 20] },
    }
}

pub fn render_tiles(layout: &[Vec<u8>], width: u32, height: u32) -> RgbImage {
    let rows = layout.len().max(1);
    let cols = layout.first().map_or(1, |r| r.len().max(1));
    let (cw, ch) = (width as f32 / cols as f32, height as f32 / rows as f32);
    RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f32 / cw, y as f32 / ch);
        let (c, r) = ((fx as usize).min(cols - 1), (fy as usize).min(rows - 1));
        let id = layout.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0);
        Rgb(sprite_pixel(id, fx - c as f32, fy - r as f32))
    })
}

/// Paints a filled rectangle, clipped to the image.
pub fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: [u8; 3]) {
    let (iw, ih) = (i64::from(img.width()), i64::from(img.height()));
    for yy in y.max(0)..(y + i64::from(h)).min(ih) {
        for xx in x.max(0)..(x + i64::from(w)).min(iw) {
            img.put_pixel(xx as u32, yy as u32, Rgb(color));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::{hamming, phash};

    #[test]
    fn layouts_parse_and_reject() {
        assert_eq!(parse_layout(&["0a".into(), "f1".into()]).unwrap(), vec![vec![0, 10], vec![15, 1]]);
        assert!(parse_layout(&["0g".into()]).is_err());
        assert!(parse_layout(&["00".into(), "0".into()]).is_err());
        assert!(parse_layout(&[]).is_err());
    }

    #[test]
    fn distinct_layouts_hash_apart() {
        let a = render_tiles(&parse_layout(&["1234".into(), "5678".into()]).unwrap(), 320, 180);
        let b = render_tiles(&parse_layout(&["8765".into(), "4321".into()]).unwrap(), 320, 180);
        assert!(hamming(phash(&a).unwrap(), phash(&b).unwrap()) > 1);
        assert_eq!(a, render_tiles(&parse_layout(&["1234".into(), "5678".into()]).unwrap(), 320, 180));
    }
}
