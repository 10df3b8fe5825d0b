//! PNG renderings: score-map overlays, skeletons and match matrices.

use std::path::{Path, PathBuf};

use clamp_core::augment::{crop_with_draw, AugmentDraw, Image, CLIP_MEAN, CLIP_STD};
use clamp_core::heatmap::upsample_map;
use clamp_core::model::ClampModel;
use clamp_core::schema::{InstanceRecord, KeypointSchema};
use clamp_core::train::to_source_record;
use clap::ValueEnum;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::{save_png, ImageSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// One overlay per keypoint of the upsampled presence-score map.
    Scoremap,
    /// Decoded keypoints and schema bones over the source image.
    Skeleton,
    /// The keypoint-feature / prompt similarity matrix as a heat grid.
    Matchmatrix,
}

/// Resolves keypoint names to indices; an empty list selects all.
pub fn select_keypoints(schema: &KeypointSchema, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..schema.num_keypoints()).collect());
    }
    names
        .iter()
        .map(|n| {
            schema.index_of(n).ok_or_else(|| {
                Error::Input(format!("unknown keypoint {n:?}; valid names: {}", schema.keypoint_names.join(", ")))
            })
        })
        .collect()
}

/// Anchors of a viridis-like colormap, dark purple to yellow.
const COLORMAP: [[f32; 3]; 6] = [
    [0.267, 0.005, 0.329],
    [0.254, 0.265, 0.530],
    [0.164, 0.471, 0.558],
    [0.134, 0.659, 0.518],
    [0.478, 0.821, 0.319],
    [0.993, 0.906, 0.144],
];

pub fn colormap(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = (t - i as f64) as f32;
    std::array::from_fn(|c| COLORMAP[i][c] * (1.0 - f) + COLORMAP[i + 1][c] * f)
}

/// Min-max normalization; a constant map becomes all zeros.
fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

/// Blends `values` (row-major, image-sized, in [0, 1]) over `base`; the
/// value sets both colour and opacity, so brighter means higher.
pub fn overlay(base: &Image, values: &[f64]) -> Image {
    let mut out = base.clone();
    for y in 0..base.height() {
        for x in 0..base.width() {
            let v = values[y * base.width() + x];
            let c = colormap(v);
            let a = (0.25 + 0.6 * v) as f32;
            let p = base.pixel(x, y);
            out.set_pixel(x, y, std::array::from_fn(|k| p[k] * (1.0 - a) + c[k] * a));
        }
    }
    out
}

fn put(img: &mut Image, x: i64, y: i64, rgb: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set_pixel(x as usize, y as usize, rgb);
    }
}

pub fn draw_disc(img: &mut Image, [cx, cy]: [f64; 2], radius: f64, rgb: [f32; 3]) {
    let r = radius.ceil() as i64;
    let (x0, y0) = (cx.round() as i64, cy.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                put(img, x0 + dx, y0 + dy, rgb);
            }
        }
    }
}

pub fn draw_line(img: &mut Image, a: [f64; 2], b: [f64; 2], width: f64, rgb: [f32; 3]) {
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        draw_disc(img, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], width / 2.0, rgb);
    }
}

/// Distinct joint colours, cycled.
const JOINT_COLOURS: [[f32; 3]; 6] = [
    [0.95, 0.26, 0.21],
    [0.13, 0.59, 0.95],
    [0.30, 0.69, 0.31],
    [1.00, 0.76, 0.03],
    [0.61, 0.15, 0.69],
    [0.00, 0.74, 0.83],
];

/// Draws bones then joints. Keypoints with non-positive confidence are
/// omitted.
pub fn draw_skeleton(img: &mut Image, schema: &KeypointSchema, keypoints: &[[f64; 3]]) {
    let radius = (img.width().max(img.height()) as f64 / 128.0).max(2.0);
    for &(a, b) in &schema.skeleton {
        let (p, q) = (keypoints[a], keypoints[b]);
        if p[2] > 0.0 && q[2] > 0.0 {
            draw_line(img, [p[0], p[1]], [q[0], q[1]], radius * 0.6, [0.92, 0.92, 0.92]);
        }
    }
    for (i, k) in keypoints.iter().enumerate() {
        if k[2] > 0.0 {
            draw_disc(img, [k[0], k[1]], radius + 1.0, [0.0, 0.0, 0.0]);
            draw_disc(img, [k[0], k[1]], radius, JOINT_COLOURS[i % JOINT_COLOURS.len()]);
        }
    }
}

/// 5x7 glyph rows, most significant of the low five bits leftmost.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

const GLYPH_ADVANCE: usize = 6;

/// Text with its top-left corner at `(x, y)`; `vertical` runs it bottom to
/// top, rotated a quarter turn counter-clockwise.
fn draw_text(img: &mut Image, text: &str, x: i64, y: i64, vertical: bool, rgb: [f32; 3]) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                let along = (i * GLYPH_ADVANCE + col) as i64;
                if vertical {
                    put(img, x + r as i64, y - along, rgb);
                } else {
                    put(img, x + along, y + r as i64, rgb);
                }
            }
        }
    }
}

/// Square heat grid of `values` (`n x n`, row-major) with the names along
/// both axes. Rows are keypoint features, columns prompts.
pub fn render_matrix(values: &[f64], names: &[String]) -> Image {
    let n = names.len();
    let cell = 24;
    let margin = 8 + GLYPH_ADVANCE * names.iter().map(String::len).max().unwrap_or(0);
    let side = margin + n * cell + 4;
    let mut img = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            img.set_pixel(x, y, [1.0, 1.0, 1.0]);
        }
    }
    let norm = normalize(values);
    for r in 0..n {
        for c in 0..n {
            let colour = colormap(norm[r * n + c]);
            for y in 1..cell {
                for x in 1..cell {
                    img.set_pixel(margin + c * cell + x, margin + r * cell + y, colour);
                }
            }
        }
    }
    let ink = [0.1, 0.1, 0.1];
    for (i, name) in names.iter().enumerate() {
        let offset = (i * cell + cell / 2) as i64 - 3;
        let pad = (margin - 4 - GLYPH_ADVANCE * name.len()) as i64;
        draw_text(&mut img, name, pad, margin as i64 + offset, false, ink);
        draw_text(&mut img, name, margin as i64 + offset, margin as i64 - 5, true, ink);
    }
    img
}

/// Renders `mode` for each record and returns the files written, in
/// record order.
pub fn render(
    model: &ClampModel,
    records: &[&InstanceRecord],
    images: &dyn ImageSource,
    mode: Mode,
    keypoints: &[usize],
    output_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let per_record = records
        .par_iter()
        .map(|r| render_one(model, r, images, mode, keypoints, output_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

fn render_one(
    model: &ClampModel,
    record: &InstanceRecord,
    images: &dyn ImageSource,
    mode: Mode,
    keypoints: &[usize],
    output_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let source = images.image(record)?;
    let crop = crop_with_draw(record, &source, &model.schema, model.config.input_size, &AugmentDraw::NONE)?;
    let input = crop.image.to_tensor(CLIP_MEAN, CLIP_STD);
    let id = record.id;
    match mode {
        Mode::Scoremap => {
            let pred = model.forward_infer(&input)?;
            let (h, w) = model.config.input_size;
            let up = upsample_map(&pred.scores, (h, w))?;
            keypoints
                .iter()
                .map(|&k| {
                    let path = output_dir.join(format!("{id}_scoremap_{:02}_{}.png", k, model.schema.keypoint_names[k]));
                    save_png(&path, &overlay(&crop.image, &normalize(up.channel(k))))?;
                    Ok(path)
                })
                .collect()
        }
        Mode::Skeleton => {
            let pred = model.forward_infer(&input)?;
            let rec = to_source_record(id, &pred, &crop.transform)?;
            let shown: Vec<[f64; 3]> = rec
                .keypoints
                .iter()
                .enumerate()
                .map(|(i, k)| if keypoints.contains(&i) { [k[0], k[1], 1.0] } else { [k[0], k[1], 0.0] })
                .collect();
            let mut img = source;
            draw_skeleton(&mut img, &model.schema, &shown);
            let path = output_dir.join(format!("{id}_skeleton.png"));
            save_png(&path, &img)?;
            Ok(vec![path])
        }
        Mode::Matchmatrix => {
            let target = model.encode_targets(&crop.keypoints, &crop.visibility)?;
            let out = model.forward_train(&input, &target)?;
            let n = model.num_keypoints();
            let values: Vec<f64> = keypoints
                .iter()
                .flat_map(|&r| keypoints.iter().map(move |&c| (r, c)))
                .map(|(r, c)| out.matches.values.data()[r * n + c])
                .collect();
            let names: Vec<String> = keypoints.iter().map(|&k| model.schema.keypoint_names[k].clone()).collect();
            let path = output_dir.join(format!("{id}_matchmatrix.png"));
            save_png(&path, &render_matrix(&values, &names))?;
            Ok(vec![path])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_runs_dark_to_bright() {
        let lum = |c: [f32; 3]| 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
        let mut prev = -1.0;
        for i in 0..=20 {
            let l = lum(colormap(i as f64 / 20.0));
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn unknown_keypoint_lists_valid_names() {
        let schema = clamp_core::synthetic::blob_schema();
        let err = select_keypoints(&schema, &["tail".into()]).unwrap_err().to_string();
        assert!(err.contains("left_eye, right_eye, nose"), "{err}");
        assert_eq!(select_keypoints(&schema, &["nose".into()]).unwrap(), vec![2]);
        assert_eq!(select_keypoints(&schema, &[]).unwrap().len(), 5);
    }

    #[test]
    fn matrix_cells_follow_values() {
        let names = vec!["a".to_string(), "b".to_string()];
        let img = render_matrix(&[1.0, 0.0, 0.0, 1.0], &names);
        let margin = 8 + GLYPH_ADVANCE;
        let centre = |r: usize, c: usize| img.pixel(margin + c * 24 + 12, margin + r * 24 + 12);
        assert_eq!(centre(0, 0), colormap(1.0));
        assert_eq!(centre(0, 1), colormap(0.0));
    }
}
