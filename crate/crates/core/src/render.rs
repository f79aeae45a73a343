//! Box overlays written as binary PPM images.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{AnnotationSet, Video};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linking::VideoTube;

/// Overlay colour of query slot `slot`.
pub fn slot_colour(slot: usize) -> [u8; 3] {
    const COLOURS: [[u8; 3]; 10] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
    ];
    COLOURS[slot % COLOURS.len()]
}

const GT_COLOUR: [u8; 3] = [255, 255, 255];

/// RGB copy of frame `t`; single-channel video is replicated, extra channels dropped.
fn frame_rgb(video: &Video, t: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(video.height * video.width * 3);
    for y in 0..video.height {
        for x in 0..video.width {
            let p = video.pixel(t, y, x);
            match p.len() {
                1 => out.extend([p[0]; 3]),
                2 => out.extend([p[0], p[1], 0]),
                _ => out.extend(&p[..3]),
            }
        }
    }
    out
}

/// One-pixel outline of `b` clipped to the image.
pub fn draw_box(rgb: &mut [u8], width: usize, height: usize, b: &BBox, colour: [u8; 3]) {
    let c = b.corners();
    let px = |v: f64, n: usize| ((v * n as f64).round().max(0.0) as usize).min(n - 1);
    let (x0, x1) = (px(c.x0, width), px(c.x1, width));
    let (y0, y1) = (px(c.y0, height), px(c.y1, height));
    let mut put = |x: usize, y: usize| {
        let o = (y * width + x) * 3;
        rgb[o..o + 3].copy_from_slice(&colour);
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

pub fn write_ppm<W: Write>(rgb: &[u8], width: usize, height: usize, mut w: W) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!("{} bytes for a {width}x{height} image", rgb.len())));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Frame `t` with the ground truth in white and every tube at least
/// `min_score` confident in its slot colour.
pub fn overlay_frame(video: &Video, t: usize, tubes: &[VideoTube], gt: Option<&AnnotationSet>, min_score: f64) -> Vec<u8> {
    let mut rgb = frame_rgb(video, t);
    if let Some(gt) = gt {
        for inst in gt.instances_at(t) {
            draw_box(&mut rgb, video.width, video.height, &inst.bbox, GT_COLOUR);
        }
    }
    for tube in tubes.iter().filter(|tb| tb.score >= min_score) {
        if let Some(b) = tube.tube.box_at(t) {
            draw_box(&mut rgb, video.width, video.height, &b, slot_colour(tube.slot));
        }
    }
    rgb
}

/// Writes `{prefix}_{frame:04}.ppm` for every frame into `dir`; returns the paths.
pub fn render_video(
    dir: &Path,
    prefix: &str,
    video: &Video,
    tubes: &[VideoTube],
    gt: Option<&AnnotationSet>,
    min_score: f64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(video.frames);
    for t in 0..video.frames {
        let rgb = overlay_frame(video, t, tubes, gt, min_score);
        let path = dir.join(format!("{prefix}_{t:04}.ppm"));
        write_ppm(&rgb, video.width, video.height, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_pixels() {
        let (w, h) = (10, 8);
        let mut rgb = vec![0u8; w * h * 3];
        let b = BBox::from_corners(crate::geometry::Corners {
            x0: 0.2,
            y0: 0.25,
            x1: 0.6,
            y1: 0.75,
        });
        draw_box(&mut rgb, w, h, &b, [9, 8, 7]);
        let lit = rgb.chunks(3).filter(|p| p == &[9, 8, 7]).count();
        // 5 x 5 outline
        assert_eq!(lit, 16);
        assert_eq!(&rgb[(2 * w + 2) * 3..(2 * w + 2) * 3 + 3], &[9, 8, 7]);
        let mut buf = Vec::new();
        write_ppm(&rgb, w, h, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n10 8\n255\n"));
        assert_eq!(buf.len(), 12 + w * h * 3);
    }
}
