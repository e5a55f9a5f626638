//! Color-mapped PNG export of anomaly maps.
//!
//! Every map in one export shares a single value range, so colors are
//! comparable across images and across students.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::losses::ScoreMap;
use crate::scoring::FusedResult;

/// Anchor colors of a perceptually ordered dark-to-bright ramp.
const RAMP: [[f64; 3]; 6] = [
    [0.0, 0.0, 4.0],
    [59.0, 15.0, 112.0],
    [140.0, 41.0, 129.0],
    [222.0, 73.0, 104.0],
    [254.0, 159.0, 109.0],
    [252.0, 253.0, 191.0],
];

/// Map `t` in `[0, 1]` onto the ramp.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = (RAMP[i][c] + f * (RAMP[i + 1][c] - RAMP[i][c])).round() as u8;
    }
    Rgb(px)
}

/// Shared `(lo, hi)` over every map of every result.
pub fn shared_range(results: &[FusedResult]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in results {
        for m in std::iter::once(&r.anomaly_map).chain(&r.local_map).chain(&r.global_map) {
            lo = lo.min(m.min());
            hi = hi.max(m.max());
        }
    }
    (lo, hi)
}

pub fn render_map(map: &ScoreMap, range: (f64, f64)) -> RgbImage {
    let (lo, hi) = range;
    let span = hi - lo;
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = map.get(y as usize, x as usize);
        colormap(if span > 0.0 { (v - lo) / span } else { 0.0 })
    })
}

/// Student maps side by side (local left, global right), with a one-pixel gap.
fn render_students(r: &FusedResult, range: (f64, f64)) -> Option<RgbImage> {
    let panels: Vec<RgbImage> = [&r.local_map, &r.global_map]
        .into_iter()
        .flatten()
        .map(|m| render_map(m, range))
        .collect();
    let first = panels.first()?;
    let (w, h) = first.dimensions();
    let total = w * panels.len() as u32 + (panels.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(total, h, Rgb([255, 255, 255]));
    for (k, p) in panels.iter().enumerate() {
        imageops::replace(&mut out, p, (k as u32 * (w + 1)) as i64, 0);
    }
    Some(out)
}

fn file_stem(name: &str) -> String {
    name.replace(['/', '\\'], "_")
}

/// Files written for one result.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedImage {
    pub name: String,
    pub image_score: f64,
    pub input: PathBuf,
    pub students: Option<PathBuf>,
    pub fused: PathBuf,
}

/// Write `<stem>_input.png`, `<stem>_students.png` and `<stem>_fused.png` per
/// result, plus `index.html` listing the files with their scores.
///
/// `inputs[i]` is the image scored in `results[i]`; it is resized to the map resolution.
pub fn export_heatmaps(
    results: &[FusedResult],
    inputs: &[&RgbImage],
    out_dir: &Path,
) -> Result<Vec<ExportedImage>> {
    if results.len() != inputs.len() {
        return Err(Error::Input(format!(
            "{} results but {} input images",
            results.len(),
            inputs.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let range = shared_range(results);
    let mut exported = Vec::with_capacity(results.len());
    for (r, img) in results.iter().zip(inputs) {
        let stem = file_stem(&r.name);
        let (w, h) = (r.anomaly_map.width as u32, r.anomaly_map.height as u32);
        let input = out_dir.join(format!("{stem}_input.png"));
        let resized = if img.dimensions() == (w, h) {
            (*img).clone()
        } else {
            imageops::resize(*img, w, h, imageops::FilterType::Triangle)
        };
        resized.save(&input)?;
        let students = match render_students(r, range) {
            Some(p) => {
                let path = out_dir.join(format!("{stem}_students.png"));
                p.save(&path)?;
                Some(path)
            }
            None => None,
        };
        let fused = out_dir.join(format!("{stem}_fused.png"));
        render_map(&r.anomaly_map, range).save(&fused)?;
        exported.push(ExportedImage {
            name: r.name.clone(),
            image_score: r.image_score,
            input,
            students,
            fused,
        });
    }
    fs::write(out_dir.join("index.html"), index_html(&exported, range))?;
    Ok(exported)
}

fn rel(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

fn index_html(items: &[ExportedImage], range: (f64, f64)) -> String {
    let mut s = String::new();
    s.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Anomaly maps</title></head><body>\n");
    let _ = writeln!(s, "<p>shared color scale: {:.6} to {:.6}</p>", range.0, range.1);
    s.push_str("<table>\n<tr><th>image</th><th>score</th><th>input</th><th>students</th><th>fused</th></tr>\n");
    for it in items {
        let students = it
            .students
            .as_ref()
            .map(|p| format!("<img src=\"{}\">", rel(p)))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "<tr><td>{}</td><td>{:.6}</td><td><img src=\"{}\"></td><td>{}</td><td><img src=\"{}\"></td></tr>",
            it.name,
            it.image_score,
            rel(&it.input),
            students,
            rel(&it.fused)
        );
    }
    s.push_str("</table>\n</body></html>\n");
    s
}
