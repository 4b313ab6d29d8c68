//! SVG line charts and PNG slice overlays.

use std::path::Path;

use image::{Rgb, RgbImage};
use implant_depth_core::pipeline::Prediction;
use implant_depth_core::{Interval, PatientRecord};
use plotters::prelude::*;

use crate::error::{HarnessError, Result};

/// Line chart of named `(x, y)` series. Non-finite points are dropped.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(&str, &[(f64, f64)])]) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| HarnessError::format(path, format!("cannot draw chart: {e}"));
    let finite: Vec<Vec<(f64, f64)>> =
        series.iter().map(|(_, pts)| pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect()).collect();
    let all = finite.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| fail(&e))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| fail(&e))?;
    for (i, ((name, _), pts)) in series.iter().zip(finite).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| fail(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| fail(&e))?;
    root.present().map_err(|e| fail(&e))
}

const RED: Rgb<u8> = Rgb([230, 40, 40]);
const GREEN: Rgb<u8> = Rgb([40, 200, 70]);
const YELLOW: Rgb<u8> = Rgb([240, 210, 40]);

/// Grayscale image from intensities in `[0, 1]`, upscaled by `zoom` with nearest neighbour.
fn gray(values: impl Fn(usize, usize) -> f32, h: usize, w: usize, zoom: u32) -> RgbImage {
    RgbImage::from_fn(w as u32 * zoom, h as u32 * zoom, |x, y| {
        let v = (values((y / zoom) as usize, (x / zoom) as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn cross(img: &mut RgbImage, (r, c): (f64, f64), zoom: u32, color: Rgb<u8>) {
    let (y, x) = ((r * zoom as f64).round() as i64, (c * zoom as f64).round() as i64);
    for d in -6..=6 {
        put(img, x + d, y, color);
        put(img, x, y + d, color);
    }
}

fn rect(img: &mut RgbImage, top: usize, left: usize, h: usize, w: usize, zoom: u32, color: Rgb<u8>) {
    let z = zoom as i64;
    let (y0, x0, y1, x1) = (top as i64 * z, left as i64 * z, (top + h) as i64 * z - 1, (left + w) as i64 * z - 1);
    for x in x0..=x1 {
        put(img, x, y0, color);
        put(img, x, y1, color);
    }
    for y in y0..=y1 {
        put(img, x0, y, color);
        put(img, x1, y, color);
    }
}

fn hline(img: &mut RgbImage, row: f64, from: usize, to: usize, zoom: u32, color: Rgb<u8>) {
    let y = (row * zoom as f64).round() as i64;
    for x in (from as i64 * zoom as i64)..(to as i64 * zoom as i64) {
        put(img, x, y, color);
        put(img, x, y + 1, color);
    }
}

/// Crown slice with the detected position (red), the annotated one (green) and the
/// in-plane crop window of side `crop_hw` (yellow).
pub fn crown_overlay(record: &PatientRecord, p: &Prediction, crop_hw: usize, zoom: u32) -> RgbImage {
    let v = &record.volume;
    let mut img = gray(|r, c| v.get(record.crown_slice_index, r, c), v.height(), v.width(), zoom);
    rect(&mut img, p.crop_origin[1], p.crop_origin[2], crop_hw, crop_hw, zoom, YELLOW);
    cross(&mut img, record.annotation.axial_position, zoom, GREEN);
    cross(&mut img, p.position, zoom, RED);
    img
}

/// Depth × width section through the predicted row, with predicted (red) and annotated
/// (green) interval bounds drawn across the crop columns.
pub fn depth_overlay(record: &PatientRecord, p: &Prediction, crop_hw: usize, zoom: u32) -> RgbImage {
    let v = &record.volume;
    let row = (p.position.0.round() as usize).min(v.height() - 1);
    let mut img = gray(|d, c| v.get(d, row, c), v.depth(), v.width(), zoom);
    let (from, to) = (p.crop_origin[2], (p.crop_origin[2] + crop_hw).min(v.width()));
    let mark = |img: &mut RgbImage, iv: Interval, color| {
        hline(img, iv.start, from, to, zoom, color);
        hline(img, iv.end, from, to, zoom, color);
    };
    mark(&mut img, record.annotation.interval, GREEN);
    mark(&mut img, p.interval, RED);
    img
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| HarnessError::format(path, format!("cannot write PNG: {e}")))
}
