//! Static figures: PNG rasters and SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `|w| / max |w|`; an all-zero input stays zero.
pub fn normalize_by_max(w: &[f64]) -> Vec<f64> {
    let m = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return vec![0.0; w.len()];
    }
    w.iter().map(|v| v.abs() / m).collect()
}

/// Principal components of `n` samples with `c` features (row-major).
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues of the (1/n) covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors matching `eigenvalues`, each of length `c`.
    pub components: Vec<Vec<f64>>,
}

pub fn pca(x: &[f64], n: usize, c: usize) -> Result<Pca> {
    if n == 0 || c == 0 || x.len() != n * c {
        return Err(Error::Data(format!("pca needs a non-empty {n}x{c} matrix")));
    }
    let mut mean = vec![0.0; c];
    for row in x.chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let centred = DMatrix::from_fn(n, c, |i, j| x[i * c + j] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let components = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    Ok(Pca { mean, eigenvalues, components })
}

impl Pca {
    /// Coordinates of every sample on the first `k` components.
    pub fn project(&self, x: &[f64], k: usize) -> Vec<Vec<f64>> {
        let c = self.mean.len();
        x.chunks(c)
            .map(|row| {
                self.components[..k]
                    .iter()
                    .map(|v| v.iter().zip(row).zip(&self.mean).map(|((a, b), m)| a * (b - m)).sum())
                    .collect()
            })
            .collect()
    }

    /// Mean squared error of reconstructing from `k` components.
    pub fn reconstruction_error(&self, x: &[f64], k: usize) -> f64 {
        let c = self.mean.len();
        let coords = self.project(x, k);
        let mut err = 0.0;
        for (row, z) in x.chunks(c).zip(&coords) {
            for j in 0..c {
                let r: f64 = self.mean[j] + z.iter().zip(&self.components).map(|(zi, v)| zi * v[j]).sum::<f64>();
                err += (row[j] - r).powi(2);
            }
        }
        err / coords.len() as f64
    }
}

fn rescale01(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(hi - lo > 1e-12) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Project a `(C, h, w)` map onto its first three principal components
/// and rescale each to `[0, 255]`. Fewer than three channels fall back to
/// grayscale from the first component. Returns interleaved RGB bytes and
/// whether the fallback was used.
pub fn pca_rgb(map: &[f64], c: usize, h: usize, w: usize) -> Result<(Vec<u8>, bool)> {
    let n = h * w;
    let mut pixels = vec![0.0; n * c];
    for ch in 0..c {
        for p in 0..n {
            pixels[p * c + ch] = map[ch * n + p];
        }
    }
    let p = pca(&pixels, n, c)?;
    let gray = c < 3;
    let k = if gray { 1 } else { 3 };
    let coords = p.project(&pixels, k);
    let chans: Vec<Vec<f64>> = (0..k).map(|j| rescale01(&coords.iter().map(|z| z[j]).collect::<Vec<_>>())).collect();
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        for j in 0..3 {
            let v = if gray { chans[0][i] } else { chans[j][i] };
            rgb.push((v * 255.0).round() as u8);
        }
    }
    Ok((rgb, gray))
}

/// Nearest-neighbour resize of an interleaved `ch`-channel raster.
pub fn resize_nearest(data: &[u8], ch: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow * ch);
    for y in 0..oh {
        let sy = y * h / oh;
        for x in 0..ow {
            let sx = x * w / ow;
            out.extend_from_slice(&data[(sy * w + sx) * ch..(sy * w + sx + 1) * ch]);
        }
    }
    out
}

pub fn write_rgb_png(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::Data(e.to_string()))?;
        wr.write_image_data(rgb).map_err(|e| Error::Data(e.to_string()))?;
    }
    write_bytes(path, &out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `(3, H, W)` image in `[0, 1]` blended with a red heat map `(H, W)` in `[0, 1]`.
pub fn overlay(image: &[f64], heat: &[f64], h: usize, w: usize, alpha: f64) -> Vec<u8> {
    let n = h * w;
    let mut out = Vec::with_capacity(3 * n);
    for p in 0..n {
        let a = alpha * heat[p];
        for ch in 0..3 {
            let base = image[ch * n + p].clamp(0.0, 1.0);
            let tint = if ch == 0 { 1.0 } else { 0.0 };
            out.push((((1.0 - a) * base + a * tint) * 255.0).round() as u8);
        }
    }
    out
}

fn heat_colour(v: f64) -> String {
    // White to dark blue.
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - v)).round() as u8;
    let g = (255.0 * (1.0 - 0.8 * v)).round() as u8;
    let b = (255.0 - 100.0 * v).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Labelled heatmap of a row-major `rows x cols` matrix in `[0, 1]`.
pub fn heatmap_svg(title: &str, matrix: &[f64], row_labels: &[String], col_labels: &[String], cell: usize) -> String {
    let (rows, cols) = (row_labels.len(), col_labels.len());
    let (left, top) = (90, 40);
    let (wd, ht) = (left + cols * cell + 20, top + rows * cell + 20);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{wd}" height="{ht}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="14" font-size="12">{title}</text>"#);
    for (j, l) in col_labels.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#, left + j * cell + cell / 2, top - 6);
    }
    for (i, l) in row_labels.iter().enumerate() {
        let y = top + i * cell;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{l}</text>"#, left - 6, y + cell / 2 + 4);
        for j in 0..cols {
            let v = matrix[i * cols + j];
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="{}"><title>{v:.4}</title></rect>"#,
                left + j * cell,
                heat_colour(v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of named series sharing one x axis.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="16" font-size="12">{title}</text>"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{y_label}</text>"#, h / 2.0, h / 2.0);
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="{anchor}">{v}</text>"#, px(v), h - pad + 14.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, pad - 4.0, py(v) + 3.0);
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, w - pad + 4.0, pad + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_divides_by_max_magnitude() {
        assert_eq!(normalize_by_max(&[1.0, -4.0, 2.0]), vec![0.25, 1.0, 0.5]);
        assert_eq!(normalize_by_max(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_map_renders_constant_image() {
        let (rgb, gray) = pca_rgb(&[0.3; 4 * 9], 4, 3, 3).unwrap();
        assert!(!gray);
        assert!(rgb.iter().all(|&v| v == rgb[0]));
    }

    #[test]
    fn resize_replicates_pixels() {
        let up = resize_nearest(&[1, 2, 3, 4], 1, 2, 2, 4, 4);
        assert_eq!(&up[..4], &[1, 1, 2, 2]);
        assert_eq!(&up[12..], &[3, 3, 4, 4]);
    }
}
