//! Planar filters shared by the classical restorers and the feature extractor.
//!
//! Planes are row-major `h * w` slices; borders replicate the edge sample.

use crate::image::Image;

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Channel `c` of `img` as its own plane.
pub fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(img.channels()).copied().collect()
}

/// Interleaves planes back into an image with the shape of `like`.
pub fn from_planes(like: &Image, planes: &[Vec<f64>]) -> Image {
    let ch = like.channels();
    let mut data = vec![0.0; like.data().len()];
    for (c, p) in planes.iter().enumerate() {
        for (i, v) in p.iter().enumerate() {
            data[i * ch + c] = *v;
        }
    }
    like.with_data(data)
}

/// Applies `f` to every channel plane independently.
pub fn per_channel(img: &Image, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
    let planes: Vec<Vec<f64>> = (0..img.channels()).map(|c| f(&plane(img, c))).collect();
    from_planes(img, &planes)
}

/// Per-pixel minimum over channels.
pub fn channel_min(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(img.channels())
        .map(|px| px.iter().copied().fold(f64::INFINITY, f64::min))
        .collect()
}

/// Square min filter of radius `r` (window `2r + 1`), separable.
pub fn min_filter(p: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for d in -r..=r {
                m = m.min(p[y * w + clamp_idx(x as isize + d, w)]);
            }
            rows[y * w + x] = m;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for d in -r..=r {
                m = m.min(rows[clamp_idx(y as isize + d, h) * w + x]);
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// Dark channel: channel minimum followed by a square min filter.
pub fn dark_channel(img: &Image, r: usize) -> Vec<f64> {
    min_filter(&channel_min(img), img.height(), img.width(), r)
}

/// Mean over a `(2r + 1)^2` window clipped to the image, via an integral image.
pub fn box_mean(p: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += p[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Edge-preserving smoothing of `p` steered by `guide`.
pub fn guided_filter(guide: &[f64], p: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mean_i = box_mean(guide, h, w, r);
    let mean_p = box_mean(p, h, w, r);
    let corr_ip = box_mean(&mul(guide, p), h, w, r);
    let corr_ii = box_mean(&mul(guide, guide), h, w, r);
    let n = h * w;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        let var = corr_ii[i] - mean_i[i] * mean_i[i];
        let cov = corr_ip[i] - mean_i[i] * mean_p[i];
        a[i] = cov / (var + eps);
        b[i] = mean_p[i] - a[i] * mean_i[i];
    }
    let mean_a = box_mean(&a, h, w, r);
    let mean_b = box_mean(&b, h, w, r);
    (0..n).map(|i| mean_a[i] * guide[i] + mean_b[i]).collect()
}

fn median_of(buf: &mut [f64]) -> f64 {
    let mid = buf.len() / 2;
    let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Square median filter of radius `r`.
pub fn median_filter(p: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let ri = r as isize;
    let mut buf = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            for dy in -ri..=ri {
                let yy = clamp_idx(y as isize + dy, h);
                for dx in -ri..=ri {
                    buf.push(p[yy * w + clamp_idx(x as isize + dx, w)]);
                }
            }
            out[y * w + x] = median_of(&mut buf);
        }
    }
    out
}

/// One-dimensional median over `2r + 1` nearest-neighbour samples along the
/// unit direction `(dy, dx)`.
pub fn directional_median(p: &[f64], h: usize, w: usize, r: usize, dy: f64, dx: f64) -> Vec<f64> {
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .map(|k| ((k as f64 * dy).round() as isize, (k as f64 * dx).round() as isize))
        .collect();
    let mut buf = Vec::with_capacity(offsets.len());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            for &(oy, ox) in &offsets {
                buf.push(p[clamp_idx(y as isize + oy, h) * w + clamp_idx(x as isize + ox, w)]);
            }
            out[y * w + x] = median_of(&mut buf);
        }
    }
    out
}

/// Joint bilateral filter: spatial Gaussian `sigma_s`, range Gaussian
/// `sigma_r` on the Euclidean colour distance between pixels.
pub fn bilateral(img: &Image, r: usize, sigma_s: f64, sigma_r: f64) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let ri = r as isize;
    let spatial: Vec<f64> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_s * sigma_s)).exp())
        .collect();
    let inv_r = 1.0 / (2.0 * sigma_r * sigma_r);
    let mut out = vec![0.0; src.len()];
    let mut acc = vec![0.0; ch];
    for y in 0..h {
        for x in 0..w {
            let centre = &src[(y * w + x) * ch..(y * w + x + 1) * ch];
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut norm = 0.0;
            let mut k = 0;
            for dy in -ri..=ri {
                let yy = clamp_idx(y as isize + dy, h);
                for dx in -ri..=ri {
                    let xx = clamp_idx(x as isize + dx, w);
                    let px = &src[(yy * w + xx) * ch..(yy * w + xx + 1) * ch];
                    let d2: f64 = px.iter().zip(centre).map(|(a, b)| (a - b) * (a - b)).sum();
                    let wgt = spatial[k] * (-d2 * inv_r).exp();
                    k += 1;
                    norm += wgt;
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += wgt * v;
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[(y * w + x) * ch + c] = a / norm;
            }
        }
    }
    img.with_data(out)
}

/// Value at quantile `q` in [0, 1] (nearest rank on a sorted copy).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_box(p: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        s += p[yy * w + xx];
                        n += 1.0;
                    }
                }
                out[y * w + x] = s / n;
            }
        }
        out
    }

    fn ramp(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
    }

    #[test]
    fn box_mean_matches_naive() {
        let p = ramp(13, 9);
        let a = box_mean(&p, 13, 9, 2);
        let b = naive_box(&p, 13, 9, 2);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn min_filter_matches_naive() {
        let p = ramp(11, 7);
        let out = min_filter(&p, 11, 7, 1);
        for y in 0..11usize {
            for x in 0..7usize {
                let mut m = f64::INFINITY;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        m = m.min(p[clamp_idx(y as isize + dy, 11) * 7 + clamp_idx(x as isize + dx, 7)]);
                    }
                }
                assert_eq!(out[y * 7 + x], m);
            }
        }
    }

    #[test]
    fn median_removes_impulse() {
        let mut p = vec![0.5; 49];
        p[24] = 1.0;
        assert!(median_filter(&p, 7, 7, 1).iter().all(|&v| v == 0.5));
        let horiz = directional_median(&p, 7, 7, 2, 0.0, 1.0);
        assert_eq!(horiz[24], 0.5);
    }

    #[test]
    fn constant_is_fixed_point() {
        let img = Image::filled(9, 9, 3, 0.3);
        assert!(bilateral(&img, 2, 1.5, 0.1).max_abs_diff(&img).unwrap() < 1e-15);
        let p = vec![0.3; 81];
        assert!(guided_filter(&p, &p, 9, 9, 3, 1e-3).iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn planes_round_trip() {
        let img = Image::from_fn(5, 4, 3, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let planes: Vec<_> = (0..3).map(|c| plane(&img, c)).collect();
        assert_eq!(from_planes(&img, &planes), img);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }
}
