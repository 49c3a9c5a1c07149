//! Non-learned upsampling baselines.
//!
//! Both baselines obey the same output-shape law as the reconstruction
//! network: `floor(m * H) x floor(m * W)`. Nearest-neighbor uses exactly
//! the floor source-index map of the network's feature mapping, which makes
//! it the inverse of integer-factor spatial skipping on retained indices.

use crate::acquisition::OctImage;
use crate::error::{Error, Result};
use crate::scale;

/// Replicates pixels under the floor index map `out(w) = in(floor(w / m))`.
pub fn upsample_nearest(img: &OctImage, m: f64) -> Result<OctImage> {
    if !(m.is_finite() && m >= 1.0) {
        return Err(Error::arg("upsample_nearest", format!("m must be >= 1, got {}", m)));
    }
    let out_h = scale::upscale_len(img.height(), m);
    let out_w = scale::upscale_len(img.width(), m);
    let rows = scale::upscale_source_indices(out_h, img.height(), m);
    let cols = scale::upscale_source_indices(out_w, img.width(), m);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        let src = img.row(r);
        pixels.extend(cols.iter().map(|&c| src[c]));
    }
    let mut out = OctImage::new(out_h, out_w, pixels, img.provenance.clone())?;
    out.axial_pixel_pitch = img.axial_pixel_pitch / m;
    out.lateral_pixel_pitch = img.lateral_pixel_pitch / m;
    Ok(out)
}

/// Catmull-Rom cubic weights (a = -0.5) for fractional position `t`,
/// applied to the samples at offsets -1, 0, 1, 2.
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t + 2.0 * t2 - t3),
        0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
        0.5 * (t + 4.0 * t2 - 3.0 * t3),
        0.5 * (-t2 + t3),
    ]
}

/// Separable cubic interpolation (a = -0.5) with edge-clamped sampling and
/// the same `w / m` source coordinate as the floor map; output clamped to
/// [0, 1]. Requires at least a 4x4 input.
pub fn upsample_bicubic(img: &OctImage, m: f64) -> Result<OctImage> {
    if !(m.is_finite() && m >= 1.0) {
        return Err(Error::arg("upsample_bicubic", format!("m must be >= 1, got {}", m)));
    }
    let (h, w) = (img.height(), img.width());
    if h < 4 || w < 4 {
        return Err(Error::shape(
            "upsample_bicubic",
            format!("input {}x{} is smaller than the 4x4 minimum", h, w),
        ));
    }
    let out_h = scale::upscale_len(h, m);
    let out_w = scale::upscale_len(w, m);

    // Per output column: base source index and the 4 horizontal weights.
    let col_taps: Vec<(isize, [f64; 4])> = (0..out_w)
        .map(|ox| {
            let s = ox as f64 / m;
            (s.floor() as isize, cubic_weights(s - s.floor()))
        })
        .collect();

    let clamp_row = |r: isize| -> usize { r.clamp(0, h as isize - 1) as usize };
    let clamp_col = |c: isize| -> usize { c.clamp(0, w as isize - 1) as usize };

    let mut pixels = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = oy as f64 / m;
        let y0 = sy.floor() as isize;
        let wy = cubic_weights(sy - sy.floor());
        let src_rows: [&[f64]; 4] = [
            img.row(clamp_row(y0 - 1)),
            img.row(clamp_row(y0)),
            img.row(clamp_row(y0 + 1)),
            img.row(clamp_row(y0 + 2)),
        ];
        for &(x0, wx) in &col_taps {
            let mut acc = 0.0;
            for (row, &wyv) in src_rows.iter().zip(&wy) {
                let mut horiz = 0.0;
                for (dx, &wxv) in wx.iter().enumerate() {
                    horiz += wxv * row[clamp_col(x0 + dx as isize - 1)];
                }
                acc += wyv * horiz;
            }
            pixels.push(acc.clamp(0.0, 1.0));
        }
    }
    let mut out = OctImage::new(out_h, out_w, pixels, img.provenance.clone())?;
    out.axial_pixel_pitch = img.axial_pixel_pitch / m;
    out.lateral_pixel_pitch = img.lateral_pixel_pitch / m;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{skip_spatial, Provenance};

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> OctImage {
        let mut px = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                px.push(f(r, c));
            }
        }
        OctImage::new(h, w, px, Provenance::Reference).unwrap()
    }

    #[test]
    fn nearest_identity_and_replication() {
        let img = image(2, 2, |r, c| (r * 2 + c) as f64 / 4.0);
        let same = upsample_nearest(&img, 1.0).unwrap();
        assert_eq!(same.pixels(), img.pixels());

        let up = upsample_nearest(&img, 2.0).unwrap();
        assert_eq!((up.height(), up.width()), (4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(up.get(r, c), img.get(r / 2, c / 2));
            }
        }
    }

    #[test]
    fn nearest_non_integer_floor_map() {
        let img = image(4, 4, |r, c| (r * 4 + c) as f64 / 16.0);
        let up = upsample_nearest(&img, 2.5).unwrap();
        assert_eq!((up.height(), up.width()), (10, 10));
        for (ox, expected) in [(0usize, 0usize), (2, 0), (3, 1), (5, 2), (9, 3)] {
            assert_eq!(up.get(0, ox), img.get(0, expected));
        }
    }

    #[test]
    fn nearest_inverts_integer_skip_on_retained_indices() {
        let img = image(16, 12, |r, c| ((r * 7 + c * 5) % 11) as f64 / 11.0);
        for m in [2.0, 3.0] {
            let up = upsample_nearest(&img, m).unwrap();
            let back = skip_spatial(&up, m).unwrap();
            assert_eq!((back.height(), back.width()), (img.height(), img.width()));
            assert_eq!(back.pixels(), img.pixels());
        }
    }

    #[test]
    fn bicubic_preserves_constants_and_identity() {
        let img = image(6, 6, |_, _| 0.42);
        let up = upsample_bicubic(&img, 2.3).unwrap();
        assert_eq!((up.height(), up.width()), (13, 13));
        for &v in up.pixels() {
            assert!((v - 0.42).abs() < 1e-12);
        }

        let varied = image(6, 6, |r, c| (r * 6 + c) as f64 / 36.0);
        let same = upsample_bicubic(&varied, 1.0).unwrap();
        for (a, b) in same.pixels().iter().zip(varied.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_reproduces_linear_ramps_away_from_edges() {
        let img = image(8, 8, |r, _| r as f64 / 10.0);
        let m = 2.0;
        let up = upsample_bicubic(&img, m).unwrap();
        for oy in 4..up.height() - 4 {
            let expected = (oy as f64 / m) / 10.0;
            for ox in 0..up.width() {
                assert!(
                    (up.get(oy, ox) - expected).abs() < 1e-6,
                    "({},{}) {} vs {}",
                    oy,
                    ox,
                    up.get(oy, ox),
                    expected
                );
            }
        }
    }

    #[test]
    fn bicubic_rejects_tiny_input() {
        let img = image(3, 5, |_, _| 0.1);
        assert!(upsample_bicubic(&img, 2.0).is_err());
    }

    #[test]
    fn baselines_share_the_shape_law() {
        let img = image(16, 9, |r, c| ((r + c) % 5) as f64 / 5.0);
        for m in [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5] {
            let n = upsample_nearest(&img, m).unwrap();
            let b = upsample_bicubic(&img, m).unwrap();
            let expect = ((m * 16.0).floor() as usize, (m * 9.0).floor() as usize);
            assert_eq!((n.height(), n.width()), expect);
            assert_eq!((b.height(), b.width()), expect);
        }
    }
}
