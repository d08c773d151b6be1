//! PNG loading/saving and the crop/resize helpers used by preprocessing.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads an image as `(1, H, W, 3)` with values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize, 3], data)
}

/// Loads a mask as `(1, H, W, 1)`; luma ≥ 128 is foreground.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h as usize, w as usize, 1], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a `(1, H, W, 3)` or `(1, H, W, 1)` tensor as PNG.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = match t.shape() {
        [1, h, w, c] => (*h as u32, *w as u32, *c),
        s => return Err(Error::Shape(format!("cannot save tensor of shape {s:?} as an image"))),
    };
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    match c {
        3 => RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from shape")
            .save(path)
            .map_err(image_err(path)),
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from shape")
            .save(path)
            .map_err(image_err(path)),
        _ => Err(Error::Shape(format!("cannot save {c}-channel image"))),
    }
}

/// Quantises to 8 bits and back, matching what a PNG round trip stores.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

/// Crops `(1, H, W, C)` to the `h × w` window at `(top, left)`.
pub fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (sw, c) = (s[2], s[3]);
    let mut data = Vec::with_capacity(h * w * c);
    for r in top..top + h {
        let start = (r * sw + left) * c;
        data.extend_from_slice(&t.data()[start..start + w * c]);
    }
    Tensor::new(vec![1, h, w, c], data).expect("crop inside bounds")
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let src = t.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Tensor::new(vec![1, out_h, out_w, c], out).expect("sized from shape")
}

/// Nearest-neighbour resize; keeps binary masks binary.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let src = t.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let y = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for ox in 0..out_w {
            let x = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(vec![1, out_h, out_w, c], out).expect("sized from shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[1, 5, 7, 3], |i| (i % 13) as f64 / 13.0);
        let p = dir.path().join("x.png");
        save_png(&t, &p).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), quantize(&t));
        let m = Tensor::from_fn(&[1, 5, 7, 1], |i| (i % 2) as f64);
        let pm = dir.path().join("m.png");
        save_png(&m, &pm).unwrap();
        assert_eq!(load_mask(&pm).unwrap(), m);
    }

    #[test]
    fn resize_constant_and_identity() {
        let t = Tensor::full(&[1, 6, 6, 3], 0.4);
        let r = resize_bilinear(&t, 3, 3);
        assert!(r.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert_eq!(resize_bilinear(&t, 6, 6), t);
    }

    #[test]
    fn halving_averages_pairs() {
        let t = Tensor::new(vec![1, 1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&t, 1, 2);
        assert_eq!(r.data(), &[0.5, 2.5]);
    }

    #[test]
    fn nearest_keeps_binary() {
        let m = Tensor::from_fn(&[1, 7, 9, 1], |i| (i % 3 == 0) as u8 as f64);
        let r = resize_nearest(&m, 4, 4);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn crop_window() {
        let t = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        assert_eq!(crop(&t, 1, 2, 2, 2).data(), &[6.0, 7.0, 10.0, 11.0]);
    }
}
