//! Procedural cartoon faces with exact 68-point landmarks and foreground
//! masks, for fixtures and smoke runs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::preprocessing::{LandmarkSet, RawSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        dx * dx + dy * dy <= 1.0
    }

    /// Point at angle `t`; `t = 0` is the right end, `π/2` the bottom.
    fn at(&self, t: f64) -> [f64; 2] {
        [self.cx + self.rx * t.cos(), self.cy + self.ry * t.sin()]
    }
}

/// Renders face `seed` on an `h × w` canvas.
pub fn synthetic_face(id: impl Into<String>, seed: u64, (h, w): (usize, usize)) -> RawSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (w as f64, h as f64);
    let mut jit = |scale: f64| rng.gen_range(-scale..=scale);

    let face = Ellipse {
        cx: wf * (0.5 + jit(0.04)),
        cy: hf * (0.56 + jit(0.03)),
        rx: wf * (0.30 + jit(0.03)),
        ry: hf * (0.32 + jit(0.03)),
    };
    let hair = Ellipse {
        cx: face.cx,
        cy: face.cy - face.ry * 0.25,
        rx: face.rx * (1.15 + jit(0.05)),
        ry: face.ry * (1.05 + jit(0.05)),
    };
    let eye_dx = face.rx * (0.42 + jit(0.04));
    let eye_y = face.cy - face.ry * (0.18 + jit(0.04));
    let eye_r = (face.rx * 0.17, face.ry * (0.07 + jit(0.015)));
    let mouth = Ellipse {
        cx: face.cx + jit(0.03) * wf,
        cy: face.cy + face.ry * (0.52 + jit(0.04)),
        rx: face.rx * (0.36 + jit(0.05)),
        ry: face.ry * (0.09 + jit(0.02)),
    };
    let nose_tip = [face.cx, face.cy + face.ry * (0.2 + jit(0.03))];

    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(68);
    // 0-16 jaw, left to right through the chin
    for i in 0..17 {
        let t = PI - PI * i as f64 / 16.0;
        pts.push(face.at(t));
    }
    // 17-26 brows
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0 - 0.5;
            let x = face.cx + side * eye_dx + u * eye_r.0 * 2.2;
            let y = eye_y - eye_r.1 * 2.6 - (1.0 - 4.0 * u * u) * eye_r.1 * 0.8;
            pts.push([x, y]);
        }
    }
    // 27-30 bridge, 31-35 nostrils
    for i in 0..4 {
        let u = (i as f64 + 1.0) / 4.0;
        pts.push([face.cx, eye_y + (nose_tip[1] - eye_y) * u]);
    }
    for i in 0..5 {
        let u = i as f64 / 4.0 - 0.5;
        pts.push([face.cx + u * face.rx * 0.4, nose_tip[1] + face.ry * 0.05 * (1.0 - 4.0 * u * u)]);
    }
    // 36-47 eyes, six points each starting at the outer corner
    for side in [-1.0, 1.0] {
        let e = Ellipse {
            cx: face.cx + side * eye_dx,
            cy: eye_y,
            rx: eye_r.0,
            ry: eye_r.1,
        };
        for i in 0..6 {
            let t = PI + 2.0 * PI * i as f64 / 6.0;
            let p = e.at(if side < 0.0 { t } else { -t });
            pts.push(p);
        }
    }
    // 48-59 outer lip, 60-67 inner lip
    for i in 0..12 {
        pts.push(mouth.at(PI + 2.0 * PI * i as f64 / 12.0));
    }
    let inner = Ellipse {
        rx: mouth.rx * 0.7,
        ry: mouth.ry * 0.45,
        ..mouth
    };
    for i in 0..8 {
        pts.push(inner.at(PI + 2.0 * PI * i as f64 / 8.0));
    }
    debug_assert_eq!(pts.len(), 68);

    let mut col = |base: [f64; 3], s: f64| base.map(|c: f64| (c + rng.gen_range(-s..=s)).clamp(0.0, 1.0));
    let bg = col([0.55, 0.65, 0.75], 0.2);
    let skin = col([0.85, 0.68, 0.55], 0.1);
    let hair_c = col([0.25, 0.18, 0.12], 0.12);
    let lips = col([0.75, 0.3, 0.3], 0.08);
    let iris = col([0.2, 0.3, 0.4], 0.1);

    let eyes = [-1.0, 1.0].map(|side| Ellipse {
        cx: face.cx + side * eye_dx,
        cy: eye_y,
        rx: eye_r.0,
        ry: eye_r.1,
    });
    let brows: Vec<[f64; 2]> = pts[17..27].to_vec();
    let mut image = Tensor::zeros(&[1, h, w, 3]);
    let mut fg = Tensor::zeros(&[1, h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let in_face = face.contains(xf, yf);
            let in_hair = hair.contains(xf, yf) && yf < face.cy;
            let mut c = if in_face {
                skin
            } else if in_hair {
                hair_c
            } else {
                let g = yf / hf;
                bg.map(|v| (v * (0.85 + 0.3 * g)).min(1.0))
            };
            if in_face {
                if eyes.iter().any(|e| e.contains(xf, yf)) {
                    c = iris;
                }
                if mouth.contains(xf, yf) {
                    c = lips;
                }
                if brows.iter().any(|p| (p[0] - xf).hypot(p[1] - yf) < 1.6) {
                    c = hair_c;
                }
                if (xf - face.cx).abs() < 0.8 && yf > eye_y && yf < nose_tip[1] {
                    c = skin.map(|v| v * 0.85);
                }
            }
            let i = (y * w + x) * 3;
            image.data_mut()[i..i + 3].copy_from_slice(&c);
            fg.data_mut()[y * w + x] = (in_face || in_hair) as u8 as f64;
        }
    }
    RawSample {
        id: id.into(),
        image,
        landmarks: LandmarkSet::new(pts).expect("68 finite points"),
        foreground: fg,
    }
}

/// Writes `count` faces plus `manifest.jsonl` into `dir`. The last
/// `test_count` samples are tagged `test`, the rest `train`.
pub fn write_fixture(dir: &Path, count: usize, test_count: usize, seed: u64, size: (usize, usize)) -> Result<Manifest> {
    for sub in ["images", "foreground"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("face-{i:03}");
        let s = synthetic_face(&id, seed.wrapping_add(i as u64), size);
        let image = format!("images/{id}.png");
        let foreground = format!("foreground/{id}.png");
        imageio::save_png(&s.image, &dir.join(&image))?;
        imageio::save_png(&s.foreground, &dir.join(&foreground))?;
        records.push(Record {
            id,
            image: image.into(),
            landmarks: s.landmarks.points().iter().map(|p| p.map(|v| (v * 1e3).round() / 1e3)).collect(),
            foreground: foreground.into(),
            split: if i + test_count >= count { Split::Test } else { Split::Train },
        });
    }
    let m = Manifest::new(dir, records);
    m.save(&dir.join("manifest.jsonl"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocessing::{build_region_bundle, BundleOptions, HoleSpec, Region};

    #[test]
    fn faces_are_deterministic_and_distinct() {
        let a = synthetic_face("a", 1, (40, 32));
        let b = synthetic_face("a", 1, (40, 32));
        let c = synthetic_face("c", 2, (40, 32));
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, c.image);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn eye_holes_cover_the_eyes() {
        let s = synthetic_face("x", 3, (112, 96));
        let opts = BundleOptions::new(64);
        for r in [Region::O1, Region::O2] {
            let b = build_region_bundle(&s, &HoleSpec::region(r), &opts).unwrap();
            let idx = if r == Region::O1 { 36..42 } else { 42..48 };
            let (cx, cy) = idx.fold((0.0, 0.0), |(x, y), i| {
                let p = b.landmarks.points()[i];
                (x + p[0] / 6.0, y + p[1] / 6.0)
            });
            let pix = cy.round() as usize * 64 + cx.round() as usize;
            assert_eq!(b.hole_mask.data()[pix], 1.0, "{r:?}");
        }
    }
}
