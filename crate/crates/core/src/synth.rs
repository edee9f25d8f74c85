//! Procedural cartoon faces with exact 68-point landmarks.
//!
//! Each face draws its eyes, nose and mouth from a small set of styles with
//! jittered geometry and colors, so component appearance repeats across the
//! corpus the way real facial parts do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::FaceRecord;
use crate::imaging::Image;
use crate::landmarks::LandmarkSet;

pub const EYE_STYLES: usize = 4;
pub const NOSE_STYLES: usize = 3;
pub const MOUTH_STYLES: usize = 4;

type Rgb = [f32; 3];

const SUPERSAMPLE: usize = 4;

struct Canvas {
    img: Image,
}

impl Canvas {
    /// Blends `color` over pixels in proportion to the fraction of
    /// sub-samples for which `inside` holds.
    fn fill(&mut self, bbox: (f64, f64, f64, f64), color: Rgb, alpha: f32, inside: impl Fn(f64, f64) -> bool) {
        let (h, w) = (self.img.height(), self.img.width());
        let x0 = bbox.0.floor().max(0.0) as usize;
        let y0 = bbox.1.floor().max(0.0) as usize;
        let x1 = (bbox.2.ceil().max(0.0) as usize).min(w);
        let y1 = (bbox.3.ceil().max(0.0) as usize).min(h);
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += inside(px, py) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = alpha * hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for (c, &col) in color.iter().enumerate() {
                    let v = self.img.get(c, y, x);
                    self.img.set(c, y, x, v * (1.0 - a) + col * a);
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb, alpha: f32) {
        self.fill((cx - rx, cy - ry, cx + rx, cy + ry), color, alpha, |x, y| {
            ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
        });
    }

    fn polyline(&mut self, pts: &[(f64, f64)], width: f64, color: Rgb, alpha: f32) {
        let r = width / 2.0;
        let (mut bx0, mut by0, mut bx1, mut by1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in pts {
            bx0 = bx0.min(x - r);
            by0 = by0.min(y - r);
            bx1 = bx1.max(x + r);
            by1 = by1.max(y + r);
        }
        self.fill((bx0, by0, bx1, by1), color, alpha, |x, y| {
            pts.windows(2).any(|s| seg_dist(x, y, s[0], s[1]) <= r)
        });
    }
}

fn seg_dist(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((x - a.0 - t * dx).powi(2) + (y - a.1 - t * dy).powi(2)).sqrt()
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.gen_range(-amount..=amount)
}

fn tint(rng: &mut ChaCha8Rng, base: Rgb, amount: f32) -> Rgb {
    base.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn scale(c: Rgb, f: f32) -> Rgb {
    c.map(|v| (v * f).clamp(0.0, 1.0))
}

const SKIN: [Rgb; 4] = [[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.70, 0.50, 0.36], [0.48, 0.33, 0.24]];
const IRIS: [Rgb; EYE_STYLES] = [[0.25, 0.45, 0.75], [0.35, 0.22, 0.10], [0.20, 0.55, 0.30], [0.45, 0.45, 0.50]];
const OPENNESS: [f64; EYE_STYLES] = [0.55, 0.40, 0.62, 0.32];
const HAIR: [Rgb; 4] = [[0.10, 0.08, 0.06], [0.40, 0.25, 0.12], [0.85, 0.70, 0.40], [0.55, 0.55, 0.55]];

/// One face at `resolution x resolution`, fully determined by `seed`.
pub fn synth_face(resolution: usize, seed: u64) -> (Image, LandmarkSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = resolution as f64;
    let eye_style = rng.gen_range(0..EYE_STYLES);
    let nose_style = rng.gen_range(0..NOSE_STYLES);
    let mouth_style = rng.gen_range(0..MOUTH_STYLES);

    let top = tint(&mut rng, [0.55, 0.65, 0.80], 0.25);
    let bottom = tint(&mut rng, [0.35, 0.40, 0.50], 0.2);
    let img = Image::from_fn(resolution, resolution, |c, y, _| {
        let t = (y as f32 + 0.5) / resolution as f32;
        top[c] * (1.0 - t) + bottom[c] * t
    });
    let mut cv = Canvas { img };

    let cx = n * (0.5 + jitter(&mut rng, 0.025));
    let cy = n * (0.53 + jitter(&mut rng, 0.02));
    let frx = n * (0.30 + jitter(&mut rng, 0.02));
    let fry = n * (0.37 + jitter(&mut rng, 0.02));
    let skin_base = SKIN[rng.gen_range(0..SKIN.len())];
    let skin = tint(&mut rng, skin_base, 0.04);
    let hair_base = HAIR[rng.gen_range(0..HAIR.len())];
    let hair = tint(&mut rng, hair_base, 0.05);

    cv.ellipse(cx, cy - 0.16 * fry, frx * 1.12, fry * 0.98, hair, 1.0);
    cv.ellipse(cx - frx, cy + 0.05 * fry, 0.12 * frx, 0.2 * fry, scale(skin, 0.92), 1.0);
    cv.ellipse(cx + frx, cy + 0.05 * fry, 0.12 * frx, 0.2 * fry, scale(skin, 0.92), 1.0);
    cv.ellipse(cx, cy, frx, fry, skin, 1.0);
    cv.ellipse(cx, cy + 0.1 * fry, frx * 0.8, fry * 0.75, scale(skin, 1.04), 0.35);
    // fringe
    cv.fill((cx - frx, cy - fry, cx + frx, cy - 0.55 * fry), hair, 1.0, |x, y| {
        let u = (x - cx) / frx;
        y < cy - fry * (0.62 + 0.08 * (u * 9.0).sin().abs()) && ((x - cx) / frx).powi(2) + ((y - cy) / fry).powi(2) <= 1.0
    });

    let mut pts = vec![(0.0, 0.0); 68];
    for i in 0..17 {
        let a = std::f64::consts::PI * i as f64 / 16.0;
        pts[i] = (cx - frx * a.cos(), cy + fry * a.sin());
    }

    // eyes
    let eye_y = cy - fry * (0.20 + jitter(&mut rng, 0.02));
    let eye_dx = frx * (0.40 + jitter(&mut rng, 0.03));
    let erx = frx * (0.22 + jitter(&mut rng, 0.02));
    let ery = erx * (OPENNESS[eye_style] + jitter(&mut rng, 0.04));
    let iris = tint(&mut rng, IRIS[eye_style], 0.05);
    let brow = scale(hair, 0.8);
    let brow_lift = ery * (1.9 + jitter(&mut rng, 0.3));
    let brow_arch = ery * (0.5 + 0.25 * (eye_style % 2) as f64);
    for (side, first) in [(-1.0, 36usize), (1.0, 42)] {
        let ex = cx + side * eye_dx;
        let angles = [180.0f64, 120.0, 60.0, 0.0, -60.0, -120.0];
        for (k, a) in angles.iter().enumerate() {
            let r = a.to_radians();
            pts[first + k] = (ex + erx * r.cos(), eye_y - ery * r.sin());
        }
        cv.ellipse(ex, eye_y, erx * 1.15, ery * 1.5, scale(skin, 0.85), 0.6);
        cv.ellipse(ex, eye_y, erx, ery, [0.97, 0.96, 0.94], 1.0);
        let ir = ery * 0.95;
        let (ix, iy) = (ex + side * erx * 0.05, eye_y);
        cv.fill((ix - ir, iy - ir, ix + ir, iy + ir), iris, 1.0, |x, y| {
            (x - ix).powi(2) + (y - iy).powi(2) <= ir * ir && ((x - ex) / erx).powi(2) + ((y - eye_y) / ery).powi(2) <= 1.0
        });
        cv.ellipse(ix, iy, ir * 0.45, ir * 0.45, [0.03, 0.03, 0.03], 1.0);
        cv.ellipse(ix - ir * 0.3, iy - ir * 0.35, ir * 0.22, ir * 0.22, [1.0, 1.0, 1.0], 0.9);
        let lid: Vec<(f64, f64)> = (0..=12)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 12.0;
                (ex - erx * a.cos(), eye_y - ery * a.sin())
            })
            .collect();
        cv.polyline(&lid, (ery * 0.35).max(0.6), [0.08, 0.05, 0.04], 1.0);
        if eye_style >= 2 {
            for k in 0..3 {
                let a = std::f64::consts::PI * (0.25 + 0.25 * k as f64);
                let base = (ex - erx * a.cos(), eye_y - ery * a.sin());
                let tip = (base.0 - erx * 0.15 * a.cos(), base.1 - ery * 0.5);
                cv.polyline(&[base, tip], 0.5, [0.05, 0.03, 0.03], 0.9);
            }
        }
        // brows run left to right in image space
        let brow_pts: Vec<(f64, f64)> = (0..5)
            .map(|k| {
                let t = k as f64 / 4.0;
                let x = ex - erx * 1.2 + 2.4 * erx * t;
                let arch = brow_arch * (1.0 - (2.0 * t - 1.0).powi(2));
                (x, eye_y - brow_lift - arch)
            })
            .collect();
        let bfirst = if side < 0.0 { 17 } else { 22 };
        for (k, p) in brow_pts.iter().enumerate() {
            pts[bfirst + k] = *p;
        }
        cv.polyline(&brow_pts, (ery * 0.6).max(0.8), brow, 1.0);
    }

    // nose
    let tip_y = cy + fry * (0.12 + jitter(&mut rng, 0.02));
    let nw = frx * (0.17 + 0.04 * nose_style as f64 + jitter(&mut rng, 0.015));
    for k in 0..4 {
        let t = k as f64 / 3.0;
        pts[27 + k] = (cx, eye_y + (tip_y - eye_y) * t);
    }
    let nostril_y = tip_y + nw * 0.25;
    for k in 0..5 {
        let t = k as f64 / 4.0 - 0.5;
        pts[31 + k] = (cx + t * 2.0 * nw * 0.8, nostril_y + nw * 0.15 * (1.0 - (2.0 * t).powi(2)));
    }
    let shade = scale(skin, 0.78);
    cv.polyline(&[(cx - nw * 0.25, eye_y + ery), (cx - nw * 0.45, tip_y)], nw * 0.18, shade, 0.7);
    match nose_style {
        0 => {
            cv.ellipse(cx, tip_y, nw * 0.45, nw * 0.35, scale(skin, 1.08), 0.8);
        }
        1 => {
            cv.polyline(&[(cx - nw * 0.8, nostril_y - nw * 0.2), (cx, nostril_y + nw * 0.1), (cx + nw * 0.8, nostril_y - nw * 0.2)], nw * 0.15, shade, 0.9);
        }
        _ => {
            cv.ellipse(cx, tip_y + nw * 0.05, nw * 0.6, nw * 0.4, scale(skin, 0.9), 0.8);
        }
    }
    for side in [-1.0, 1.0] {
        cv.ellipse(cx + side * nw * 0.45, nostril_y, nw * 0.22, nw * 0.13, [0.25, 0.12, 0.1], 0.9);
    }

    // mouth
    let my = cy + fry * (0.45 + jitter(&mut rng, 0.03));
    let mw = frx * (0.42 + jitter(&mut rng, 0.04));
    let mh = mw * ([0.28, 0.30, 0.45, 0.38][mouth_style] + jitter(&mut rng, 0.04));
    let lip = tint(&mut rng, [0.72, 0.30, 0.32], 0.06);
    let smile = [0.0, 0.35, 0.15, -0.1][mouth_style] * mh;
    let outer = |a: f64| -> (f64, f64) {
        let r = a.to_radians();
        let x = cx + mw * r.cos();
        let bend = smile * (1.0 - r.cos().powi(2));
        (x, my - mh * r.sin() + bend)
    };
    for (k, a) in [180.0, 150.0, 120.0, 90.0, 60.0, 30.0, 0.0, -30.0, -60.0, -90.0, -120.0, -150.0].iter().enumerate() {
        pts[48 + k] = outer(*a);
    }
    let inner_h = if mouth_style == 2 { 0.55 } else { 0.12 };
    let inner = |a: f64| -> (f64, f64) {
        let r = a.to_radians();
        (cx + 0.75 * mw * r.cos(), my - inner_h * mh * r.sin() + smile * (1.0 - r.cos().powi(2)))
    };
    for (k, a) in [180.0, 135.0, 90.0, 45.0, 0.0, -45.0, -90.0, -135.0].iter().enumerate() {
        pts[60 + k] = inner(*a);
    }
    let bend = |x: f64| smile * (1.0 - ((x - cx) / mw).powi(2));
    cv.fill((cx - mw, my - mh + smile.min(0.0), cx + mw, my + mh + smile.max(0.0)), lip, 1.0, |x, y| {
        ((x - cx) / mw).powi(2) + ((y - bend(x) - my) / mh).powi(2) <= 1.0
    });
    if mouth_style == 2 {
        let (irx, iry) = (0.75 * mw, inner_h * mh);
        cv.fill((cx - irx, my - iry, cx + irx, my + iry + smile.max(0.0)), [0.3, 0.05, 0.08], 1.0, |x, y| {
            ((x - cx) / irx).powi(2) + ((y - bend(x) - my) / iry).powi(2) <= 1.0
        });
        cv.fill((cx - irx, my - iry, cx + irx, my + smile.max(0.0)), [0.95, 0.95, 0.9], 1.0, |x, y| {
            ((x - cx) / irx).powi(2) + ((y - bend(x) - my) / iry).powi(2) <= 1.0 && y < my + bend(x) - iry * 0.1
        });
        for k in -2..=2 {
            let x = cx + k as f64 * irx * 0.3;
            cv.polyline(&[(x, my - iry), (x, my + bend(x))], 0.4, [0.6, 0.6, 0.55], 0.8);
        }
    } else {
        let line: Vec<(f64, f64)> = (0..=10)
            .map(|k| {
                let x = cx - mw * 0.95 + 1.9 * mw * k as f64 / 10.0;
                (x, my + bend(x))
            })
            .collect();
        cv.polyline(&line, (mh * 0.22).max(0.5), [0.35, 0.08, 0.1], 1.0);
        cv.ellipse(cx, my + mh * 0.45 + smile * 0.5, mw * 0.45, mh * 0.2, scale(lip, 1.25), 0.6);
    }

    let mut img = cv.img;
    img.clip();
    (img, LandmarkSet::new(pts).expect("68 finite points"))
}

/// `count` faces; face `i` uses seed `seed * 1_000_003 + i`, so prefixes of
/// a larger set are stable.
pub fn synth_faces(count: usize, resolution: usize, seed: u64) -> Vec<FaceRecord> {
    (0..count)
        .map(|i| {
            let (image, lm) = synth_face(resolution, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            FaceRecord {
                id: format!("face_{i:05}"),
                image,
                landmarks: Some(lm),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::component_rois;

    #[test]
    fn deterministic_and_in_range() {
        let (a, la) = synth_face(64, 7);
        let (b, lb) = synth_face(64, 7);
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (c, _) = synth_face(64, 8);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn landmarks_give_valid_boxes_inside_the_face() {
        for r in synth_faces(30, 64, 3) {
            let lm = r.landmarks.unwrap();
            for p in lm.points() {
                assert!(p.0 > 0.0 && p.0 < 64.0 && p.1 > 0.0 && p.1 < 64.0, "{p:?}");
            }
            let boxes = component_rois(&lm, (64, 64)).unwrap();
            assert!(boxes[0].center().0 < boxes[1].center().0);
            assert!(boxes[2].center().1 < boxes[3].center().1);
        }
    }
}
