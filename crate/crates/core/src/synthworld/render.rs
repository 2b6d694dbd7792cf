use std::f32::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{WorldError, AGE_MIN, RENDER_AGE_MAX};
use crate::dataio::{ImageSample, CHANNELS, HEIGHT, WIDTH};

pub const IDENTITY_DIMS: usize = 10;

pub const IDENTITY_NAMES: [&str; IDENTITY_DIMS] = [
    "eye_spacing",
    "face_aspect",
    "skin_r",
    "skin_g",
    "skin_b",
    "brow_height",
    "mouth_curvature",
    "eye_height",
    "mouth_width",
    "eye_darkness",
];

const IDENTITY_RANGES: [(f32, f32); IDENTITY_DIMS] = [
    (0.30, 0.48),
    (0.85, 1.25),
    (0.55, 0.95),
    (0.38, 0.78),
    (0.28, 0.68),
    (0.10, 0.30),
    (-1.0, 1.0),
    (-0.12, 0.08),
    (0.25, 0.55),
    (0.0, 0.4),
];

/// Identity factors of one subject; constant across all of its ages.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSpec {
    pub identity: [f32; IDENTITY_DIMS],
    pub birth_seed: u64,
}

impl SubjectSpec {
    /// Draws every factor uniformly from its range using `birth_seed`.
    pub fn sample(birth_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(birth_seed);
        let mut identity = [0.0; IDENTITY_DIMS];
        for (v, &(lo, hi)) in identity.iter_mut().zip(&IDENTITY_RANGES) {
            *v = rng.gen_range(lo..hi);
        }
        Self {
            identity,
            birth_seed,
        }
    }

    fn texture(&self) -> [(f32, f32, f32, f32); 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.birth_seed ^ 0x7e47_0000_5eed);
        let mut t = [(0.0, 0.0, 0.0, 0.0); 3];
        for w in t.iter_mut() {
            *w = (
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..2.0 * PI),
            );
        }
        t
    }
}

/// Smooth monotone growth curves (logistic in age).
#[derive(Clone, Copy, Debug, Default)]
pub struct AgeCurve;

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl AgeCurve {
    fn growth(age: f32) -> f32 {
        logistic((age - 8.0) / 3.0)
    }

    /// Head semi-width as a fraction of 12 px.
    pub fn head_scale(age: f32) -> f32 {
        0.50 + 0.38 * Self::growth(age)
    }

    /// Eye radius as a fraction of 3 px; grows slower than the head.
    pub fn eye_scale(age: f32) -> f32 {
        0.55 + 0.15 * Self::growth(age)
    }

    /// Amplitude of the subject's fixed skin texture.
    pub fn texture_noise(age: f32) -> f32 {
        0.10 * logistic((age - 11.0) / 3.0)
    }

    /// Additive skin-tone shift (darkening with age).
    pub fn skin_shift(age: f32) -> f32 {
        -0.10 * logistic((age - 10.0) / 4.0)
    }

    /// Upward drift of the eye line, as a fraction of the head semi-height.
    pub fn eye_lift(age: f32) -> f32 {
        0.10 * Self::growth(age)
    }
}

pub const STYLE_DIMS: usize = 6;

// background, tint rgb, light angle, light strength
const STYLE_PROTOTYPES: [(f32, [f32; 3], f32, f32); 8] = [
    (0.15, [0.05, 0.00, -0.03], 0.0, 0.10),
    (0.35, [-0.04, 0.03, 0.05], 0.5 * PI, 0.12),
    (0.55, [0.06, 0.04, -0.05], PI, 0.08),
    (0.75, [-0.05, -0.02, 0.06], 1.5 * PI, 0.14),
    (0.90, [0.02, -0.05, 0.00], 0.25 * PI, 0.06),
    (0.25, [0.00, 0.06, 0.02], 1.25 * PI, 0.15),
    (0.65, [0.05, -0.04, 0.04], 0.75 * PI, 0.10),
    (0.45, [-0.06, 0.00, -0.04], 1.75 * PI, 0.12),
];

/// Non-identity image factors: background luminance, global tint and an
/// additive lighting gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSpec {
    pub prototype: usize,
    pub background: f32,
    pub tint: [f32; 3],
    pub light_angle: f32,
    pub light_strength: f32,
}

impl StyleSpec {
    pub const NUM_PROTOTYPES: usize = STYLE_PROTOTYPES.len();

    /// A jittered copy of one of the style prototypes.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let p = rng.gen_range(0..Self::NUM_PROTOTYPES);
        let (bg, tint, angle, strength) = STYLE_PROTOTYPES[p];
        Self {
            prototype: p,
            background: bg + rng.gen_range(-0.06..0.06),
            tint: [
                tint[0] + rng.gen_range(-0.02..0.02),
                tint[1] + rng.gen_range(-0.02..0.02),
                tint[2] + rng.gen_range(-0.02..0.02),
            ],
            light_angle: angle + rng.gen_range(-0.3..0.3),
            light_strength: strength + rng.gen_range(-0.03..0.03),
        }
    }

    pub fn prototype(p: usize) -> Self {
        let (bg, tint, angle, strength) = STYLE_PROTOTYPES[p % Self::NUM_PROTOTYPES];
        Self {
            prototype: p % Self::NUM_PROTOTYPES,
            background: bg,
            tint,
            light_angle: angle,
            light_strength: strength,
        }
    }

    pub fn label(&self) -> String {
        format!("st{}", self.prototype)
    }

    /// Continuous style latent (background, tint, lighting vector).
    pub fn latent(&self) -> [f32; STYLE_DIMS] {
        [
            self.background,
            self.tint[0],
            self.tint[1],
            self.tint[2],
            self.light_strength * self.light_angle.cos(),
            self.light_strength * self.light_angle.sin(),
        ]
    }
}

struct Geometry {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

fn geometry(subject: &SubjectSpec, age: f32) -> Geometry {
    let rx = 12.0 * AgeCurve::head_scale(age);
    Geometry {
        cx: 16.0,
        cy: 16.5,
        rx,
        ry: rx * subject.identity[1],
    }
}

/// Area coverage of a pixel at signed distance `d` (negative inside).
fn coverage(d: f32) -> f32 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn ellipse_distance(x: f32, y: f32, g: &Geometry) -> f32 {
    let (u, v) = ((x - g.cx) / g.rx, (y - g.cy) / g.ry);
    ((u * u + v * v).sqrt() - 1.0) * (g.rx * g.ry).sqrt()
}

fn segment_distance(px: f32, py: f32, (ax, ay): (f32, f32), (bx, by): (f32, f32)) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

fn blend(dst: &mut [f32; 3], src: [f32; 3], alpha: f32) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

/// Renders a 32×32×3 face. Pixels are quantized to multiples of 1/255 so that
/// the 8-bit pixel container round-trips exactly.
pub fn render(
    subject: &SubjectSpec,
    age: f32,
    style: &StyleSpec,
    subject_id: &str,
) -> Result<ImageSample, WorldError> {
    if !(AGE_MIN..=RENDER_AGE_MAX).contains(&age) {
        return Err(WorldError::AgeOutOfRange(age));
    }
    let id = &subject.identity;
    let g = geometry(subject, age);
    let texture = subject.texture();
    let tex_amp = AgeCurve::texture_noise(age);
    let shift = AgeCurve::skin_shift(age);
    let skin = [id[2] + shift, id[3] + shift, id[4] + shift];

    let eye_r = 3.0 * AgeCurve::eye_scale(age);
    let eye_y = g.cy + (id[7] - AgeCurve::eye_lift(age)) * g.ry;
    let eyes = [g.cx - id[0] * g.rx, g.cx + id[0] * g.rx];
    let eye_level = 0.08 + 0.5 * id[9];
    let eye_color = [eye_level, eye_level, eye_level * 1.2];
    let brow_y = eye_y - eye_r - id[5] * g.ry;
    let brow_color = [skin[0] * 0.35, skin[1] * 0.35, skin[2] * 0.35];
    let mouth_y = g.cy + 0.45 * g.ry;
    let mouth_w = id[8] * g.rx;
    let mouth_color = [0.55, 0.15, 0.2];
    let (lc, ls) = (style.light_angle.cos(), style.light_angle.sin());

    let mut pixels = Vec::with_capacity(HEIGHT * WIDTH * CHANNELS);
    for r in 0..HEIGHT {
        for c in 0..WIDTH {
            let (x, y) = (c as f32 + 0.5, r as f32 + 0.5);
            let mut px = [
                style.background + style.tint[0],
                style.background + style.tint[1],
                style.background + style.tint[2],
            ];

            let head = coverage(ellipse_distance(x, y, &g));
            if head > 0.0 {
                let (u, v) = ((x - g.cx) / g.rx, (y - g.cy) / g.ry);
                let pattern = texture
                    .iter()
                    .map(|&(fu, pu, fv, pv)| (fu * PI * u + pu).sin() * (fv * PI * v + pv).cos())
                    .sum::<f32>()
                    / 3.0;
                let t = tex_amp * pattern;
                blend(&mut px, [skin[0] + t, skin[1] + t, skin[2] + t], head);

                for &ex in &eyes {
                    let d = ((x - ex).powi(2) + (y - eye_y).powi(2)).sqrt() - eye_r;
                    blend(&mut px, eye_color, coverage(d) * head);
                    let bd = segment_distance(
                        x,
                        y,
                        (ex - 1.3 * eye_r, brow_y),
                        (ex + 1.3 * eye_r, brow_y),
                    ) - 0.6;
                    blend(&mut px, brow_color, coverage(bd) * head);
                }

                let dx = x - g.cx;
                if dx.abs() <= mouth_w + 1.0 {
                    let t = (dx / mouth_w).clamp(-1.0, 1.0);
                    let curve_y = mouth_y - id[6] * 1.5 * (t * t - 1.0) - 1.5 * id[6];
                    let ax = dx.clamp(-mouth_w, mouth_w) + g.cx;
                    let d = ((x - ax).powi(2) + (y - curve_y).powi(2)).sqrt() - 0.7;
                    blend(&mut px, mouth_color, coverage(d) * head);
                }
            }

            let light = style.light_strength * ((x - 16.0) * lc + (y - 16.0) * ls) / 16.0;
            for v in px.iter_mut() {
                *v = ((*v + light).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
            pixels.extend_from_slice(&px);
        }
    }
    Ok(ImageSample::new(
        subject_id,
        age,
        style.label(),
        (HEIGHT, WIDTH, CHANNELS),
        pixels,
    )?)
}

/// Pixels covered by the head ellipse at `age`, dilated by `margin` pixels.
pub fn face_mask(subject: &SubjectSpec, age: f32, margin: f32) -> Vec<bool> {
    let g = geometry(subject, age);
    let mut mask = Vec::with_capacity(HEIGHT * WIDTH);
    for r in 0..HEIGHT {
        for c in 0..WIDTH {
            let (x, y) = (c as f32 + 0.5, r as f32 + 0.5);
            mask.push(ellipse_distance(x, y, &g) < 0.5 + margin);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(mask: &[bool]) -> (usize, usize) {
        let rows = (0..HEIGHT)
            .filter(|r| (0..WIDTH).any(|c| mask[r * WIDTH + c]))
            .count();
        let cols = (0..WIDTH)
            .filter(|c| (0..HEIGHT).any(|r| mask[r * WIDTH + c]))
            .count();
        (rows, cols)
    }

    #[test]
    fn age_curves_are_monotone() {
        let mut prev = (
            AgeCurve::head_scale(2.0),
            AgeCurve::eye_scale(2.0) / AgeCurve::head_scale(2.0),
        );
        for i in 1..=180 {
            let a = 2.0 + i as f32 * 0.1;
            let hs = AgeCurve::head_scale(a);
            let ratio = AgeCurve::eye_scale(a) / hs;
            assert!(hs > prev.0 && ratio < prev.1, "age {a}");
            prev = (hs, ratio);
        }
    }

    #[test]
    fn head_grows_between_two_and_twenty() {
        let s = SubjectSpec::sample(4);
        let (young, old) = (
            bbox(&face_mask(&s, 2.0, 0.0)),
            bbox(&face_mask(&s, 20.0, 0.0)),
        );
        assert!(old.0 > young.0 && old.1 > young.1, "{young:?} vs {old:?}");
    }

    #[test]
    fn style_changes_background_not_geometry() {
        let s = SubjectSpec::sample(8);
        let (a, b) = (StyleSpec::prototype(0), StyleSpec::prototype(4));
        let ia = render(&s, 9.0, &a, "s").unwrap();
        let ib = render(&s, 9.0, &b, "s").unwrap();
        // geometry is a function of subject and age only
        assert_eq!(face_mask(&s, 9.0, 0.0), face_mask(&s, 9.0, 0.0));
        let outside = face_mask(&s, 9.0, 1.0);
        let bg_mean = |img: &ImageSample| {
            let vals: Vec<f32> = (0..HEIGHT * WIDTH)
                .filter(|&p| !outside[p])
                .flat_map(|p| img.pixels()[p * 3..p * 3 + 3].to_vec())
                .collect();
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        assert!((bg_mean(&ia) - bg_mean(&ib)).abs() > 0.3);
    }

    #[test]
    fn render_is_pure_and_quantized() {
        let s = SubjectSpec::sample(1);
        let st = StyleSpec::prototype(2);
        let a = render(&s, 7.5, &st, "x").unwrap();
        assert_eq!(a, render(&s, 7.5, &st, "x").unwrap());
        assert!(a
            .pixels()
            .iter()
            .all(|&p| ((p * 255.0).round() - p * 255.0).abs() < 1e-4));
    }

    #[test]
    fn out_of_range_age_rejected() {
        let s = SubjectSpec::sample(1);
        let st = StyleSpec::prototype(0);
        assert!(matches!(
            render(&s, 1.0, &st, "x"),
            Err(WorldError::AgeOutOfRange(_))
        ));
        assert!(render(&s, 27.0, &st, "x").is_err());
        assert!(render(&s, 26.0, &st, "x").is_ok());
    }

    #[test]
    fn age_difference_energy_concentrates_in_face() {
        // 100 renders: same subject and style at two ages; the union mask is
        // the larger (older) head dilated by one pixel
        let mut inside = 0.0f64;
        let mut total = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..100 {
            let s = SubjectSpec::sample(1000 + i);
            let st = StyleSpec::sample(&mut rng);
            let (a, b) = (rng.gen_range(2.0..10.0), rng.gen_range(12.0..20.0));
            let (ia, ib) = (
                render(&s, a, &st, "s").unwrap(),
                render(&s, b, &st, "s").unwrap(),
            );
            let mask = face_mask(&s, b, 1.0);
            for p in 0..HEIGHT * WIDTH {
                for ch in 0..3 {
                    let d = (ia.pixels()[p * 3 + ch] - ib.pixels()[p * 3 + ch]) as f64;
                    total += d * d;
                    if mask[p] {
                        inside += d * d;
                    }
                }
            }
        }
        assert!(inside / total >= 0.8, "{}", inside / total);
    }
}
