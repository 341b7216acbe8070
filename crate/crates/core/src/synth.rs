//! Procedural flat-shaded faces with exact part masks.
//!
//! Parts are rasterized on a fixed 16×16 lattice (one cell is `size / 16`
//! pixels), so at 64 px every part edge lands on a 4-pixel block boundary
//! and the masks downsample to the feature and latent grids without loss.
//! The face outline itself is rasterized per pixel.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{Mask, Part, PartMaskSet};

pub const LATTICE: usize = 16;
pub const SIZES: [usize; 3] = [32, 64, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct Eyes {
    pub color: [f32; 3],
    pub dx: f32,
    pub dy: f32,
    pub rx: f32,
    pub ry: f32,
    /// Half the distance between the two eye centers.
    pub spacing: f32,
    /// Vertical distance from eye center to brow center.
    pub brow_gap: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nose {
    pub color: [f32; 3],
    pub dx: f32,
    /// Offset of the apex below the face center.
    pub dy: f32,
    pub half_width: f32,
    pub height: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mouth {
    pub color: [f32; 3],
    pub dx: f32,
    pub dy: f32,
    pub rx: f32,
    pub ry: f32,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Jitter {
    pub tx: f32,
    pub ty: f32,
    /// Relative scale deviation; 0 means unscaled.
    pub scale: f32,
    /// Brightness deviation; colors are multiplied by `1 + brightness`.
    pub brightness: f32,
}

/// All geometry is in canvas-relative units ([0,1] spans the image).
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub id: u64,
    pub skin: [f32; 3],
    pub background: [f32; 3],
    /// Face ellipse center and semi-axes.
    pub face: [f32; 4],
    pub eyes: Eyes,
    pub nose: Nose,
    pub mouth: Mouth,
    pub jitter: Jitter,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterRanges {
    pub translate: f32,
    pub scale: f32,
    pub brightness: f32,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self { translate: 0.03, scale: 0.04, brightness: 0.08 }
    }
}

impl JitterRanges {
    pub fn none() -> Self {
        Self { translate: 0.0, scale: 0.0, brightness: 0.0 }
    }
}

pub struct Rendered {
    pub image: Image,
    pub masks: PartMaskSet,
    /// Face pixels outside every part.
    pub skin: Mask,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn part_color(rng: &mut impl Rng, avoid: &[[f32; 3]]) -> [f32; 3] {
    loop {
        let c = hsv(rng.gen(), rng.gen_range(0.55..0.95), rng.gen_range(0.35..0.95));
        if avoid.iter().all(|&a| dist(a, c) >= 0.35) {
            return c;
        }
    }
}

/// Draws an identity. Fields are deterministic in `seed`, the id equals
/// `seed`, and jitter is zero.
pub fn sample_identity(seed: u64) -> FaceParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_face_0000_0000);
    loop {
        let p = draw_identity(seed, &mut rng);
        if validate(&p).is_ok() && large_enough(&p) {
            return p;
        }
    }
}

/// Minimum lattice cells per part for an identity draw.
const MIN_CELLS: [usize; 3] = [6, 3, 3];

fn large_enough(p: &FaceParams) -> bool {
    lattice_masks(p).iter().zip(MIN_CELLS).all(|(m, n)| m.count() >= n)
}

fn draw_identity(id: u64, rng: &mut ChaCha8Rng) -> FaceParams {
    let skin = [rng.gen_range(0.78..0.92), rng.gen_range(0.60..0.72), rng.gen_range(0.48..0.60)];
    let g = rng.gen_range(0.22..0.32);
    let background = [g, g + rng.gen_range(0.0..0.04), g + rng.gen_range(0.04..0.10)];
    let face = [
        0.5 + rng.gen_range(-0.02..0.02),
        0.53 + rng.gen_range(-0.02..0.02),
        rng.gen_range(0.35..0.41),
        rng.gen_range(0.41..0.45),
    ];
    let eyes = Eyes {
        color: part_color(rng, &[skin]),
        dx: rng.gen_range(-0.02..0.02),
        dy: rng.gen_range(-0.17..-0.11),
        rx: rng.gen_range(0.05..0.10),
        ry: rng.gen_range(0.03..0.06),
        spacing: rng.gen_range(0.14..0.19),
        brow_gap: rng.gen_range(0.09..0.12),
    };
    let nose = Nose {
        color: part_color(rng, &[skin]),
        dx: rng.gen_range(-0.02..0.02),
        dy: rng.gen_range(-0.05..0.0),
        half_width: rng.gen_range(0.06..0.10),
        height: rng.gen_range(0.13..0.19),
    };
    let mouth = Mouth {
        color: part_color(rng, &[skin]),
        dx: rng.gen_range(-0.02..0.02),
        dy: rng.gen_range(0.20..0.27),
        rx: rng.gen_range(0.09..0.16),
        ry: rng.gen_range(0.035..0.065),
    };
    FaceParams { id, skin, background, face, eyes, nose, mouth, jitter: Jitter::default() }
}

/// Resamples jitter and illumination. If the jittered geometry would break
/// the mask invariants the draw is repeated; after 64 failed draws the
/// input is returned unchanged.
pub fn perturb(p: &FaceParams, seed: u64, ranges: &JitterRanges) -> FaceParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let sym = |rng: &mut ChaCha8Rng, r: f32| if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
    for _ in 0..64 {
        let mut q = p.clone();
        q.jitter = Jitter {
            tx: sym(&mut rng, ranges.translate),
            ty: sym(&mut rng, ranges.translate),
            scale: sym(&mut rng, ranges.scale),
            brightness: sym(&mut rng, ranges.brightness),
        };
        if validate(&q).is_ok() {
            return q;
        }
    }
    p.clone()
}

/// Geometry after applying translation and scale about the face center.
struct Placed {
    cx: f32,
    cy: f32,
    ax: f32,
    ay: f32,
    s: f32,
}

impl Placed {
    fn new(p: &FaceParams) -> Self {
        let s = 1.0 + p.jitter.scale;
        Self {
            cx: p.face[0] + p.jitter.tx,
            cy: p.face[1] + p.jitter.ty,
            ax: p.face[2] * s,
            ay: p.face[3] * s,
            s,
        }
    }

    fn in_face(&self, x: f32, y: f32) -> bool {
        let (u, v) = ((x - self.cx) / self.ax, (y - self.cy) / self.ay);
        u * u + v * v <= 1.0
    }
}

fn in_ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

fn part_at(p: &FaceParams, g: &Placed, part: Part, x: f32, y: f32) -> bool {
    let s = g.s;
    match part {
        Part::Eyes => {
            let e = &p.eyes;
            let ey = g.cy + e.dy * s;
            let brow_y = ey - e.brow_gap * s;
            [-1.0f32, 1.0].iter().any(|&side| {
                let ex = g.cx + (e.dx + side * e.spacing) * s;
                in_ellipse(x, y, ex, ey, e.rx * s, e.ry * s)
                    || ((x - ex).abs() <= e.rx * s && (y - brow_y).abs() <= 0.035 * s)
            })
        }
        Part::Nose => {
            let n = &p.nose;
            let top = g.cy + n.dy * s;
            let h = n.height * s;
            let t = (y - top) / h;
            (0.0..=1.0).contains(&t) && (x - (g.cx + n.dx * s)).abs() <= t * n.half_width * s
        }
        Part::Mouth => {
            let m = &p.mouth;
            in_ellipse(x, y, g.cx + m.dx * s, g.cy + m.dy * s, m.rx * s, m.ry * s)
        }
        Part::Remain => false,
    }
}

/// Part membership of every lattice cell, sampled at cell centers.
fn lattice_masks(p: &FaceParams) -> [Mask; 3] {
    let g = Placed::new(p);
    let cell = 1.0 / LATTICE as f32;
    Part::SWAPPABLE.map(|part| {
        Mask::from_fn(LATTICE, LATTICE, |r, c| {
            part_at(p, &g, part, (c as f32 + 0.5) * cell, (r as f32 + 0.5) * cell)
        })
    })
}

/// Checks that parts are nonempty, disjoint and inside the face ellipse.
pub fn validate(p: &FaceParams) -> Result<()> {
    let colors = [p.skin, p.background, p.eyes.color, p.nose.color, p.mouth.color];
    if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Geometry("color outside [0,1]".into()));
    }
    let g = Placed::new(p);
    if g.cx - g.ax < 0.0 || g.cx + g.ax > 1.0 || g.cy - g.ay < 0.0 || g.cy + g.ay > 1.0 {
        return Err(Error::Geometry("face ellipse leaves the canvas".into()));
    }
    let masks = lattice_masks(p);
    let cell = 1.0 / LATTICE as f32;
    for (part, m) in Part::SWAPPABLE.iter().zip(&masks) {
        if m.is_empty() {
            return Err(Error::Geometry(format!("{part} covers no cells")));
        }
        for r in 0..LATTICE {
            for c in 0..LATTICE {
                if !m.get(r, c) {
                    continue;
                }
                let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
                if !corners
                    .iter()
                    .all(|(dy, dx)| g.in_face((c as f32 + dx) * cell, (r as f32 + dy) * cell))
                {
                    return Err(Error::Geometry(format!("{part} leaves the face")));
                }
            }
        }
    }
    PartMaskSet::new(masks[0].clone(), masks[1].clone(), masks[2].clone())
        .map(|_| ())
        .map_err(|e| Error::Geometry(e.to_string()))
}

fn lit(rgb: [f32; 3], b: f32) -> [f32; 3] {
    rgb.map(|v| (v * (1.0 + b)).clamp(0.0, 1.0))
}

pub fn render(p: &FaceParams, size: usize) -> Result<Rendered> {
    if !SIZES.contains(&size) {
        return Err(Error::Contract(format!("render size must be one of {SIZES:?}, got {size}")));
    }
    validate(p)?;
    let lattice = lattice_masks(p);
    let cell = size / LATTICE;
    let up = |m: &Mask| Mask::from_fn(size, size, |r, c| m.get(r / cell, c / cell));
    let [eyes, nose, mouth] = lattice.each_ref().map(up);
    let masks = PartMaskSet::new(eyes, nose, mouth)?;
    let g = Placed::new(p);
    let b = p.jitter.brightness;
    let colors = [lit(p.eyes.color, b), lit(p.nose.color, b), lit(p.mouth.color, b)];
    let (skin_rgb, bg_rgb) = (lit(p.skin, b), lit(p.background, b));
    let mut image = Image::filled(size, size, bg_rgb);
    let inv = 1.0 / size as f32;
    let face = Mask::from_fn(size, size, |r, c| g.in_face((c as f32 + 0.5) * inv, (r as f32 + 0.5) * inv));
    for r in 0..size {
        for c in 0..size {
            let part = (0..3).find(|&k| masks.masks()[k].get(r, c));
            let rgb = match part {
                Some(k) => colors[k],
                None if face.get(r, c) => skin_rgb,
                None => bg_rgb,
            };
            image.set_pixel(r, c, rgb);
        }
    }
    let skin = face.and(masks.get(Part::Remain))?;
    Ok(Rendered { image: image.quantized(), masks, skin })
}

fn fmt_vals(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl FaceParams {
    /// Flat `key = value` records under `prefix`.
    pub fn to_records(&self, prefix: &str) -> Vec<(String, String)> {
        let e = &self.eyes;
        let n = &self.nose;
        let m = &self.mouth;
        let j = &self.jitter;
        [
            ("id", self.id.to_string()),
            ("skin", fmt_vals(&self.skin)),
            ("background", fmt_vals(&self.background)),
            ("face", fmt_vals(&self.face)),
            ("eyes.color", fmt_vals(&e.color)),
            ("eyes.shape", fmt_vals(&[e.dx, e.dy, e.rx, e.ry, e.spacing, e.brow_gap])),
            ("nose.color", fmt_vals(&n.color)),
            ("nose.shape", fmt_vals(&[n.dx, n.dy, n.half_width, n.height])),
            ("mouth.color", fmt_vals(&m.color)),
            ("mouth.shape", fmt_vals(&[m.dx, m.dy, m.rx, m.ry])),
            ("jitter", fmt_vals(&[j.tx, j.ty, j.scale])),
            ("brightness", j.brightness.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect()
    }

    pub fn from_records(map: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            map.get(&format!("{prefix}.{k}"))
                .ok_or_else(|| Error::Data(format!("manifest lacks {prefix}.{k}")))
        };
        let vals = |k: &str, n: usize| -> Result<Vec<f32>> {
            let v = get(k)?
                .split_whitespace()
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Data(format!("{prefix}.{k}: bad number")))?;
            if v.len() != n {
                return Err(Error::Data(format!("{prefix}.{k}: expected {n} values")));
            }
            Ok(v)
        };
        let rgb = |k: &str| vals(k, 3).map(|v| [v[0], v[1], v[2]]);
        let id = get("id")?.parse().map_err(|_| Error::Data(format!("{prefix}.id: bad integer")))?;
        let f = vals("face", 4)?;
        let es = vals("eyes.shape", 6)?;
        let ns = vals("nose.shape", 4)?;
        let ms = vals("mouth.shape", 4)?;
        let j = vals("jitter", 3)?;
        let brightness = vals("brightness", 1)?[0];
        Ok(Self {
            id,
            skin: rgb("skin")?,
            background: rgb("background")?,
            face: [f[0], f[1], f[2], f[3]],
            eyes: Eyes { color: rgb("eyes.color")?, dx: es[0], dy: es[1], rx: es[2], ry: es[3], spacing: es[4], brow_gap: es[5] },
            nose: Nose { color: rgb("nose.color")?, dx: ns[0], dy: ns[1], half_width: ns[2], height: ns[3] },
            mouth: Mouth { color: rgb("mouth.color")?, dx: ms[0], dy: ms[1], rx: ms[2], ry: ms[3] },
            jitter: Jitter { tx: j[0], ty: j[1], scale: j[2], brightness },
        })
    }

    pub fn part_color(&self, part: Part) -> Option<[f32; 3]> {
        match part {
            Part::Eyes => Some(self.eyes.color),
            Part::Nose => Some(self.nose.color),
            Part::Mouth => Some(self.mouth.color),
            Part::Remain => None,
        }
    }
}

/// Mean RGB over the cells of `m`.
pub fn masked_mean(img: &Image, m: &Mask) -> Result<[f32; 3]> {
    img.check_mask(m)?;
    if m.is_empty() {
        return Err(Error::EmptyRegion("masked mean over an empty mask".into()));
    }
    let mut acc = [0.0f64; 3];
    for r in 0..img.height() {
        for c in 0..img.width() {
            if m.get(r, c) {
                for (a, v) in acc.iter_mut().zip(img.pixel(r, c)) {
                    *a += v as f64;
                }
            }
        }
    }
    Ok(acc.map(|a| (a / m.count() as f64) as f32))
}
