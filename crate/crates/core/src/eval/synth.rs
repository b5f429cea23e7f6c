//! Seeded synthetic tracking sequences: a textured rectangle moving over a
//! value-noise terrain, with optional challenge attributes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::image::Image;
use crate::numerics::{math, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    CameraMotion,
    FastMotion,
    LowResolution,
    Occlusion,
    ScaleVariation,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::CameraMotion,
        Attribute::FastMotion,
        Attribute::LowResolution,
        Attribute::Occlusion,
        Attribute::ScaleVariation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::CameraMotion => "camera-motion",
            Attribute::FastMotion => "fast-motion",
            Attribute::LowResolution => "low-resolution",
            Attribute::Occlusion => "occlusion",
            Attribute::ScaleVariation => "scale-variation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown attribute `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub length: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub attributes: Vec<Attribute>,
    /// Pixels per frame; drawn from the seed when `None`.
    pub velocity: Option<(f64, f64)>,
    /// Target `(w, h)` in pixels; drawn from the seed when `None`.
    pub size: Option<(f64, f64)>,
    /// Camera jitter standard deviation in pixels.
    pub jitter: f64,
}

impl SequenceSpec {
    pub fn new(length: usize, seed: u64) -> Self {
        Self {
            length,
            width: 320,
            height: 240,
            seed,
            attributes: Vec::new(),
            velocity: None,
            size: None,
            jitter: 6.0,
        }
    }

    pub fn with(mut self, attrs: &[Attribute]) -> Self {
        for a in attrs {
            if !self.attributes.contains(a) {
                self.attributes.push(*a);
            }
        }
        self.attributes.sort();
        self
    }

    pub fn has(&self, a: Attribute) -> bool {
        self.attributes.contains(&a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
    pub attributes: Vec<Attribute>,
    pub seed: u64,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ (ix as u64).wrapping_mul(0x8da6_b343) ^ (iy as u64).wrapping_mul(0xd816_3841_0000_0001));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (math::floor(x), math::floor(y));
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - fx), s(y - fy));
    let a = lattice(seed, ix, iy) * (1.0 - tx) + lattice(seed, ix + 1, iy) * tx;
    let b = lattice(seed, ix, iy + 1) * (1.0 - tx) + lattice(seed, ix + 1, iy + 1) * tx;
    a * (1.0 - ty) + b * ty
}

fn terrain(seed: u64, x: f64, y: f64) -> f64 {
    0.55 * value_noise(seed, x / 40.0, y / 40.0)
        + 0.3 * value_noise(seed.wrapping_add(1), x / 11.0, y / 11.0)
        + 0.15 * value_noise(seed.wrapping_add(2), x / 3.0, y / 3.0)
}

struct Look {
    ground_seed: u64,
    tint: [f64; 3],
    colors: [[f64; 3]; 2],
    cells: f64,
    occluder: [f64; 3],
}

impl Look {
    fn new(rng: &mut RngStream) -> Self {
        let ground_seed = rng.next_u64();
        let tint = [rng.range(0.8, 1.0), rng.range(0.85, 1.05), rng.range(0.7, 0.95)];
        // Saturated primary plus its darkened complement.
        let hue = rng.below(6);
        let mut a = [0.15; 3];
        a[hue % 3] = 0.95;
        if hue >= 3 {
            a[(hue + 1) % 3] = 0.85;
        }
        let b = [1.0 - a[0] * 0.9, 1.0 - a[1] * 0.9, 1.0 - a[2] * 0.9].map(|v| v * 0.5);
        Self {
            ground_seed,
            tint,
            colors: [a, b],
            cells: rng.below(3) as f64 + 3.0,
            occluder: [rng.range(0.3, 0.5), rng.range(0.3, 0.5), rng.range(0.3, 0.5)],
        }
    }

    fn ground(&self, x: f64, y: f64) -> [f32; 3] {
        let l = 0.25 + 0.5 * terrain(self.ground_seed, x, y);
        self.tint.map(|t| (t * l) as f32)
    }

    fn target(&self, u: f64, v: f64) -> [f32; 3] {
        let (cu, cv) = (math::floor(u * self.cells) as i64, math::floor(v * self.cells) as i64);
        let c = self.colors[((cu + cv) & 1) as usize];
        let shade = 0.9 + 0.1 * value_noise(self.ground_seed ^ 0x55, u * 7.0, v * 7.0);
        c.map(|v| (v * shade).clamp(0.0, 1.0) as f32)
    }
}

struct Motion {
    pos: (f64, f64),
    vel: (f64, f64),
}

impl Motion {
    /// Constant velocity with reflection at the frame border.
    fn advance(&mut self, lo: (f64, f64), hi: (f64, f64)) {
        let step = |p: &mut f64, v: &mut f64, lo: f64, hi: f64| {
            *p += *v;
            if hi <= lo {
                *p = 0.5 * (lo + hi);
                return;
            }
            for _ in 0..4 {
                if *p < lo {
                    *p = 2.0 * lo - *p;
                    *v = -*v;
                } else if *p > hi {
                    *p = 2.0 * hi - *p;
                    *v = -*v;
                } else {
                    break;
                }
            }
            *p = p.clamp(lo, hi);
        };
        step(&mut self.pos.0, &mut self.vel.0, lo.0, hi.0);
        step(&mut self.pos.1, &mut self.vel.1, lo.1, hi.1);
    }
}

pub fn generate_sequence(spec: &SequenceSpec) -> Result<SequenceRecord> {
    if spec.length < 2 {
        return Err(Error::invalid(format!("sequence length {} < 2", spec.length)));
    }
    if spec.width < 64 || spec.height < 64 {
        return Err(Error::invalid(format!("frame {}x{} too small", spec.width, spec.height)));
    }
    if !(spec.jitter >= 0.0) || !spec.jitter.is_finite() {
        return Err(Error::invalid(format!("jitter {}", spec.jitter)));
    }
    let mut rng = RngStream::new(spec.seed);
    let look = Look::new(&mut rng);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let (bw, bh) = match spec.size {
        Some((w, h)) if w > 0.0 && h > 0.0 && w < fw / 2.0 && h < fh / 2.0 => (w, h),
        Some(s) => return Err(Error::invalid(format!("target size {s:?} in {fw}x{fh} frame"))),
        None => (rng.range(24.0, 40.0), rng.range(24.0, 40.0)),
    };
    let vel = match spec.velocity {
        Some(v) => v,
        None => {
            let speed = if spec.has(Attribute::FastMotion) {
                rng.range(22.0, 28.0)
            } else {
                rng.range(1.0, 4.0)
            };
            let angle = rng.range(0.0, 2.0 * core::f64::consts::PI);
            (speed * math::cos(angle), speed * math::sin(angle))
        }
    };
    let mut motion = Motion {
        pos: (rng.range(0.3 * fw, 0.7 * fw), rng.range(0.3 * fh, 0.7 * fh)),
        vel,
    };
    let scale_period = rng.range(40.0, 80.0);
    let occ_start = spec.length * 2 / 5;
    let occ_len = (spec.length / 8).max(2);
    let occ_side = rng.below(2);
    let camera = spec.has(Attribute::CameraMotion);
    let mut frames = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            let margin = 1.5 * bw.max(bh);
            motion.advance((margin, margin), (fw - margin, fh - margin));
        }
        let scale = if spec.has(Attribute::ScaleVariation) {
            1.0 + 0.35 * math::sin(2.0 * core::f64::consts::PI * t as f64 / scale_period)
        } else {
            1.0
        };
        let (ox, oy) = if camera && t > 0 {
            (spec.jitter * rng.normal(), spec.jitter * rng.normal())
        } else {
            (0.0, 0.0)
        };
        let b = BBox::new(motion.pos.0 - ox, motion.pos.1 - oy, bw * scale, bh * scale)?;
        let occluded = spec.has(Attribute::Occlusion) && t >= occ_start && t < occ_start + occ_len;
        let mut img = Image::filled(spec.width, spec.height, [0.0; 3]);
        let [x1, y1, x2, y2] = b.corners();
        for y in 0..spec.height {
            let py = y as f64 + 0.5;
            for x in 0..spec.width {
                let px = x as f64 + 0.5;
                let mut c = if px >= x1 && px < x2 && py >= y1 && py < y2 {
                    look.target((px - x1) / b.w, (py - y1) / b.h)
                } else {
                    look.ground(px + ox, py + oy)
                };
                if occluded {
                    // Covers 60% of the target from one side.
                    let u = (px - x1) / b.w;
                    let covered = if occ_side == 0 { u < 0.6 } else { u > 0.4 };
                    if covered && py >= y1 - 4.0 && py < y2 + 4.0 && px >= x1 - 4.0 && px < x2 + 4.0 {
                        c = look.occluder.map(|v| v as f32);
                    }
                }
                img.set(x, y, c);
            }
        }
        if spec.has(Attribute::LowResolution) {
            img = img.downscale(4).resize(spec.width, spec.height);
        }
        frames.push(img);
        boxes.push(b);
    }
    Ok(SequenceRecord {
        frames,
        boxes,
        attributes: spec.attributes.clone(),
        seed: spec.seed,
    })
}

/// `count` constant-velocity sequences with seeds `base, base + 1, ...`.
pub fn sequence_set(count: usize, length: usize, base: u64, attrs: &[Attribute]) -> Result<Vec<SequenceRecord>> {
    (0..count as u64)
        .map(|i| generate_sequence(&SequenceSpec::new(length, base + i).with(attrs)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SequenceSpec::new(5, 9).with(&[Attribute::CameraMotion, Attribute::Occlusion]);
        assert_eq!(generate_sequence(&spec).unwrap(), generate_sequence(&spec).unwrap());
    }

    #[test]
    fn static_target() {
        let mut spec = SequenceSpec::new(6, 3);
        spec.velocity = Some((0.0, 0.0));
        let r = generate_sequence(&spec).unwrap();
        assert!(r.boxes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn fast_motion_displacement() {
        let spec = SequenceSpec::new(30, 4).with(&[Attribute::FastMotion]);
        let r = generate_sequence(&spec).unwrap();
        let mut d: Vec<f64> = r.boxes.windows(2).map(|w| w[0].center_distance(&w[1])).collect();
        d.sort_by(f64::total_cmp);
        assert!(d[d.len() / 2] > 20.0, "median {}", d[d.len() / 2]);
    }

    #[test]
    fn boxes_stay_in_frame() {
        let spec = SequenceSpec::new(60, 5).with(&[Attribute::CameraMotion, Attribute::ScaleVariation]);
        let r = generate_sequence(&spec).unwrap();
        for b in &r.boxes {
            assert!(b.cx > 0.0 && b.cx < 320.0 && b.cy > 0.0 && b.cy < 240.0);
        }
    }

    #[test]
    fn attribute_names() {
        for a in Attribute::ALL {
            assert_eq!(Attribute::parse(a.name()).unwrap(), a);
        }
        assert!(Attribute::parse("blur").is_err());
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(generate_sequence(&SequenceSpec::new(1, 0)).is_err());
    }
}
