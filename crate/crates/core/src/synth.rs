//! Ray-traced synthetic scenes with exact depth: textured planes and boxes
//! seen from a ring of pinhole cameras.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, View};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::math;
use crate::scene::{project_point, Camera, Observation, SparsePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    Solid { color: [f64; 3] },
    /// 3D checkerboard with cells of `scale` world units.
    Checker { scale: f64, colors: [[f64; 3]; 2] },
    /// Fractal value noise with base cell `scale` world units.
    Noise { scale: f64, colors: [[f64; 3]; 2], octaves: u32, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Rectangle spanning the local x/y axes, facing local z.
    Plane { center: [f64; 3], rotation_deg: [f64; 3], size: [f64; 2], texture: Texture },
    Box { center: [f64; 3], rotation_deg: [f64; 3], size: [f64; 3], texture: Texture },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraLayout {
    /// Cameras on an arc of `arc_deg` at `radius` from `target`, on the
    /// -z side, raised by `elevation_deg`, all looking at `target`.
    Ring { count: usize, radius: f64, target: [f64; 3], arc_deg: f64, elevation_deg: f64 },
    LookAt { poses: Vec<LookAt> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookAt {
    pub position: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub primitives: Vec<Primitive>,
    pub cameras: CameraLayout,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view.
    pub fov_deg: f64,
    /// Every `test_every`-th view is held out (see
    /// [`SynthSceneSpec::is_holdout`]); 0 disables.
    #[serde(default)]
    pub test_every: usize,
    #[serde(default)]
    pub num_points: usize,
    /// Uniform jitter (world units) applied to sparse point positions.
    #[serde(default)]
    pub point_noise: f64,
    #[serde(default = "one")]
    pub supersample: usize,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SynthSceneSpec {
    /// A textured back wall with a smaller panel in front of it, seen by 25
    /// cameras of which every 5th is held out.
    pub fn two_planes() -> Self {
        Self {
            primitives: vec![
                Primitive::Plane {
                    center: [0.0, 0.0, 6.0],
                    rotation_deg: [0.0, 0.0, 0.0],
                    size: [14.0, 10.0],
                    texture: Texture::Noise { scale: 0.35, colors: [[0.15, 0.2, 0.35], [0.95, 0.85, 0.6]], octaves: 3, seed: 1 },
                },
                Primitive::Plane {
                    center: [0.3, 0.2, 4.0],
                    rotation_deg: [0.0, 20.0, 0.0],
                    size: [1.8, 1.5],
                    texture: Texture::Noise { scale: 0.2, colors: [[0.8, 0.2, 0.1], [0.2, 0.9, 0.4]], octaves: 3, seed: 2 },
                },
            ],
            cameras: CameraLayout::Ring { count: 25, radius: 5.0, target: [0.0, 0.0, 5.0], arc_deg: 40.0, elevation_deg: 5.0 },
            width: 80,
            height: 60,
            fov_deg: 60.0,
            test_every: 5,
            num_points: 400,
            point_noise: 0.0,
            supersample: 2,
            background: [0.0, 0.0, 0.0],
            seed: 7,
        }
    }

    /// View `i` is held out when `(i + 1)` is a multiple of `test_every`.
    pub fn is_holdout(&self, i: usize) -> bool {
        self.test_every > 0 && (i + 1) % self.test_every == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(alloc::format!("fov {} must be in (0, 180)", self.fov_deg)));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be >= 1".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::EmptyScene("no primitives".into()));
        }
        for p in &self.primitives {
            let (size, tex): (&[f64], _) = match p {
                Primitive::Plane { size, texture, .. } => (size, texture),
                Primitive::Box { size, texture, .. } => (size, texture),
            };
            if size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Config("primitive sizes must be positive".into()));
            }
            match tex {
                Texture::Checker { scale, .. } | Texture::Noise { scale, .. } if !(*scale > 0.0) => {
                    return Err(Error::Config("texture scale must be positive".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let fx = 0.5 * self.width as f64 / libm::tan(0.5 * self.fov_deg.to_radians());
        let (cx, cy) = (0.5 * self.width as f64, 0.5 * self.height as f64);
        let poses: Vec<(Vector3<f64>, Vector3<f64>)> = match &self.cameras {
            CameraLayout::Ring { count, radius, target, arc_deg, elevation_deg } => {
                let target = Vector3::from(*target);
                let el = elevation_deg.to_radians();
                (0..*count)
                    .map(|i| {
                        let t = if *count > 1 { i as f64 / (*count - 1) as f64 - 0.5 } else { 0.0 };
                        let az = (t * arc_deg).to_radians();
                        let offset = Vector3::new(
                            math::sin(az) * math::cos(el),
                            -math::sin(el),
                            -math::cos(az) * math::cos(el),
                        );
                        (target + offset * *radius, target)
                    })
                    .collect()
            }
            CameraLayout::LookAt { poses } => {
                poses.iter().map(|p| (Vector3::from(p.position), Vector3::from(p.target))).collect()
            }
        };
        poses
            .into_iter()
            .map(|(pos, target)| {
                let rotation = look_at(&pos, &target)?;
                Camera::new(fx, fx, cx, cy, self.width, self.height, rotation, -(rotation * pos))
            })
            .collect()
    }
}

/// World-to-camera rotation looking from `pos` at `target`, with camera y
/// pointing along world +y as far as possible.
pub fn look_at(pos: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let f = target - pos;
    if f.norm() < 1e-12 {
        return Err(Error::DegenerateGeometry("camera position equals its target".into()));
    }
    let f = f.normalize();
    let x = Vector3::y().cross(&f);
    if x.norm() < 1e-9 {
        return Err(Error::DegenerateGeometry("viewing direction is vertical".into()));
    }
    let x = x.normalize();
    let y = f.cross(&x);
    Ok(Matrix3::from_rows(&[x.transpose(), y.transpose(), f.transpose()]))
}

fn hash(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let base = p.map(math::floor);
    let f = p - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = ((corner & 1) as i64, ((corner >> 1) & 1) as i64, ((corner >> 2) & 1) as i64);
        let w = (if dx == 1 { s.x } else { 1.0 - s.x })
            * (if dy == 1 { s.y } else { 1.0 - s.y })
            * (if dz == 1 { s.z } else { 1.0 - s.z });
        acc += w * hash(seed, bx + dx, by + dy, bz + dz);
    }
    acc
}

impl Texture {
    /// Color at a point given in the primitive's local frame.
    pub fn sample(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mix = |c: &[[f64; 3]; 2], t: f64| {
            [0, 1, 2].map(|k| c[0][k] + (c[1][k] - c[0][k]) * t)
        };
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { scale, colors } => {
                // Offset keeps face planes off the cell boundaries.
                let q = (p / *scale).add_scalar(0.25).map(math::floor);
                let parity = (q.x + q.y + q.z) as i64 & 1;
                colors[parity as usize]
            }
            Texture::Noise { scale, colors, octaves, seed } => {
                let mut sum = 0.0;
                let mut norm = 0.0;
                let mut amp = 1.0;
                let mut freq = 1.0 / scale;
                for o in 0..(*octaves).max(1) {
                    sum += amp * value_noise(p * freq, seed.wrapping_add(o as u64));
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                let t = sum / norm;
                // Stretch the contrast lost to averaging octaves.
                mix(colors, ((t - 0.5) * 1.8 + 0.5).clamp(0.0, 1.0))
            }
        }
    }
}

struct Shape {
    center: Vector3<f64>,
    /// Local-to-world rotation.
    rot: Matrix3<f64>,
    half: Vector3<f64>,
    is_box: bool,
    texture: Texture,
}

impl Shape {
    fn from_primitive(p: &Primitive) -> Self {
        let (center, rotation_deg, half, is_box, texture) = match p {
            Primitive::Plane { center, rotation_deg, size, texture } => {
                (center, rotation_deg, Vector3::new(size[0] / 2.0, size[1] / 2.0, 0.0), false, texture)
            }
            Primitive::Box { center, rotation_deg, size, texture } => {
                (center, rotation_deg, Vector3::from(*size) / 2.0, true, texture)
            }
        };
        let [rx, ry, rz] = rotation_deg.map(f64::to_radians);
        Self {
            center: Vector3::from(*center),
            rot: *Rotation3::from_euler_angles(rx, ry, rz).matrix(),
            half,
            is_box,
            texture: texture.clone(),
        }
    }

    /// Smallest `t > 0` with `o + t d` on the surface, plus the local hit point.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let ol = self.rot.transpose() * (o - self.center);
        let dl = self.rot.transpose() * d;
        const EPS: f64 = 1e-9;
        if !self.is_box {
            if dl.z.abs() < 1e-15 {
                return None;
            }
            let t = -ol.z / dl.z;
            let p = ol + dl * t;
            return (t > EPS && p.x.abs() <= self.half.x && p.y.abs() <= self.half.y).then_some((t, p));
        }
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if dl[k].abs() < 1e-15 {
                if ol[k].abs() > self.half[k] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[k] - ol[k]) / dl[k];
            let b = (self.half[k] - ol[k]) / dl[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t0 > t1 {
            return None;
        }
        let t = if t0 > EPS { t0 } else if t1 > EPS { t1 } else { return None };
        Some((t, ol + dl * t))
    }

    fn area(&self) -> f64 {
        let h = self.half * 2.0;
        if self.is_box { 2.0 * (h.x * h.y + h.y * h.z + h.x * h.z) } else { h.x * h.y }
    }

    /// Uniform surface sample in world coordinates, with its local point.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>) {
        let mut u = || rng.random::<f64>() * 2.0 - 1.0;
        let local = if !self.is_box {
            Vector3::new(u() * self.half.x, u() * self.half.y, 0.0)
        } else {
            let h = self.half;
            let faces = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
            let total: f64 = faces.iter().sum();
            let mut pick = (u() * 0.5 + 0.5) * total;
            let mut face = 5;
            for (i, a) in faces.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let mut p = Vector3::new(u() * h.x, u() * h.y, u() * h.z);
            p[axis] = sign * h[axis];
            p
        };
        (self.center + self.rot * local, local)
    }
}

/// Scene geometry ready for ray queries.
pub struct SynthScene {
    shapes: Vec<Shape>,
    background: [f64; 3],
}

impl SynthScene {
    pub fn new(spec: &SynthSceneSpec) -> Self {
        Self { shapes: spec.primitives.iter().map(Shape::from_primitive).collect(), background: spec.background }
    }

    /// Nearest hit: ray parameter and color.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        self.shapes
            .iter()
            .filter_map(|s| s.intersect(o, d).map(|(t, p)| (t, s, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(t, s, p)| (t, s.texture.sample(&p)))
    }

    /// Camera-space depth seen through image point `px`.
    pub fn depth_at(&self, cam: &Camera, px: &Vector2<f64>) -> Option<f64> {
        // The ray has unit camera-space z, so the hit parameter is the depth.
        self.trace(&cam.center(), &cam.pixel_ray(px)).map(|(t, _)| t)
    }

    pub fn render(&self, cam: &Camera, supersample: usize) -> (Image, DepthMap) {
        let (w, h) = (cam.width, cam.height);
        let mut image = Image::new(w, h);
        let mut depth = DepthMap::new(w, h);
        let origin = cam.center();
        let s = supersample.max(1);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for j in 0..s {
                    for i in 0..s {
                        let px = Vector2::new(x as f64 + (i as f64 + 0.5) / s as f64, y as f64 + (j as f64 + 0.5) / s as f64);
                        let c = self.trace(&origin, &cam.pixel_ray(&px)).map_or(self.background, |(_, c)| c);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let n = (s * s) as f64;
                image.set_pixel(x, y, acc.map(|v| v / n));
                if let Some(z) = self.depth_at(cam, &Vector2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    depth.depth[y * w + x] = z;
                    depth.valid[y * w + x] = true;
                }
            }
        }
        (image, depth)
    }

    fn visible_from(&self, x: &Vector3<f64>, cam: &Camera) -> Option<Vector2<f64>> {
        let (px, _) = project_point(x, cam).ok()?;
        if !cam.contains_pixel(&px) {
            return None;
        }
        let o = cam.center();
        // Parameter 1 reaches the point itself.
        match self.trace(&o, &(x - o)) {
            Some((t, _)) if t < 1.0 - 1e-6 => None,
            _ => Some(px),
        }
    }
}

/// Ray-traces every view and samples sparse points seen by at least two
/// training views.
pub fn gen_synth_scene(spec: &SynthSceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let scene = SynthScene::new(spec);
    let cameras = spec.cameras()?;
    let mut views = Vec::with_capacity(cameras.len());
    let mut any_hit = false;
    for (i, camera) in cameras.into_iter().enumerate() {
        let (image, depth) = scene.render(&camera, spec.supersample);
        any_hit |= depth.valid_count() > 0;
        views.push(View {
            id: i as u32,
            name: alloc::format!("view_{i:03}.png"),
            camera,
            image,
            gt_depth: Some(depth),
            holdout: spec.is_holdout(i),
        });
    }
    if !any_hit {
        return Err(Error::EmptyScene("no primitive is visible from any camera".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let areas: Vec<f64> = scene.shapes.iter().map(Shape::area).collect();
    let total_area: f64 = areas.iter().sum();
    let mut points = Vec::new();
    let max_attempts = spec.num_points.saturating_mul(50);
    let mut attempts = 0;
    while points.len() < spec.num_points && attempts < max_attempts {
        attempts += 1;
        let mut pick = rng.random::<f64>() * total_area;
        let mut idx = areas.len() - 1;
        for (k, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = k;
                break;
            }
            pick -= a;
        }
        let shape = &scene.shapes[idx];
        let (world, local) = shape.sample_surface(&mut rng);
        let observations: Vec<Observation> = views
            .iter()
            .filter(|v| !v.holdout)
            .filter_map(|v| scene.visible_from(&world, &v.camera).map(|pixel| (v.id, pixel)))
            .map(|(view, pixel)| Observation { view, pixel })
            .collect();
        if observations.len() < 2 {
            continue;
        }
        let color = shape.texture.sample(&local);
        let mut position = world;
        if spec.point_noise > 0.0 {
            for k in 0..3 {
                position[k] += (rng.random::<f64>() * 2.0 - 1.0) * spec.point_noise;
            }
        }
        points.push(SparsePoint { position, observations, color: Some(color) });
    }
    Dataset::new(views, points)
}

/// Short description used in run metadata.
pub fn describe(spec: &SynthSceneSpec) -> String {
    alloc::format!(
        "{} primitives, {}x{} px, {} cameras",
        spec.primitives.len(),
        spec.width,
        spec.height,
        match &spec.cameras {
            CameraLayout::Ring { count, .. } => *count,
            CameraLayout::LookAt { poses } => poses.len(),
        }
    )
}
