//! Posed multi-view scenes: procedural generation, and loading/saving as a
//! directory of PNGs plus a camera manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliftError, Result};
use crate::geometry::{Camera, Vec3};
use crate::imaging::Image;

pub const MANIFEST: &str = "cameras.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub views: Vec<View>,
    /// Views given to the encoder.
    pub inputs: Vec<usize>,
    /// Held-out views used as rendering targets.
    pub targets: Vec<usize>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(CliftError::InvalidArgument(format!(
                "scene {} has {} views, at least 2 are required",
                self.id,
                self.views.len()
            )));
        }
        let (w, h) = (self.views[0].image.width, self.views[0].image.height);
        for (i, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            if v.image.width != w
                || v.image.height != h
                || v.camera.width != w
                || v.camera.height != h
            {
                return Err(CliftError::Shape(format!(
                    "view {i} does not match the {w}x{h} resolution"
                )));
            }
        }
        if self.inputs.is_empty() {
            return Err(CliftError::InvalidArgument(
                "scene has no input views".into(),
            ));
        }
        let mut seen = vec![false; self.views.len()];
        for &i in self.inputs.iter().chain(&self.targets) {
            if i >= self.views.len() || seen[i] {
                return Err(CliftError::InvalidArgument(format!(
                    "view index {i} is out of range or listed twice"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.views[0].image.width
    }

    pub fn height(&self) -> usize {
        self.views[0].image.height
    }

    pub fn input_views(&self) -> Vec<(&Image, &Camera)> {
        self.inputs
            .iter()
            .map(|&i| (&self.views[i].image, &self.views[i].camera))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| CliftError::io(dir, e))?;
        let mut text = format!(
            "# scene {}\nwidth {}\nheight {}\ninputs{}\n",
            self.id,
            self.width(),
            self.height(),
            self.inputs
                .iter()
                .map(|i| format!(" {i}"))
                .collect::<String>()
        );
        for (i, v) in self.views.iter().enumerate() {
            let c = &v.camera;
            let mut line = format!("camera {} {} {} {}", c.fx, c.fy, c.cx, c.cy);
            for r in 0..3 {
                for col in 0..3 {
                    line.push_str(&format!(" {}", c.rotation[(r, col)]));
                }
                line.push_str(&format!(" {}", c.translation[r]));
            }
            text.push_str(&line);
            text.push('\n');
            v.image.save_png(dir.join(view_file(i)))?;
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliftError::io(&path, e))
    }

    /// Loads a scene directory; every view not listed as an input is a target.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliftError::io(&path, e))?;
        let origin = path.display().to_string();
        let bad = |line: usize, d: &str| {
            CliftError::format(origin.clone(), format!("line {}: {d}", line + 1))
        };
        let (mut width, mut height, mut inputs) = (None, None, None);
        let mut cams = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            match key {
                "width" | "height" => {
                    let v: usize = rest
                        .first()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "expected an integer"))?;
                    if key == "width" {
                        width = Some(v);
                    } else {
                        height = Some(v);
                    }
                }
                "inputs" => {
                    inputs = Some(
                        rest.iter()
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad(ln, "expected view indices"))?,
                    );
                }
                "camera" => {
                    let v = rest
                        .iter()
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(ln, "expected numbers"))?;
                    if v.len() != 16 {
                        return Err(bad(
                            ln,
                            &format!("expected 16 camera values, found {}", v.len()),
                        ));
                    }
                    cams.push((ln, v));
                }
                other => return Err(bad(ln, &format!("unknown key {other:?}"))),
            }
        }
        let width = width.ok_or_else(|| CliftError::format(origin.clone(), "missing width"))?;
        let height = height.ok_or_else(|| CliftError::format(origin.clone(), "missing height"))?;
        let inputs = inputs.ok_or_else(|| CliftError::format(origin.clone(), "missing inputs"))?;
        let mut views = Vec::with_capacity(cams.len());
        for (i, (ln, v)) in cams.into_iter().enumerate() {
            let rotation = Matrix3::new(v[4], v[5], v[6], v[8], v[9], v[10], v[12], v[13], v[14]);
            let translation = Vec3::new(v[7], v[11], v[15]);
            let camera = Camera::new(v[0], v[1], v[2], v[3], rotation, translation, width, height)
                .map_err(|e| bad(ln, &e.to_string()))?;
            let image = Image::load_png(dir.join(view_file(i)))?;
            views.push(View { image, camera });
        }
        let targets = (0..views.len()).filter(|i| !inputs.contains(i)).collect();
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        let scene = Self {
            id,
            views,
            inputs,
            targets,
        };
        scene.validate()?;
        Ok(scene)
    }
}

pub fn view_file(i: usize) -> String {
    format!("view_{i:03}.png")
}

/// `m` indices spread evenly over `0..n`, including both ends.
pub fn spread_indices(n: usize, m: usize) -> Vec<usize> {
    match m {
        0 => Vec::new(),
        1 => vec![0],
        _ => (0..m)
            .map(|j| ((j * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Cameras on a shallow arc in front of the origin, all looking at it.
pub fn arc_cameras(n: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            let t = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            };
            arc_camera(t, width, height)
        })
        .collect()
}

/// Camera at parameter `t ∈ [0, 1]` along the arc.
pub fn arc_camera(t: f64, width: usize, height: usize) -> Result<Camera> {
    let az = -0.6 + 1.2 * t;
    let eye = Vec3::new(3.6 * az.sin(), 2.0 + 0.2 * t, 3.6 * az.cos());
    Camera::look_at(
        eye,
        Vec3::new(0.0, 0.3, 0.0),
        Vec3::y(),
        50.0,
        width,
        height,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    CheckerBox,
    TexturedQuads,
    DirectionSphere,
}

impl FromStr for SceneKind {
    type Err = CliftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker-box" => Ok(Self::CheckerBox),
            "textured-quads" => Ok(Self::TexturedQuads),
            "direction-sphere" => Ok(Self::DirectionSphere),
            other => Err(CliftError::InvalidArgument(format!(
                "unknown scene kind {other:?} (expected checker-box, textured-quads or direction-sphere)"
            ))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CheckerBox => "checker-box",
            Self::TexturedQuads => "textured-quads",
            Self::DirectionSphere => "direction-sphere",
        })
    }
}

type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Quad {
    pub center: Vec3,
    /// Half-extent vectors spanning the quad.
    pub u: Vec3,
    pub v: Vec3,
    pub colors: [Rgb; 2],
    pub stripes: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticScene {
    /// A box on a checkered ground plane under a sky gradient.
    CheckerBox {
        box_center: Vec3,
        half: Vec3,
        /// Box-to-world rotation (about the vertical axis).
        yaw: f64,
        faces: [Rgb; 6],
        ground: [Rgb; 2],
        cell: f64,
        light: Vec3,
    },
    /// Striped rectangles floating in front of a sky gradient.
    TexturedQuads { quads: Vec<Quad>, light: Vec3 },
    /// Radiance that depends on ray direction only.
    DirectionSphere {
        colors: [Rgb; 3],
        bands: f64,
        sectors: f64,
    },
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

pub(crate) fn sky(dir: &Vec3) -> Rgb {
    let t = (0.5 * (dir.y + 1.0)) as f32;
    [0.85 - 0.45 * t, 0.9 - 0.3 * t, 1.0 - 0.05 * t]
}

/// The checkered area is `[-GROUND_HALF, GROUND_HALF]²`; the plane is flat
/// gray beyond it.
pub const GROUND_HALF: f64 = 2.4;
pub const FAR_GROUND: [f32; 3] = [0.5, 0.5, 0.5];

pub(crate) const AMBIENT: f32 = 0.35;

pub(crate) fn shade(albedo: Rgb, normal: &Vec3, light: &Vec3) -> Rgb {
    let k = AMBIENT + (1.0 - AMBIENT) * normal.dot(light).max(0.0) as f32;
    [albedo[0] * k, albedo[1] * k, albedo[2] * k]
}

impl SyntheticScene {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e000);
        match kind {
            SceneKind::CheckerBox => {
                let mut faces = [[0.0; 3]; 6];
                for f in &mut faces {
                    *f = random_color(&mut rng, 0.15, 0.95);
                }
                let a = random_color(&mut rng, 0.55, 0.95);
                let b = random_color(&mut rng, 0.05, 0.4);
                let size = rng.random_range(0.45..0.7);
                Self::CheckerBox {
                    box_center: Vec3::new(
                        rng.random_range(-0.4..0.4),
                        size,
                        rng.random_range(-0.4..0.4),
                    ),
                    half: Vec3::new(
                        size * rng.random_range(0.8..1.3),
                        size,
                        size * rng.random_range(0.8..1.3),
                    ),
                    yaw: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
                    faces,
                    ground: [a, b],
                    cell: rng.random_range(0.6..1.0),
                    light: Vec3::new(0.4, 1.0, 0.6).normalize(),
                }
            }
            SceneKind::TexturedQuads => {
                let n = rng.random_range(3..=5);
                let quads = (0..n)
                    .map(|_| {
                        let yaw: f64 = rng.random_range(-0.8..0.8);
                        let tilt: f64 = rng.random_range(-0.4..0.4);
                        let (w, h) = (rng.random_range(0.3..0.8), rng.random_range(0.3..0.8));
                        Quad {
                            center: Vec3::new(
                                rng.random_range(-1.2..1.2),
                                rng.random_range(0.0..1.2),
                                rng.random_range(-1.0..0.8),
                            ),
                            u: Vec3::new(yaw.cos(), 0.0, -yaw.sin()) * w,
                            v: Vec3::new(
                                yaw.sin() * tilt.sin(),
                                tilt.cos(),
                                yaw.cos() * tilt.sin(),
                            ) * h,
                            colors: [
                                random_color(&mut rng, 0.5, 1.0),
                                random_color(&mut rng, 0.0, 0.45),
                            ],
                            stripes: rng.random_range(2.0..5.0),
                        }
                    })
                    .collect();
                Self::TexturedQuads {
                    quads,
                    light: Vec3::new(-0.3, 0.8, 0.9).normalize(),
                }
            }
            SceneKind::DirectionSphere => Self::DirectionSphere {
                colors: [
                    random_color(&mut rng, 0.0, 1.0),
                    random_color(&mut rng, 0.0, 1.0),
                    random_color(&mut rng, 0.0, 1.0),
                ],
                bands: rng.random_range(3.0..6.0),
                sectors: rng.random_range(4.0f64..9.0).round(),
            },
        }
    }

    /// Color seen along the ray `origin + t·dir`, `dir` unit length.
    pub fn radiance(&self, origin: &Vec3, dir: &Vec3) -> Rgb {
        match self {
            Self::CheckerBox {
                box_center,
                half,
                yaw,
                faces,
                ground,
                cell,
                light,
            } => {
                let mut best: Option<(f64, Rgb)> = None;
                if dir.y < -1e-12 {
                    let t = -origin.y / dir.y;
                    if t > 1e-9 {
                        let p = origin + dir * t;
                        let albedo = if p.x.abs() <= GROUND_HALF && p.z.abs() <= GROUND_HALF {
                            let parity = ((p.x / cell).floor() + (p.z / cell).floor())
                                .rem_euclid(2.0) as usize;
                            ground[parity]
                        } else {
                            FAR_GROUND
                        };
                        best = Some((t, shade(albedo, &Vec3::y(), light)));
                    }
                }
                let rot = Rotation3::from_axis_angle(&Vec3::y_axis(), *yaw);
                let lo = rot.inverse() * (origin - box_center);
                let ld = rot.inverse() * dir;
                if let Some((t, axis, sign)) = slab_hit(&lo, &ld, half) {
                    if best.is_none_or(|(tb, _)| t < tb) {
                        let mut n_local = Vec3::zeros();
                        n_local[axis] = sign;
                        let face = 2 * axis + usize::from(sign > 0.0);
                        best = Some((t, shade(faces[face], &(rot * n_local), light)));
                    }
                }
                best.map_or_else(|| sky(dir), |(_, c)| c)
            }
            Self::TexturedQuads { quads, light } => {
                let mut best: Option<(f64, Rgb)> = None;
                for q in quads {
                    let n = q.u.cross(&q.v).normalize();
                    let denom = n.dot(dir);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let t = n.dot(&(q.center - origin)) / denom;
                    if t <= 1e-9 || best.is_some_and(|(tb, _)| tb <= t) {
                        continue;
                    }
                    let rel = origin + dir * t - q.center;
                    let a = rel.dot(&q.u) / q.u.norm_squared();
                    let b = rel.dot(&q.v) / q.v.norm_squared();
                    if a.abs() > 1.0 || b.abs() > 1.0 {
                        continue;
                    }
                    let stripe = ((a + 1.0) * q.stripes).floor().rem_euclid(2.0) as usize;
                    let facing = if denom < 0.0 { n } else { -n };
                    best = Some((t, shade(q.colors[stripe], &facing, light)));
                }
                best.map_or_else(|| sky(dir), |(_, c)| c)
            }
            Self::DirectionSphere {
                colors,
                bands,
                sectors,
            } => {
                let lat = dir.y.clamp(-1.0, 1.0).asin();
                let lon = dir.x.atan2(dir.z);
                let s = (0.5 + 0.5 * (lat * bands).sin()) as f32;
                let w = (0.5 + 0.5 * (lon * sectors).cos()) as f32;
                let mut c = [0.0; 3];
                for (ch, v) in c.iter_mut().enumerate() {
                    *v = 0.1
                        + 0.8
                            * (colors[0][ch] * s * (1.0 - w)
                                + colors[1][ch] * (1.0 - s)
                                + colors[2][ch] * s * w);
                }
                c
            }
        }
    }

    /// Renders with `ss × ss` jittered-free subsamples per pixel.
    pub fn render(&self, cam: &Camera, ss: usize) -> Image {
        let ss = ss.max(1);
        let o = cam.center();
        let inv = 1.0 / (ss * ss) as f32;
        Image::from_fn(cam.width, cam.height, |u, v| {
            let mut acc = [0.0f32; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = u as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = v as f64 + (sy as f64 + 0.5) / ss as f64;
                    let c = self.radiance(&o, &cam.ray_through(x, y).direction);
                    for (a, c) in acc.iter_mut().zip(c) {
                        *a += c;
                    }
                }
            }
            acc.map(|a| a * inv)
        })
    }
}

/// Entry hit of a ray against the axis-aligned box `[-half, half]`:
/// `(t, axis, normal sign)`.
fn slab_hit(o: &Vec3, d: &Vec3, half: &Vec3) -> Option<(f64, usize, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut enter = (0, 0.0);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let ta = (-half[a] - o[a]) / d[a];
        let tb = (half[a] - o[a]) / d[a];
        let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
        if near > t0 {
            t0 = near;
            enter = (a, if d[a] > 0.0 { -1.0 } else { 1.0 });
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t0 > 1e-9).then_some((t0, enter.0, enter.1))
}

/// Supersampling factor used for generated scenes.
pub const SUPERSAMPLE: usize = 2;

/// Generates a scene of `n_views` arc cameras, `n_inputs` of them evenly
/// spread (first and last included) as inputs and the rest as targets.
pub fn gen_scene(
    kind: SceneKind,
    seed: u64,
    n_views: usize,
    resolution: usize,
    n_inputs: usize,
) -> Result<Scene> {
    if n_views < 2 {
        return Err(CliftError::InvalidArgument(format!(
            "need at least 2 views, got {n_views}"
        )));
    }
    if n_inputs == 0 || n_inputs >= n_views {
        return Err(CliftError::InvalidArgument(format!(
            "need 1 <= inputs < views, got {n_inputs} of {n_views}"
        )));
    }
    let synth = SyntheticScene::new(kind, seed);
    let cams = arc_cameras(n_views, resolution, resolution)?;
    let views = cams
        .into_iter()
        .map(|camera| View {
            image: synth.render(&camera, SUPERSAMPLE),
            camera,
        })
        .collect();
    let inputs = spread_indices(n_views, n_inputs);
    let targets = (0..n_views).filter(|i| !inputs.contains(i)).collect();
    let scene = Scene {
        id: format!("{kind}-{seed:04}"),
        views,
        inputs,
        targets,
    };
    scene.validate()?;
    Ok(scene)
}
