//! Pinhole cameras, Plücker rays and the patch layouts built on them.
//!
//! Cameras follow the computer-vision convention: in camera space `+x` points
//! right, `+y` down and `+z` forward. Extrinsics are stored camera-to-world.
//! Pixel `(u, v)` is sampled through its center `(u + 0.5, v + 0.5)`.

use clift_tensor::Tensor;
use nalgebra::{Matrix3, Vector3};

use crate::error::{CliftError, Result};
use crate::imaging::Image;

pub type Vec3 = Vector3<f64>;

/// Patch edge length in pixels.
pub const PATCH: usize = 8;
pub const PIXELS_PER_PATCH: usize = PATCH * PATCH;
/// Per-pixel `[r, g, b, d1, d2, d3, m1, m2, m3]`, flattened over a patch.
pub const PATCH_VECTOR_WIDTH: usize = 9 * PIXELS_PER_PATCH;
/// Per-pixel Plücker coordinates only.
pub const QUERY_VECTOR_WIDTH: usize = 6 * PIXELS_PER_PATCH;
/// Per-pixel RGB only.
pub const RGB_VECTOR_WIDTH: usize = 3 * PIXELS_PER_PATCH;

/// Plücker coordinates stored with a token: `[d1, d2, d3, m1, m2, m3]`.
pub type RayCoords = [f32; 6];

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with the world `up` hint and a
    /// horizontal field of view in degrees. Principal point at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        hfov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| CliftError::Camera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| CliftError::Camera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            eye,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CliftError::Camera("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CliftError::Camera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CliftError::Camera("empty image".into()));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return Err(CliftError::Camera(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-5 || (r.determinant() - 1.0).abs() > 1e-5 {
            return Err(CliftError::Camera(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Ray through continuous image coordinates `(x, y)`; pixel `(u, v)`
    /// covers `[u, u+1) × [v, v+1)`. Coordinates outside the image are fine.
    pub fn ray_through(&self, x: f64, y: f64) -> PluckerRay {
        let dir_cam = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        PluckerRay::from_origin_direction(self.translation, self.rotation * dir_cam)
    }

    /// Ray through the center of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<PluckerRay> {
        if !(self.fx.abs() > 0.0 && self.fy.abs() > 0.0) {
            return Err(CliftError::Camera("zero focal length".into()));
        }
        Ok(self.ray_through(u + 0.5, v + 0.5))
    }

    /// Per-pixel rays in row-major order.
    pub fn pixel_rays(&self) -> Vec<RayCoords> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                out.push(self.ray_through(u as f64 + 0.5, v as f64 + 0.5).to_coords());
            }
        }
        out
    }

    pub fn patch_rows(&self) -> usize {
        self.height / PATCH
    }

    pub fn patch_cols(&self) -> usize {
        self.width / PATCH
    }

    pub fn num_patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    /// Rays through the centers of the non-overlapping 8×8 patches, row-major.
    pub fn patch_center_rays(&self) -> Vec<PluckerRay> {
        let mut out = Vec::with_capacity(self.num_patches());
        for r in 0..self.patch_rows() {
            for c in 0..self.patch_cols() {
                out.push(self.ray_through(
                    (c * PATCH) as f64 + PATCH as f64 / 2.0,
                    (r * PATCH) as f64 + PATCH as f64 / 2.0,
                ));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PluckerRay {
    /// Unit direction.
    pub direction: Vec3,
    /// `origin × direction`.
    pub moment: Vec3,
}

impl PluckerRay {
    pub fn from_origin_direction(origin: Vec3, direction: Vec3) -> Self {
        let d = direction.normalize();
        Self {
            direction: d,
            moment: origin.cross(&d),
        }
    }

    pub fn to_coords(&self) -> RayCoords {
        [
            self.direction.x as f32,
            self.direction.y as f32,
            self.direction.z as f32,
            self.moment.x as f32,
            self.moment.y as f32,
            self.moment.z as f32,
        ]
    }

    pub fn from_coords(c: &RayCoords) -> Self {
        Self {
            direction: Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64),
            moment: Vec3::new(c[3] as f64, c[4] as f64, c[5] as f64),
        }
    }

    /// Point on the line closest to the world origin.
    pub fn closest_point_to_origin(&self) -> Vec3 {
        self.direction.cross(&self.moment)
    }
}

fn check_patch_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || !width.is_multiple_of(PATCH) || !height.is_multiple_of(PATCH) {
        return Err(CliftError::Shape(format!(
            "image {width}x{height} is not divisible into {PATCH}x{PATCH} patches"
        )));
    }
    Ok(())
}

/// Concatenates per-pixel color and Plücker coordinates and flattens every
/// 8×8 patch (row-major pixels) into one 576-wide row.
pub fn patchify(image: &Image, rays: &[RayCoords]) -> Result<Tensor<f32>> {
    check_patch_dims(image.width, image.height)?;
    if rays.len() != image.width * image.height {
        return Err(CliftError::Shape(format!(
            "{} rays for a {}x{} image",
            rays.len(),
            image.width,
            image.height
        )));
    }
    let (rows, cols) = (image.height / PATCH, image.width / PATCH);
    let mut data = Vec::with_capacity(rows * cols * PATCH_VECTOR_WIDTH);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let (x, y) = (pc * PATCH + dx, pr * PATCH + dy);
                    data.extend_from_slice(&image.get(x, y));
                    data.extend_from_slice(&rays[y * image.width + x]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows * cols, PATCH_VECTOR_WIDTH], data)?)
}

/// RGB-only patch vectors (192 wide), the layout the renderer predicts.
pub fn patchify_rgb(image: &Image) -> Result<Tensor<f32>> {
    check_patch_dims(image.width, image.height)?;
    let (rows, cols) = (image.height / PATCH, image.width / PATCH);
    let mut data = Vec::with_capacity(rows * cols * RGB_VECTOR_WIDTH);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    data.extend_from_slice(&image.get(pc * PATCH + dx, pr * PATCH + dy));
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows * cols, RGB_VECTOR_WIDTH], data)?)
}

/// Inverse of [`patchify_rgb`].
pub fn unpatchify(tokens: &Tensor<f32>, height: usize, width: usize) -> Result<Image> {
    check_patch_dims(width, height)?;
    let (rows, cols) = (height / PATCH, width / PATCH);
    if tokens.shape() != [rows * cols, RGB_VECTOR_WIDTH] {
        return Err(CliftError::Shape(format!(
            "expected [{}, {RGB_VECTOR_WIDTH}] tokens for a {width}x{height} image, got {:?}",
            rows * cols,
            tokens.shape()
        )));
    }
    let mut img = Image::filled(width, height, [0.0; 3]);
    for pr in 0..rows {
        for pc in 0..cols {
            let t = tokens.row(pr * cols + pc);
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let i = (dy * PATCH + dx) * 3;
                    img.set(pc * PATCH + dx, pr * PATCH + dy, [t[i], t[i + 1], t[i + 2]]);
                }
            }
        }
    }
    Ok(img)
}

/// Per-patch flattened Plücker coordinates of the target camera (384 wide).
pub fn query_grid(cam: &Camera) -> Result<Tensor<f32>> {
    check_patch_dims(cam.width, cam.height)?;
    let rays = cam.pixel_rays();
    let (rows, cols) = (cam.patch_rows(), cam.patch_cols());
    let mut data = Vec::with_capacity(rows * cols * QUERY_VECTOR_WIDTH);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    data.extend_from_slice(&rays[(pr * PATCH + dy) * cam.width + pc * PATCH + dx]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows * cols, QUERY_VECTOR_WIDTH], data)?)
}

/// A coarse grid of patch-center rays over a target view, optionally padded
/// with margin cells that extend past the image bounds.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub margin: usize,
    /// Continuous image coordinates of each cell center, row-major over the
    /// padded grid.
    pub centers: Vec<(f64, f64)>,
    pub rays: Vec<PluckerRay>,
}

impl PatchGrid {
    pub fn padded_rows(&self) -> usize {
        self.rows + 2 * self.margin
    }

    pub fn padded_cols(&self) -> usize {
        self.cols + 2 * self.margin
    }
}

/// Divides the view into `grid × grid` cells and pads `margin` cells on each
/// side by continuing the pixel coordinates linearly beyond the image.
pub fn expanded_patch_rays(cam: &Camera, grid: usize, margin: usize) -> PatchGrid {
    let cell_w = cam.width as f64 / grid as f64;
    let cell_h = cam.height as f64 / grid as f64;
    let n = grid + 2 * margin;
    let mut centers = Vec::with_capacity(n * n);
    let mut rays = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let x = (c as f64 - margin as f64 + 0.5) * cell_w;
            let y = (r as f64 - margin as f64 + 0.5) * cell_h;
            centers.push((x, y));
            rays.push(cam.ray_through(x, y));
        }
    }
    PatchGrid {
        rows: grid,
        cols: grid,
        margin,
        centers,
        rays,
    }
}
