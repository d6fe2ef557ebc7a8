//! Rasterization of element images to binary PPM files.
//!
//! Element values map through a symmetric diverging colormap: `-range` is
//! pure blue (0,0,255), zero is white (255,255,255), `+range` is pure red
//! (255,0,0), each channel linear in between and values clamped at the ends.
//! Pixels outside the mesh stay white, so a zero image is a uniform white
//! square.

use std::path::Path;

use rayon::prelude::*;

use eit_core::mesh::Mesh;
use eit_core::recon::ConductivityImage;

use crate::error::CliError;

/// Output rasters are square with this many pixels per side.
pub const RENDER_SIZE: usize = 256;

const BUCKETS_PER_SIDE: usize = 64;

/// Uniform spatial grid over the mesh bounding box for point-in-triangle
/// queries; each bucket lists the elements whose bounding box touches it,
/// in ascending element order.
struct ElementIndex<'m> {
    mesh: &'m Mesh,
    min: [f64; 2],
    cell: f64,
    buckets: Vec<Vec<u32>>,
}

impl<'m> ElementIndex<'m> {
    fn build(mesh: &'m Mesh) -> ElementIndex<'m> {
        let (min, max) = bounding_square(mesh);
        let span = max[0] - min[0];
        let cell = span / BUCKETS_PER_SIDE as f64;
        let mut buckets = vec![Vec::new(); BUCKETS_PER_SIDE * BUCKETS_PER_SIDE];
        let clamp = |b: isize| (b.max(0) as usize).min(BUCKETS_PER_SIDE - 1);
        for k in 0..mesh.n_elements() {
            let tri = mesh.triangle(k);
            let ps = tri.map(|v| mesh.node(v));
            let (mut lo, mut hi) = (ps[0], ps[0]);
            for p in &ps[1..] {
                lo = [lo[0].min(p[0]), lo[1].min(p[1])];
                hi = [hi[0].max(p[0]), hi[1].max(p[1])];
            }
            let bx0 = clamp(((lo[0] - min[0]) / cell).floor() as isize);
            let bx1 = clamp(((hi[0] - min[0]) / cell).floor() as isize);
            let by0 = clamp(((lo[1] - min[1]) / cell).floor() as isize);
            let by1 = clamp(((hi[1] - min[1]) / cell).floor() as isize);
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    buckets[by * BUCKETS_PER_SIDE + bx].push(k as u32);
                }
            }
        }
        ElementIndex { mesh, min, cell, buckets }
    }

    /// Lowest-index element containing the point, if any.
    fn element_at(&self, p: [f64; 2]) -> Option<usize> {
        let bx = ((p[0] - self.min[0]) / self.cell).floor() as isize;
        let by = ((p[1] - self.min[1]) / self.cell).floor() as isize;
        if !(0..BUCKETS_PER_SIDE as isize).contains(&bx)
            || !(0..BUCKETS_PER_SIDE as isize).contains(&by)
        {
            return None;
        }
        let bucket = &self.buckets[by as usize * BUCKETS_PER_SIDE + bx as usize];
        bucket
            .iter()
            .map(|&k| k as usize)
            .find(|&k| triangle_contains(self.mesh, k, p))
    }
}

/// Square viewport centered on the mesh bounding box (so the aspect ratio is
/// preserved for non-square domains).
fn bounding_square(mesh: &Mesh) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in mesh.nodes() {
        lo = [lo[0].min(p[0]), lo[1].min(p[1])];
        hi = [hi[0].max(p[0]), hi[1].max(p[1])];
    }
    let half = 0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    (
        [center[0] - half, center[1] - half],
        [center[0] + half, center[1] + half],
    )
}

fn triangle_contains(mesh: &Mesh, k: usize, p: [f64; 2]) -> bool {
    let tri = mesh.triangle(k);
    let [a, b, c] = tri.map(|v| mesh.node(v));
    let cross = |u: [f64; 2], v: [f64; 2], q: [f64; 2]| {
        (v[0] - u[0]) * (q[1] - u[1]) - (v[1] - u[1]) * (q[0] - u[0])
    };
    let tol = -1e-12 * mesh.area(k).max(1.0);
    cross(a, b, p) >= tol && cross(b, c, p) >= tol && cross(c, a, p) >= tol
}

/// Map a value through the blue-white-red colormap at the given symmetric
/// range.
pub fn colormap(value: f64, range: f64) -> [u8; 3] {
    let t = if range > 0.0 { (value / range).clamp(-1.0, 1.0) } else { 0.0 };
    let ramp = |x: f64| (255.0 * x).round().clamp(0.0, 255.0) as u8;
    if t >= 0.0 {
        let fade = ramp(1.0 - t);
        [255, fade, fade]
    } else {
        let fade = ramp(1.0 + t);
        [fade, fade, 255]
    }
}

/// Rasterize an element image to RGB bytes on the fixed square grid.
pub fn rasterize(image: &ConductivityImage, mesh: &Mesh, range: f64) -> Vec<u8> {
    let index = ElementIndex::build(mesh);
    let (min, max) = bounding_square(mesh);
    let step = (max[0] - min[0]) / RENDER_SIZE as f64;
    let mut rgb = vec![0u8; RENDER_SIZE * RENDER_SIZE * 3];
    rgb.par_chunks_mut(RENDER_SIZE * 3)
        .enumerate()
        .for_each(|(row, out)| {
            let y = max[1] - (row as f64 + 0.5) * step;
            for col in 0..RENDER_SIZE {
                let x = min[0] + (col as f64 + 0.5) * step;
                let color = match index.element_at([x, y]) {
                    Some(k) => colormap(image.values()[k], range),
                    None => [255, 255, 255],
                };
                out[col * 3..col * 3 + 3].copy_from_slice(&color);
            }
        });
    rgb
}

/// Write the image as a binary PPM (P6). When no range is given, the scale is
/// the image's own peak magnitude.
pub fn render_image(
    image: &ConductivityImage,
    mesh: &Mesh,
    path: &Path,
    range: Option<f64>,
) -> Result<(), CliError> {
    if image.len() != mesh.n_elements() {
        return Err(CliError::Compute(format!(
            "render: image has {} values for a mesh with {} elements",
            image.len(),
            mesh.n_elements()
        )));
    }
    let range = match range {
        Some(r) if r.is_finite() && r >= 0.0 => r,
        Some(r) => {
            return Err(CliError::Compute(format!(
                "render: range must be a non-negative finite value, got {r}"
            )));
        }
        None => image.max_abs(),
    };
    let rgb = rasterize(image, mesh, range);
    let mut bytes = format!("P6\n{RENDER_SIZE} {RENDER_SIZE}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Io(format!("render: cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_hits_the_three_anchors() {
        assert_eq!(colormap(-1.0, 1.0), [0, 0, 255]);
        assert_eq!(colormap(0.0, 1.0), [255, 255, 255]);
        assert_eq!(colormap(1.0, 1.0), [255, 0, 0]);
        assert_eq!(colormap(-2.0, 1.0), [0, 0, 255], "clamps below");
        assert_eq!(colormap(2.0, 1.0), [255, 0, 0], "clamps above");
        assert_eq!(colormap(0.5, 1.0), [255, 128, 128]);
        assert_eq!(colormap(3.0, 0.0), [255, 255, 255], "zero range is white");
    }
}
