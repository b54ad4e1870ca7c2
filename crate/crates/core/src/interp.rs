//! Trilinear / nearest-neighbour sampling shared by resampling, augmentation
//! and attention-map upsampling.

use ndarray::Array3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Boundary {
    /// Clamp coordinates to the valid range (resampling semantics).
    Clamp,
    /// Treat everything outside the grid as zero (augmentation semantics).
    Zero,
}

#[inline]
fn at(arr: &Array3<f32>, x: isize, y: isize, z: isize, boundary: Boundary) -> f32 {
    let (nx, ny, nz) = arr.dim();
    match boundary {
        Boundary::Clamp => {
            let xc = x.clamp(0, nx as isize - 1) as usize;
            let yc = y.clamp(0, ny as isize - 1) as usize;
            let zc = z.clamp(0, nz as isize - 1) as usize;
            arr[[xc, yc, zc]]
        }
        Boundary::Zero => {
            if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
                0.0
            } else {
                arr[[x as usize, y as usize, z as usize]]
            }
        }
    }
}

/// Sample `arr` at a fractional coordinate.
pub(crate) fn sample(
    arr: &Array3<f32>,
    pos: [f64; 3],
    interp: Interpolation,
    boundary: Boundary,
) -> f32 {
    match interp {
        Interpolation::Nearest => {
            let p = pos.map(|c| c.round() as isize);
            at(arr, p[0], p[1], p[2], boundary)
        }
        Interpolation::Trilinear => {
            let base = pos.map(|c| c.floor());
            let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
            let (x0, y0, z0) = (base[0] as isize, base[1] as isize, base[2] as isize);
            let mut acc = 0.0f64;
            for dx in 0..2isize {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                for dy in 0..2isize {
                    let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                    if wy == 0.0 {
                        continue;
                    }
                    for dz in 0..2isize {
                        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                        if wz == 0.0 {
                            continue;
                        }
                        acc +=
                            wx * wy * wz * f64::from(at(arr, x0 + dx, y0 + dy, z0 + dz, boundary));
                    }
                }
            }
            acc as f32
        }
    }
}

/// Resize to `new_dims` with voxel-center alignment: output voxel `o` samples
/// input coordinate `(o + 0.5) * n_in / n_out - 0.5`. An identity resize
/// reproduces the input exactly.
pub(crate) fn resize(
    arr: &Array3<f32>,
    new_dims: [usize; 3],
    interp: Interpolation,
) -> Array3<f32> {
    let (nx, ny, nz) = arr.dim();
    let scale = [
        nx as f64 / new_dims[0] as f64,
        ny as f64 / new_dims[1] as f64,
        nz as f64 / new_dims[2] as f64,
    ];
    Array3::from_shape_fn((new_dims[0], new_dims[1], new_dims[2]), |(x, y, z)| {
        let pos = [
            (x as f64 + 0.5) * scale[0] - 0.5,
            (y as f64 + 0.5) * scale[1] - 0.5,
            (z as f64 + 0.5) * scale[2] - 0.5,
        ];
        sample(arr, pos, interp, Boundary::Clamp)
    })
}
