//! `VolumeGrid` and minimal NIfTI-1 file I/O.
//!
//! Reads and writes single-file `.nii` / `.nii.gz` volumes with the header
//! fields this pipeline needs: dimensions, voxel spacing, datatype, scaling
//! slope/intercept and the sform/qform orientation. On load, volumes are
//! reoriented to a fixed canonical axis order derived from the header so all
//! downstream geometry is orientation-independent.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};

/// Interpretation of the scalar values in a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    /// Calibrated CT intensities (Hounsfield units).
    Hu,
    /// Window-normalized intensities in [0, 1].
    Normalized,
    /// Integer segmentation labels.
    Labels,
}

/// A 3D scalar field with voxel spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub data: Array3<f32>,
    /// Voxel spacing in mm, one entry per axis.
    pub spacing: [f64; 3],
    pub kind: ValueKind,
}

impl VolumeGrid {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], kind: ValueKind) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::data(format!(
                "volume spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("volume contains non-finite values".to_string()));
        }
        Ok(VolumeGrid {
            data,
            spacing,
            kind,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

mod dt {
    pub const UINT8: i16 = 2;
    pub const INT16: i16 = 4;
    pub const INT32: i16 = 8;
    pub const FLOAT32: i16 = 16;
    pub const FLOAT64: i16 = 64;
    pub const UINT16: i16 = 512;
}

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

struct Header {
    dims: [usize; 3],
    ndim: usize,
    extra_dims_trivial: bool,
    pixdim: [f32; 8],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    srow: [[f32; 4]; 3],
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_gz = raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b;
    if is_gz {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    swap: bool,
}

impl<'a> Cursor<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.buf[off..off + 2].try_into().unwrap();
        let v = i16::from_le_bytes(b);
        if self.swap {
            v.swap_bytes()
        } else {
            v
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        let bits = u32::from_le_bytes(b);
        f32::from_bits(if self.swap { bits.swap_bytes() } else { bits })
    }
}

fn parse_header(buf: &[u8], path: &Path) -> Result<Header> {
    if buf.len() < VOX_OFFSET {
        return Err(Error::data(format!(
            "{}: file too short for a NIfTI-1 header",
            path.display()
        )));
    }
    let le_size = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let swap = match le_size {
        348 => false,
        _ if le_size.swap_bytes() == 348 => true,
        _ => {
            return Err(Error::data(format!(
                "{}: not a NIfTI-1 file (sizeof_hdr = {le_size})",
                path.display()
            )))
        }
    };
    let magic = &buf[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::data(format!(
            "{}: bad NIfTI magic {magic:?}",
            path.display()
        )));
    }
    let c = Cursor { buf, swap };

    let ndim = c.i16_at(40) as usize;
    let mut all_dims = [1usize; 7];
    for (i, d) in all_dims.iter_mut().enumerate() {
        let v = c.i16_at(42 + 2 * i);
        *d = if v <= 0 { 1 } else { v as usize };
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = c.f32_at(76 + 4 * i);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = c.f32_at(280 + 16 * r + 4 * k);
        }
    }

    Ok(Header {
        dims: [all_dims[0], all_dims[1], all_dims[2]],
        ndim,
        extra_dims_trivial: (3..ndim.min(7)).all(|k| all_dims[k] == 1),
        pixdim,
        datatype: c.i16_at(70),
        vox_offset: c.f32_at(108) as usize,
        scl_slope: c.f32_at(112),
        scl_inter: c.f32_at(116),
        qform_code: c.i16_at(252),
        sform_code: c.i16_at(254),
        quatern: [c.f32_at(256), c.f32_at(260), c.f32_at(264)],
        srow,
    })
}

/// Voxel-axis direction columns in world space, from sform when present,
/// else qform, else identity.
fn direction_matrix(h: &Header) -> [[f64; 3]; 3] {
    if h.sform_code > 0 {
        let mut m = [[0f64; 3]; 3];
        for (i, row) in h.srow.iter().enumerate() {
            for j in 0..3 {
                m[i][j] = f64::from(row[j]);
            }
        }
        return m;
    }
    if h.qform_code > 0 {
        let (b, c, d) = (
            f64::from(h.quatern[0]),
            f64::from(h.quatern[1]),
            f64::from(h.quatern[2]),
        );
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        return [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                qfac * 2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                qfac * 2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                qfac * (a * a + d * d - c * c - b * b),
            ],
        ];
    }
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn decode_voxels(buf: &[u8], h: &Header, path: &Path, swap: bool) -> Result<Vec<f32>> {
    let n: usize = h.dims.iter().product();
    let elem = match h.datatype {
        dt::UINT8 => 1,
        dt::INT16 | dt::UINT16 => 2,
        dt::INT32 | dt::FLOAT32 => 4,
        dt::FLOAT64 => 8,
        other => {
            return Err(Error::data(format!(
                "{}: unsupported NIfTI datatype {other}",
                path.display()
            )))
        }
    };
    let start = h.vox_offset.max(HEADER_SIZE);
    let need = start + n * elem;
    if buf.len() < need {
        return Err(Error::data(format!(
            "{}: truncated voxel payload ({} < {need} bytes)",
            path.display(),
            buf.len()
        )));
    }
    let raw = &buf[start..need];
    let sw16 = |b: [u8; 2]| {
        if swap {
            u16::from_be_bytes(b)
        } else {
            u16::from_le_bytes(b)
        }
    };
    let sw32 = |b: [u8; 4]| {
        if swap {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    };
    let sw64 = |b: [u8; 8]| {
        if swap {
            u64::from_be_bytes(b)
        } else {
            u64::from_le_bytes(b)
        }
    };
    let mut out = Vec::with_capacity(n);
    match h.datatype {
        dt::UINT8 => out.extend(raw.iter().map(|b| f32::from(*b))),
        dt::INT16 => out.extend(
            raw.chunks_exact(2)
                .map(|b| f32::from(sw16(b.try_into().unwrap()) as i16)),
        ),
        dt::UINT16 => out.extend(
            raw.chunks_exact(2)
                .map(|b| f32::from(sw16(b.try_into().unwrap()))),
        ),
        dt::INT32 => out.extend(
            raw.chunks_exact(4)
                .map(|b| sw32(b.try_into().unwrap()) as i32 as f32),
        ),
        dt::FLOAT32 => out.extend(
            raw.chunks_exact(4)
                .map(|b| f32::from_bits(sw32(b.try_into().unwrap()))),
        ),
        dt::FLOAT64 => out.extend(
            raw.chunks_exact(8)
                .map(|b| f64::from_bits(sw64(b.try_into().unwrap())) as f32),
        ),
        _ => unreachable!(),
    }
    Ok(out)
}

fn load_grid(path: &Path, kind_hint: Option<ValueKind>) -> Result<VolumeGrid> {
    let buf = read_bytes(path)?;
    let h = parse_header(&buf, path)?;
    if h.ndim < 3 || !h.extra_dims_trivial {
        return Err(Error::data(format!(
            "{}: expected a 3D payload, header declares {} non-trivial dimensions",
            path.display(),
            h.ndim
        )));
    }
    let spacing = [
        f64::from(h.pixdim[1]),
        f64::from(h.pixdim[2]),
        f64::from(h.pixdim[3]),
    ];
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::data(format!(
            "{}: non-positive voxel spacing {spacing:?}",
            path.display()
        )));
    }

    let swap = i32::from_le_bytes(buf[0..4].try_into().unwrap()) != 348;
    let mut voxels = decode_voxels(&buf, &h, path, swap)?;

    let apply_scaling = h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0);
    let kind = kind_hint.unwrap_or(match h.datatype {
        dt::UINT8 | dt::UINT16 | dt::INT32 => ValueKind::Labels,
        _ => ValueKind::Hu,
    });
    if apply_scaling && kind != ValueKind::Labels {
        for v in &mut voxels {
            *v = *v * h.scl_slope + h.scl_inter;
        }
    }

    // NIfTI stores Fortran order (first axis fastest).
    let data = Array3::from_shape_vec(h.dims.f(), voxels)
        .map_err(|e| Error::data(format!("{}: shape mismatch: {e}", path.display())))?
        .as_standard_layout()
        .to_owned();

    let grid = VolumeGrid::new(data, spacing, kind)?;
    Ok(reorient_canonical(grid, direction_matrix(&h)))
}

/// Load an image volume. Float and int16 payloads are read as HU (with
/// slope/intercept applied); unsigned and int32 payloads as integer labels.
pub fn load_volume(path: &Path) -> Result<VolumeGrid> {
    load_grid(path, None)
}

/// Load a segmentation mask; values are kept as exact integer labels.
pub fn load_mask(path: &Path) -> Result<VolumeGrid> {
    load_grid(path, Some(ValueKind::Labels))
}

/// Reorder axes (with flips) so each voxel axis points along its dominant
/// world axis with positive sign. Falls back to the identity when the header
/// direction is degenerate.
fn reorient_canonical(grid: VolumeGrid, dir: [[f64; 3]; 3]) -> VolumeGrid {
    // For voxel axis j, the dominant world axis and sign.
    let mut world_of = [0usize; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let mut best = 0usize;
        for i in 1..3 {
            if dir[i][j].abs() > dir[best][j].abs() {
                best = i;
            }
        }
        world_of[j] = best;
        flip[j] = dir[best][j] < 0.0;
    }
    let mut seen = [false; 3];
    for w in world_of {
        seen[w] = true;
    }
    if !seen.iter().all(|s| *s) {
        return grid; // degenerate header; leave as stored
    }

    // perm[i] = voxel axis that becomes canonical axis i
    let mut perm = [0usize; 3];
    for (j, w) in world_of.iter().enumerate() {
        perm[*w] = j;
    }
    if perm == [0, 1, 2] && !flip.iter().any(|f| *f) {
        return grid;
    }

    let mut view = grid.data.view().permuted_axes(perm);
    for (i, p) in perm.iter().enumerate() {
        if flip[*p] {
            view.invert_axis(ndarray::Axis(i));
        }
    }
    let data = view.as_standard_layout().to_owned();
    let spacing = [
        grid.spacing[perm[0]],
        grid.spacing[perm[1]],
        grid.spacing[perm[2]],
    ];
    VolumeGrid {
        data,
        spacing,
        kind: grid.kind,
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Write a volume as NIfTI-1 (`.nii`, or gzipped when the path ends in `.gz`).
///
/// Datatype follows the value kind: HU as int16, labels as uint8, normalized
/// intensities as float32. The write is atomic (temp file + rename).
pub fn write_volume(path: &Path, grid: &VolumeGrid) -> Result<()> {
    write_volume_with_direction(
        path,
        grid,
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    )
}

pub(crate) fn write_volume_with_direction(
    path: &Path,
    grid: &VolumeGrid,
    dir: [[f64; 3]; 3],
) -> Result<()> {
    let datatype = match grid.kind {
        ValueKind::Hu => dt::INT16,
        ValueKind::Labels => dt::UINT8,
        ValueKind::Normalized => dt::FLOAT32,
    };
    let bitpix: i16 = match datatype {
        dt::UINT8 => 8,
        dt::INT16 => 16,
        _ => 32,
    };
    let [nx, ny, nz] = grid.shape();

    let mut header = vec![0u8; VOX_OFFSET];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    for k in 4..8 {
        put_i16(&mut header, 40 + 2 * k, 1);
    }
    put_i16(&mut header, 70, datatype);
    put_i16(&mut header, 72, bitpix);
    put_f32(&mut header, 76, 1.0); // qfac
    for (i, s) in grid.spacing.iter().enumerate() {
        put_f32(&mut header, 80 + 4 * i, *s as f32);
    }
    put_f32(&mut header, 108, VOX_OFFSET as f32);
    put_f32(&mut header, 112, 1.0); // scl_slope
    put_f32(&mut header, 116, 0.0); // scl_inter
    put_i16(&mut header, 254, 1); // sform_code
    for i in 0..3 {
        for j in 0..3 {
            put_f32(
                &mut header,
                280 + 16 * i + 4 * j,
                (dir[i][j] * grid.spacing[j]) as f32,
            );
        }
    }
    header[344..348].copy_from_slice(b"n+1\0");

    let n = nx * ny * nz;
    let mut payload = Vec::with_capacity(n * bitpix as usize / 8);
    // Fortran order: first axis fastest.
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = grid.data[[x, y, z]];
                match datatype {
                    dt::UINT8 => payload.push(v.round().clamp(0.0, 255.0) as u8),
                    dt::INT16 => payload.extend_from_slice(
                        &(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes(),
                    ),
                    _ => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let gz = path.extension().is_some_and(|e| e == "gz");
        if gz {
            let mut enc = GzEncoder::new(file, Compression::fast());
            enc.write_all(&header).map_err(|e| Error::io(&tmp, e))?;
            enc.write_all(&payload).map_err(|e| Error::io(&tmp, e))?;
            enc.finish().map_err(|e| Error::io(&tmp, e))?;
        } else {
            let mut w = std::io::BufWriter::new(file);
            w.write_all(&header).map_err(|e| Error::io(&tmp, e))?;
            w.write_all(&payload).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
