//! Minimal NIfTI-1 reader/writer for single-channel volumes.
//!
//! Reads the common scalar datatypes with `scl_slope`/`scl_inter` applied,
//! normalizes axis orientation to canonical RAS order on load (so array axis 2
//! is always the axial direction), and writes little-endian `float32` files
//! with an sform affine. Both `.nii` and `.nii.gz` are supported.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

/// Raw decoded volume before domain validation: canonical-axis data plus
/// spacing (mm) and world origin of voxel (0,0,0).
#[derive(Debug)]
pub struct RawVolume {
    pub data: Array3<f32>,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        MultiGzDecoder::new(&mut file)
            .read_to_end(&mut bytes)
            .map_err(|e| corrupt(path, format!("gzip decode failed: {e}")))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

struct Fields<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let raw = [self.bytes[off], self.bytes[off + 1]];
        if self.swap { i16::from_be_bytes(raw) } else { i16::from_le_bytes(raw) }
    }
    fn f32(&self, off: usize) -> f32 {
        let raw: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.swap { f32::from_be_bytes(raw) } else { f32::from_le_bytes(raw) }
    }
}

/// Load a NIfTI-1 volume and normalize it to canonical axis order.
pub fn load(path: &Path) -> Result<RawVolume> {
    let bytes = read_all(path)?;
    if bytes.len() < VOX_OFFSET {
        return Err(corrupt(path, format!("file too small ({} bytes)", bytes.len())));
    }

    let sizeof_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let sizeof_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let swap = match (sizeof_le, sizeof_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(corrupt(path, format!("sizeof_hdr is {sizeof_le}, expected 348"))),
    };
    if &bytes[344..348] != MAGIC {
        return Err(corrupt(path, "magic is not 'n+1'"));
    }
    let f = Fields { bytes: &bytes, swap };

    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(corrupt(path, format!("dim[0] = {ndim} out of range")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = f.i16(40 + 2 * (i + 1));
        if v < 1 {
            return Err(corrupt(path, format!("dim[{}] = {v} is not positive", i + 1)));
        }
        *d = v as usize;
    }
    if ndim < 3 {
        return Err(corrupt(path, format!("volume is {ndim}-dimensional, expected 3")));
    }
    if dim[3..].iter().any(|&d| d > 1) {
        return Err(Error::MultiChannel { path: path.to_path_buf(), channels: dim[3] });
    }
    let (nx, ny, nz) = (dim[0], dim[1], dim[2]);

    let datatype = f.i16(70);
    let elem = match datatype {
        2 | 256 => 1usize,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(corrupt(path, format!("unsupported datatype code {other}"))),
    };

    let vox_offset = f.f32(108) as usize;
    if vox_offset < HEADER_SIZE {
        return Err(corrupt(path, format!("vox_offset {vox_offset} precedes header end")));
    }
    let nvox = nx * ny * nz;
    let need = vox_offset + nvox * elem;
    if bytes.len() < need {
        return Err(corrupt(path, format!("file truncated: {} bytes, need {need}", bytes.len())));
    }

    let scl_slope = f.f32(112);
    let scl_inter = f.f32(116);
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0f32, 0.0f32)
    } else {
        (scl_slope, scl_inter)
    };

    let raw = &bytes[vox_offset..need];
    let mut flat = Vec::with_capacity(nvox);
    let rd_i16 = |b: &[u8]| if swap { i16::from_be_bytes([b[0], b[1]]) } else { i16::from_le_bytes([b[0], b[1]]) };
    let rd_u16 = |b: &[u8]| if swap { u16::from_be_bytes([b[0], b[1]]) } else { u16::from_le_bytes([b[0], b[1]]) };
    for i in 0..nvox {
        let b = &raw[i * elem..(i + 1) * elem];
        let v = match datatype {
            2 => b[0] as f32,
            256 => b[0] as i8 as f32,
            4 => rd_i16(b) as f32,
            512 => rd_u16(b) as f32,
            8 => {
                let raw: [u8; 4] = b.try_into().unwrap();
                (if swap { i32::from_be_bytes(raw) } else { i32::from_le_bytes(raw) }) as f32
            }
            16 => {
                let raw: [u8; 4] = b.try_into().unwrap();
                if swap { f32::from_be_bytes(raw) } else { f32::from_le_bytes(raw) }
            }
            64 => {
                let raw: [u8; 8] = b.try_into().unwrap();
                (if swap { f64::from_be_bytes(raw) } else { f64::from_le_bytes(raw) }) as f32
            }
            _ => unreachable!(),
        };
        flat.push(v * slope + inter);
    }

    // NIfTI voxel data is Fortran-ordered: x varies fastest.
    let mut data = Array3::<f32>::zeros((nx, ny, nz));
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[(x, y, z)] = flat[idx];
                idx += 1;
            }
        }
    }

    let affine = read_affine(&f, path)?;
    canonicalize(data, affine, path)
}

/// 3x4 voxel-to-world affine: columns 0..2 are the voxel axis directions
/// (scaled by spacing), column 3 is the translation.
fn read_affine(f: &Fields, path: &Path) -> Result<[[f64; 4]; 3]> {
    let sform_code = f.i16(254);
    let qform_code = f.i16(252);
    if sform_code > 0 {
        let mut m = [[0.0f64; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        return Ok(m);
    }
    let pix = [f.f32(80) as f64, f.f32(84) as f64, f.f32(88) as f64];
    if qform_code > 0 {
        let b = f.f32(256) as f64;
        let c = f.f32(260) as f64;
        let d = f.f32(264) as f64;
        let a2 = 1.0 - (b * b + c * c + d * d);
        if a2 < -1e-5 {
            return Err(corrupt(path, "invalid quaternion in qform"));
        }
        let a = a2.max(0.0).sqrt();
        let qfac = if f.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let off = [f.f32(268) as f64, f.f32(272) as f64, f.f32(276) as f64];
        let mut m = [[0.0f64; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let scale = if j == 2 { pix[j] * qfac } else { pix[j] };
                m[i][j] = r[i][j] * scale;
            }
            m[i][3] = off[i];
        }
        return Ok(m);
    }
    // Neither form present: assume axis-aligned with pixdim spacing.
    let mut m = [[0.0f64; 4]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = pix[i].abs().max(f64::MIN_POSITIVE);
    }
    Ok(m)
}

/// Permute/flip axes so the affine becomes a positive diagonal (RAS order).
/// Oblique volumes (no dominant axis per column) are rejected.
fn canonicalize(data: Array3<f32>, affine: [[f64; 4]; 3], path: &Path) -> Result<RawVolume> {
    // For each voxel axis j: which world axis does it move along, and how far.
    let mut world_axis = [0usize; 3];
    let mut sign = [1.0f64; 3];
    let mut step = [0.0f64; 3];
    let mut taken = [false; 3];
    for j in 0..3 {
        let col = [affine[0][j], affine[1][j], affine[2][j]];
        let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        if norm == 0.0 {
            return Err(corrupt(path, format!("affine column {j} is zero")));
        }
        let (i, &v) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        if v.abs() < 0.99 * norm {
            return Err(corrupt(path, "oblique volume orientation is not supported"));
        }
        if taken[i] {
            return Err(corrupt(path, "degenerate affine: two axes map to one world axis"));
        }
        taken[i] = true;
        world_axis[j] = i;
        sign[j] = v.signum();
        step[j] = norm;
    }

    // perm[k] = voxel axis that carries world axis k.
    let mut perm = [0usize; 3];
    for j in 0..3 {
        perm[world_axis[j]] = j;
    }

    let mut origin = [affine[0][3], affine[1][3], affine[2][3]];
    let shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
    let mut out = data.permuted_axes([perm[0], perm[1], perm[2]]);
    let mut spacing = [0.0f32; 3];
    for k in 0..3 {
        let j = perm[k];
        spacing[k] = step[j] as f32;
        if sign[j] < 0.0 {
            out.invert_axis(Axis(k));
            // Voxel (n-1) along axis j becomes the new zero voxel.
            let n = shape[j] as f64 - 1.0;
            for (i, orig) in origin.iter_mut().enumerate() {
                *orig += affine[i][j] * n;
            }
        }
    }
    Ok(RawVolume {
        data: out.as_standard_layout().to_owned(),
        spacing,
        origin: [origin[0] as f32, origin[1] as f32, origin[2] as f32],
    })
}

/// Write a canonical volume as little-endian `float32` NIfTI-1.
pub fn save(data: &Array3<f32>, spacing: [f32; 3], origin: [f32; 3], path: &Path) -> Result<()> {
    let (nx, ny, nz) = data.dim();
    let mut header = vec![0u8; VOX_OFFSET];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());

    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    for i in 4..8 {
        put_i16(&mut header, 40 + 2 * i, 1);
    }
    put_i16(&mut header, 70, 16); // float32
    put_i16(&mut header, 72, 32); // bitpix
    put_f32(&mut header, 76, 1.0); // qfac
    put_f32(&mut header, 80, spacing[0]);
    put_f32(&mut header, 84, spacing[1]);
    put_f32(&mut header, 88, spacing[2]);
    put_f32(&mut header, 108, VOX_OFFSET as f32);
    put_f32(&mut header, 112, 1.0); // scl_slope
    put_f32(&mut header, 116, 0.0); // scl_inter
    put_i16(&mut header, 252, 0); // qform_code
    put_i16(&mut header, 254, 1); // sform_code: scanner
    for i in 0..3 {
        put_f32(&mut header, 280 + 16 * i + 4 * i, spacing[i]);
        put_f32(&mut header, 280 + 16 * i + 12, origin[i]);
    }
    header[344..348].copy_from_slice(MAGIC);

    let mut body = Vec::with_capacity(VOX_OFFSET + nx * ny * nz * 4);
    body.extend_from_slice(&header);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                body.extend_from_slice(&data[(x, y, z)].to_le_bytes());
            }
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(&body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_nii_and_gz() {
        let dir = tmpdir();
        let data = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x * 100 + y * 10 + z) as f32 * 0.25);
        for name in ["a.nii", "a.nii.gz"] {
            let path = dir.path().join(name);
            save(&data, [1.5, 2.0, 3.0], [-10.0, 4.0, 7.5], &path).unwrap();
            let raw = load(&path).unwrap();
            assert_eq!(raw.data, data);
            assert_eq!(raw.spacing, [1.5, 2.0, 3.0]);
            assert_eq!(raw.origin, [-10.0, 4.0, 7.5]);
        }
    }

    #[test]
    fn text_file_is_corrupt_header() {
        let dir = tmpdir();
        let path = dir.path().join("not_a_volume.nii");
        std::fs::write(&path, "this is definitely not a nifti file, but it is long enough to parse as one if padded out to three hundred and forty eight bytes which we ensure by repeating this sentence a few times; this is definitely not a nifti file, but it is long enough to parse as one if padded out to three hundred and forty eight bytes and then some more padding text here").unwrap();
        match load(&path) {
            Err(Error::CorruptHeader { .. }) => {}
            other => panic!("expected corrupt header, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match load(Path::new("/nonexistent/volume.nii")) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn multichannel_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("multi.nii");
        let data = Array3::zeros((4, 4, 4));
        save(&data, [1.0; 3], [0.0; 3], &path).unwrap();
        // Patch dim[0]=4, dim[4]=3 to fake a 3-channel file.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&3i16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(Error::MultiChannel { channels: 3, .. }) => {}
            other => panic!("expected multi-channel error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_axis_is_canonicalized() {
        let dir = tmpdir();
        let path = dir.path().join("flip.nii");
        let data = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        save(&data, [1.0, 1.0, 2.0], [0.0, 0.0, 0.0], &path).unwrap();
        // Negate the x row of the sform: x axis stored in reverse.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[280..284].copy_from_slice(&(-1.0f32).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let raw = load(&path).unwrap();
        for x in 0..4 {
            for y in 0..3 {
                for z in 0..2 {
                    assert_eq!(raw.data[(x, y, z)], data[(3 - x, y, z)]);
                }
            }
        }
        // New origin sits at the world position of the old voxel x=3.
        assert_eq!(raw.origin, [-3.0, 0.0, 0.0]);
        assert_eq!(raw.spacing, [1.0, 1.0, 2.0]);
    }

    #[test]
    fn permuted_axes_are_canonicalized() {
        let dir = tmpdir();
        let path = dir.path().join("perm.nii");
        let data = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        save(&data, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], &path).unwrap();
        // Swap the roles of voxel axes 0 and 1 in the sform: voxel axis 0
        // moves along world y, voxel axis 1 along world x.
        let mut bytes = std::fs::read(&path).unwrap();
        let zero = 0.0f32.to_le_bytes();
        let one = 1.0f32.to_le_bytes();
        bytes[280..284].copy_from_slice(&zero); // srow_x = [0, 1, 0, 0]
        bytes[284..288].copy_from_slice(&one);
        bytes[296..300].copy_from_slice(&one); // srow_y = [1, 0, 0, 0]
        bytes[300..304].copy_from_slice(&zero);
        std::fs::write(&path, &bytes).unwrap();
        let raw = load(&path).unwrap();
        assert_eq!(raw.data.dim(), (3, 4, 2));
        for x in 0..3 {
            for y in 0..4 {
                for z in 0..2 {
                    assert_eq!(raw.data[(x, y, z)], data[(y, x, z)]);
                }
            }
        }
    }

    #[test]
    fn int16_with_scaling_is_applied() {
        let dir = tmpdir();
        let path = dir.path().join("scaled.nii");
        // Hand-assemble an int16 file with scl_slope=2, scl_inter=-1.
        let data = Array3::from_shape_fn((2, 2, 2), |(x, y, z)| (x + y + z) as f32);
        save(&data, [1.0; 3], [0.0; 3], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes()); // datatype int16
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        bytes.truncate(VOX_OFFSET);
        for v in [0i16, 1, 2, 3, 4, 5, 6, 7] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let raw = load(&path).unwrap();
        let flat: Vec<f32> = (0..8).map(|v| v as f32 * 2.0 - 1.0).collect();
        let mut idx = 0;
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(raw.data[(x, y, z)], flat[idx]);
                    idx += 1;
                }
            }
        }
    }
}
