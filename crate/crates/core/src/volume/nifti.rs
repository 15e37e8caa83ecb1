//! Read-only subset of single-file NIfTI-1 (`.nii`, uncompressed).
//!
//! NIfTI stores x fastest, then y, then z, which is the same memory order as
//! a [`Volume`] with `width = nx`, `height = ny`, `depth = nz`.

use std::fs;
use std::path::Path;

use super::{Dims, Result, Volume, VolumeError};

const HEADER_LEN: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut raw: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big_endian {
            raw.reverse();
        }
        raw
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.array(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.array(at))
    }
}

pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(VolumeError::Unsupported {
            field: "compression",
            reason: "gzip-compressed NIfTI is not supported; decompress to .nii first".into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::Length {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match sizeof_hdr {
        348 => false,
        x if x.swap_bytes() == 348 => true,
        x => {
            return Err(VolumeError::Format {
                offset: 0,
                reason: format!("sizeof_hdr is {x}, expected 348"),
            })
        }
    };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(VolumeError::Unsupported {
                field: "magic",
                reason: "two-file (.hdr/.img) NIfTI is not supported".into(),
            })
        }
        other => {
            return Err(VolumeError::Format {
                offset: 344,
                reason: format!("bad magic {:?}", String::from_utf8_lossy(other)),
            })
        }
    }
    let r = Reader { bytes, big_endian };
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(VolumeError::Unsupported {
            field: "dim",
            reason: format!("dim[0] = {ndim}; only 3-D volumes are supported"),
        });
    }
    if dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(VolumeError::Unsupported {
            field: "dim",
            reason: format!(
                "{ndim}-D image with non-singleton extents {:?}",
                &dim[4..=ndim as usize]
            ),
        });
    }
    if dim[1..=3].iter().any(|&d| d < 1) {
        return Err(VolumeError::Format {
            offset: 40,
            reason: format!("non-positive spatial extent in {:?}", &dim[1..=3]),
        });
    }
    let dims = Dims::new(dim[3] as usize, dim[2] as usize, dim[1] as usize);
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(VolumeError::Unsupported {
                field: "datatype",
                reason: format!("datatype code {other} (supported: u8, i16, u16, f32)"),
            })
        }
    };
    let vox_offset = r.f32(108);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 {
        return Err(VolumeError::Format {
            offset: 108,
            reason: format!("vox_offset {vox_offset} precedes the end of the header"),
        });
    }
    let start = vox_offset as usize;
    let needed = start + dims.voxels() * width;
    if bytes.len() < needed {
        return Err(VolumeError::Length {
            expected: needed as u64,
            actual: bytes.len() as u64,
        });
    }
    let raw = &bytes[start..needed];
    let data = Reader {
        bytes: raw,
        big_endian,
    };
    let mut values: Vec<f32> = match datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..dims.voxels()).map(|i| data.i16(2 * i) as f32).collect(),
        DT_UINT16 => (0..dims.voxels())
            .map(|i| u16::from_le_bytes(data.array(2 * i)) as f32)
            .collect(),
        _ => (0..dims.voxels()).map(|i| data.f32(4 * i)).collect(),
    };
    let slope = r.f32(112);
    let inter = r.f32(116);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Volume::from_f32(dims, values)
}

pub fn read_nifti_subset(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    decode_nifti(&bytes)
}

/// Builds a minimal little-endian `.nii` image for tests.
#[cfg(test)]
pub(crate) fn build_nifti(
    nx: i16,
    ny: i16,
    nz: i16,
    datatype: i16,
    payload: &[u8],
    slope: f32,
    inter: f32,
) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, d) in [3i16, nx, ny, nz, 1, 1, 1, 1].iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_FLOAT32 => 32,
        _ => 16,
    };
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{decode_rvol, encode_rvol};

    fn f32_payload(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn float_volume_passes_through_without_slope() {
        let values: Vec<f32> = (0..8).map(|i| i as f32 * 0.5 - 1.0).collect();
        let bytes = build_nifti(2, 2, 2, DT_FLOAT32, &f32_payload(&values), 0.0, 0.0);
        let v = decode_nifti(&bytes).unwrap();
        assert_eq!(v.dims(), Dims::new(2, 2, 2));
        assert_eq!(v.as_f32().unwrap(), values.as_slice());
    }

    #[test]
    fn scaling_applies_slope_then_intercept() {
        let bytes = build_nifti(1, 1, 1, DT_INT16, &3i16.to_le_bytes(), 2.0, 1.0);
        assert_eq!(decode_nifti(&bytes).unwrap().as_f32().unwrap(), &[7.0]);
    }

    #[test]
    fn axis_order_maps_x_to_width() {
        // nx=3, ny=2, nz=1: x varies fastest.
        let payload: Vec<u8> = (0..6).collect();
        let v = decode_nifti(&build_nifti(3, 2, 1, DT_UINT8, &payload, 0.0, 0.0)).unwrap();
        assert_eq!(v.dims(), Dims::new(1, 2, 3));
        assert_eq!(v.get_f32(0, 1, 2), 5.0);
        assert_eq!(v.get_f32(0, 1, 0), 3.0);
    }

    #[test]
    fn matches_rvol_for_identical_content() {
        let values: Vec<f32> = (0..24).map(|i| (i * i) as f32).collect();
        let nii = decode_nifti(&build_nifti(
            4,
            3,
            2,
            DT_FLOAT32,
            &f32_payload(&values),
            0.0,
            0.0,
        ))
        .unwrap();
        let rvol = decode_rvol(&encode_rvol(
            &Volume::from_f32(Dims::new(2, 3, 4), values).unwrap(),
        ))
        .unwrap();
        assert_eq!(nii, rvol);
    }

    #[test]
    fn u16_and_u8_datatypes() {
        let payload: Vec<u8> = [1u16, 65535].iter().flat_map(|v| v.to_le_bytes()).collect();
        let v = decode_nifti(&build_nifti(2, 1, 1, DT_UINT16, &payload, 0.0, 0.0)).unwrap();
        assert_eq!(v.as_f32().unwrap(), &[1.0, 65535.0]);
    }

    #[test]
    fn rejects_bad_headers() {
        let good = build_nifti(1, 1, 1, DT_UINT8, &[9], 0.0, 0.0);

        let mut bad = good.clone();
        bad[0..4].copy_from_slice(&350i32.to_le_bytes());
        assert!(matches!(
            decode_nifti(&bad),
            Err(VolumeError::Format { offset: 0, .. })
        ));

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"xyz\0");
        assert!(matches!(
            decode_nifti(&bad),
            Err(VolumeError::Format { offset: 344, .. })
        ));

        let mut bad = good.clone();
        bad[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(
            decode_nifti(&bad),
            Err(VolumeError::Unsupported {
                field: "datatype",
                ..
            })
        ));

        let mut bad = good.clone();
        bad[40..42].copy_from_slice(&4i16.to_le_bytes());
        bad[48..50].copy_from_slice(&5i16.to_le_bytes());
        assert!(matches!(
            decode_nifti(&bad),
            Err(VolumeError::Unsupported { field: "dim", .. })
        ));

        let gz = [0x1f, 0x8b, 8, 0];
        assert!(matches!(
            decode_nifti(&gz),
            Err(VolumeError::Unsupported {
                field: "compression",
                ..
            })
        ));

        assert!(matches!(
            decode_nifti(&good[..100]),
            Err(VolumeError::Length { .. })
        ));
        assert!(matches!(
            decode_nifti(&good[..351]),
            Err(VolumeError::Length { .. })
        ));
    }

    #[test]
    fn big_endian_header_is_accepted() {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 1, 1, 2, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&(-2i16).to_be_bytes());
        h.extend_from_slice(&300i16.to_be_bytes());
        let v = decode_nifti(&h).unwrap();
        assert_eq!(v.as_f32().unwrap(), &[-2.0, 300.0]);
    }
}
