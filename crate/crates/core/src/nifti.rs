//! Minimal NIfTI-1 I/O.
//!
//! Writes uncompressed single-file `.nii` with a 348-byte header; intensities
//! as float32, masks as uint8. The reader accepts exactly the datatypes the
//! writer produces (plus int16/float64 for convenience) in native little
//! endian, which covers every file this pipeline generates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;

use crate::error::{CoreError, Result};
use crate::volume::{MultiClassMask, Volume};

const HEADER_SIZE: i32 = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn write_header<W: Write>(
    w: &mut W,
    dim: (usize, usize, usize),
    spacing: [f64; 3],
    datatype: i16,
    bitpix: i16,
) -> std::io::Result<()> {
    w.write_i32::<LittleEndian>(HEADER_SIZE)?; // sizeof_hdr
    w.write_all(&[0u8; 35])?; // data_type, db_name, extents, session_error, regular
    w.write_u8(0)?; // dim_info
    // dim[8]: ndim, nx, ny, nz, ...
    // NIfTI dim order is (x, y, z); our arrays are (D,H,W) = (z, y, x)
    let dims: [i16; 8] = [3, dim.2 as i16, dim.1 as i16, dim.0 as i16, 1, 1, 1, 1];
    for d in dims {
        w.write_i16::<LittleEndian>(d)?;
    }
    for _ in 0..3 {
        w.write_f32::<LittleEndian>(0.0)?; // intent_p1..p3
    }
    w.write_i16::<LittleEndian>(0)?; // intent_code
    w.write_i16::<LittleEndian>(datatype)?;
    w.write_i16::<LittleEndian>(bitpix)?;
    w.write_i16::<LittleEndian>(0)?; // slice_start
    let pixdim: [f32; 8] = [
        1.0,
        spacing[2] as f32,
        spacing[1] as f32,
        spacing[0] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for p in pixdim {
        w.write_f32::<LittleEndian>(p)?;
    }
    w.write_f32::<LittleEndian>(352.0)?; // vox_offset
    w.write_f32::<LittleEndian>(1.0)?; // scl_slope
    w.write_f32::<LittleEndian>(0.0)?; // scl_inter
    w.write_i16::<LittleEndian>(0)?; // slice_end
    w.write_u8(0)?; // slice_code
    w.write_u8(0b10)?; // xyzt_units: mm
    w.write_f32::<LittleEndian>(0.0)?; // cal_max
    w.write_f32::<LittleEndian>(0.0)?; // cal_min
    w.write_f32::<LittleEndian>(0.0)?; // slice_duration
    w.write_f32::<LittleEndian>(0.0)?; // toffset
    w.write_i32::<LittleEndian>(0)?; // glmax
    w.write_i32::<LittleEndian>(0)?; // glmin
    w.write_all(&[0u8; 80])?; // descrip
    w.write_all(&[0u8; 24])?; // aux_file
    w.write_i16::<LittleEndian>(0)?; // qform_code
    w.write_i16::<LittleEndian>(0)?; // sform_code
    for _ in 0..6 {
        w.write_f32::<LittleEndian>(0.0)?; // quatern_*, qoffset_*
    }
    for _ in 0..12 {
        w.write_f32::<LittleEndian>(0.0)?; // srow_x/y/z
    }
    w.write_all(&[0u8; 16])?; // intent_name
    w.write_all(MAGIC)?;
    w.write_all(&[0u8; 4])?; // extender
    Ok(())
}

/// Write a scalar volume as float32 `.nii`.
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CoreError::io(path.display().to_string(), e);
    write_header(&mut w, vol.shape(), vol.spacing, DT_FLOAT32, 32).map_err(io)?;
    for &v in vol.data.iter() {
        w.write_f32::<LittleEndian>(v as f32)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Write a label mask as uint8 `.nii`.
pub fn write_mask(mask: &MultiClassMask, spacing: [f64; 3], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, mask.shape(), spacing, DT_UINT8, 8)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let bytes: Vec<u8> = mask.labels.iter().copied().collect();
    w.write_all(&bytes)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    w.flush().map_err(|e| CoreError::io(path.display().to_string(), e))
}

struct RawNifti {
    dim: (usize, usize, usize),
    spacing: [f64; 3],
    data: Vec<f64>,
}

fn read_raw(path: &Path) -> Result<RawNifti> {
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    let bad = |msg: &str| CoreError::Data(format!("{}: {msg}", path.display()));

    let mut header = [0u8; 348];
    r.read_exact(&mut header).map_err(io)?;
    let mut h = &header[..];
    if h.read_i32::<LittleEndian>().map_err(io)? != HEADER_SIZE {
        return Err(bad("not a little-endian NIfTI-1 file"));
    }
    if &header[344..348] != MAGIC {
        return Err(bad("missing n+1 magic"));
    }
    let mut dims = [0i16; 8];
    let mut d = &header[40..56];
    for v in dims.iter_mut() {
        *v = d.read_i16::<LittleEndian>().map_err(io)?;
    }
    if dims[0] != 3 {
        return Err(bad("only 3D images supported"));
    }
    let (nx, ny, nz) = (dims[1] as usize, dims[2] as usize, dims[3] as usize);
    let mut dt = &header[70..74];
    let datatype = dt.read_i16::<LittleEndian>().map_err(io)?;
    let mut pd = &header[76..108];
    let mut pixdim = [0f32; 8];
    for v in pixdim.iter_mut() {
        *v = pd.read_f32::<LittleEndian>().map_err(io)?;
    }
    let mut vo = &header[108..112];
    let vox_offset = vo.read_f32::<LittleEndian>().map_err(io)? as usize;
    if vox_offset > 352 {
        let mut skip = vec![0u8; vox_offset - 348];
        r.read_exact(&mut skip).map_err(io)?;
    } else {
        let mut skip = [0u8; 4];
        r.read_exact(&mut skip).map_err(io)?;
    }

    let n = nx * ny * nz;
    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(io)?;
            data.extend(buf.into_iter().map(f64::from));
        }
        DT_INT16 => {
            for _ in 0..n {
                data.push(f64::from(r.read_i16::<LittleEndian>().map_err(io)?));
            }
        }
        DT_FLOAT32 => {
            for _ in 0..n {
                data.push(f64::from(r.read_f32::<LittleEndian>().map_err(io)?));
            }
        }
        DT_FLOAT64 => {
            for _ in 0..n {
                data.push(r.read_f64::<LittleEndian>().map_err(io)?);
            }
        }
        other => return Err(bad(&format!("unsupported datatype {other}"))),
    }
    Ok(RawNifti {
        dim: (nz, ny, nx),
        spacing: [f64::from(pixdim[3]), f64::from(pixdim[2]), f64::from(pixdim[1])],
        data,
    })
}

/// Read a scalar volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let raw = read_raw(path)?;
    let arr = Array3::from_shape_vec(raw.dim, raw.data)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    Volume::new(arr, raw.spacing)
}

/// Read a label mask; voxel values must be integral codes in {0..3}.
pub fn read_mask(path: &Path) -> Result<MultiClassMask> {
    let raw = read_raw(path)?;
    let mut labels = Vec::with_capacity(raw.data.len());
    for v in raw.data {
        if v.fract() != 0.0 || !(0.0..=3.0).contains(&v) {
            return Err(CoreError::Data(format!(
                "{}: mask voxel value {v} is not a label code",
                path.display()
            )));
        }
        labels.push(v as u8);
    }
    let arr = Array3::from_shape_vec(raw.dim, labels)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    MultiClassMask::new(arr)
}
