//! Volume files and dataset directories: NIfTI-1 (`.nii`, `.nii.gz`) and
//! NumPy `.npy`, plus a `manifest.json` pairing images with label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::data::{IntensityVolume, LabelVolume, LabeledVolume, Volume};
use crate::error::{Error, Result};
use crate::train::Dataset;

/// Voxel data as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

/// A `[depth, height, width]` array read from disk, widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl RawVolume {
    pub fn to_intensities(&self) -> Result<IntensityVolume> {
        Volume::new(self.shape, self.data.iter().map(|&v| v as f32).collect())
    }

    /// Rejects anything that is not a non-negative integer below 2^16.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if v.fract() != 0.0 || !(0.0..65536.0).contains(&v) {
                    Err(Error::Data(format!("label value {v} is not a valid class id")))
                } else {
                    Ok(v as u16)
                }
            })
            .collect::<Result<Vec<u16>>>()?;
        Volume::new(self.shape, data)
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let res = if is_gz(path) {
        GzDecoder::new(BufReader::new(f)).read_to_end(&mut bytes)
    } else {
        BufReader::new(f).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(f), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(f);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

const NIFTI_HEADER: usize = 348;

fn nifti_err(path: &Path, m: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {m}", path.display()))
}

/// Reads a NIfTI-1 single-file volume. Axes map as x → width, y → height,
/// z → depth; `scl_slope`/`scl_inter` are applied when the slope is non-zero.
pub fn read_nifti(path: &Path) -> Result<RawVolume> {
    let b = read_all(path)?;
    if b.len() < NIFTI_HEADER {
        return Err(nifti_err(path, "shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(b[0..4].try_into().unwrap()) == 348;
    if !le && i32::from_be_bytes(b[0..4].try_into().unwrap()) != 348 {
        return Err(nifti_err(path, "sizeof_hdr is not 348"));
    }
    if &b[344..347] != b"n+1" {
        return Err(nifti_err(path, "not a single-file NIfTI-1 image (magic n+1)"));
    }
    let i16_at = |o: usize| {
        let a = [b[o], b[o + 1]];
        if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a: [u8; 4] = b[o..o + 4].try_into().unwrap();
        if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(nifti_err(path, format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = i16_at(42 + 2 * i);
        if v < 1 {
            return Err(nifti_err(path, format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    for i in 3..ndim as usize {
        if i16_at(42 + 2 * i) > 1 {
            return Err(nifti_err(path, "only 3D volumes are supported"));
        }
    }
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let datatype = i16_at(70);
    let offset = f32_at(108).max(NIFTI_HEADER as f32) as usize;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(nifti_err(path, format!("unsupported datatype {other}"))),
    };
    let raw = b
        .get(offset..offset + n * width)
        .ok_or_else(|| nifti_err(path, "voxel data is truncated"))?;
    let mut data: Vec<f64> = raw
        .chunks_exact(width)
        .map(|c| decode_scalar(c, datatype, le))
        .collect();
    let (slope, inter) = (f32_at(112), f32_at(116));
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    Ok(RawVolume {
        shape: [nz, ny, nx],
        data,
    })
}

fn decode_scalar(c: &[u8], datatype: i16, le: bool) -> f64 {
    macro_rules! num {
        ($t:ty) => {{
            let a = c.try_into().unwrap();
            (if le { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
        }};
    }
    match datatype {
        2 => c[0] as f64,
        256 => c[0] as i8 as f64,
        4 => num!(i16),
        512 => num!(u16),
        8 => num!(i32),
        768 => num!(u32),
        16 => num!(f32),
        64 => num!(f64),
        _ => unreachable!("datatype checked by caller"),
    }
}

/// Writes a little-endian NIfTI-1 volume with unit spacing.
pub fn write_nifti(path: &Path, shape: [usize; 3], data: &VoxelData) -> Result<()> {
    let [d, h, w] = shape;
    let mut hdr = vec![0u8; NIFTI_HEADER + 4];
    let put_i16 = |hdr: &mut Vec<u8>, o: usize, v: i16| hdr[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |hdr: &mut Vec<u8>, o: usize, v: f32| hdr[o..o + 4].copy_from_slice(&v.to_le_bytes());
    hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, v) in [3, w, h, d, 1, 1, 1, 1].into_iter().enumerate() {
        let v = i16::try_from(v).map_err(|_| nifti_err(path, "extent exceeds the NIfTI-1 limit"))?;
        put_i16(&mut hdr, 40 + 2 * i, v);
    }
    let (datatype, bitpix) = match data {
        VoxelData::F32(_) => (16, 32),
        VoxelData::U16(_) => (512, 16),
    };
    put_i16(&mut hdr, 70, datatype);
    put_i16(&mut hdr, 72, bitpix);
    for i in 0..4 {
        put_f32(&mut hdr, 76 + 4 * i, 1.0);
    }
    put_f32(&mut hdr, 108, (NIFTI_HEADER + 4) as f32);
    put_f32(&mut hdr, 112, 1.0);
    hdr[344..348].copy_from_slice(b"n+1\0");
    match data {
        VoxelData::F32(v) => v.iter().for_each(|x| hdr.extend_from_slice(&x.to_le_bytes())),
        VoxelData::U16(v) => v.iter().for_each(|x| hdr.extend_from_slice(&x.to_le_bytes())),
    }
    write_all(path, &hdr)
}

/// Reads a C-ordered 3D `.npy` array of any common numeric dtype.
pub fn read_npy(path: &Path) -> Result<RawVolume> {
    let b = read_all(path)?;
    if b.len() < 10 || &b[..6] != b"\x93NUMPY" {
        return Err(nifti_err(path, "missing NPY magic"));
    }
    let (hlen, start) = match b[6] {
        1 => (u16::from_le_bytes([b[8], b[9]]) as usize, 10),
        2 | 3 if b.len() >= 12 => (u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(nifti_err(path, format!("NPY version {v}"))),
    };
    let header = std::str::from_utf8(b.get(start..start + hlen).ok_or_else(|| nifti_err(path, "truncated header"))?)
        .map_err(|_| nifti_err(path, "header is not UTF-8"))?;
    let field = |key: &str| -> Option<&str> {
        let i = header.find(&format!("'{key}'"))? + key.len() + 2;
        Some(header[i..].trim_start().strip_prefix(':')?.trim_start())
    };
    let descr = field("descr")
        .and_then(|s| s.strip_prefix('\'')?.split('\'').next())
        .ok_or_else(|| nifti_err(path, "no descr"))?;
    if field("fortran_order").is_some_and(|s| s.starts_with("True")) {
        return Err(nifti_err(path, "Fortran-ordered arrays are not supported"));
    }
    let shape_txt = field("shape")
        .and_then(|s| s.strip_prefix('(')?.split(')').next())
        .ok_or_else(|| nifti_err(path, "no shape"))?;
    let shape: Vec<usize> = shape_txt
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| nifti_err(path, format!("bad extent `{s}`"))))
        .collect::<Result<_>>()?;
    let shape: [usize; 3] = shape
        .try_into()
        .map_err(|s: Vec<usize>| nifti_err(path, format!("expected a 3D array, got shape {s:?}")))?;
    let le = !descr.starts_with('>');
    let (width, datatype) = match &descr[1..] {
        "u1" => (1, 2),
        "i1" => (1, 256),
        "i2" => (2, 4),
        "u2" => (2, 512),
        "i4" => (4, 8),
        "u4" => (4, 768),
        "f4" => (4, 16),
        "f8" => (8, 64),
        other => return Err(nifti_err(path, format!("unsupported dtype `{other}`"))),
    };
    let n: usize = shape.iter().product();
    let raw = b
        .get(start + hlen..start + hlen + n * width)
        .ok_or_else(|| nifti_err(path, "array data is truncated"))?;
    let data = raw.chunks_exact(width).map(|c| decode_scalar(c, datatype, le)).collect();
    Ok(RawVolume { shape, data })
}

pub fn write_npy(path: &Path, shape: [usize; 3], data: &VoxelData) -> Result<()> {
    let descr = match data {
        VoxelData::F32(_) => "<f4",
        VoxelData::U16(_) => "<u2",
    };
    let mut header = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        shape[0], shape[1], shape[2]
    );
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match data {
        VoxelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VoxelData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    write_all(path, &out)
}

/// Dispatches on the extension: `.nii`, `.nii.gz`, `.npy`.
pub fn read_volume(path: &Path) -> Result<RawVolume> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti(path)
    } else if name.ends_with(".npy") {
        read_npy(path)
    } else if name.ends_with(".npz") {
        Err(Error::Data(format!(
            "{}: NPZ archives are not supported; store each array as .npy",
            path.display()
        )))
    } else {
        Err(Error::Data(format!("{}: unknown volume format", path.display())))
    }
}

pub fn write_volume(path: &Path, shape: [usize; 3], data: &VoxelData) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".npy") {
        write_npy(path, shape, data)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        write_nifti(path, shape, data)
    } else {
        Err(Error::Data(format!("{}: unknown volume format", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub volume_id: String,
    pub image_path: String,
    pub label_path: String,
    pub class_names: Vec<String>,
    /// `"train"` (the train/validation pool, default) or `"test"`.
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: String,
    pub volumes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Loads `dir/manifest.json` and every volume it lists. Paths are relative
/// to `dir`. All entries must share one class list.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    let first = manifest
        .volumes
        .first()
        .ok_or_else(|| Error::Data(format!("{}: no volumes listed", mpath.display())))?;
    let class_names = first.class_names.clone();
    let mut ds = Dataset {
        name: manifest.dataset.clone(),
        class_names: class_names.clone(),
        pool: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.volumes {
        if e.class_names != class_names {
            return Err(Error::Data(format!("volume {} declares a different class list", e.volume_id)));
        }
        let img = read_volume(&dir.join(&e.image_path))?.to_intensities()?;
        let lab = read_volume(&dir.join(&e.label_path))?.to_labels()?;
        let vol = LabeledVolume::new(e.volume_id.clone(), class_names.clone(), img, lab)
            .map_err(|err| Error::Data(format!("volume {}: {err}", e.volume_id)))?;
        match e.split.as_str() {
            "train" => ds.pool.push(vol),
            "test" => ds.test.push(vol),
            other => return Err(Error::Data(format!("volume {}: unknown split `{other}`", e.volume_id))),
        }
    }
    Ok(ds)
}

/// Writes every volume of `ds` as `<id>_image.<ext>` / `<id>_label.<ext>`
/// plus a manifest. `ext` is `nii.gz`, `nii` or `npy`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset, ext: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut volumes = Vec::new();
    for (split, vols) in [("train", &ds.pool), ("test", &ds.test)] {
        for v in vols {
            let image_path = format!("{}_image.{ext}", v.volume_id);
            let label_path = format!("{}_label.{ext}", v.volume_id);
            write_volume(&dir.join(&image_path), v.intensities.shape(), &VoxelData::F32(v.intensities.data().to_vec()))?;
            write_volume(&dir.join(&label_path), v.labels.shape(), &VoxelData::U16(v.labels.data().to_vec()))?;
            volumes.push(ManifestEntry {
                volume_id: v.volume_id.clone(),
                image_path,
                label_path,
                class_names: ds.class_names.clone(),
                split: split.into(),
            });
        }
    }
    let manifest = Manifest {
        dataset: ds.name.clone(),
        volumes,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()
    }

    #[test]
    fn nifti_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&p, [2, 3, 4], &VoxelData::F32(ramp(24))).unwrap();
            let v = read_nifti(&p).unwrap();
            assert_eq!(v.shape, [2, 3, 4]);
            assert_eq!(v.data, ramp(24).iter().map(|&x| x as f64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn nifti_x_is_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.nii");
        let labels: Vec<u16> = (0..24).collect();
        write_nifti(&p, [2, 3, 4], &VoxelData::U16(labels)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // dim[1..=3] = (x, y, z) = (width, height, depth)
        let dim = |i: usize| i16::from_le_bytes([bytes[40 + 2 * i], bytes[41 + 2 * i]]);
        assert_eq!((dim(1), dim(2), dim(3)), (4, 3, 2));
        let v = read_nifti(&p).unwrap().to_labels().unwrap();
        assert_eq!(v.at(1, 2, 3), 23);
    }

    #[test]
    fn npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        write_npy(&p, [2, 2, 3], &VoxelData::U16((0..12).collect())).unwrap();
        let v = read_npy(&p).unwrap();
        assert_eq!(v.shape, [2, 2, 3]);
        assert_eq!(v.data[11], 11.0);
        let header_end = 10 + u16::from_le_bytes(std::fs::read(&p).unwrap()[8..10].try_into().unwrap()) as usize;
        assert_eq!(header_end % 64, 0);
    }

    #[test]
    fn fractional_labels_are_rejected() {
        let raw = RawVolume {
            shape: [1, 1, 2],
            data: vec![1.0, 1.5],
        };
        assert!(matches!(raw.to_labels(), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::config::SyntheticConfig {
            volumes: 2,
            test_volumes: 1,
            classes: 2,
            shape: [8, 16, 16],
            seed: 5,
        };
        let ds = crate::train::synthetic_dataset(&cfg).unwrap();
        write_dataset_dir(dir.path(), &ds, "nii.gz").unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.pool, ds.pool);
        assert_eq!(back.test, ds.test);
    }
}
