//! Volume file formats.
//!
//! Two encodings are supported:
//!
//! * A minimal NIfTI-1 single-file subset (`.nii`): 348-byte header, magic
//!   `n+1`, datatypes uint8 / int16 / float32, spacing from `pixdim`, origin
//!   from the qform (or sform) offsets. Either byte order is accepted on read;
//!   files are written little-endian.
//! * A raw little-endian blob with a JSON sidecar next to it (same stem,
//!   `.json` extension) carrying dims, spacing, dtype and kind.
//!
//! NIfTI stores `x` fastest, which is exactly the C-contiguous `(z, y, x)`
//! layout, so `dim[1..=3] = (W, H, D)` and `dim[4]` holds the channel count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::volume::{FeatureMap, Grid, LabelVolume, ProbVolume, ScalarVolume};

pub const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const NIFTI_INTENT_LABEL: i16 = 1002;

/// Datatype codes understood by both encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Uint8,
    Int16,
    Float32,
}

impl DType {
    pub fn nifti_code(self) -> i16 {
        match self {
            DType::Uint8 => 2,
            DType::Int16 => 4,
            DType::Float32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DType::Uint8),
            4 => Ok(DType::Int16),
            16 => Ok(DType::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Uint8 => 1,
            DType::Int16 => 2,
            DType::Float32 => 4,
        }
    }
}

/// What a file is interpreted as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Scalar,
    Label,
    Prob,
    Feature,
}

/// A volume of any kind, as returned by [`read_volume`].
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Prob(ProbVolume),
}

impl From<ScalarVolume> for AnyVolume {
    fn from(v: ScalarVolume) -> Self {
        AnyVolume::Scalar(v)
    }
}

impl From<LabelVolume> for AnyVolume {
    fn from(v: LabelVolume) -> Self {
        AnyVolume::Label(v)
    }
}

impl From<ProbVolume> for AnyVolume {
    fn from(v: ProbVolume) -> Self {
        AnyVolume::Prob(v)
    }
}

/// JSON sidecar of the raw format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    #[serde(default = "one")]
    pub channels: usize,
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub dtype: DType,
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u16>,
    /// Window origin in voxels of the parent volume, for stitching inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_origin: Option<[usize; 3]>,
}

fn one() -> usize {
    1
}

/// Sidecar path for a raw blob: same stem, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn is_nifti(path: &Path) -> bool {
    path.extension().map(|e| e.eq_ignore_ascii_case("nii")).unwrap_or(false)
}

/// Decoded payload before interpretation.
struct Decoded {
    grid: Grid,
    channels: usize,
    values: Values,
    num_classes: Option<u16>,
    patch_origin: Option<[usize; 3]>,
}

enum Values {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::U8(v) => v.len(),
            Values::I16(v) => v.len(),
            Values::F32(v) => v.len(),
        }
    }

    fn into_f32(self) -> Vec<f32> {
        match self {
            Values::U8(v) => v.into_iter().map(f32::from).collect(),
            Values::I16(v) => v.into_iter().map(f32::from).collect(),
            Values::F32(v) => v,
        }
    }

    fn into_labels(self) -> Result<Vec<u16>> {
        match self {
            Values::U8(v) => Ok(v.into_iter().map(u16::from).collect()),
            Values::I16(v) => v
                .into_iter()
                .map(|x| u16::try_from(x).map_err(|_| Error::InvalidArgument(format!("negative label {x}"))))
                .collect(),
            Values::F32(v) => v
                .into_iter()
                .map(|x| {
                    if x >= 0.0 && x.fract() == 0.0 && x <= u16::MAX as f32 {
                        Ok(x as u16)
                    } else {
                        Err(Error::InvalidArgument(format!("non-integer label {x}")))
                    }
                })
                .collect(),
        }
    }

    fn decode(bytes: &[u8], dtype: DType, count: usize, big_endian: bool) -> Result<Self> {
        let need = count * dtype.size();
        if bytes.len() < need {
            return Err(Error::Shape(format!("payload has {} bytes, expected {need}", bytes.len())));
        }
        let bytes = &bytes[..need];
        Ok(match dtype {
            DType::Uint8 => Values::U8(bytes.to_vec()),
            DType::Int16 => Values::I16(
                bytes
                    .chunks_exact(2)
                    .map(|b| {
                        let a = [b[0], b[1]];
                        if big_endian { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
                    })
                    .collect(),
            ),
            DType::Float32 => Values::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| {
                        let a = [b[0], b[1], b[2], b[3]];
                        if big_endian { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
                    })
                    .collect(),
            ),
        })
    }

    fn encode_le(&self, out: &mut Vec<u8>) {
        match self {
            Values::U8(v) => out.extend_from_slice(v),
            Values::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Values::U8(_) => DType::Uint8,
            Values::I16(_) => DType::Int16,
            Values::F32(_) => DType::Float32,
        }
    }
}

fn label_values(labels: &LabelVolume) -> Values {
    if labels.num_classes <= 256 {
        Values::U8(labels.data.iter().map(|&v| v as u8).collect())
    } else {
        Values::I16(labels.data.iter().map(|&v| v as i16).collect())
    }
}

// ---------------------------------------------------------------- NIfTI-1

struct HeaderReader<'a> {
    b: &'a [u8],
    be: bool,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let a = [self.b[off], self.b[off + 1]];
        if self.be { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    }
    fn f32(&self, off: usize) -> f32 {
        let a = [self.b[off], self.b[off + 1], self.b[off + 2], self.b[off + 3]];
        if self.be { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
    }
}

fn decode_nifti(bytes: &[u8]) -> Result<(Decoded, (f32, f32))> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::MalformedHeader(format!("file is only {} bytes", bytes.len())));
    }
    let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::MalformedHeader(format!("sizeof_hdr is {le}, expected 348"))),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::MalformedHeader(format!("magic {:?} is not \"n+1\"", &bytes[344..348])));
    }
    let h = HeaderReader { b: bytes, be: big_endian };
    let ndim = h.i16(40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("dim[0] = {ndim} not in 1..=4")));
    }
    let mut dim = [1usize; 5];
    for (i, d) in dim.iter_mut().enumerate().skip(1).take(ndim as usize) {
        let v = h.i16(40 + 2 * i);
        if v < 1 {
            return Err(Error::MalformedHeader(format!("dim[{i}] = {v}")));
        }
        *d = v as usize;
    }
    let dtype = DType::from_nifti_code(h.i16(70))?;
    let bitpix = h.i16(72);
    if bitpix as usize != dtype.size() * 8 {
        return Err(Error::MalformedHeader(format!("bitpix {bitpix} does not match datatype")));
    }
    let mut spacing = [1.0f64; 3];
    for (axis, pix) in [(2usize, 1usize), (1, 2), (0, 3)] {
        if pix as i16 <= ndim {
            let s = h.f32(76 + 4 * pix).abs() as f64;
            spacing[axis] = if s > 0.0 { s } else { 1.0 };
        }
    }
    let vox_offset = h.f32(108);
    if !(vox_offset >= NIFTI_HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let slope = h.f32(112);
    let inter = h.f32(116);
    let qform = h.i16(252);
    let sform = h.i16(254);
    let origin = if qform > 0 {
        [h.f32(276) as f64, h.f32(272) as f64, h.f32(268) as f64]
    } else if sform > 0 {
        [h.f32(324) as f64, h.f32(308) as f64, h.f32(292) as f64]
    } else {
        [0.0; 3]
    };
    let num_classes = if h.i16(68) == NIFTI_INTENT_LABEL {
        let p1 = h.f32(56);
        (p1 >= 1.0 && p1.fract() == 0.0 && p1 <= u16::MAX as f32).then_some(p1 as u16)
    } else {
        None
    };
    let dims = [dim[3], dim[2], dim[1]];
    let channels = dim[4];
    let grid = Grid::with_origin(dims, spacing, origin)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let count = grid.len() * channels;
    let values = Values::decode(&bytes[vox_offset as usize..], dtype, count, big_endian)?;
    Ok((Decoded { grid, channels, values, num_classes, patch_origin: None }, (slope, inter)))
}

fn encode_nifti(grid: &Grid, channels: usize, values: &Values, num_classes: Option<u16>) -> Result<Vec<u8>> {
    let mut dims5 = [grid.dims[2], grid.dims[1], grid.dims[0], channels];
    if dims5.iter().any(|&d| d > i16::MAX as usize) {
        return arg_err("dimension exceeds NIfTI-1 limit");
    }
    let ndim: i16 = if channels > 1 { 4 } else { 3 };
    if channels == 1 {
        dims5[3] = 1;
    }
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut Vec<u8>, off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, NIFTI_HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, ndim);
    for (i, d) in dims5.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, *d as i16);
    }
    for i in 5..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    if let Some(n) = num_classes {
        put_f32(&mut h, 56, n as f32);
        put_i16(&mut h, 68, NIFTI_INTENT_LABEL);
    }
    let dtype = values.dtype();
    put_i16(&mut h, 70, dtype.nifti_code());
    put_i16(&mut h, 72, (dtype.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    put_f32(&mut h, 80, grid.spacing[2] as f32);
    put_f32(&mut h, 84, grid.spacing[1] as f32);
    put_f32(&mut h, 88, grid.spacing[0] as f32);
    put_f32(&mut h, 92, 1.0);
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 0.0);
    h[123] = 2; // millimetres
    let descrip = b"voxgeo";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 268, grid.origin[2] as f32);
    put_f32(&mut h, 272, grid.origin[1] as f32);
    put_f32(&mut h, 276, grid.origin[0] as f32);
    let srow = [
        [grid.spacing[2], 0.0, 0.0, grid.origin[2]],
        [0.0, grid.spacing[1], 0.0, grid.origin[1]],
        [0.0, 0.0, grid.spacing[0], grid.origin[0]],
    ];
    for (r, row) in srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, *v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    values.encode_le(&mut h);
    Ok(h)
}

// ---------------------------------------------------------------- raw

fn read_raw(path: &Path) -> Result<(Decoded, VolumeKind)> {
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let grid = Grid::with_origin(side.dims, side.spacing, side.origin)
        .map_err(|e| Error::MalformedHeader(format!("sidecar: {e}")))?;
    let bytes = fs::read(path)?;
    let count = grid.len() * side.channels;
    if bytes.len() != count * side.dtype.size() {
        return Err(Error::Shape(format!(
            "raw file has {} bytes but sidecar dims {:?} x {} channels of {:?} need {}",
            bytes.len(),
            side.dims,
            side.channels,
            side.dtype,
            count * side.dtype.size()
        )));
    }
    let values = Values::decode(&bytes, side.dtype, count, false)?;
    Ok((
        Decoded {
            grid,
            channels: side.channels,
            values,
            num_classes: side.num_classes,
            patch_origin: side.patch_origin,
        },
        side.kind,
    ))
}

fn write_raw(path: &Path, grid: &Grid, channels: usize, values: &Values, kind: VolumeKind, extra: RawExtra) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * values.dtype().size());
    values.encode_le(&mut bytes);
    fs::write(path, bytes)?;
    let side = Sidecar {
        dims: grid.dims,
        channels,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype: values.dtype(),
        kind,
        num_classes: extra.num_classes,
        patch_origin: extra.patch_origin,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

#[derive(Default)]
struct RawExtra {
    num_classes: Option<u16>,
    patch_origin: Option<[usize; 3]>,
}

// ---------------------------------------------------------------- public API

fn decode_any(path: &Path) -> Result<Decoded> {
    if is_nifti(path) {
        let (mut dec, (slope, inter)) = decode_nifti(&fs::read(path)?)?;
        if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
            let v = std::mem::replace(&mut dec.values, Values::U8(Vec::new())).into_f32();
            dec.values = Values::F32(v.into_iter().map(|x| x * slope + inter).collect());
        }
        Ok(dec)
    } else {
        Ok(read_raw(path)?.0)
    }
}

/// Reads a volume, interpreting it as `kind`.
pub fn read_volume(path: &Path, kind: VolumeKind) -> Result<AnyVolume> {
    let dec = decode_any(path)?;
    match kind {
        VolumeKind::Scalar => {
            if dec.channels != 1 {
                return Err(Error::Shape(format!("scalar volume with {} channels", dec.channels)));
            }
            Ok(AnyVolume::Scalar(ScalarVolume::from_vec(dec.grid, dec.values.into_f32())?))
        }
        VolumeKind::Label => {
            if dec.channels != 1 {
                return Err(Error::Shape(format!("label volume with {} channels", dec.channels)));
            }
            let data = dec.values.into_labels()?;
            let observed = data.iter().copied().max().unwrap_or(0) + 1;
            let n = dec.num_classes.unwrap_or(observed).max(observed);
            Ok(AnyVolume::Label(LabelVolume::new(dec.grid, data, n)?))
        }
        VolumeKind::Prob | VolumeKind::Feature => {
            Ok(AnyVolume::Prob(ProbVolume::new(dec.grid, dec.channels, dec.values.into_f32())?))
        }
    }
}

/// Writes a volume; the encoding is chosen from the extension (`.nii` or raw).
pub fn write_volume(vol: &AnyVolume, path: &Path) -> Result<()> {
    let (grid, channels, values, kind, num_classes) = match vol {
        AnyVolume::Scalar(v) => (v.grid, 1, Values::F32(v.data.clone()), VolumeKind::Scalar, None),
        AnyVolume::Label(v) => (v.grid, 1, label_values(v), VolumeKind::Label, Some(v.num_classes)),
        AnyVolume::Prob(v) => (v.grid, v.channels, Values::F32(v.data.clone()), VolumeKind::Prob, None),
    };
    if is_nifti(path) {
        fs::write(path, encode_nifti(&grid, channels, &values, num_classes)?)?;
        Ok(())
    } else {
        write_raw(path, &grid, channels, &values, kind, RawExtra { num_classes, patch_origin: None })
    }
}

pub fn read_scalar(path: &Path) -> Result<ScalarVolume> {
    match read_volume(path, VolumeKind::Scalar)? {
        AnyVolume::Scalar(v) => Ok(v),
        _ => unreachable!(),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path, VolumeKind::Label)? {
        AnyVolume::Label(v) => Ok(v),
        _ => unreachable!(),
    }
}

pub fn read_prob(path: &Path) -> Result<ProbVolume> {
    match read_volume(path, VolumeKind::Prob)? {
        AnyVolume::Prob(v) => Ok(v),
        _ => unreachable!(),
    }
}

/// Writes a label volume, forcing the int16 encoding when `wide` is set.
pub fn write_labels_with(labels: &LabelVolume, path: &Path, wide: bool) -> Result<()> {
    let values = if wide {
        Values::I16(labels.data.iter().map(|&v| v as i16).collect())
    } else {
        label_values(labels)
    };
    if is_nifti(path) {
        fs::write(path, encode_nifti(&labels.grid, 1, &values, Some(labels.num_classes))?)?;
        Ok(())
    } else {
        let extra = RawExtra { num_classes: Some(labels.num_classes), patch_origin: None };
        write_raw(path, &labels.grid, 1, &values, VolumeKind::Label, extra)
    }
}

/// Feature maps are always raw float32 with a sidecar of kind `feature`.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let grid = Grid::unit(map.dims);
    write_raw(path, &grid, map.channels, &Values::F32(map.data.clone()), VolumeKind::Feature, RawExtra::default())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let dec = decode_any(path)?;
    FeatureMap::new(dec.channels, dec.grid.dims, dec.values.into_f32())
}

/// A probability patch tagged with its window origin, as consumed by stitching.
pub fn write_patch(prob: &ProbVolume, origin: [usize; 3], path: &Path) -> Result<()> {
    let extra = RawExtra { num_classes: None, patch_origin: Some(origin) };
    write_raw(path, &prob.grid, prob.channels, &Values::F32(prob.data.clone()), VolumeKind::Prob, extra)
}

pub fn read_patch(path: &Path) -> Result<([usize; 3], ProbVolume)> {
    let (dec, _) = read_raw(path)?;
    let origin = dec
        .patch_origin
        .ok_or_else(|| Error::MalformedHeader(format!("{} has no patch_origin", path.display())))?;
    Ok((origin, ProbVolume::new(dec.grid, dec.channels, dec.values.into_f32())?))
}
