//! Reading and writing arrays in the NumPy `.npy` format.
//!
//! Versions 1.0 and 2.0 are read; 1.0 is written (2.0 only when the header
//! would not fit a 16-bit length). Supported dtypes are little-endian
//! `f4`/`f8` for probabilities and gates and `u1`/`u2` for labels. Only
//! C-order arrays are accepted.
//!
//! Format reference: <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{GateWeights, LabelMap, ProbTensor, Shape, Strictness, UncertaintyMap};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl NpyData {
    fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
            NpyData::U8(_) => "|u1",
            NpyData::U16(_) => "<u2",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::U8(v) => v.len(),
            NpyData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values promoted to `f64`; `None` for integer arrays.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            NpyData::F32(v) => Some(v.iter().map(|&x| f64::from(x)).collect()),
            NpyData::F64(v) => Some(v.clone()),
            _ => None,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            NpyData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            NpyData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            NpyData::U8(v) => v.clone(),
            NpyData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(NpyArray { shape, data })
    }

    fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::ShapeRankMismatch {
                expected: rank,
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let io = |e: std::io::Error| Error::io("<stream>", e);
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(|_| Error::BadMagic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version).map_err(io)?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b).map_err(io)?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            reader.read_exact(&mut b).map_err(io)?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::BadHeader(format!("unsupported format version {v}.{}", version[1]))),
    };
    let mut raw = vec![0u8; header_len];
    reader.read_exact(&mut raw).map_err(io)?;
    let text = std::str::from_utf8(&raw).map_err(|_| Error::BadHeader("header is not ASCII".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(Error::FortranOrderUnsupported);
    }

    let count: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io)?;
    let item = match header.descr.as_str() {
        "<f4" => 4,
        "<f8" => 8,
        "|u1" | "<u1" => 1,
        "<u2" => 2,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    if payload.len() != count * item {
        return Err(Error::BadHeader(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * item
        )));
    }
    let data = match item {
        4 => NpyData::F32(payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        8 => NpyData::F64(payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
        1 => NpyData::U8(payload),
        _ => NpyData::U16(payload.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap())).collect()),
    };
    Ok(NpyArray {
        shape: header.shape,
        data,
    })
}

/// Parses the Python dict literal of an `.npy` header.
fn parse_header(text: &str) -> Result<Header> {
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| Error::BadHeader(format!("not a dict: {text:?}")))?;

    let value_of = |key: &str| -> Result<&str> {
        let pat_single = format!("'{key}'");
        let pat_double = format!("\"{key}\"");
        let start = body
            .find(&pat_single)
            .map(|i| i + pat_single.len())
            .or_else(|| body.find(&pat_double).map(|i| i + pat_double.len()))
            .ok_or_else(|| Error::BadHeader(format!("missing key {key:?}")))?;
        let rest = body[start..]
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| Error::BadHeader(format!("no value for {key:?}")))?
            .trim_start();
        Ok(rest)
    };

    let descr_raw = value_of("descr")?;
    let quote = descr_raw
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::UnsupportedDtype(descr_raw.chars().take(16).collect()))?;
    let descr_end = descr_raw[1..]
        .find(quote)
        .ok_or_else(|| Error::BadHeader("unterminated descr".into()))?;
    let descr = descr_raw[1..1 + descr_end].to_string();

    let fortran_raw = value_of("fortran_order")?;
    let fortran_order = if fortran_raw.starts_with("True") {
        true
    } else if fortran_raw.starts_with("False") {
        false
    } else {
        return Err(Error::BadHeader("fortran_order must be True or False".into()));
    };

    let shape_raw = value_of("shape")?;
    let inner = shape_raw
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::BadHeader("shape must be a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::BadHeader(format!("bad dimension {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header {
        descr,
        fortran_order,
        shape,
    })
}

fn header_bytes(array: &NpyArray) -> Vec<u8> {
    let dims = match array.shape.as_slice() {
        [d] => format!("({d},)"),
        dims => format!("({})", dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
    };
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}",
        array.data.descr()
    );
    // magic + version + length field + dict + padding + '\n' is a multiple of 64
    let (version, len_field) = if 10 + dict.len() < u16::MAX as usize {
        (1u8, 2usize)
    } else {
        (2u8, 4usize)
    };
    let unpadded = MAGIC.len() + 2 + len_field + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + padding + 1;

    let mut out = Vec::with_capacity(unpadded + padding);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[version, 0]);
    if version == 1 {
        out.extend_from_slice(&(header_len as u16).to_le_bytes());
    } else {
        out.extend_from_slice(&(header_len as u32).to_le_bytes());
    }
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padding));
    out.push(b'\n');
    out
}

pub fn write_npy<W: Write>(writer: &mut W, array: &NpyArray) -> Result<()> {
    if array.data.is_empty() {
        return Err(Error::InvalidSpec("refusing to write an empty array".into()));
    }
    let io = |e: std::io::Error| Error::io("<stream>", e);
    writer.write_all(&header_bytes(array)).map_err(io)?;
    writer.write_all(&array.data.to_le_bytes()).map_err(io)?;
    Ok(())
}

pub fn load_array(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_npy(&mut BufReader::new(file)).map_err(|e| with_path(e, path))
}

pub fn save_array(array: &NpyArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if array.data.is_empty() {
        return Err(Error::InvalidSpec("refusing to write an empty array".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_npy(&mut writer, array).map_err(|e| with_path(e, path))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { message, .. } => Error::Io {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}

/// Storage precision for probability tensors written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatPrecision {
    #[default]
    F32,
    F64,
}

pub fn prob_tensor_to_array(tensor: &ProbTensor, precision: FloatPrecision) -> NpyArray {
    let s = tensor.shape();
    let data = match precision {
        FloatPrecision::F32 => NpyData::F32(tensor.to_f32()),
        FloatPrecision::F64 => NpyData::F64(tensor.as_slice().to_vec()),
    };
    NpyArray {
        shape: vec![s.height, s.width, s.num_classes],
        data,
    }
}

pub fn prob_tensor_from_array(array: &NpyArray, strictness: Strictness) -> Result<ProbTensor> {
    array.expect_rank(3)?;
    let values = array
        .data
        .to_f64()
        .ok_or_else(|| Error::UnsupportedDtype(array.data.descr().into()))?;
    let shape = Shape::new(array.shape[0], array.shape[1], array.shape[2]);
    ProbTensor::checked(shape, values, strictness)
}

pub fn load_prob_tensor(path: impl AsRef<Path>, strictness: Strictness) -> Result<ProbTensor> {
    prob_tensor_from_array(&load_array(path)?, strictness)
}

pub fn save_prob_tensor(tensor: &ProbTensor, path: impl AsRef<Path>, precision: FloatPrecision) -> Result<()> {
    save_array(&prob_tensor_to_array(tensor, precision), path)
}

pub fn labels_from_array(array: &NpyArray, ignore_index: u32) -> Result<LabelMap> {
    array.expect_rank(2)?;
    let labels = match &array.data {
        NpyData::U8(v) => v.iter().map(|&l| u32::from(l)).collect(),
        NpyData::U16(v) => v.iter().map(|&l| u32::from(l)).collect(),
        other => return Err(Error::UnsupportedDtype(other.descr().into())),
    };
    LabelMap::new(array.shape[0], array.shape[1], labels, ignore_index)
}

/// Labels as `u8` when every value fits, `u16` otherwise.
pub fn labels_to_array(labels: &LabelMap) -> Result<NpyArray> {
    let values = labels.as_slice();
    let data = if values.iter().all(|&l| l <= u32::from(u8::MAX)) {
        NpyData::U8(values.iter().map(|&l| l as u8).collect())
    } else if values.iter().all(|&l| l <= u32::from(u16::MAX)) {
        NpyData::U16(values.iter().map(|&l| l as u16).collect())
    } else {
        return Err(Error::UnsupportedDtype("labels above 65535".into()));
    };
    Ok(NpyArray {
        shape: vec![labels.height(), labels.width()],
        data,
    })
}

pub fn load_labels(path: impl AsRef<Path>, ignore_index: u32) -> Result<LabelMap> {
    labels_from_array(&load_array(path)?, ignore_index)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    save_array(&labels_to_array(labels)?, path)
}

/// Rank 1 arrays are simple gates, rank 2 (`N x C`) arrays classwise gates.
pub fn gate_from_array(array: &NpyArray) -> Result<GateWeights> {
    let values = array
        .data
        .to_f64()
        .ok_or_else(|| Error::UnsupportedDtype(array.data.descr().into()))?;
    match array.shape.as_slice() {
        [_] => GateWeights::simple(values),
        [n, c] => GateWeights::classwise(*n, *c, values),
        _ => Err(Error::ShapeRankMismatch {
            expected: 1,
            actual: array.shape.clone(),
        }),
    }
}

pub fn gate_to_array(gate: &GateWeights) -> NpyArray {
    let shape = match gate {
        GateWeights::Simple(w) => vec![w.len()],
        GateWeights::Classwise {
            num_experts,
            num_classes,
            ..
        } => vec![*num_experts, *num_classes],
    };
    NpyArray {
        shape,
        data: NpyData::F64(gate.values().to_vec()),
    }
}

pub fn load_gate(path: impl AsRef<Path>) -> Result<GateWeights> {
    gate_from_array(&load_array(path)?)
}

pub fn save_gate(gate: &GateWeights, path: impl AsRef<Path>) -> Result<()> {
    save_array(&gate_to_array(gate), path)
}

pub fn save_uncertainty_map(map: &UncertaintyMap, path: impl AsRef<Path>) -> Result<()> {
    save_array(
        &NpyArray {
            shape: vec![map.height, map.width],
            data: NpyData::F64(map.values.clone()),
        },
        path,
    )
}
