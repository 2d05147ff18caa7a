//! The `.ntf` tensor file: one JSON header line, then the raw little-endian
//! payload.
//!
//! ```text
//! {"dtype":"f32","shape":[2,2],"order":"row-major","byte_order":"little"}\n
//! <product(shape) * sizeof(dtype) bytes>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::image::{Image, Mask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
    order: String,
    byte_order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NtfData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtfTensor {
    pub shape: Vec<usize>,
    pub data: NtfData,
}

impl NtfTensor {
    pub fn dtype(&self) -> DType {
        match self.data {
            NtfData::F32(_) => DType::F32,
            NtfData::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            NtfData::F32(v) => v.len(),
            NtfData::U8(v) => v.len(),
        }
    }
}

pub fn encode(tensor: &NtfTensor) -> Result<Vec<u8>> {
    let count: usize = tensor.shape.iter().product();
    if tensor.shape.is_empty() || count != tensor.len() {
        return Err(Error::Domain(format!(
            "shape {:?} does not match {} values",
            tensor.shape,
            tensor.len()
        )));
    }
    let header = Header {
        dtype: tensor.dtype(),
        shape: tensor.shape.clone(),
        order: "row-major".into(),
        byte_order: "little".into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    match &tensor.data {
        NtfData::F32(values) => {
            out.reserve(values.len() * 4);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        NtfData::U8(values) => out.extend_from_slice(values),
    }
    Ok(out)
}

/// Parses an in-memory `.ntf` file; `origin` is only used in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<NtfTensor> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, "missing header terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    if header.order != "row-major" {
        return Err(Error::format(origin, format!("unsupported order {:?}", header.order)));
    }
    if header.byte_order != "little" {
        return Err(Error::format(
            origin,
            format!("unsupported byte order {:?}", header.byte_order),
        ));
    }
    if header.shape.is_empty() {
        return Err(Error::format(origin, "empty shape"));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(origin, "shape overflows"))?;
    let payload = &bytes[newline + 1..];
    let expected = count * header.dtype.size();
    if payload.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "header declares {count} {:?} values ({expected} bytes), payload has {} bytes",
                header.dtype,
                payload.len()
            ),
        ));
    }
    let data = match header.dtype {
        DType::F32 => NtfData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U8 => NtfData::U8(payload.to_vec()),
    };
    Ok(NtfTensor {
        shape: header.shape,
        data,
    })
}

pub fn write_tensor(path: &Path, tensor: &NtfTensor) -> Result<()> {
    fsutil::write_atomic(path, &encode(tensor)?)
}

pub fn read_tensor(path: &Path) -> Result<NtfTensor> {
    decode(&fsutil::read(path)?, path)
}

pub fn write_f32(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensor(
        path,
        &NtfTensor {
            shape: tensor.shape().to_vec(),
            data: NtfData::F32(tensor.data().to_vec()),
        },
    )
}

pub fn read_f32(path: &Path) -> Result<Tensor> {
    let t = read_tensor(path)?;
    match t.data {
        NtfData::F32(values) => Tensor::new(t.shape, values),
        NtfData::U8(_) => Err(Error::format(path, "expected f32 tensor, found u8")),
    }
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_tensor(
        path,
        &NtfTensor {
            shape: vec![image.height, image.width],
            data: NtfData::F32(image.data.clone()),
        },
    )
}

pub fn read_image(path: &Path) -> Result<Image> {
    let t = read_f32(path)?;
    match t.shape() {
        &[h, w] => Image::from_vec(h, w, t.into_data()),
        other => Err(Error::format(path, format!("expected 2-D image, got shape {other:?}"))),
    }
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_tensor(
        path,
        &NtfTensor {
            shape: vec![mask.height, mask.width],
            data: NtfData::U8(mask.data.clone()),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let t = read_tensor(path)?;
    match (t.shape.as_slice(), t.data) {
        (&[h, w], NtfData::U8(values)) => Mask::from_vec(h, w, values),
        (shape, _) => Err(Error::format(
            path,
            format!("expected 2-D u8 mask, got shape {shape:?}"),
        )),
    }
}
