//! SMVF: a minimal voxel container. Layout is the magic `SMVF`, a
//! little-endian `u32` header length, a UTF-8 JSON header and the raw
//! little-endian payload (row-major, last axis fastest, channel-last).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use synreg_core::{GridMeta, LabelMap, ScalarField, VectorField};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SMVF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Scalar,
    Labels,
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub dtype: Dtype,
    pub spacing: Vec<f64>,
    pub kind: Kind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

/// A decoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Smvf {
    pub header: Header,
    pub payload: Payload,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Format(msg.into())
}

fn header_for(meta: &GridMeta, channels: usize, dtype: Dtype, kind: Kind) -> Header {
    Header {
        dims: meta.dims().to_vec(),
        channels,
        dtype,
        spacing: meta.spacing().to_vec(),
        kind,
    }
}

impl Smvf {
    pub fn from_scalar(f: &ScalarField) -> Self {
        Smvf {
            header: header_for(f.meta(), f.channels(), Dtype::F32, Kind::Scalar),
            payload: Payload::F32(f.data().to_vec()),
        }
    }

    pub fn from_vector(f: &VectorField) -> Self {
        Smvf {
            header: header_for(f.meta(), f.meta().ndim(), Dtype::F32, Kind::Vector),
            payload: Payload::F32(f.data().to_vec()),
        }
    }

    pub fn from_labels(s: &LabelMap) -> Result<Self> {
        let data = s
            .data()
            .iter()
            .map(|&l| i32::try_from(l).map_err(|_| bad(format!("label {l} does not fit in i32"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Smvf {
            header: header_for(s.meta(), 1, Dtype::I32, Kind::Labels),
            payload: Payload::I32(data),
        })
    }

    pub fn meta(&self) -> Result<GridMeta> {
        GridMeta::with_spacing(&self.header.dims, &self.header.spacing)
            .map_err(|e| bad(e.to_string()))
    }

    fn f32_data(&self, want: Kind) -> Result<Vec<f32>> {
        match (&self.payload, self.header.kind == want) {
            (Payload::F32(d), true) => Ok(d.clone()),
            _ => Err(bad(format!(
                "expected a {want:?} file, found {:?}",
                self.header.kind
            ))),
        }
    }

    pub fn to_scalar(&self) -> Result<ScalarField> {
        ScalarField::new(
            self.meta()?,
            self.header.channels,
            self.f32_data(Kind::Scalar)?,
        )
        .map_err(|e| bad(e.to_string()))
    }

    pub fn to_vector(&self) -> Result<VectorField> {
        VectorField::new(self.meta()?, self.f32_data(Kind::Vector)?).map_err(|e| bad(e.to_string()))
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        let Payload::I32(d) = &self.payload else {
            return Err(bad(format!(
                "expected a Labels file, found {:?}",
                self.header.kind
            )));
        };
        let data = d
            .iter()
            .map(|&l| u32::try_from(l).map_err(|_| bad(format!("negative label {l}"))))
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(self.meta()?, data).map_err(|e| bad(e.to_string()))
    }

    /// Payload as `f64` regardless of dtype.
    pub fn values(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(d) => d.iter().map(|&v| v as f64).collect(),
            Payload::I32(d) => d.iter().map(|&v| v as f64).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        self.meta()?;
        let expected = match h.kind {
            Kind::Labels => Dtype::I32,
            Kind::Scalar | Kind::Vector => Dtype::F32,
        };
        if h.dtype != expected {
            return Err(bad(format!("{:?} data must be {expected:?}", h.kind)));
        }
        if h.channels == 0
            || (h.kind == Kind::Labels && h.channels != 1)
            || (h.kind == Kind::Vector && h.channels != h.dims.len())
        {
            return Err(bad(format!(
                "{} channels invalid for {:?}",
                h.channels, h.kind
            )));
        }
        let n = h.dims.iter().product::<usize>() * h.channels;
        let len = match &self.payload {
            Payload::F32(d) => d.len(),
            Payload::I32(d) => d.len(),
        };
        if len != n {
            return Err(bad(format!(
                "payload holds {len} values, header implies {n}"
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header).map_err(|e| bad(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        let mut bytes = Vec::new();
        match &self.payload {
            Payload::F32(d) => d
                .iter()
                .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes())),
            Payload::I32(d) => d
                .iter()
                .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes())),
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        if buf.len() < 8 || &buf[..4] != MAGIC {
            return Err(bad("missing SMVF magic"));
        }
        let hlen = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        let body = buf
            .get(8..8 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let raw = &buf[8 + hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of 4-byte values"));
        }
        let words = raw
            .chunks_exact(4)
            .map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
        let payload = match header.dtype {
            Dtype::F32 => Payload::F32(words.map(f32::from_le_bytes).collect()),
            Dtype::I32 => Payload::I32(words.map(i32::from_le_bytes).collect()),
        };
        let s = Smvf { header, payload };
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Smvf::read(std::io::BufReader::new(file))
    }
}
