//! Versioned binary container for named, typed, shaped arrays.
//!
//! Every artifact the pipeline persists (head templates, coefficient
//! records, masks, network checkpoints) goes through this type. On disk it is
//! a safetensors file: an 8-byte header length, a JSON header describing each
//! array's element type, shape and byte range, then the raw little-endian
//! payload. The header's metadata (one JSON entry) always carries `format`, `version`
//! and `kind` so a reader can reject foreign or future files before touching data.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "facedit-container";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "facedit";

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F64,
    F32,
    I64,
    U8,
}

impl ElementType {
    fn dtype(self) -> Dtype {
        match self {
            ElementType::F64 => Dtype::F64,
            ElementType::F32 => Dtype::F32,
            ElementType::I64 => Dtype::I64,
            ElementType::U8 => Dtype::U8,
        }
    }

    fn from_dtype(d: Dtype) -> Result<Self> {
        Ok(match d {
            Dtype::F64 => ElementType::F64,
            Dtype::F32 => ElementType::F32,
            Dtype::I64 => ElementType::I64,
            Dtype::U8 => ElementType::U8,
            other => return Err(Error::Container(format!("unsupported element type {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    ty: ElementType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// An in-memory container. Arrays are kept sorted by name, so serialization is
/// byte-for-byte deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    kind: String,
    metadata: BTreeMap<String, String>,
    arrays: BTreeMap<String, Entry>,
}

macro_rules! typed_access {
    ($put:ident, $get:ident, $t:ty, $ty:expr, $n:expr) => {
        pub fn $put(&mut self, name: &str, shape: &[usize], values: &[$t]) -> Result<()> {
            let expected: usize = shape.iter().product();
            if expected != values.len() {
                return Err(Error::Container(format!(
                    "array `{name}`: shape {shape:?} holds {expected} values, got {}",
                    values.len()
                )));
            }
            let mut bytes = Vec::with_capacity(values.len() * $n);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            self.arrays.insert(
                name.to_string(),
                Entry {
                    ty: $ty,
                    shape: shape.to_vec(),
                    bytes,
                },
            );
            Ok(())
        }

        pub fn $get(&self, name: &str) -> Result<(Vec<usize>, Vec<$t>)> {
            let e = self.entry(name)?;
            if e.ty != $ty {
                return Err(Error::Container(format!(
                    "array `{name}` has element type {:?}, requested {:?}",
                    e.ty, $ty
                )));
            }
            let values = e
                .bytes
                .chunks_exact($n)
                .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk width")))
                .collect();
            Ok((e.shape.clone(), values))
        }
    };
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            metadata: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.entry(name)?.shape)
    }

    pub fn element_type(&self, name: &str) -> Result<ElementType> {
        Ok(self.entry(name)?.ty)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing array `{name}` in `{}` container", self.kind)))
    }

    typed_access!(put_f64, get_f64, f64, ElementType::F64, 8);
    typed_access!(put_f32, get_f32, f32, ElementType::F32, 4);
    typed_access!(put_i64, get_i64, i64, ElementType::I64, 8);
    typed_access!(put_u8, get_u8, u8, ElementType::U8, 1);

    /// Reads a scalar or vector stored as f64.
    pub fn get_f64_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_f64(name)?.1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // safetensors keeps metadata in a HashMap, whose iteration order is
        // random; a single sorted JSON entry keeps the bytes reproducible
        let mut all = self.metadata.clone();
        all.insert("format".into(), FORMAT_TAG.into());
        all.insert("version".into(), FORMAT_VERSION.to_string());
        all.insert("kind".into(), self.kind.clone());
        let encoded = serde_json::to_string(&all).map_err(|e| Error::Container(e.to_string()))?;
        let info = HashMap::from([(HEADER_KEY.to_string(), encoded)]);
        let views = self
            .arrays
            .iter()
            .map(|(name, e)| {
                TensorView::new(e.ty.dtype(), e.shape.clone(), &e.bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|err| Error::Container(err.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(info)).map_err(|e| Error::Container(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = safetensors::SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Container(e.to_string()))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Container(e.to_string()))?;
        let info: BTreeMap<String, String> = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| Error::Container("missing header metadata".into()))?;
        match info.get("format") {
            Some(f) if f == FORMAT_TAG => {}
            other => {
                return Err(Error::Container(format!(
                    "not a {FORMAT_TAG} file (format tag {other:?})"
                )))
            }
        }
        let version: u32 = info
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Container("missing or malformed version".into()))?;
        if version > FORMAT_VERSION {
            return Err(Error::Container(format!(
                "container version {version} is newer than supported version {FORMAT_VERSION}"
            )));
        }
        let kind = info
            .get("kind")
            .cloned()
            .ok_or_else(|| Error::Container("missing kind".into()))?;
        let metadata = info
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "format" | "version" | "kind"))
            .collect();
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            arrays.insert(
                name,
                Entry {
                    ty: ElementType::from_dtype(view.dtype())?,
                    shape: view.shape().to_vec(),
                    bytes: view.data().to_vec(),
                },
            );
        }
        Ok(Self {
            kind,
            metadata,
            arrays,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Reads a container and checks that it holds the expected kind.
    pub fn read_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let c = Self::read(path.as_ref())?;
        if c.kind != kind {
            return Err(Error::Container(format!(
                "{} holds a `{}` container, expected `{kind}`",
                path.as_ref().display(),
                c.kind
            )));
        }
        Ok(c)
    }
}
