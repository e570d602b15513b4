//! Named parameter collections and their on-disk format.
//!
//! A [`ParamSet`] is an ordered map from [`LayerId`] to [`Tensor`]. On disk it
//! is a flat little-endian blob plus a JSON manifest giving each entry's byte
//! offset, shape and dtype.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    /// Backbone segment, 1-based.
    Segment(u32),
    /// Exit head, 1-based.
    Exit(u32),
    /// Predictor network `head` of hypernetwork `net` (net `t` maps segment
    /// `t` to `t + 1`).
    Hyper { net: u32, head: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ConvW,
    ConvB,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    FcW,
    FcB,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::ConvW,
        Role::ConvB,
        Role::BnScale,
        Role::BnShift,
        Role::BnMean,
        Role::BnVar,
        Role::FcW,
        Role::FcB,
    ];

    /// Running statistics are state, not trainable parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, Role::BnMean | Role::BnVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ConvW => "conv_w",
            Role::ConvB => "conv_b",
            Role::BnScale => "bn_scale",
            Role::BnShift => "bn_shift",
            Role::BnMean => "bn_mean",
            Role::BnVar => "bn_var",
            Role::FcW => "fc_w",
            Role::FcB => "fc_b",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub scope: Scope,
    /// Position of the layer inside its scope.
    pub index: u32,
    pub role: Role,
}

impl LayerId {
    pub fn new(scope: Scope, index: usize, role: Role) -> Self {
        Self {
            scope,
            index: index as u32,
            role,
        }
    }

    pub fn segment(&self) -> Option<usize> {
        match self.scope {
            Scope::Segment(s) => Some(s as usize),
            _ => None,
        }
    }

    pub fn exit(&self) -> Option<usize> {
        match self.scope {
            Scope::Exit(e) => Some(e as usize),
            _ => None,
        }
    }

    pub fn with_role(self, role: Role) -> Self {
        Self { role, ..self }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scope {
            Scope::Segment(s) => write!(f, "seg{s}.{}.{}", self.index, self.role.as_str()),
            Scope::Exit(e) => write!(f, "exit{e}.{}.{}", self.index, self.role.as_str()),
            Scope::Hyper { net, head } => {
                write!(f, "hn{net}.{head}.{}.{}", self.index, self.role.as_str())
            }
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed layer id {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        let role_of = |r: &str| {
            Role::ALL
                .into_iter()
                .find(|role| role.as_str() == r)
                .ok_or_else(bad)
        };
        let num = |x: &str| x.parse::<u32>().map_err(|_| bad());
        match parts[..] {
            [scope, index, role] => {
                let scope = if let Some(n) = scope.strip_prefix("seg") {
                    Scope::Segment(num(n)?)
                } else if let Some(n) = scope.strip_prefix("exit") {
                    Scope::Exit(num(n)?)
                } else {
                    return Err(bad());
                };
                Ok(LayerId {
                    scope,
                    index: num(index)?,
                    role: role_of(role)?,
                })
            }
            [net, head, index, role] => {
                let net = num(net.strip_prefix("hn").ok_or_else(bad)?)?;
                Ok(LayerId {
                    scope: Scope::Hyper {
                        net,
                        head: num(head)?,
                    },
                    index: num(index)?,
                    role: role_of(role)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<LayerId, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: LayerId, t: Tensor) -> Option<Tensor> {
        self.map.insert(id, t)
    }

    pub fn get(&self, id: &LayerId) -> Option<&Tensor> {
        self.map.get(id)
    }

    pub fn get_mut(&mut self, id: &LayerId) -> Option<&mut Tensor> {
        self.map.get_mut(id)
    }

    pub fn require(&self, id: &LayerId) -> Result<&Tensor> {
        self.map.get(id).ok_or(Error::MissingParam(*id))
    }

    pub fn remove(&mut self, id: &LayerId) -> Option<Tensor> {
        self.map.remove(id)
    }

    pub fn contains(&self, id: &LayerId) -> bool {
        self.map.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &LayerId> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&LayerId, &mut Tensor)> {
        self.map.iter_mut()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Keeps only the entries whose id satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&LayerId) -> bool) -> ParamSet {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    /// Overwrites (or adds) every entry of `other`.
    pub fn merge_from(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.map.insert(*k, v.clone());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(LayerId, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (LayerId, Tensor)>>(iter: I) -> Self {
        ParamSet {
            map: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for ParamSet {
    type Item = (LayerId, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<LayerId, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.map.into_iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::InvalidArgument(format!("unknown precision {s:?}"))),
        }
    }
}

pub const MANIFEST_FORMAT: &str = "paramset-blob/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: LayerId,
    /// Byte offset into the blob.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub dtype: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub total_bytes: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Shape-only description of a parameter set, for footprint accounting
/// without materializing tensors.
pub fn manifest_for_shapes<'a>(
    shapes: impl IntoIterator<Item = (LayerId, &'a [usize])>,
    precision: Precision,
    blob_name: &str,
) -> Manifest {
    let mut offset = 0;
    let entries = shapes
        .into_iter()
        .map(|(id, shape)| {
            let e = ManifestEntry {
                id,
                offset,
                shape: shape.to_vec(),
                dtype: precision,
            };
            offset += shape.iter().product::<usize>() * precision.width();
            e
        })
        .collect();
    Manifest {
        format: MANIFEST_FORMAT.to_string(),
        blob: blob_name.to_string(),
        total_bytes: offset,
        entries,
    }
}

impl ParamSet {
    pub fn manifest(&self, precision: Precision, blob_name: &str) -> Manifest {
        manifest_for_shapes(
            self.iter().map(|(id, t)| (*id, t.shape())),
            precision,
            blob_name,
        )
    }

    pub fn to_blob(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * precision.width());
        for t in self.map.values() {
            for &v in t.data() {
                match precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str, precision: Precision) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob_name = format!("{stem}.bin");
        let manifest = self.manifest(precision, &blob_name);
        let blob_path = dir.join(&blob_name);
        fs::write(&blob_path, self.to_blob(precision)).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
            context: "manifest".into(),
            source,
        })?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<ParamSet> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: manifest_path.display().to_string(),
            source,
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported manifest format {:?}",
                manifest_path.display(),
                manifest.format
            )));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut out = ParamSet::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let w = e.dtype.width();
            let end = e.offset + n * w;
            if end > blob.len() {
                return Err(Error::Truncated {
                    path: blob_path,
                    missing: end - blob.len(),
                });
            }
            let bytes = &blob[e.offset..end];
            let data: Vec<f64> = match e.dtype {
                Precision::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Precision::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            out.insert(e.id, Tensor::new(e.shape, data)?);
        }
        Ok(out)
    }
}
