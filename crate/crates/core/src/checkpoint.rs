//! Named-array container: a text manifest followed by flat little-endian
//! float payloads, in one file.
//!
//! ```text
//! arc1\n
//! meta <key> <value>\n            (any number, order preserved)
//! array <name> <f32|f64> <ndim> <d0> <d1> ...\n
//! data\n
//! <raw little-endian array payloads, in manifest order>
//! ```
//!
//! Save → load → save is byte-identical: the manifest serialization is
//! canonical and payloads are stored verbatim.

use crate::error::{Error, Result};
use crate::nn::ArrayVisit;
use crate::num::Real;
use ndarray::ArrayD;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(&self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }
}

/// Real scalars know their container dtype.
pub trait ContainerScalar: Real {
    const DTYPE: Dtype;
    fn pack(values: &[Self]) -> ArrayData;
    fn unpack(data: &ArrayData) -> Option<Vec<Self>>;
}

impl ContainerScalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn pack(values: &[Self]) -> ArrayData {
        ArrayData::F32(values.to_vec())
    }
    fn unpack(data: &ArrayData) -> Option<Vec<Self>> {
        match data {
            ArrayData::F32(v) => Some(v.clone()),
            ArrayData::F64(_) => None,
        }
    }
}

impl ContainerScalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn pack(values: &[Self]) -> ArrayData {
        ArrayData::F64(values.to_vec())
    }
    fn unpack(data: &ArrayData) -> Option<Vec<Self>> {
        match data {
            ArrayData::F64(v) => Some(v.clone()),
            ArrayData::F32(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Container {
    meta: Vec<(String, String)>,
    arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))
    }

    pub fn push_array<F: ContainerScalar>(&mut self, name: &str, shape: &[usize], values: &[F]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays
            .push((name.to_string(), shape.to_vec(), F::pack(values)));
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get_array<F: ContainerScalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<F>)> {
        let (_, shape, data) = self
            .arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        let values = F::unpack(data).ok_or_else(|| {
            Error::Checkpoint(format!(
                "array `{name}` has dtype {}, expected {}",
                data.dtype().name(),
                F::DTYPE.name()
            ))
        })?;
        Ok((shape.clone(), values))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"arc1\n");
        for (k, v) in &self.meta {
            out.extend_from_slice(format!("meta {k} {v}\n").as_bytes());
        }
        for (name, shape, data) in &self.arrays {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(
                format!(
                    "array {name} {} {} {}\n",
                    data.dtype().name(),
                    shape.len(),
                    dims.join(" ")
                )
                .as_bytes(),
            );
        }
        out.extend_from_slice(b"data\n");
        for (_, _, data) in &self.arrays {
            match data {
                ArrayData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?
            .read_to_end(&mut bytes)?;
        // split manifest (text lines up to and including "data\n") from payload
        let mut pos = 0usize;
        let mut lines: Vec<String> = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::Checkpoint("manifest is not utf-8".into()))?
                .to_string();
            pos += nl + 1;
            if line == "data" {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some("arc1") {
            return Err(Error::Checkpoint("bad magic, expected `arc1`".into()));
        }
        let mut c = Container::new();
        let mut specs: Vec<(String, Vec<usize>, Dtype)> = Vec::new();
        for line in &lines[1..] {
            let mut parts = line.split(' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts
                        .next()
                        .ok_or_else(|| Error::Checkpoint("meta without key".into()))?;
                    let v: Vec<&str> = parts.collect();
                    c.meta.push((k.to_string(), v.join(" ")));
                }
                Some("array") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::Checkpoint("array without name".into()))?;
                    let dtype = Dtype::parse(
                        parts
                            .next()
                            .ok_or_else(|| Error::Checkpoint("array without dtype".into()))?,
                    )?;
                    let ndim: usize = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Checkpoint("array without rank".into()))?;
                    let dims: Vec<usize> = parts
                        .map(|t| {
                            t.parse()
                                .map_err(|_| Error::Checkpoint(format!("bad dim `{t}`")))
                        })
                        .collect::<Result<_>>()?;
                    if dims.len() != ndim {
                        return Err(Error::Checkpoint(format!(
                            "array `{name}`: rank {ndim} but {} dims",
                            dims.len()
                        )));
                    }
                    specs.push((name.to_string(), dims, dtype));
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unexpected manifest line `{other:?}`"
                    )))
                }
            }
        }
        for (name, dims, dtype) in specs {
            let count: usize = dims.iter().product();
            let data = match dtype {
                Dtype::F32 => {
                    let nbytes = count * 4;
                    if pos + nbytes > bytes.len() {
                        return Err(Error::Checkpoint(format!("truncated payload at `{name}`")));
                    }
                    let mut v = Vec::with_capacity(count);
                    for chunk in bytes[pos..pos + nbytes].chunks_exact(4) {
                        v.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                    }
                    pos += nbytes;
                    ArrayData::F32(v)
                }
                Dtype::F64 => {
                    let nbytes = count * 8;
                    if pos + nbytes > bytes.len() {
                        return Err(Error::Checkpoint(format!("truncated payload at `{name}`")));
                    }
                    let mut v = Vec::with_capacity(count);
                    for chunk in bytes[pos..pos + nbytes].chunks_exact(8) {
                        v.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                    }
                    pos += nbytes;
                    ArrayData::F64(v)
                }
            };
            c.arrays.push((name, dims, data));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - pos
            )));
        }
        Ok(c)
    }
}

/// Pack every named array of a model under `prefix`.
pub fn pack<F: ContainerScalar, M: ArrayVisit<F>>(c: &mut Container, prefix: &str, model: &M) {
    model.visit(prefix, &mut |name, view| {
        let shape = view.shape().to_vec();
        let values: Vec<F> = view.iter().cloned().collect();
        c.push_array(&name, &shape, &values);
    });
}

/// Strictly restore every named array of a model from `prefix`: missing
/// arrays or shape mismatches are errors.
pub fn unpack<F: ContainerScalar, M: ArrayVisit<F>>(
    c: &Container,
    prefix: &str,
    model: &mut M,
) -> Result<()> {
    let mut table: HashMap<String, (Vec<usize>, Vec<F>)> = HashMap::new();
    for (name, shape, _) in &c.arrays {
        if name.starts_with(prefix) {
            let (s, v) = c.get_array::<F>(name)?;
            debug_assert_eq!(&s, shape);
            table.insert(name.clone(), (s, v));
        }
    }
    let mut failure: Option<Error> = None;
    model.visit_mut(prefix, &mut |name, mut view| {
        if failure.is_some() {
            return;
        }
        match table.remove(&name) {
            None => failure = Some(Error::Checkpoint(format!("missing array `{name}`"))),
            Some((shape, values)) => {
                if shape != view.shape() {
                    failure = Some(Error::Checkpoint(format!(
                        "array `{name}`: stored shape {shape:?} vs model {:?}",
                        view.shape()
                    )));
                    return;
                }
                let arr = ArrayD::from_shape_vec(shape, values).expect("checked shape");
                view.assign(&arr);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unused array `{extra}` under prefix `{prefix}`"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use crate::rng::{domain, stream};

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.arc");
        let mut c = Container::new();
        c.push_meta("variant", "norm-direction");
        c.push_meta("d_z", 4);
        c.push_meta("beta", 0.01f64);
        c.push_array::<f32>("a.weight", &[2, 3], &[1.0, -2.5, 3e-7, 0.0, f32::MIN_POSITIVE, 9.9]);
        c.push_array::<f32>("a.bias", &[3], &[0.25, -0.75, 1.5]);
        c.save(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let loaded = Container::load(&path).unwrap();
        assert_eq!(loaded.meta("variant"), Some("norm-direction"));
        assert_eq!(loaded.meta("beta"), Some("0.01"));
        let (shape, vals) = loaded.get_array::<f32>("a.weight").unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(vals[4], f32::MIN_POSITIVE);

        loaded.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2, "save→load→save must be byte-identical");
    }

    #[test]
    fn model_pack_unpack_restores_exactly() {
        let mut rng = stream(3, domain::INIT, 0, 0);
        let mlp: Mlp<f32> = Mlp::new(&[2, 8, 3], Activation::Swish, true, true, &mut rng);
        let mut c = Container::new();
        pack(&mut c, "enc", &mlp);

        let mut other: Mlp<f32> = Mlp::new(&[2, 8, 3], Activation::Swish, true, true, &mut rng);
        unpack(&c, "enc", &mut other).unwrap();
        for (a, b) in mlp.layers.iter().zip(other.layers.iter()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
            let (su, ou) = (a.spectral.as_ref().unwrap(), b.spectral.as_ref().unwrap());
            assert_eq!(su.u, ou.u);
            assert_eq!(su.v, ou.v);
        }

        // shape mismatch is an error
        let mut wrong: Mlp<f32> = Mlp::new(&[2, 4, 3], Activation::Swish, true, true, &mut rng);
        assert!(unpack(&c, "enc", &mut wrong).is_err());
        // dtype mismatch is an error
        let mut f64net: Mlp<f64> = Mlp::new(&[2, 8, 3], Activation::Swish, true, true, &mut rng);
        assert!(unpack(&c, "enc", &mut f64net).is_err());
    }
}
