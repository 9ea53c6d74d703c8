//! Bundle checkpoints in the dataset container format: one f64 array per
//! named parameter tensor plus the architecture descriptor in the header.

use std::path::Path;

use serde_json::{Map, Value};

use super::bundle::{build_bundle, BundleSpec, ModelBundle};
use crate::data::container::{ArrayData, Container, NamedArray};
use crate::error::{Error, Result};

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path, extra: Map<String, Value>) -> Result<()> {
    let mut c = Container::new("checkpoint");
    c.meta
        .insert("architecture".into(), serde_json::to_value(&bundle.spec)?);
    for (k, v) in extra {
        c.meta.entry(k).or_insert(v);
    }
    for (prefix, set) in bundle.named_param_sets() {
        for t in &set.tensors {
            c.arrays.push(NamedArray {
                name: format!("{prefix}/{}", t.name),
                shape: t.shape.clone(),
                data: ArrayData::F64(t.data.clone()),
            });
        }
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let c = Container::read(path)?;
    if c.kind != "checkpoint" {
        return Err(Error::format("kind", format!("expected checkpoint, found `{}`", c.kind)));
    }
    let spec: BundleSpec = serde_json::from_value(c.meta_field("architecture")?.clone())
        .map_err(|e| Error::format("architecture", e.to_string()))?;
    let mut bundle = build_bundle(spec)?;
    for (prefix, set) in bundle.named_param_sets_mut() {
        for t in &mut set.tensors {
            let name = format!("{prefix}/{}", t.name);
            let a = c.array(&name)?;
            if a.shape != t.shape {
                return Err(Error::format(
                    name,
                    format!("shape {:?} does not match architecture {:?}", a.shape, t.shape),
                ));
            }
            match &a.data {
                ArrayData::F64(v) => t.data.clone_from(v),
                ArrayData::F32(_) => return Err(Error::format(name, "parameters must be f64")),
            }
        }
    }
    Ok(bundle)
}
