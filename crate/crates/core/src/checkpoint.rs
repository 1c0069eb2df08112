//! Versioned JSON model container: config, covariate schema with its hash,
//! and every named tensor. Floats use shortest round-trip formatting, so a
//! save/load cycle reproduces the weights bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CovariateSchema;
use crate::io::{read_text, write_text};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const FORMAT: &str = "demandcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    model: ModelConfig,
    schema: CovariateSchema,
    schema_hash: String,
    tensors: Vec<NamedTensor>,
}

pub fn to_string<T: Scalar>(model: &Model<T>) -> String {
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config().clone(),
        schema: model.schema().clone(),
        schema_hash: model.schema().hash(),
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&c).expect("checkpoint serialises")
}

/// Parses a checkpoint. When `expected_schema` is given, the stored schema
/// hash must equal it.
pub fn from_str<T: Scalar>(text: &str, expected_schema: Option<&str>) -> Result<Model<T>> {
    let c: Container = serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
    if c.format != FORMAT || c.version != VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            c.format, c.version
        )));
    }
    let actual = c.schema.hash();
    if actual != c.schema_hash {
        return Err(Error::Schema(format!(
            "checkpoint schema hash {} does not match its schema ({actual})",
            c.schema_hash
        )));
    }
    if let Some(expected) = expected_schema {
        if expected != c.schema_hash {
            return Err(Error::Schema(format!(
                "checkpoint was trained with schema {}, inputs use {expected}",
                c.schema_hash
            )));
        }
    }
    let mut model = Model::<T>::new(c.model, c.schema)?;
    if c.tensors.len() != model.params().len() {
        return Err(Error::Schema(format!(
            "checkpoint holds {} tensors, model has {}",
            c.tensors.len(),
            model.params().len()
        )));
    }
    for t in c.tensors {
        let id = model
            .params()
            .id_of(&t.name)
            .ok_or_else(|| Error::Schema(format!("unknown tensor `{}`", t.name)))?;
        let dst = model.params_mut().get_mut(id);
        if dst.shape() != t.shape.as_slice() || t.data.len() != dst.len() {
            return Err(Error::Schema(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                t.name,
                t.shape,
                dst.shape()
            )));
        }
        for (d, v) in dst.data_mut().iter_mut().zip(t.data) {
            *d = T::lit(v);
        }
    }
    Ok(model)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    write_text(path, &to_string(model))
}

pub fn load<T: Scalar>(path: &Path, expected_schema: Option<&str>) -> Result<Model<T>> {
    from_str(&read_text(path)?, expected_schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f64> {
        let schema = CovariateSchema::new(1, 8, 2, 4, 3).unwrap();
        Model::new(
            ModelConfig {
                heads: 2,
                d_k: 4,
                seed: 5,
                ..ModelConfig::default()
            },
            schema,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back: Model<f64> = from_str(&to_string(&m), Some(&m.schema().hash())).unwrap();
        for ((_, na, a), (_, nb, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &crate::tensor::Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn schema_hash_is_enforced() {
        let m = model();
        let text = to_string(&m);
        let err = from_str::<f64>(&text, Some("deadbeef")).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let tampered = text.replace("\"window\":8", "\"window\":9");
        assert!(from_str::<f64>(&tampered, None).unwrap_err().to_string().contains("hash"));
    }

    #[test]
    fn loads_as_f32() {
        let m = model();
        let back: Model<f32> = from_str(&to_string(&m), None).unwrap();
        assert_eq!(back.params().len(), m.params().len());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save(&path, &m).unwrap();
        let back: Model<f64> = load(&path, None).unwrap();
        assert_eq!(to_string(&back), to_string(&m));
    }
}
