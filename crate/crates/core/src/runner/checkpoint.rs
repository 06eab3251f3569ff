use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::AdamState;
use crate::model::{Model, ModelConfig, ParamSet};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"S2SNRSF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Stream used for canonicalization rotations.
    pub rng: ChaCha8Rng,
    /// Parameter arrays, in payload order.
    pub params: Vec<ArraySpec>,
    /// When set, the payload continues with the Adam first moments, then the
    /// second moments, in parameter order.
    pub adam_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.meta.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.params.count() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut arrays: Vec<&Array2<f32>> = self.params.values.iter().collect();
        if let Some(a) = &self.adam {
            arrays.extend(a.m.iter());
            arrays.extend(a.v.iter());
        }
        for a in arrays {
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 {
            return Err(err(format!(
                "file too short for a header ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(err(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < json_len {
            return Err(err(format!(
                "metadata truncated: {} of {json_len} bytes",
                body.len()
            )));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&body[..json_len])?;
        let payload = &body[json_len..];

        let copies = if meta.adam_step.is_some() { 3 } else { 1 };
        let floats: usize = meta.params.iter().map(|s| s.shape[0] * s.shape[1]).sum();
        let expected = 4 * floats * copies;
        if payload.len() != expected {
            return Err(err(format!(
                "payload holds {} bytes but metadata describes {expected} ({} arrays{})",
                payload.len(),
                meta.params.len(),
                if copies == 3 {
                    " with optimizer moments"
                } else {
                    ""
                }
            )));
        }
        let mut cursor = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        let mut read_set = || -> Vec<Array2<f32>> {
            meta.params
                .iter()
                .map(|s| {
                    Array2::from_shape_fn((s.shape[0], s.shape[1]), |_| {
                        cursor.next().expect("length checked")
                    })
                })
                .collect()
        };
        let values = read_set();
        let adam = meta.adam_step.map(|step| {
            let m = read_set();
            let v = read_set();
            AdamState { m, v, step }
        });
        let params = ParamSet {
            names: meta.params.iter().map(|s| s.name.clone()).collect(),
            values,
        };
        Model::from_params(meta.model.clone(), params.clone())
            .map_err(|e| err(format!("parameters do not fit the model config: {e}")))?;
        Ok(Self { meta, params, adam })
    }
}

pub fn param_specs(params: &ParamSet<f32>) -> Vec<ArraySpec> {
    params
        .names
        .iter()
        .zip(&params.values)
        .map(|(n, v)| ArraySpec {
            name: n.clone(),
            shape: [v.nrows(), v.ncols()],
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Width;
    use rand::SeedableRng;

    fn sample(with_adam: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = ModelConfig::tiny(4, 6);
        let model = Model::<f32>::new(config.clone(), &mut rng).unwrap();
        let adam = with_adam.then(|| {
            let mut a = AdamState::zeros_like(&model.params.values);
            a.m[0].fill(0.25);
            a.v[1].fill(-1.5e-7);
            a.step = 17;
            a
        });
        Checkpoint {
            meta: CheckpointMeta {
                model: config,
                train: TrainConfig {
                    width: Width::Tiny,
                    ..TrainConfig::default()
                },
                step: 17,
                rng,
                params: param_specs(&model.params),
                adam_step: adam.as_ref().map(|a| a.step),
            },
            params: model.params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_adam in [false, true] {
            let c = sample(with_adam);
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back, c);
            for (a, b) in c.params.values.iter().zip(&back.params.values) {
                assert!(a
                    .iter()
                    .zip(b.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample(true);
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let c = sample(false);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"S2SNRSF1");
        assert_eq!(bytes[8..12], [1, 0, 0, 0]);
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[20..20 + n]).unwrap();
        assert_eq!(meta["params"][0]["name"], "encoder.0.weight");
        assert_eq!(bytes.len(), 20 + n + 4 * c.params.count());
        let first = f32::from_le_bytes(bytes[20 + n..24 + n].try_into().unwrap());
        assert_eq!(first.to_bits(), c.params.values[0][[0, 0]].to_bits());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic"))
        );
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
        let truncated = &bytes[..bytes.len() - 4];
        assert!(
            matches!(Checkpoint::from_bytes(truncated), Err(Error::Checkpoint(m)) if m.contains("payload"))
        );
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn shape_disagreement_is_rejected() {
        let mut c = sample(false);
        c.meta.params[0].shape = [c.meta.params[0].shape[0] + 1, c.meta.params[0].shape[1]];
        // header now claims more floats than the payload carries
        match Checkpoint::from_bytes(&c.to_bytes().unwrap()) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("payload"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut c = sample(false);
        let s = c.meta.params[0].shape;
        let t = c.meta.params[1].shape;
        c.meta.params[0].shape = [s[1], s[0]];
        c.meta.params[1].shape = [t[1], t[0]];
        match Checkpoint::from_bytes(&c.to_bytes().unwrap()) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("model config"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
