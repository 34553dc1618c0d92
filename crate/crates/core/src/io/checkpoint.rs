use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::{DatasetSpec, TrainConfig};
use crate::model::{ExpertParams, GateEntry, MoEConfig, MoEParams};
use crate::numerics::Matrix;

pub const SCHEMA_VERSION: u64 = 1;

/// Where a checkpoint came from. Every field is optional so hand-built or
/// planted models can be saved too.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub note: Option<String>,
}

/// External tabular data: file path and the seed of its train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: String,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub params: MoEParams,
    pub backbone_seed: u64,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(params: MoEParams, backbone_seed: u64, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            params,
            backbone_seed,
            provenance,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGates {
    w: String,
    b: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpert {
    a: String,
    u: String,
    b: String,
    v: String,
}

#[derive(Serialize, Deserialize)]
struct RawCheckpoint {
    schema_version: u64,
    config: MoEConfig,
    backbone_seed: u64,
    gates: RawGates,
    experts: Vec<RawExpert>,
    #[serde(default)]
    provenance: Provenance,
}

/// Little-endian IEEE-754 doubles, base64 with padding.
pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Malformed(format!("bad base64 float array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Malformed(format!(
            "float array of {} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn decode_len(text: &str, len: usize, what: &str) -> Result<Vec<f64>> {
    let values = decode_f64s(text)?;
    if values.len() != len {
        return Err(Error::Shape(format!("{what}: expected {len} values, found {}", values.len())));
    }
    Ok(values)
}

fn to_raw(ckpt: &Checkpoint) -> RawCheckpoint {
    let p = &ckpt.params;
    let w: Vec<f64> = p.gates().iter().flat_map(|g| g.w.iter().copied()).collect();
    let b: Vec<f64> = p.gates().iter().map(|g| g.b).collect();
    RawCheckpoint {
        schema_version: ckpt.schema_version,
        config: *p.config(),
        backbone_seed: ckpt.backbone_seed,
        gates: RawGates {
            w: encode_f64s(&w),
            b: encode_f64s(&b),
        },
        experts: p
            .experts()
            .iter()
            .map(|e| RawExpert {
                a: encode_f64s(e.a.data()),
                u: encode_f64s(&e.u),
                b: encode_f64s(e.b.data()),
                v: encode_f64s(&e.v),
            })
            .collect(),
        provenance: ckpt.provenance.clone(),
    }
}

fn from_raw(raw: RawCheckpoint) -> Result<Checkpoint> {
    let config = raw.config;
    config.validate()?;
    let (n, d, h) = (config.gate_count(), config.dim, config.hidden);
    let w = decode_len(&raw.gates.w, n * d, "gate weights")?;
    let b = decode_len(&raw.gates.b, n, "gate biases")?;
    let gates = (0..n)
        .map(|i| GateEntry::new(w[i * d..(i + 1) * d].to_vec(), b[i]))
        .collect();
    if raw.experts.len() != config.experts {
        return Err(Error::Shape(format!(
            "config has {} experts, file has {}",
            config.experts,
            raw.experts.len()
        )));
    }
    let experts = raw
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            ExpertParams::new(
                Matrix::new(h, d, decode_len(&e.a, h * d, &format!("expert {i} A"))?)?,
                decode_len(&e.u, h, &format!("expert {i} u"))?,
                Matrix::new(d, h, decode_len(&e.b, d * h, &format!("expert {i} B"))?)?,
                decode_len(&e.v, d, &format!("expert {i} v"))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        schema_version: raw.schema_version,
        params: MoEParams::new(config, gates, experts)?,
        backbone_seed: raw.backbone_seed,
        provenance: raw.provenance,
    })
}

pub fn checkpoint_to_json(ckpt: &Checkpoint) -> String {
    serde_json::to_string_pretty(&to_raw(ckpt)).expect("checkpoint serialises")
}

/// Parses a checkpoint document. The schema version is checked before
/// anything else so that files from other versions fail with a version error.
pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Malformed("missing or non-integer schema_version".into()))?;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let raw: RawCheckpoint = serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
    from_raw(raw)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_to_json(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn sample() -> Checkpoint {
        let config = MoEConfig::shared(1, 3, 2, 4, 5);
        let params = MoEParams::random(config, &mut RngStream::new(8), 1.0).unwrap();
        Checkpoint::new(
            params,
            11,
            Provenance {
                train: Some(TrainConfig::default()),
                dataset: Some(DatasetSpec::default()),
                csv: None,
                note: None,
            },
        )
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let ckpt = sample();
        let back = checkpoint_from_json(&checkpoint_to_json(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| c.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ckpt));
    }

    #[test]
    fn special_floats_survive() {
        let vals = [0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, 1.0 / 3.0];
        let back = decode_f64s(&encode_f64s(&vals)).unwrap();
        assert!(vals.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn distinct_errors() {
        let text = checkpoint_to_json(&sample());
        assert!(matches!(
            checkpoint_from_json(&text[..text.len() / 2]),
            Err(Error::Malformed(_))
        ));
        let wrong = text.replace("\"schema_version\": 1", "\"schema_version\": 7");
        match checkpoint_from_json(&wrong) {
            Err(e @ Error::SchemaVersion { found: 7, expected: 1 }) => {
                let msg = e.to_string();
                assert!(msg.contains('7') && msg.contains('1'), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let mut value: Value = serde_json::from_str(&text).unwrap();
        value["gates"]["b"] = Value::String(encode_f64s(&[1.0]));
        assert!(matches!(checkpoint_from_json(&value.to_string()), Err(Error::Shape(_))));
        value["gates"]["b"] = Value::String("***".into());
        assert!(matches!(checkpoint_from_json(&value.to_string()), Err(Error::Malformed(_))));
    }
}
