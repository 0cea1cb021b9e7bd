//! Model blob: `PCMODEL1`, a little-endian `u32` header length, a JSON
//! header, then every weight as a little-endian `f64` in layout order.

use serde::{Deserialize, Serialize};

use super::{Archetype, Hyperparams, Model, ModelError, Network, Normalization, Shape};

pub const BLOB_MAGIC: &[u8; 8] = b"PCMODEL1";

#[derive(Serialize, Deserialize)]
struct Header {
    archetype: Archetype,
    input_dim: usize,
    hidden_dim: usize,
    layers: usize,
    lookback: usize,
    param_count: usize,
    hyperparams: Hyperparams,
    features: Vec<String>,
    normalization: Normalization,
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let s = model.net.shape();
    let header = Header {
        archetype: s.archetype,
        input_dim: s.input_dim,
        hidden_dim: s.hidden_dim,
        layers: s.layers,
        lookback: s.lookback,
        param_count: model.net.param_count(),
        hyperparams: model.hyperparams.clone(),
        features: model.features.clone(),
        normalization: model.normalization.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * header.param_count);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, ModelError> {
    let corrupt = |m: &str| ModelError::CorruptBlob(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != BLOB_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_at = 12usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..body_at]).map_err(|e| ModelError::CorruptBlob(e.to_string()))?;
    let shape = Shape {
        archetype: header.archetype,
        input_dim: header.input_dim,
        hidden_dim: header.hidden_dim,
        layers: header.layers,
        lookback: header.lookback,
    };
    let body = &bytes[body_at..];
    if !body.len().is_multiple_of(8) {
        return Err(corrupt("truncated weights"));
    }
    let expected = shape.param_count();
    let got = body.len() / 8;
    if got != header.param_count {
        return Err(corrupt("weight count disagrees with header"));
    }
    let dims_ok = header.input_dim == header.features.len()
        && header.normalization.min.len() == header.input_dim
        && header.normalization.max.len() == header.input_dim
        && header.hyperparams.hidden_dim == header.hidden_dim
        && header.hyperparams.num_hidden_layers == header.layers
        && header.hyperparams.training_lookback == header.lookback;
    if expected != got || !dims_ok {
        return Err(ModelError::DimensionMismatch { expected, got });
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let net = Network::from_params(shape, params).expect("count checked");
    Ok(Model {
        hyperparams: header.hyperparams,
        features: header.features,
        normalization: header.normalization,
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::create_model;

    fn model(a: Archetype) -> Model {
        let hp = Hyperparams {
            num_epochs: 1,
            target_attrib: "close".into(),
            hidden_dim: 5,
            num_hidden_layers: 1,
            time_lag: 0,
            training_lookback: 10,
            sub_split_value: Some(0),
        };
        create_model(a, 1, &hp, 4).unwrap()
    }

    #[test]
    fn save_load_save_is_identical() {
        for a in Archetype::ALL {
            let bytes = encode_model(&model(a));
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, model(a));
            assert_eq!(encode_model(&back), bytes);
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_model(&model(Archetype::Lstm));
        for cut in [0, 7, 11, 40, bytes.len() - 8, bytes.len() - 3] {
            assert!(
                matches!(decode_model(&bytes[..cut]), Err(ModelError::CorruptBlob(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn archetype_flag_surgery_is_a_dimension_error() {
        let bytes = encode_model(&model(Archetype::Mlp));
        let at = bytes.windows(5).position(|w| w == b"\"mlp\"").unwrap();
        let mut flipped = bytes.clone();
        flipped[at + 1..at + 4].copy_from_slice(b"gru");
        assert!(matches!(
            decode_model(&flipped),
            Err(ModelError::DimensionMismatch { expected: 111, got: 61 })
        ));
    }
}
