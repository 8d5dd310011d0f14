//! Float arrays serialized as base64 blocks of little-endian f64 values.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Block {
    shape: Vec<usize>,
    f64le: String,
}

fn encode(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

fn decode<E: serde::de::Error>(text: &str, expected: usize) -> Result<Vec<f64>, E> {
    let bytes = STANDARD.decode(text).map_err(E::custom)?;
    if bytes.len() != expected * 8 {
        return Err(E::custom(format!(
            "float block holds {} bytes, shape needs {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub mod array1 {
    use super::*;
    use ndarray::Array1;

    pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        Block {
            shape: vec![a.len()],
            f64le: encode(a.iter().copied()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        let block = Block::deserialize(d)?;
        if block.shape.len() != 1 {
            return Err(D::Error::custom("expected a 1-d block"));
        }
        Ok(Array1::from(decode::<D::Error>(
            &block.f64le,
            block.shape[0],
        )?))
    }
}

pub mod array2 {
    use super::*;
    use ndarray::Array2;

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Block {
            shape: vec![a.nrows(), a.ncols()],
            f64le: encode(a.iter().copied()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let block = Block::deserialize(d)?;
        if block.shape.len() != 2 {
            return Err(D::Error::custom("expected a 2-d block"));
        }
        let (r, c) = (block.shape[0], block.shape[1]);
        let data = decode::<D::Error>(&block.f64le, r * c)?;
        Array2::from_shape_vec((r, c), data).map_err(D::Error::custom)
    }
}

pub mod option_array1 {
    use super::*;
    use ndarray::Array1;

    #[derive(Serialize)]
    struct Wrap<'a>(#[serde(with = "super::array1")] &'a Array1<f64>);

    #[derive(Deserialize)]
    struct Owned(#[serde(with = "super::array1")] Array1<f64>);

    pub fn serialize<S: Serializer>(a: &Option<Array1<f64>>, s: S) -> Result<S::Ok, S::Error> {
        a.as_ref().map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array1<f64>>, D::Error> {
        Ok(Option::<Owned>::deserialize(d)?.map(|o| o.0))
    }
}

pub mod option_array2 {
    use super::*;
    use ndarray::Array2;

    #[derive(Serialize)]
    struct Wrap<'a>(#[serde(with = "super::array2")] &'a Array2<f64>);

    #[derive(Deserialize)]
    struct Owned(#[serde(with = "super::array2")] Array2<f64>);

    pub fn serialize<S: Serializer>(a: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        a.as_ref().map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        Ok(Option::<Owned>::deserialize(d)?.map(|o| o.0))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1, Array2};
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "super::array1")]
        a: Array1<f64>,
        #[serde(with = "super::array2")]
        b: Array2<f64>,
        #[serde(with = "super::option_array2")]
        c: Option<Array2<f64>>,
    }

    #[test]
    fn blocks_are_bit_exact() {
        let h = Holder {
            a: array![0.1, -0.0, f64::MIN_POSITIVE],
            b: array![[1.0, 2.0, 3.0], [4.0, 5.0, 1e-300]],
            c: None,
        };
        let json = serde_json::to_string(&h).unwrap();
        let back: Holder = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.a[1].to_bits(), (-0.0f64).to_bits());
    }
}
