//! Serde helpers for `f64` fields that may hold `inf` or `NaN`, which JSON
//! numbers cannot represent. Non-finite values are written as strings.

use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("invalid number {other:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "super")] f64);

    #[test]
    fn round_trips_non_finite() {
        for v in [1.5, f64::INFINITY, f64::NEG_INFINITY] {
            let s = serde_json::to_string(&W(v)).unwrap();
            assert_eq!(serde_json::from_str::<W>(&s).unwrap().0, v);
        }
        let s = serde_json::to_string(&W(f64::NAN)).unwrap();
        assert_eq!(s, "\"nan\"");
        assert!(serde_json::from_str::<W>(&s).unwrap().0.is_nan());
    }
}
