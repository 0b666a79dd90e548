//! Serde adapter for `f64` fields that may be infinite or NaN. Finite values
//! stay numbers; the rest are written as `"inf"`, `"-inf"` or `"NaN"`, which
//! JSON cannot otherwise represent.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("NaN")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

struct FloatVisitor;

impl Visitor<'_> for FloatVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number or one of \"inf\", \"-inf\", \"NaN\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        v.parse().map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self))
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(FloatVisitor)
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, Debug)]
    struct W(#[serde(with = "super")] f64);

    #[test]
    fn non_finite_values_survive_json() {
        for v in [1.5, 0.0, f64::INFINITY, f64::NEG_INFINITY] {
            let s = serde_json::to_string(&W(v)).unwrap();
            assert_eq!(serde_json::from_str::<W>(&s).unwrap().0, v);
        }
        let s = serde_json::to_string(&W(f64::NAN)).unwrap();
        assert!(serde_json::from_str::<W>(&s).unwrap().0.is_nan());
        assert_eq!(serde_json::from_str::<W>("3").unwrap().0, 3.0);
    }
}
