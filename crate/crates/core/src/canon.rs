//! Canonical serialization and content digests.
//!
//! Every artifact that gets hashed (checkpoints, claims, registrations,
//! evidence results, reports) is rendered through [`to_canonical_json`]:
//! object keys sorted, reals printed at 9 significant decimal digits,
//! no whitespace. The digest of an artifact is the SHA-256 of that exact
//! byte rendering, so "same digest" means "same canonical bytes" on any
//! host.
//!
//! Nine significant digits are enough to round-trip every finite `f32`
//! exactly, which is what makes checkpoint digests stable across
//! serialize/deserialize cycles.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// SHA-256 content digest, hex-rendered.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(String);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(bytes);
        Digest(hex::encode(h.finalize()))
    }

    pub fn from_hex(hex_str: &str) -> Option<Self> {
        if hex_str.len() == 64 && hex_str.bytes().all(|b| b.is_ascii_hexdigit()) {
            Some(Digest(hex_str.to_ascii_lowercase()))
        } else {
            None
        }
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }

    /// Short prefix used for pilot ids and filenames.
    pub fn short(&self) -> &str {
        &self.0[..12]
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.0[..12])
    }
}

/// Render a real at 9 significant decimal digits, sign-normalized.
///
/// `-0.0` renders as `0.00000000e0` so that equal values always produce
/// equal bytes.
pub fn fmt_sig9(x: f64) -> String {
    assert!(x.is_finite(), "canonical rendering requires finite reals");
    if x == 0.0 {
        return "0.00000000e0".to_string();
    }
    format!("{:.8e}", x)
}

/// Canonical JSON: sorted keys, 9-significant-digit reals, no spaces.
pub fn to_canonical_json(value: &serde_json::Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

fn write_value(out: &mut String, value: &serde_json::Value) {
    use serde_json::Value::*;
    match value {
        Null => out.push_str("null"),
        Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().expect("finite JSON number");
                out.push_str(&fmt_sig9(f));
            }
        }
        String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serializes"));
        }
        Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Object(map) => {
            // serde_json's default map is a BTreeMap, so iteration is
            // already key-sorted; sort defensively anyway.
            let mut keys: Vec<&std::string::String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                write_value(out, &map[*k]);
            }
            out.push('}');
        }
    }
}

/// Canonical rendering of any serializable value.
pub fn canonical_string<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes");
    to_canonical_json(&v)
}

/// Digest of the canonical rendering.
pub fn canonical_digest<T: Serialize>(value: &T) -> Digest {
    Digest::of_bytes(canonical_string(value).as_bytes())
}

/// Derive a named sub-seed from a base seed. Used so that every random
/// stream in a pilot (data generation, splits, bootstrap resampling) has
/// its own recorded seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(base.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig9_zero_is_sign_normalized() {
        assert_eq!(fmt_sig9(0.0), "0.00000000e0");
        assert_eq!(fmt_sig9(-0.0), "0.00000000e0");
    }

    #[test]
    fn sig9_examples() {
        assert_eq!(fmt_sig9(1.0), "1.00000000e0");
        assert_eq!(fmt_sig9(-0.42), "-4.20000000e-1");
        assert_eq!(fmt_sig9(12345.6789), "1.23456789e4");
    }

    #[test]
    fn canonical_json_sorts_keys_and_renders_floats() {
        let v = serde_json::json!({"b": 0.5, "a": [1, 2.0], "c": {"z": true, "y": null}});
        assert_eq!(
            to_canonical_json(&v),
            r#"{"a":[1,2.00000000e0],"b":5.00000000e-1,"c":{"y":null,"z":true}}"#
        );
    }

    #[test]
    fn digest_is_stable() {
        let a = canonical_digest(&serde_json::json!({"x": 1, "y": 2}));
        let b = canonical_digest(&serde_json::json!({"y": 2, "x": 1}));
        assert_eq!(a, b);
        let c = canonical_digest(&serde_json::json!({"x": 1, "y": 3}));
        assert_ne!(a, c);
    }

    #[test]
    fn derive_seed_is_label_sensitive() {
        assert_ne!(derive_seed(17, "split"), derive_seed(17, "bootstrap"));
        assert_eq!(derive_seed(17, "split"), derive_seed(17, "split"));
    }

    proptest! {
        // 9 significant digits round-trip every finite f32 exactly.
        #[test]
        fn f32_roundtrips_through_sig9(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite());
            let rendered = fmt_sig9(x as f64);
            let back: f64 = rendered.parse().unwrap();
            let back32 = back as f32;
            prop_assert_eq!(back32.to_bits(), (if x == 0.0 { 0.0f32 } else { x }).to_bits());
        }
    }
}
