//! Canonical JSON text: object keys sorted bytewise, no insignificant
//! whitespace. Used wherever bytes get hashed or compared.

use serde::Serialize;
use serde_json::Value;

/// Renders a JSON value canonically.
pub fn to_canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

/// Serializes any value through [`serde_json::Value`] and renders it canonically.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    Ok(to_canonical_string(&serde_json::to_value(value)?))
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(key, out);
                out.push(':');
                write_value(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::String(s) => write_string(s, out),
        // Numbers, booleans and null already have a single rendering.
        other => out.push_str(&other.to_string()),
    }
}

fn write_string(s: &str, out: &mut String) {
    out.push_str(&Value::String(s.to_owned()).to_string());
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_nested_keys_without_whitespace() {
        let v = json!({"b": 1, "a": {"z": [true, null], "y": "q\"uote"}});
        assert_eq!(
            to_canonical_string(&v),
            r#"{"a":{"y":"q\"uote","z":[true,null]},"b":1}"#
        );
    }

    #[test]
    fn floats_use_shortest_roundtrip_form() {
        let v = json!({"d": 0.1, "e": 3.0});
        assert_eq!(to_canonical_string(&v), r#"{"d":0.1,"e":3.0}"#);
    }
}
