//! Validator for the JSON Schema subset used by the shipped report schemas:
//! `type` (single or union), `const`, `enum`, `required`, `properties`,
//! `additionalProperties: false`, `items`, `minimum` and `maximum`.

use serde_json::Value;

fn type_matches(name: &str, v: &Value) -> bool {
    match name {
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        "string" => v.is_string(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        _ => false,
    }
}

/// Checks `instance` against `schema`; errors name the JSON pointer of the
/// first violation.
pub fn validate(schema: &Value, instance: &Value) -> Result<(), String> {
    check(schema, instance, "")
}

fn check(schema: &Value, v: &Value, path: &str) -> Result<(), String> {
    let fail = |what: String| Err(format!("{}: {what}", if path.is_empty() { "/" } else { path }));
    if let Some(t) = schema.get("type") {
        let names: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => return fail("malformed `type`".into()),
        };
        if !names.iter().any(|n| type_matches(n, v)) {
            return fail(format!("expected {}, found {v}", names.join(" or ")));
        }
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            return fail(format!("expected {c}, found {v}"));
        }
    }
    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(v) {
            return fail(format!("{v} is not one of {}", Value::Array(options.clone())));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(lo) = schema.get("minimum").and_then(Value::as_f64) {
            if x < lo {
                return fail(format!("{x} is below minimum {lo}"));
            }
        }
        if let Some(hi) = schema.get("maximum").and_then(Value::as_f64) {
            if x > hi {
                return fail(format!("{x} is above maximum {hi}"));
            }
        }
    }
    if let Value::Object(map) = v {
        if let Some(Value::Array(req)) = schema.get("required") {
            for key in req.iter().filter_map(Value::as_str) {
                if !map.contains_key(key) {
                    return fail(format!("missing required property `{key}`"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        let closed = schema.get("additionalProperties") == Some(&Value::Bool(false));
        for (key, child) in map {
            match props.and_then(|p| p.get(key)) {
                Some(sub) => check(sub, child, &format!("{path}/{key}"))?,
                None if closed => return fail(format!("unexpected property `{key}`")),
                None => {}
            }
        }
    }
    if let (Value::Array(items), Some(sub)) = (v, schema.get("items")) {
        for (i, child) in items.iter().enumerate() {
            check(sub, child, &format!("{path}/{i}"))?;
        }
    }
    Ok(())
}
