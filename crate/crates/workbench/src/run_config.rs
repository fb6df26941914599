//! JSON run configuration: a preset name plus overrides.
//!
//! ```json
//! { "preset": "desk-small", "seq_len": 8, "adc": { "mode": "quantized" } }
//! ```
//!
//! Every key must exist in the preset; nested objects merge key by key.

use attnlego_core::AttentionConfig;
use serde_json::{Map, Value};

pub const DEFAULT_PRESET: &str = "desk-small";

fn merge(
    base: &mut Map<String, Value>,
    overrides: &Map<String, Value>,
    prefix: &str,
) -> Result<(), String> {
    for (key, value) in overrides {
        let path = format!("{prefix}{key}");
        let Some(slot) = base.get_mut(key) else {
            return Err(format!("unknown key `{path}`"));
        };
        match (slot, value) {
            (Value::Object(inner), Value::Object(over)) => merge(inner, over, &format!("{path}."))?,
            (slot, value) => *slot = value.clone(),
        }
    }
    Ok(())
}

/// Expands `text` against its preset (or `preset_override`, or the default
/// preset) and validates the result.
pub fn parse_run_config(
    text: &str,
    preset_override: Option<&str>,
) -> Result<AttentionConfig, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(mut overrides) = value else {
        return Err("run config must be a JSON object".into());
    };
    let file_preset = match overrides.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err("`preset` must be a string".into()),
        None => None,
    };
    let preset = preset_override
        .map(str::to_string)
        .or(file_preset)
        .unwrap_or(DEFAULT_PRESET.into());
    expand(&preset, &overrides)
}

pub fn expand(preset: &str, overrides: &Map<String, Value>) -> Result<AttentionConfig, String> {
    let base = AttentionConfig::preset(preset).map_err(|e| e.to_string())?;
    let Value::Object(mut merged) = serde_json::to_value(&base).expect("config serializes") else {
        unreachable!("config is an object");
    };
    merge(&mut merged, overrides, "")?;
    let config: AttentionConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_fully() {
        let c = parse_run_config(r#"{"preset": "paper-default"}"#, None).unwrap();
        assert_eq!(c, AttentionConfig::paper_default());
        let c = parse_run_config("{}", None).unwrap();
        assert_eq!(c, AttentionConfig::desk_small());
        let c = parse_run_config("{}", Some("paper-default")).unwrap();
        assert_eq!(c.seq_len, 2048);
    }

    #[test]
    fn overrides_merge() {
        let c = parse_run_config(r#"{"seq_len": 8, "adc": {"mode": "quantized"}}"#, None).unwrap();
        assert_eq!(c.seq_len, 8);
        assert_eq!(c.adc.mode, attnlego_core::AdcMode::Quantized);
        assert_eq!(c.adc.bits, 6);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_run_config(r#"{"seq_length": 8}"#, None).unwrap_err();
        assert!(err.contains("seq_length"));
        let err = parse_run_config(r#"{"adc": {"bitz": 3}}"#, None).unwrap_err();
        assert!(err.contains("adc.bitz"));
        assert!(parse_run_config(r#"{"preset": "huge"}"#, None).is_err());
        assert!(parse_run_config("[1]", None).is_err());
        assert!(parse_run_config(r#"{"d_model": 100}"#, None).is_err());
    }
}
