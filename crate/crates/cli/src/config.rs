//! `--config file.json`: a JSON object whose `command` key names the
//! subcommand and whose other keys are long flag names. It is expanded into
//! arguments placed before the ones typed on the command line, so typed
//! flags win.

use serde_json::Value;

pub fn expand(text: &str) -> Result<Vec<String>, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("config is not valid JSON: {e}"))?;
    let obj = v.as_object().ok_or("config must be a JSON object")?;
    let cmd = obj
        .get("command")
        .and_then(Value::as_str)
        .ok_or("config needs a string \"command\" key")?;
    let mut args = vec![cmd.to_string()];
    for (k, val) in obj {
        if k == "command" {
            continue;
        }
        let flag = format!("--{}", k.replace('_', "-"));
        match val {
            Value::Bool(true) => args.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => args.extend([flag, s.clone()]),
            Value::Number(n) => args.extend([flag, n.to_string()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|x| match x {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                args.extend([flag, parts.join(",")]);
            }
            Value::Object(_) => args.extend([flag, val.to_string()]),
        }
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_from_object() {
        let a =
            expand(r#"{"command":"analyze","act":{"kind":"sign"},"sw":1.5,"auto_init":true,"x":false,"states":[2,4]}"#)
                .unwrap();
        assert_eq!(a[0], "analyze");
        assert!(a.windows(2).any(|w| w[0] == "--act" && w[1] == r#"{"kind":"sign"}"#));
        assert!(a.windows(2).any(|w| w[0] == "--sw" && w[1] == "1.5"));
        assert!(a.windows(2).any(|w| w[0] == "--states" && w[1] == "2,4"));
        assert!(a.contains(&"--auto-init".to_string()));
        assert!(!a.contains(&"--x".to_string()));
        assert!(expand("[1]").is_err());
        assert!(expand(r#"{"sw":1}"#).is_err());
    }
}
