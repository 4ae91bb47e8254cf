use vitamin_core::{Error, Result};

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies dotted `a.b.c=value` assignments, creating tables as needed.
pub fn apply(doc: &mut toml::Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key {key:?} is malformed")));
        }
        let mut table = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_types() {
        let mut t: toml::Table = toml::from_str("lr = 1.0\n[data]\nn_values = 4\n").unwrap();
        apply(
            &mut t,
            &["lr=0.5".into(), "data.n_values=6".into(), "image=vitamin-s".into(), "eval.templates=2".into()],
        )
        .unwrap();
        assert_eq!(t["lr"].as_float(), Some(0.5));
        assert_eq!(t["data"]["n_values"].as_integer(), Some(6));
        assert_eq!(t["image"].as_str(), Some("vitamin-s"));
        assert_eq!(t["eval"]["templates"].as_integer(), Some(2));
        assert!(apply(&mut t, &["nokey".into()]).is_err());
        assert!(apply(&mut t, &["lr.x=1".into()]).is_err());
    }
}
