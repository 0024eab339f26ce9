use anyhow::{bail, Context, Result};
use limm_core::train::TrainConfig;
use toml::{Table, Value};

use crate::ConfigArgs;

/// Resolves `--config`, then `--set` overrides, then `--seed`.
pub fn resolve(args: &ConfigArgs) -> Result<TrainConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let mut table: Table = text.parse().context("parsing config")?;
    for ov in &args.overrides {
        apply_override(&mut table, ov)?;
    }
    if let Some(seed) = args.seed {
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    let cfg = TrainConfig::from_toml(&toml::to_string(&table)?)?;
    Ok(cfg)
}

/// `a.b.c=value`, where the value is read as a TOML literal and falls back to
/// a plain string.
pub fn apply_override(table: &mut Table, ov: &str) -> Result<()> {
    let Some((key, raw)) = ov.split_once('=') else {
        bail!("override {ov:?} is not KEY=VALUE");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override {key:?}: {part} is not a section"),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_sections_and_parse_literals() {
        let mut t = Table::new();
        apply_override(&mut t, "optim.lr=3e-4").unwrap();
        apply_override(&mut t, "model.gsa=false").unwrap();
        apply_override(&mut t, "model.backbone=tiny").unwrap();
        apply_override(&mut t, "data.synthetic.n_train = 12").unwrap();
        assert_eq!(t["optim"]["lr"].as_float(), Some(3e-4));
        assert_eq!(t["model"]["gsa"].as_bool(), Some(false));
        assert_eq!(t["model"]["backbone"].as_str(), Some("tiny"));
        assert_eq!(t["data"]["synthetic"]["n_train"].as_integer(), Some(12));
        assert!(apply_override(&mut t, "no-equals").is_err());
        assert!(apply_override(&mut t, "optim.lr.x=1").is_err());
    }

    #[test]
    fn resolve_applies_in_order() {
        let args = ConfigArgs { config: None, overrides: vec!["seed=4".into(), "optim.epochs=3".into()], seed: Some(9) };
        let cfg = resolve(&args).unwrap();
        assert_eq!((cfg.seed, cfg.optim.epochs), (9, 3));
        let bad = ConfigArgs { overrides: vec!["optim.lr=-1".into()], ..Default::default() };
        assert!(resolve(&bad).is_err());
    }
}
