//! Flat `key = value` config files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::Failure;

pub type Pairs = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str, origin: &str) -> Result<Pairs, Failure> {
    let mut out = Pairs::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::Usage(format!("{origin}:{}: expected 'key = value'", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Failure::Usage(format!("{origin}:{}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Failure::Usage(format!("{origin}:{}: key '{k}' given twice", i + 1)));
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Pairs, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

/// Applies `--set key=value` overrides.
pub fn apply_sets(pairs: &mut Pairs, sets: &[String]) -> Result<(), Failure> {
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Failure::Usage(format!("--set expects key=value, got '{s}'")));
        };
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

/// Entries whose key starts with `prefix`.
pub fn section(pairs: &Pairs, prefix: &str) -> Pairs {
    pairs.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect()
}

pub fn canonical(pairs: &Pairs) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let p = parse("# top\na = 1\n\n b=two # trailing\n", "t").unwrap();
        assert_eq!(p.get("a").unwrap(), "1");
        assert_eq!(p.get("b").unwrap(), "two");
        assert!(parse("a=1\na=2\n", "t").is_err());
        assert!(parse("novalue\n", "t").is_err());
    }

    #[test]
    fn sets_override() {
        let mut p = parse("a = 1\n", "t").unwrap();
        apply_sets(&mut p, &["a=3".into(), "c = x".into()]).unwrap();
        assert_eq!(canonical(&p), "a = 3\nc = x\n");
        assert!(apply_sets(&mut p, &["bad".into()]).is_err());
    }
}
