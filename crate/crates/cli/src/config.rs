//! Flat `key = value` bench configuration files.
//!
//! ```text
//! # comments and blank lines are ignored
//! n = 512,1024,2048
//! c = 64
//! r = 8
//! reps = 5
//! warmup = 1
//! seed = 42
//! variants = vanilla,linear
//! directions = forward,backward
//! budget = 67108864
//! csv = bench.csv
//! json = bench.json
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use linatt::{Direction, Variant};

#[derive(Debug, Default, Clone, PartialEq)]
pub struct BenchSettings {
    pub n: Option<Vec<usize>>,
    pub c: Option<usize>,
    pub r: Option<usize>,
    pub reps: Option<usize>,
    pub warmup: Option<usize>,
    pub seed: Option<u64>,
    pub variants: Option<Vec<Variant>>,
    pub directions: Option<Vec<Direction>>,
    pub budget: Option<u64>,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

impl BenchSettings {
    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: BenchSettings) -> BenchSettings {
        BenchSettings {
            n: over.n.or(self.n),
            c: over.c.or(self.c),
            r: over.r.or(self.r),
            reps: over.reps.or(self.reps),
            warmup: over.warmup.or(self.warmup),
            seed: over.seed.or(self.seed),
            variants: over.variants.or(self.variants),
            directions: over.directions.or(self.directions),
            budget: over.budget.or(self.budget),
            csv: over.csv.or(self.csv),
            json: over.json.or(self.json),
        }
    }
}

pub fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key} = {value:?}: {e}"))
}

pub fn parse_config(text: &str) -> Result<BenchSettings, String> {
    let mut s = BenchSettings::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let at = |e: String| format!("line {}: {e}", lineno + 1);
        match key {
            "n" => s.n = Some(parse_list(value).map_err(at)?),
            "c" => s.c = Some(parse_one(key, value).map_err(at)?),
            "r" => s.r = Some(parse_one(key, value).map_err(at)?),
            "reps" => s.reps = Some(parse_one(key, value).map_err(at)?),
            "warmup" => s.warmup = Some(parse_one(key, value).map_err(at)?),
            "seed" => s.seed = Some(parse_one(key, value).map_err(at)?),
            "variants" => s.variants = Some(parse_list(value).map_err(at)?),
            "directions" => s.directions = Some(parse_list(value).map_err(at)?),
            "budget" => s.budget = Some(parse_one(key, value).map_err(at)?),
            "csv" => s.csv = Some(PathBuf::from(value)),
            "json" => s.json = Some(PathBuf::from(value)),
            other => return Err(at(format!("unknown key {other:?}"))),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "# sweep\nn = 512, 1024\nc=64\nr = 8\nreps = 7\nwarmup=2\nseed = 9\n\
                    variants = vanilla,linear_quadratic\ndirections = forward\nbudget = 100\n\
                    csv = out.csv # trailing comment\njson = out.json\n";
        let s = parse_config(text).unwrap();
        assert_eq!(s.n, Some(vec![512, 1024]));
        assert_eq!(s.c, Some(64));
        assert_eq!(s.reps, Some(7));
        assert_eq!(
            s.variants,
            Some(vec![Variant::VanillaSoftmax, Variant::LinearQuadraticOrder])
        );
        assert_eq!(s.directions, Some(vec![Direction::Forward]));
        assert_eq!(s.budget, Some(100));
        assert_eq!(s.csv, Some(PathBuf::from("out.csv")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse_config("speed = 3").unwrap_err().contains("line 1"));
        assert!(parse_config("c = many").is_err());
        assert!(parse_config("just text").is_err());
        assert!(parse_config("variants = softmax").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = parse_config("c = 64\nr = 8\nreps = 5").unwrap();
        let flags = BenchSettings {
            r: Some(4),
            ..Default::default()
        };
        let merged = file.overlay(flags);
        assert_eq!(
            (merged.c, merged.r, merged.reps),
            (Some(64), Some(4), Some(5))
        );
    }
}
