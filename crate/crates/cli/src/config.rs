//! Plain `key=value` run configuration; command-line flags take precedence.

use std::collections::BTreeMap;
use std::path::Path;

use crate::failure::{read_input, CliResult, Failure};

pub const KEYS: [&str; 9] = [
    "alpha",
    "lambda",
    "plan",
    "gop",
    "precision",
    "seed",
    "transmit_c3",
    "latent_carry",
    "workers",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub lambda: Option<u8>,
    pub plan: Option<String>,
    pub gop: Option<usize>,
    pub precision: Option<u32>,
    pub seed: Option<u64>,
    pub transmit_c3: Option<bool>,
    pub latent_carry: Option<bool>,
    pub workers: Option<usize>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> CliResult<T> {
    v.parse()
        .map_err(|_| Failure::input(format!("config line {line}: bad value `{v}` for {key}")))
}

impl FileConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut seen = BTreeMap::new();
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Failure::input(format!("config line {line}: expected key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Failure::input(format!("config line {line}: unknown key `{k}`")));
            }
            if seen.insert(k.to_string(), line).is_some() {
                return Err(Failure::input(format!("config line {line}: `{k}` given twice")));
            }
            match k {
                "alpha" => cfg.alpha = Some(parse_value(k, v, line)?),
                "lambda" => cfg.lambda = Some(parse_value(k, v, line)?),
                "plan" => cfg.plan = Some(v.to_string()),
                "gop" => cfg.gop = Some(parse_value(k, v, line)?),
                "precision" => cfg.precision = Some(parse_value(k, v, line)?),
                "seed" => cfg.seed = Some(parse_value(k, v, line)?),
                "transmit_c3" => cfg.transmit_c3 = Some(parse_value(k, v, line)?),
                "latent_carry" => cfg.latent_carry = Some(parse_value(k, v, line)?),
                _ => cfg.workers = Some(parse_value(k, v, line)?),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let data = read_input(path)?;
        let text = String::from_utf8(data).map_err(|_| Failure::input(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }
}
