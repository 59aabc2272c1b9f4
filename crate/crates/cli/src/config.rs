//! `key = value` run configuration.

use std::path::Path;

use tpuimac::{CrossbarConfig, SystolicConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub systolic: SystolicConfig,
    pub imac: CrossbarConfig,
    pub seed: Option<u64>,
}

const KEYS: [&str; 16] = [
    "rows",
    "cols",
    "word_bytes",
    "ifmap_offset",
    "filter_offset",
    "ofmap_offset",
    "sub_rows",
    "sub_cols",
    "g_on",
    "g_off",
    "v_read",
    "neuron_slope",
    "adc_bits",
    "variation_sigma",
    "aux_cost_per_elem",
    "seed",
];

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| format!("line {}: {m}", n + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(at(format!("unknown key `{key}`")));
            }
            if seen.contains(&key) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            let int = || value.parse::<u64>().map_err(|_| at(format!("{key}: `{value}` is not a non-negative integer")));
            let real = || value.parse::<f64>().map_err(|_| at(format!("{key}: `{value}` is not a number")));
            let s = &mut cfg.systolic;
            let x = &mut cfg.imac;
            match key {
                "rows" => s.rows = int()? as usize,
                "cols" => s.cols = int()? as usize,
                "word_bytes" => s.word_bytes = int()?,
                "ifmap_offset" => s.ifmap_offset = int()?,
                "filter_offset" => s.filter_offset = int()?,
                "ofmap_offset" => s.ofmap_offset = int()?,
                "aux_cost_per_elem" => s.aux_cost_per_elem = int()?,
                "sub_rows" => x.sub_rows = int()? as usize,
                "sub_cols" => x.sub_cols = int()? as usize,
                "adc_bits" => x.adc_bits = int()?.try_into().map_err(|_| at("adc_bits too large".into()))?,
                "g_on" => x.g_on = real()?,
                "g_off" => x.g_off = real()?,
                "v_read" => x.v_read = real()?,
                "neuron_slope" => x.neuron_slope = real()?,
                "variation_sigma" => x.variation_sigma = real()?,
                "seed" => cfg.seed = Some(int()?),
                _ => unreachable!(),
            }
        }
        cfg.systolic.check().map_err(|e| e.to_string())?;
        cfg.imac.check().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse("# array\nrows = 16\ncols=8 # narrow\n\ng_on = 2e-4\nseed = 7\n").unwrap();
        assert_eq!((cfg.systolic.rows, cfg.systolic.cols), (16, 8));
        assert_eq!(cfg.imac.g_on, 2e-4);
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.imac.adc_bits, 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("rowz = 3").unwrap_err().contains("unknown key"));
        assert!(RunConfig::parse("rows = 3\nrows = 4").unwrap_err().contains("duplicate"));
        assert!(RunConfig::parse("rows").is_err());
        assert!(RunConfig::parse("rows = -1").is_err());
        assert!(RunConfig::parse("rows = 0").is_err());
        assert!(RunConfig::parse("g_on = 1e-6\ng_off = 1e-5").is_err());
    }
}
