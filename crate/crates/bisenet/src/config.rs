//! Plain-text run configuration: one `key = value` pair per line.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! known and appear at most once; anything else is rejected with its line
//! number. `parse` and `serialize` are mutually fixed-point: parsing a
//! serialized config reproduces it exactly.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{AggMode, ArchConfig, BoosterPos};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Checkpoint directory for commands that read or write one; an empty
    /// value in the file means unset.
    pub checkpoint: Option<PathBuf>,
    /// Output directory for artifacts; an empty value means unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    /// The synthetic demo setup: scaled-down architecture, calibrated
    /// training settings.
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::toy(),
            train: TrainConfig::toy(),
            checkpoint: None,
            out_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "classes",
    "lambda",
    "expansion",
    "alpha",
    "depth",
    "agg",
    "boosters",
    "head_width",
    "aux_width_factor",
    "input_hw",
    "seed",
    "batch",
    "max_iter",
    "base_lr",
    "momentum",
    "weight_decay",
    "poly_power",
    "ohem",
    "ohem_threshold",
    "ohem_min_kept_divisor",
    "ignore_label",
    "aux_weight",
    "crop_hw",
    "scales",
    "flip",
    "checkpoint",
    "out_dir",
];

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("line {line}: {msg}"))
}

fn parse_hw(value: &str, line: usize) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| bad(line, format!("expected HxW, got '{value}'")))?;
    let h = h.trim().parse().map_err(|_| bad(line, format!("bad height in '{value}'")))?;
    let w = w.trim().parse().map_err(|_| bad(line, format!("bad width in '{value}'")))?;
    Ok((h, w))
}

fn parse_fraction(value: &str, line: usize) -> Result<(u32, u32)> {
    if let Some((num, den)) = value.split_once('/') {
        let num = num.trim().parse().map_err(|_| bad(line, "bad fraction numerator"))?;
        let den = den.trim().parse().map_err(|_| bad(line, "bad fraction denominator"))?;
        Ok((num, den))
    } else {
        let num = value
            .trim()
            .parse()
            .map_err(|_| bad(line, format!("expected a fraction like 1/4, got '{value}'")))?;
        Ok((num, 1))
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(line, format!("bad {what}: '{value}'")))
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(line, format!("expected true or false, got '{other}'"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(lineno, format!("expected key = value, got '{line}'")));
            };
            let key = key.trim();
            let value = value.trim();
            let Some(&canonical) = KEYS.iter().find(|&&k| k == key) else {
                return Err(bad(lineno, format!("unknown key '{key}'")));
            };
            if seen.contains(&canonical) {
                return Err(bad(lineno, format!("duplicate key '{key}'")));
            }
            seen.push(canonical);
            match canonical {
                "classes" => cfg.arch.classes = parse_num(value, lineno, "classes")?,
                "lambda" => {
                    let (num, den) = parse_fraction(value, lineno)?;
                    cfg.arch.lambda_num = num;
                    cfg.arch.lambda_den = den;
                }
                "expansion" => cfg.arch.expansion = parse_num(value, lineno, "expansion")?,
                "alpha" => cfg.arch.alpha = parse_num(value, lineno, "alpha")?,
                "depth" => cfg.arch.depth = parse_num(value, lineno, "depth")?,
                "agg" => {
                    cfg.arch.agg = AggMode::parse(value)
                        .map_err(|e| bad(lineno, e))?;
                }
                "boosters" => {
                    let mut boosters = Vec::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        if part.is_empty() {
                            continue;
                        }
                        boosters.push(BoosterPos::parse(part).map_err(|e| bad(lineno, e))?);
                    }
                    cfg.arch.boosters = boosters;
                }
                "head_width" => cfg.arch.head_width = parse_num(value, lineno, "head_width")?,
                "aux_width_factor" => {
                    cfg.arch.aux_width_factor = parse_num(value, lineno, "aux_width_factor")?;
                }
                "input_hw" => cfg.arch.input_hw = parse_hw(value, lineno)?,
                "seed" => cfg.train.seed = parse_num(value, lineno, "seed")?,
                "batch" => cfg.train.batch = parse_num(value, lineno, "batch")?,
                "max_iter" => cfg.train.max_iter = parse_num(value, lineno, "max_iter")?,
                "base_lr" => cfg.train.base_lr = parse_num(value, lineno, "base_lr")?,
                "momentum" => cfg.train.momentum = parse_num(value, lineno, "momentum")?,
                "weight_decay" => {
                    cfg.train.weight_decay = parse_num(value, lineno, "weight_decay")?;
                }
                "poly_power" => cfg.train.poly_power = parse_num(value, lineno, "poly_power")?,
                "ohem" => cfg.train.ohem = parse_bool(value, lineno)?,
                "ohem_threshold" => {
                    cfg.train.ohem_threshold = parse_num(value, lineno, "ohem_threshold")?;
                }
                "ohem_min_kept_divisor" => {
                    cfg.train.ohem_min_kept_divisor =
                        parse_num(value, lineno, "ohem_min_kept_divisor")?;
                }
                "ignore_label" => {
                    cfg.train.ignore_label = parse_num(value, lineno, "ignore_label")?;
                }
                "aux_weight" => cfg.train.aux_weight = parse_num(value, lineno, "aux_weight")?,
                "crop_hw" => cfg.train.crop_hw = parse_hw(value, lineno)?,
                "scales" => {
                    let mut scales = Vec::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        if part.is_empty() {
                            continue;
                        }
                        scales.push(parse_num(part, lineno, "scale")?);
                    }
                    cfg.train.scales = scales;
                }
                "flip" => cfg.train.flip = parse_bool(value, lineno)?,
                "checkpoint" => {
                    cfg.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value));
                }
                "out_dir" => {
                    cfg.out_dir = (!value.is_empty()).then(|| PathBuf::from(value));
                }
                _ => unreachable!("key list is exhaustive"),
            }
        }
        cfg.arch.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let a = &self.arch;
        let t = &self.train;
        let boosters: Vec<&str> = a.boosters.iter().map(|b| b.name()).collect();
        let scales: Vec<String> = t.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "# architecture\n\
             classes = {}\n\
             lambda = {}/{}\n\
             expansion = {}\n\
             alpha = {}\n\
             depth = {}\n\
             agg = {}\n\
             boosters = {}\n\
             head_width = {}\n\
             aux_width_factor = {}\n\
             input_hw = {}x{}\n\
             \n\
             # training\n\
             seed = {}\n\
             batch = {}\n\
             max_iter = {}\n\
             base_lr = {}\n\
             momentum = {}\n\
             weight_decay = {}\n\
             poly_power = {}\n\
             ohem = {}\n\
             ohem_threshold = {}\n\
             ohem_min_kept_divisor = {}\n\
             ignore_label = {}\n\
             aux_weight = {}\n\
             crop_hw = {}x{}\n\
             scales = {}\n\
             flip = {}\n\
             \n\
             # paths\n\
             checkpoint = {}\n\
             out_dir = {}\n",
            a.classes,
            a.lambda_num,
            a.lambda_den,
            a.expansion,
            a.alpha,
            a.depth,
            a.agg.name(),
            boosters.join(","),
            a.head_width,
            a.aux_width_factor,
            a.input_hw.0,
            a.input_hw.1,
            t.seed,
            t.batch,
            t.max_iter,
            t.base_lr,
            t.momentum,
            t.weight_decay,
            t.poly_power,
            t.ohem,
            t.ohem_threshold,
            t.ohem_min_kept_divisor,
            t.ignore_label,
            t.aux_weight,
            t.crop_hw.0,
            t.crop_hw.1,
            scales.join(","),
            t.flip,
            self.checkpoint.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.out_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
        )
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_exactly() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn non_default_values_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.arch.classes = 19;
        cfg.arch.lambda_num = 1;
        cfg.arch.lambda_den = 8;
        cfg.arch.alpha = 1.75;
        cfg.arch.agg = AggMode::Concat;
        cfg.arch.boosters = vec![BoosterPos::Stage5_5];
        cfg.arch.input_hw = (512, 1024);
        cfg.arch.head_width = 1024;
        cfg.train.ohem = false;
        cfg.train.scales = vec![1.0];
        let text = cfg.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn path_keys_round_trip_including_unset() {
        let mut cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap().checkpoint, None);
        cfg.checkpoint = Some(PathBuf::from("runs/toy/checkpoint"));
        cfg.out_dir = Some(PathBuf::from("runs/toy"));
        let parsed = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn empty_booster_list_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.arch.boosters = vec![];
        let parsed = RunConfig::parse(&cfg.serialize()).unwrap();
        assert!(parsed.arch.boosters.is_empty());
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = RunConfig::parse("classes = 3\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = RunConfig::parse("alpha = 1\nalpha = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn lambda_accepts_fraction_and_integer() {
        let cfg = RunConfig::parse("lambda = 1/8\n").unwrap();
        assert_eq!((cfg.arch.lambda_num, cfg.arch.lambda_den), (1, 8));
        let cfg = RunConfig::parse("lambda = 1\n").unwrap();
        assert_eq!((cfg.arch.lambda_num, cfg.arch.lambda_den), (1, 1));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\n  classes = 5\n").unwrap();
        assert_eq!(cfg.arch.classes, 5);
    }

    #[test]
    fn invalid_resulting_config_is_rejected() {
        // The downsampling chain requires inputs divisible by 32.
        assert!(RunConfig::parse("input_hw = 60x60\n").is_err());
        assert!(RunConfig::parse("classes = 1\n").is_err());
    }
}
