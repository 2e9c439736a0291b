//! Line-based `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and defaults to [`EditConfig::default`]; unknown and repeated
//! keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use spsedit_core::pipeline::{EditConfig, InitMode};

use crate::error::{Error, Result};

pub const KEYS: [&str; 13] = [
    "fusion_rate",
    "guidance_scale",
    "lambda_t_scale",
    "lambda_d_scale",
    "geometry_steps",
    "texture_steps",
    "phase1_steps",
    "phase3_steps",
    "aux_guidance_weight",
    "grid_size",
    "image_size",
    "seed",
    "init_mode",
];

pub fn parse(text: &str) -> Result<EditConfig> {
    let mut c = EditConfig::default();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| Error::Config { line, message };
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {body:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key {key:?}")));
        }
        if seen.contains(&key) {
            return Err(err(format!("{key} is set twice")));
        }
        seen.push(key);
        set(&mut c, key, value).map_err(err)?;
    }
    Ok(c)
}

pub fn load(path: &Path) -> Result<EditConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn set(c: &mut EditConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
    }
    match key {
        "fusion_rate" => c.fusion_rate = num(key, value)?,
        "guidance_scale" => c.guidance_scale = num(key, value)?,
        "lambda_t_scale" => c.lambda_t_scale = num(key, value)?,
        "lambda_d_scale" => c.lambda_d_scale = num(key, value)?,
        "geometry_steps" => c.geometry_steps = num(key, value)?,
        "texture_steps" => c.texture_steps = num(key, value)?,
        "phase1_steps" => c.phase1_steps = num(key, value)?,
        "phase3_steps" => c.phase3_steps = num(key, value)?,
        "aux_guidance_weight" => c.aux_guidance_weight = num(key, value)?,
        "grid_size" => c.grid_size = num(key, value)?,
        "image_size" => c.image_size = num(key, value)?,
        "seed" => c.seed = num(key, value)?,
        "init_mode" => c.init_mode = InitMode::parse(value).map_err(|e| e.to_string())?,
        _ => unreachable!("key checked against KEYS"),
    }
    Ok(())
}

/// The file keys of `c`, one per line, in [`KEYS`] order.
pub fn render(c: &EditConfig) -> String {
    let mut out = String::new();
    let values: [String; 13] = [
        c.fusion_rate.to_string(),
        c.guidance_scale.to_string(),
        c.lambda_t_scale.to_string(),
        c.lambda_d_scale.to_string(),
        c.geometry_steps.to_string(),
        c.texture_steps.to_string(),
        c.phase1_steps.to_string(),
        c.phase3_steps.to_string(),
        c.aux_guidance_weight.to_string(),
        c.grid_size.to_string(),
        c.image_size.to_string(),
        c.seed.to_string(),
        c.init_mode.name().to_string(),
    ];
    for (k, v) in KEYS.iter().zip(values) {
        writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(parse("").unwrap(), EditConfig::default());
        assert_eq!(parse("# nothing\n\n").unwrap(), EditConfig::default());
    }

    #[test]
    fn sets_values() {
        let c = parse("fusion_rate = 0.35\nseed=7\n  init_mode = ellipsoid-blob  \n").unwrap();
        assert_eq!(c.fusion_rate, 0.35);
        assert_eq!(c.seed, 7);
        assert_eq!(c.init_mode, InitMode::EllipsoidBlob);
    }

    #[test]
    fn render_round_trips() {
        let c = EditConfig { fusion_rate: 0.85, aux_guidance_weight: 0.0, seed: 3, ..EditConfig::default() };
        assert_eq!(parse(&render(&c)).unwrap(), c);
        assert_eq!(render(&c).lines().count(), KEYS.len());
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        let line = |r: Result<EditConfig>| match r {
            Err(Error::Config { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line(parse("seed = 1\nlearning_rate = 2")), 2);
        assert_eq!(line(parse("seed = 1\nseed = 2")), 2);
        assert_eq!(line(parse("seed 1")), 1);
        assert_eq!(line(parse("seed = -1")), 1);
        assert_eq!(line(parse("init_mode = sphere")), 1);
    }
}
