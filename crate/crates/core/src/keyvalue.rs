//! Plain `key = value` text files for parameters, configs and results.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique and
//! every key must be consumed by the reader, so typos surface as errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::correction::CorrectionGroups;
use crate::error::{Error, Result};
use crate::kernel::HestonParams;
use crate::vix::{variance_from_vix, VixMapping};

/// Parsed key-value pairs with their line numbers.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (u64, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx as u64 + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Parse { line, column: trimmed.to_string(), message: "expected key = value".into() });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse { line, column: String::new(), message: "empty key".into() });
            }
            if entries.insert(key.clone(), (line, value.trim().to_string())).is_some() {
                return Err(Error::Parse { line, column: key, message: "duplicate key".into() });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e| Error::Parse {
                line,
                column: key.to_string(),
                message: format!("'{value}': {e}"),
            }),
        }
    }

    /// Removes and parses a mandatory `key`.
    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)?.ok_or_else(|| Error::Parse { line: 0, column: key.to_string(), message: "missing key".into() })
    }

    /// Fails on any key that was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Parse { line, column: key, message: "unknown key".into() }),
        }
    }
}

/// Formats `key = value` lines with round-trip float precision.
pub fn format_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

impl HestonParams {
    /// Reads `kappa, m, eta_bar, rho_bar` plus either `v0` or `vix0`, and
    /// optional `r`, `q` (default 0).
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let p = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(p)
    }

    pub(crate) fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let kappa = kv.require("kappa")?;
        let m = kv.require("m")?;
        let eta_bar = kv.require("eta_bar")?;
        let rho_bar = kv.require("rho_bar")?;
        let r = kv.take("r")?.unwrap_or(0.0);
        let q = kv.take("q")?.unwrap_or(0.0);
        let v0 = match (kv.take::<f64>("v0")?, kv.take::<f64>("vix0")?) {
            (Some(v0), None) => v0,
            (None, Some(vix0)) => variance_from_vix(vix0, &VixMapping::new(kappa, m)?)?,
            (Some(_), Some(_)) => return Err(Error::InvalidParameter("give either v0 or vix0, not both".into())),
            (None, None) => return Err(Error::Parse { line: 0, column: "v0".into(), message: "missing key".into() }),
        };
        HestonParams::new(kappa, m, eta_bar, rho_bar, v0, r, q)
    }

    pub fn to_key_values(&self) -> String {
        format_pairs([
            ("kappa", self.kappa.to_string()),
            ("m", self.m.to_string()),
            ("eta_bar", self.eta_bar.to_string()),
            ("rho_bar", self.rho_bar.to_string()),
            ("v0", self.v0.to_string()),
            ("r", self.r.to_string()),
            ("q", self.q.to_string()),
        ])
    }
}

impl CorrectionGroups {
    /// Reads any subset of the seven group names; missing ones are zero.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cg)
    }

    pub(crate) fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut a = [0.0; 7];
        for (slot, name) in a.iter_mut().zip(Self::NAMES) {
            *slot = kv.take(name)?.unwrap_or(0.0);
        }
        let cg = Self::from_array(a);
        cg.validate()?;
        Ok(cg)
    }

    pub fn to_key_values(&self) -> String {
        format_pairs(Self::NAMES.iter().zip(self.to_array()).map(|(&k, v)| (k, v.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        let p = HestonParams::new(15.0, 0.04, 2.0, -0.5, 0.0213, 0.01, 0.0).unwrap();
        assert_eq!(HestonParams::from_key_values(&p.to_key_values()).unwrap(), p);
        let cg = CorrectionGroups::from_array([0.01, -0.02, 0.015, 1e-3, -1e-3, 0.2, 1.0 / 3.0]);
        assert_eq!(CorrectionGroups::from_key_values(&cg.to_key_values()).unwrap(), cg);
    }

    #[test]
    fn vix0_pins_v0() {
        let text = "# illustrative\nkappa = 15\nm = 0.04\neta_bar = 2\nrho_bar = -0.5\nvix0 = 0.15\n";
        let p = HestonParams::from_key_values(text).unwrap();
        let expected = variance_from_vix(0.15, &VixMapping::new(15.0, 0.04).unwrap()).unwrap();
        assert_eq!(p.v0, expected);
    }

    #[test]
    fn errors_name_the_line_and_key() {
        let err = HestonParams::from_key_values("kappa = 15\nm = x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, ref column, .. } if column == "m"));
        let err = CorrectionGroups::from_key_values("v12_eps = 0.1\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, ref column, .. } if column == "bogus"));
        let err = KeyValues::parse("a = 1\na = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(KeyValues::parse("no equals sign\n").is_err());
    }
}
