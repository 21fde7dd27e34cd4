//! Parsers for the `--policy` and `--labeler` flag values.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Toy,
    ScriptedOracle,
    /// Oracle that corrupts each step with this probability.
    ScriptedCorrupt(f64),
    Remote(String),
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => return Ok(PolicySpec::Toy),
            "scripted-oracle" => return Ok(PolicySpec::ScriptedOracle),
            _ => {}
        }
        if let Some(p) = s.strip_prefix("scripted-corrupt:") {
            let p: f64 = p.parse().map_err(|_| format!("bad corruption probability {p:?}"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("corruption probability {p} outside [0, 1]"));
            }
            return Ok(PolicySpec::ScriptedCorrupt(p));
        }
        if let Some(url) = s.strip_prefix("remote:") {
            if url.is_empty() {
                return Err("remote: needs a URL".into());
            }
            return Ok(PolicySpec::Remote(url.to_owned()));
        }
        Err(format!("unknown policy {s:?} (toy | scripted-oracle | scripted-corrupt:P | remote:URL)"))
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Toy => write!(f, "toy"),
            PolicySpec::ScriptedOracle => write!(f, "scripted-oracle"),
            PolicySpec::ScriptedCorrupt(p) => write!(f, "scripted-corrupt:{p}"),
            PolicySpec::Remote(u) => write!(f, "remote:{u}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelerSpec {
    Mock,
    Remote(String),
}

impl FromStr for LabelerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_prefix("remote:") {
            _ if s == "mock" => Ok(LabelerSpec::Mock),
            Some(url) if !url.is_empty() => Ok(LabelerSpec::Remote(url.to_owned())),
            _ => Err(format!("unknown labeler {s:?} (mock | remote:URL)")),
        }
    }
}
