//! TOML configuration for the runtime and the demo harness.
//!
//! Addresses, masks, and keys are 64-bit values whose interesting bits sit
//! in the top half, far outside TOML's signed-integer range. They are
//! therefore written as hex *strings*:
//!
//! ```toml
//! [runtime]
//! handshake_timeout_ms = 5000
//! suppress_child_notices = true
//! exit_kill = true
//!
//! [[namespace.range]]
//! base = "0xffff_8000_0000_0000"
//! len = "0x7000_0000_0000"
//! access = ["load", "store", "exec"]
//!
//! [[scheme]]
//! id = 1
//! kind = "segv-rw"
//! type = "mask-or"
//! mask = "0xffff_8000_0000_0000"
//!
//! [[scheme]]
//! id = 2
//! kind = "segv-x"
//! type = "xor-key"
//! key = "0xffff_8000_3b9a_ca11"
//!
//! [demo]
//! fragments = 3
//! inputs = 128
//! seed = "0x5eed"
//! method = "segv-rw"
//! flavor = "inline"
//! ```
//!
//! A hex field also accepts a plain TOML integer when the value fits, and
//! underscores may group digits. Sections and fields all have defaults, so
//! the empty document is a valid config equal to [`Config::default`].

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer};
use thiserror::Error;

use crate::codec::{
    access, CodecConfig, CodecScheme, FaultKind, FaultNamespace, NsRange, SchemeParams,
    MAX_RANGES, MAX_SCHEMES,
};
use crate::whitelist::SiteFlavor;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A u64 parsed from either `"0x..."` (underscores allowed) or a bare
/// non-negative TOML integer.
fn de_hex<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Int(v) if v >= 0 => Ok(v as u64),
        Repr::Int(v) => Err(serde::de::Error::custom(format!(
            "negative value {v} is not a valid address/mask"
        ))),
        Repr::Str(s) => parse_hex_u64(&s).map_err(serde::de::Error::custom),
    }
}

/// Shared by config parsing and CLI argument parsing.
pub fn parse_hex_u64(s: &str) -> Result<u64, String> {
    let cleaned: String = s.trim().chars().filter(|c| *c != '_').collect();
    let (digits, radix) = match cleaned.strip_prefix("0x").or_else(|| cleaned.strip_prefix("0X")) {
        Some(rest) => (rest, 16),
        None => (cleaned.as_str(), 10),
    };
    u64::from_str_radix(digits, radix).map_err(|e| format!("'{s}' is not a valid u64: {e}"))
}

#[derive(Clone, Copy, Debug, Deserialize)]
struct Hex(#[serde(deserialize_with = "de_hex")] u64);

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    runtime: RawRuntime,
    #[serde(default)]
    eventlog: RawEventLog,
    #[serde(default)]
    namespace: RawNamespace,
    #[serde(default, rename = "scheme")]
    schemes: Vec<RawScheme>,
    #[serde(default)]
    demo: RawDemo,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRuntime {
    #[serde(default = "default_handshake_ms")]
    handshake_timeout_ms: u64,
    #[serde(default = "default_true")]
    suppress_child_notices: bool,
    #[serde(default = "default_true")]
    exit_kill: bool,
    /// 0 disables the watchdog.
    #[serde(default)]
    watchdog_secs: u64,
}

fn default_handshake_ms() -> u64 {
    5000
}

fn default_true() -> bool {
    true
}

impl Default for RawRuntime {
    fn default() -> Self {
        RawRuntime {
            handshake_timeout_ms: default_handshake_ms(),
            suppress_child_notices: true,
            exit_kill: true,
            watchdog_secs: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawEventLog {
    #[serde(default)]
    path: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawNamespace {
    #[serde(default, rename = "range")]
    ranges: Vec<RawRange>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    base: Hex,
    len: Hex,
    #[serde(default = "default_access")]
    access: Vec<String>,
}

fn default_access() -> Vec<String> {
    vec!["load".into(), "store".into(), "exec".into()]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    id: u16,
    kind: String,
    #[serde(rename = "type")]
    kind_of: String,
    mask: Option<Hex>,
    key: Option<Hex>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDemo {
    #[serde(default = "default_fragments")]
    fragments: u32,
    #[serde(default = "default_inputs")]
    inputs: u32,
    #[serde(default = "default_seed", deserialize_with = "de_hex")]
    seed: u64,
    #[serde(default = "default_method")]
    method: String,
    #[serde(default = "default_flavor")]
    flavor: String,
}

fn default_fragments() -> u32 {
    3
}

fn default_inputs() -> u32 {
    128
}

fn default_seed() -> u64 {
    0x5eed
}

fn default_method() -> String {
    "segv-rw".into()
}

fn default_flavor() -> String {
    "inline".into()
}

impl Default for RawDemo {
    fn default() -> Self {
        RawDemo {
            fragments: default_fragments(),
            inputs: default_inputs(),
            seed: default_seed(),
            method: default_method(),
            flavor: default_flavor(),
        }
    }
}

/// Validated runtime knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub handshake_timeout_ms: u64,
    pub suppress_child_notices: bool,
    pub exit_kill: bool,
    pub watchdog_secs: u64,
}

/// Validated demo knobs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoConfig {
    pub fragments: u32,
    pub inputs: u32,
    pub seed: u64,
    pub method: FaultKind,
    pub flavor: SiteFlavor,
}

/// The whole validated configuration.
#[derive(Clone, Debug)]
pub struct Config {
    pub runtime: RuntimeConfig,
    pub eventlog_path: Option<PathBuf>,
    pub namespace: FaultNamespace,
    pub schemes: Vec<CodecScheme>,
    pub demo: DemoConfig,
}

impl Default for Config {
    fn default() -> Self {
        RawConfig::default().validate().expect("builtin defaults are valid")
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        raw.validate()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Config::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Assemble the codec view of this config once the text segment
    /// bounds of the running binary are known.
    pub fn codec_config(&self, code_lo: u64, code_hi: u64) -> CodecConfig {
        let mut cc = CodecConfig::new(self.namespace, code_lo, code_hi);
        for s in &self.schemes {
            cc.add_scheme(*s);
        }
        cc
    }
}

fn parse_access(words: &[String]) -> Result<u32, ConfigError> {
    let mut bits = 0;
    for w in words {
        bits |= match w.as_str() {
            "load" => access::LOAD,
            "store" => access::STORE,
            "exec" => access::EXEC,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown access class '{other}' (expected load, store, or exec)"
                )))
            }
        };
    }
    if bits == 0 {
        return Err(ConfigError::Invalid("namespace range with empty access set".into()));
    }
    Ok(bits)
}

impl RawConfig {
    fn validate(self) -> Result<Config, ConfigError> {
        let namespace = if self.namespace.ranges.is_empty() {
            FaultNamespace::default()
        } else {
            if self.namespace.ranges.len() > MAX_RANGES {
                return Err(ConfigError::Invalid(format!(
                    "at most {MAX_RANGES} namespace ranges supported"
                )));
            }
            let mut ns = FaultNamespace::empty();
            for r in &self.namespace.ranges {
                if r.len.0 == 0 {
                    return Err(ConfigError::Invalid("namespace range with zero length".into()));
                }
                ns.push(NsRange::new(r.base.0, r.len.0, parse_access(&r.access)?));
            }
            ns
        };

        let schemes = if self.schemes.is_empty() {
            vec![
                CodecScheme {
                    scheme_id: 1,
                    _pad: 0,
                    fault_kind: FaultKind::SegvLoadStore,
                    params: SchemeParams::MaskOr { mask: crate::codec::KERNEL_HALF_BASE },
                },
                CodecScheme {
                    scheme_id: 2,
                    _pad: 0,
                    fault_kind: FaultKind::SegvExec,
                    params: SchemeParams::XorKey {
                        key: crate::codec::KERNEL_HALF_BASE ^ 0x3b9a_ca11,
                    },
                },
            ]
        } else {
            if self.schemes.len() > MAX_SCHEMES {
                return Err(ConfigError::Invalid(format!(
                    "at most {MAX_SCHEMES} schemes supported"
                )));
            }
            let mut out = Vec::new();
            for raw in &self.schemes {
                if raw.id == 0 {
                    return Err(ConfigError::Invalid("scheme id 0 is reserved".into()));
                }
                if out.iter().any(|s: &CodecScheme| s.scheme_id == raw.id) {
                    return Err(ConfigError::Invalid(format!("duplicate scheme id {}", raw.id)));
                }
                let fault_kind = FaultKind::from_str(&raw.kind).map_err(ConfigError::Invalid)?;
                if fault_kind == FaultKind::TrapReference {
                    return Err(ConfigError::Invalid(
                        "trap switches carry an identifier, not an encoded address; \
                         they take no scheme"
                            .into(),
                    ));
                }
                let params = match raw.kind_of.as_str() {
                    "mask-or" => SchemeParams::MaskOr {
                        mask: raw
                            .mask
                            .ok_or_else(|| {
                                ConfigError::Invalid(format!(
                                    "scheme {} is mask-or but has no mask",
                                    raw.id
                                ))
                            })?
                            .0,
                    },
                    "xor-key" => SchemeParams::XorKey {
                        key: raw
                            .key
                            .ok_or_else(|| {
                                ConfigError::Invalid(format!(
                                    "scheme {} is xor-key but has no key",
                                    raw.id
                                ))
                            })?
                            .0,
                    },
                    other => {
                        return Err(ConfigError::Invalid(format!(
                            "unknown scheme type '{other}' (expected mask-or or xor-key)"
                        )))
                    }
                };
                out.push(CodecScheme { scheme_id: raw.id, _pad: 0, fault_kind, params });
            }
            out
        };

        let method = FaultKind::from_str(&self.demo.method).map_err(ConfigError::Invalid)?;
        let flavor = SiteFlavor::from_str(&self.demo.flavor).map_err(ConfigError::Invalid)?;
        if self.demo.fragments > crate::codec::MAX_FRAGMENTS as u32 {
            return Err(ConfigError::Invalid(format!(
                "demo.fragments exceeds the registry capacity of {}",
                crate::codec::MAX_FRAGMENTS
            )));
        }

        Ok(Config {
            runtime: RuntimeConfig {
                handshake_timeout_ms: self.runtime.handshake_timeout_ms,
                suppress_child_notices: self.runtime.suppress_child_notices,
                exit_kill: self.runtime.exit_kill,
                watchdog_secs: self.runtime.watchdog_secs,
            },
            eventlog_path: self.eventlog.path,
            namespace,
            schemes,
            demo: DemoConfig {
                fragments: self.demo.fragments,
                inputs: self.demo.inputs,
                seed: self.demo.seed,
                method,
                flavor,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::KERNEL_HALF_BASE;

    #[test]
    fn empty_document_equals_builtin_defaults() {
        let cfg = Config::from_toml_str("").unwrap();
        let def = Config::default();
        assert_eq!(cfg.runtime, def.runtime);
        assert_eq!(cfg.demo, def.demo);
        assert_eq!(cfg.schemes.len(), 2);
        assert!(cfg.namespace.contains(KERNEL_HALF_BASE + 0x1000, access::LOAD));
    }

    #[test]
    fn hex_strings_with_underscores_parse() {
        let cfg = Config::from_toml_str(
            r#"
            [[namespace.range]]
            base = "0xffff_8000_0000_0000"
            len = "0x7000_0000_0000"
            access = ["load", "store"]
            "#,
        )
        .unwrap();
        assert!(cfg.namespace.contains(0xffff_8000_0000_0100, access::STORE));
        assert!(!cfg.namespace.contains(0xffff_8000_0000_0100, access::EXEC));
    }

    #[test]
    fn bare_integers_work_for_small_values() {
        let cfg = Config::from_toml_str(
            r#"
            [[namespace.range]]
            base = 0
            len = 65536
            [demo]
            seed = 77
            "#,
        )
        .unwrap();
        assert!(cfg.namespace.contains(0x100, access::EXEC));
        assert_eq!(cfg.demo.seed, 77);
    }

    #[test]
    fn doc_example_grammar_parses() {
        let cfg = Config::from_toml_str(
            r#"
            [runtime]
            handshake_timeout_ms = 5000
            suppress_child_notices = true
            exit_kill = true

            [[namespace.range]]
            base = "0xffff_8000_0000_0000"
            len = "0x7000_0000_0000"
            access = ["load", "store", "exec"]

            [[scheme]]
            id = 1
            kind = "segv-rw"
            type = "mask-or"
            mask = "0xffff_8000_0000_0000"

            [[scheme]]
            id = 2
            kind = "segv-x"
            type = "xor-key"
            key = "0xffff_8000_3b9a_ca11"

            [demo]
            fragments = 3
            inputs = 128
            seed = "0x5eed"
            method = "segv-rw"
            flavor = "inline"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.schemes.len(), 2);
        assert_eq!(cfg.schemes[0].params, SchemeParams::MaskOr { mask: KERNEL_HALF_BASE });
        assert_eq!(cfg.demo.method, FaultKind::SegvLoadStore);
        assert_eq!(cfg.demo.flavor, SiteFlavor::Inline);
    }

    #[test]
    fn malformed_hex_is_rejected() {
        let err = Config::from_toml_str(
            r#"
            [[namespace.range]]
            base = "0xnope"
            len = "0x1000"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not a valid u64"), "{err}");
    }

    #[test]
    fn negative_integer_is_rejected() {
        let err = Config::from_toml_str(
            r#"
            [[namespace.range]]
            base = -1
            len = 4096
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("negative"), "{err}");
    }

    #[test]
    fn duplicate_scheme_ids_are_rejected() {
        let err = Config::from_toml_str(
            r#"
            [[scheme]]
            id = 1
            kind = "segv-rw"
            type = "mask-or"
            mask = "0xffff_8000_0000_0000"

            [[scheme]]
            id = 1
            kind = "segv-x"
            type = "xor-key"
            key = "0xffff_8000_0000_0001"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate scheme id"), "{err}");
    }

    #[test]
    fn trap_scheme_is_rejected() {
        let err = Config::from_toml_str(
            r#"
            [[scheme]]
            id = 3
            kind = "trap"
            type = "mask-or"
            mask = "0x1000"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("no scheme"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml_str("[runtime]\nhandshake_timeout = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Toml(_)), "{err}");
    }

    #[test]
    fn zero_length_range_is_rejected() {
        let err = Config::from_toml_str(
            r#"
            [[namespace.range]]
            base = "0x0"
            len = "0x0"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("zero length"), "{err}");
    }

    #[test]
    fn codec_config_assembly_uses_parsed_schemes() {
        let cfg = Config::from_toml_str(
            r#"
            [[scheme]]
            id = 7
            kind = "segv-rw"
            type = "mask-or"
            mask = "0xffff_8000_0000_0000"
            "#,
        )
        .unwrap();
        let cc = cfg.codec_config(0x5500_0000_0000, 0x5500_0100_0000);
        assert!(cc.scheme_by_id(7).is_some());
        assert!(cc.scheme_by_id(1).is_none());
    }
}
