//! Versioned JSON checkpoints.
//!
//! A checkpoint holds the policy architecture, the parameters as decimal
//! floats (written with round-trip precision, so a reload is bit-exact), an
//! echo of the producing config, the generation index, and the counters the
//! seeding scheme needs to continue. Files are written to a sibling temporary
//! and renamed into place, so a crash never leaves a half-written checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{EsConfig, EsState, GenerationRecord};
use crate::error::{io_err, Error, Result};
use crate::policy::{MlpArchitecture, ParameterVector};
use crate::ppo::UpdateRecord;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ppo,
    Es,
}

/// Where the deterministic streams stand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngCounters {
    pub master_seed: u64,
    /// Next generation (ES) or update (PPO) index.
    pub next_index: u64,
    pub steps_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub architecture: MlpArchitecture,
    pub params: ParameterVector,
    pub config: serde_json::Value,
    pub generation: usize,
    pub rng: RngCounters,
    #[serde(default)]
    pub history: Vec<GenerationRecord>,
    #[serde(default)]
    pub ppo_curve: Vec<UpdateRecord>,
}

impl Checkpoint {
    /// Stage-1 output: the anchor policy.
    pub fn anchor(
        architecture: MlpArchitecture,
        params: ParameterVector,
        config: &impl Serialize,
        seed: u64,
        steps_used: u64,
        curve: Vec<UpdateRecord>,
    ) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            stage: Stage::Ppo,
            architecture,
            params,
            config: serde_json::to_value(config)?,
            generation: curve.len(),
            rng: RngCounters { master_seed: seed, next_index: curve.len() as u64, steps_used },
            history: Vec::new(),
            ppo_curve: curve,
        })
    }

    pub fn from_es_state(architecture: MlpArchitecture, state: &EsState, config: &EsConfig) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            stage: Stage::Es,
            architecture,
            params: state.params.clone(),
            config: serde_json::to_value(config)?,
            generation: state.generation,
            rng: RngCounters {
                master_seed: config.seed,
                next_index: state.generation as u64,
                steps_used: state.steps_used,
            },
            history: state.history.clone(),
            ppo_curve: Vec::new(),
        })
    }

    pub fn es_state(&self) -> EsState {
        EsState {
            params: self.params.clone(),
            generation: self.generation,
            steps_used: self.rng.steps_used,
            history: self.history.clone(),
        }
    }

    /// The embedded config, decoded.
    pub fn es_config(&self) -> Result<EsConfig> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_owned(), reason };
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.architecture.validate().map_err(|e| bad(e.to_string()))?;
        let want = self.architecture.param_count();
        if self.params.len() != want {
            return Err(bad(format!("{} parameters for an architecture that needs {want}", self.params.len())));
        }
        if !self.params.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Writes `checkpoint` atomically.
pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string_pretty(checkpoint)?;
    write_atomic(path, json.as_bytes())
}

/// Reads and validates a checkpoint.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint { path: path.to_owned(), reason: e.to_string() })?;
    ckpt.check(path)?;
    Ok(ckpt)
}

/// Writes `bytes` to a temporary sibling, syncs, and renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`,
/// which plain JSON numbers cannot carry.
pub(crate) mod float_or_tag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Tag(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected a number, got `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_from, Control, FnObjective};

    fn arch() -> MlpArchitecture {
        MlpArchitecture::new(3, vec![4], 2).unwrap()
    }

    fn odd_params() -> ParameterVector {
        // Values with long binary expansions to exercise round-tripping.
        let values = (0..arch().param_count()).map(|i| (i as f64 + 0.1).sqrt() / 3.0 - 1e-17 * i as f64).collect();
        ParameterVector::new(values).unwrap()
    }

    #[test]
    fn es_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let cfg = EsConfig { generations: 3, pairs: 2, ..EsConfig::tdes(5) };
        let obj = FnObjective(|x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>());
        let out = run_from(crate::engine::EsState::start(odd_params()), &obj, &cfg, |_, _| Ok(Control::Continue)).unwrap();
        let ckpt = Checkpoint::from_es_state(arch(), &out.state, &cfg).unwrap();
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   ckpt.params.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.es_state(), out.state);
        assert_eq!(back.es_config().unwrap(), cfg);
        assert!(!dir.path().join("ckpt.json.tmp").exists());
    }

    #[test]
    fn anchor_is_tagged_ppo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchor.json");
        let ckpt = Checkpoint::anchor(arch(), odd_params(), &serde_json::json!({"lr": 0.05}), 1, 400, Vec::new()).unwrap();
        save(&path, &ckpt).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"stage\": \"ppo\""));
        assert_eq!(load(&path).unwrap(), ckpt);
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "{ \"format_version\": 1, ").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));

        let mut ckpt = Checkpoint::anchor(arch(), odd_params(), &(), 0, 0, Vec::new()).unwrap();
        ckpt.format_version = 99;
        save(&path, &ckpt).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));

        ckpt.format_version = FORMAT_VERSION;
        ckpt.params = ParameterVector::zeros(3);
        save(&path, &ckpt).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));

        assert!(matches!(load(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn non_finite_diagnostics_survive() {
        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "float_or_tag")] f64);
        for v in [f64::INFINITY, f64::NEG_INFINITY, 1.5, -0.0] {
            let back: W = serde_json::from_str(&serde_json::to_string(&W(v)).unwrap()).unwrap();
            assert_eq!(back.0.to_bits(), v.to_bits());
        }
        let nan: W = serde_json::from_str("\"nan\"").unwrap();
        assert!(nan.0.is_nan());
        assert!(serde_json::from_str::<W>("\"big\"").is_err());
    }
}
