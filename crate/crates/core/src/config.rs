//! Run configuration: one JSON document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::bev::BevConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::mining::MiningConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::{SequenceSpec, SynthParams, TrajectoryParams};
use crate::trainer::{Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub bev: BevConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub mining: MiningConfig,
    pub eval: EvalConfig,
    pub synth: SynthParams,
}

impl RunConfig {
    /// Small model and short schedules for desk-scale runs.
    ///
    /// Held-out "test" loop east of the origin, three training loops to the
    /// west. Synthetic revisit overlap tops out near 0.84, hence the lower
    /// positive threshold.
    pub fn toy() -> Self {
        let seq = |name: &str, center: [f64; 2], loop_radius: f64| SequenceSpec {
            name: name.into(),
            trajectory: TrajectoryParams {
                center,
                loop_radius,
                ..TrajectoryParams::default()
            },
        };
        RunConfig {
            backbone: BackboneConfig::toy(),
            head: HeadConfig {
                dim: 256,
                ..HeadConfig::default()
            },
            train: TrainConfig {
                lr: 3e-5,
                optimizer: Optimizer::Adam,
                augment: false,
                stage1_epochs: 10,
                stage2_epochs: 10,
                ..TrainConfig::default()
            },
            mining: MiningConfig {
                pos_overlap: 0.75,
                neg_overlap: 0.3,
                exclusion: 100.0,
                ..MiningConfig::default()
            },
            eval: EvalConfig {
                exclusion: 100.0,
                ..EvalConfig::default()
            },
            synth: SynthParams {
                sequences: vec![
                    seq("test", [45.0, 0.0], 25.0),
                    seq("train", [-45.0, 0.0], 25.0),
                    seq("train_s", [-55.0, -55.0], 18.0),
                    seq("train_n", [-55.0, 55.0], 18.0),
                ],
                ..SynthParams::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.bev.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.mining.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(json_config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::fsutil::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `section.key=value` overrides. Values parse as JSON when they
    /// can and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::config(s, "override must look like section.key=value"))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) if map.contains_key(part) => {
                        map.get_mut(part).expect("checked")
                    }
                    Value::Array(items) => {
                        match part.parse::<usize>().ok().and_then(|i| items.get_mut(i)) {
                            Some(v) => v,
                            None => return Err(Error::config(key, "no such array element")),
                        }
                    }
                    _ => return Err(Error::config(key, "unknown configuration key")),
                };
            }
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(json_config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json_config_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    // serde reports unknown keys as "unknown field `name`"
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .unwrap_or("config")
        .to_string();
    Error::config(key, msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        let t = RunConfig::toy();
        assert_eq!(RunConfig::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn bundled_toy_config_matches_preset() {
        let bundled = RunConfig::from_json(include_str!("../../../configs/toy.json")).unwrap();
        assert_eq!(bundled, RunConfig::toy());
    }

    #[test]
    fn default_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.margin, 0.3);
        assert_eq!(c.head.dim, 1024);
        assert_eq!(c.head.gem_p, 3.0);
        assert_eq!(c.bev.slices, 5);
        assert_eq!(c.bev.resolution, 0.5);
        assert_eq!(c.eval.success_radius, 3.0);
        assert_eq!(c.eval.exclusion, 600.0);
        assert_eq!(c.mining.pos_overlap, 0.9);
        assert_eq!(c.mining.voxel, 0.5);
        assert_eq!(c.backbone.levels, [2, 7, 12]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::from_json(r#"{"bev": {"slicez": 3}}"#).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "slicez"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = RunConfig::from_json(r#"{"train": {"margin": -1}}"#).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref key, .. } if key == "train.margin"),
            "{err:?}"
        );
        let err = RunConfig::default()
            .with_overrides(&["bev.slices=0"])
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "bev.slices"));
    }

    #[test]
    fn overrides_apply_typed_values() {
        let c = RunConfig::default()
            .with_overrides(&[
                "bev.slices=3",
                "bev.mode=elevation",
                "mining.mode=distance",
                "synth.sequences.0.name=a",
            ])
            .unwrap();
        assert_eq!(c.bev.slices, 3);
        assert_eq!(c.bev.mode, crate::bev::BevMode::Elevation);
        assert_eq!(c.mining.mode, crate::mining::MiningMode::Distance);
        assert_eq!(c.synth.sequences[0].name, "a");
        let err = RunConfig::default()
            .with_overrides(&["bev.nope=1"])
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "bev.nope"));
        assert!(RunConfig::default()
            .with_overrides(&["bev.slices"])
            .is_err());
    }
}
