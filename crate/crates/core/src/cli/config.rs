//! Flat `key = value` configuration files.
//!
//! One file can hold scene, dataset, network, training and experiment keys;
//! each command accepts the groups it uses and rejects every other key.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::model::PoseNetConfig;
use crate::synthgen::{MotionPattern, SceneConfig};
use crate::trainer::{ExperimentConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    /// `(line number, key, value)` in file order.
    pub entries: Vec<(usize, String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("bad key {k:?}"),
                });
            }
            if let Some((prev, ..)) = entries.iter().find(|(_, key, _)| key == k) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {k:?} (first on line {prev})"),
                });
            }
            entries.push((i + 1, k.to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument {
        what: "config value",
        reason: format!("{key}: cannot parse {v:?}"),
    })
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| value(key, s.trim())).collect()
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::InvalidArgument {
            what: "config value",
            reason: format!("{key}: expected two comma-separated numbers"),
        }),
    }
}

fn set_scene(s: &mut SceneConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "primitive_count" => s.primitive_count = value(key, v)?,
        "depth_range" => s.depth_range = pair(key, v)?,
        "translation_range" => s.translation_range = pair(key, v)?,
        "rotation_range" => s.rotation_range = pair(key, v)?,
        "environment_id" => s.environment_id = value(key, v)?,
        "min_valid_fraction" => s.min_valid_fraction = value(key, v)?,
        "camera" => {
            let c: Vec<f64> = list(key, v)?;
            if c.len() != 6 {
                return Err(Error::InvalidArgument {
                    what: "camera",
                    reason: "expected fx,fy,ox,oy,width,height".into(),
                });
            }
            s.intrinsics = CameraIntrinsics::new(c[0], c[1], c[2], c[3], c[4] as usize, c[5] as usize)?;
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn scene_entries(s: &SceneConfig) -> Vec<(String, String)> {
    let k = &s.intrinsics;
    [
        ("primitive_count", s.primitive_count.to_string()),
        ("depth_range", format!("{},{}", s.depth_range.0, s.depth_range.1)),
        ("translation_range", format!("{},{}", s.translation_range.0, s.translation_range.1)),
        ("rotation_range", format!("{},{}", s.rotation_range.0, s.rotation_range.1)),
        ("environment_id", s.environment_id.to_string()),
        ("min_valid_fraction", s.min_valid_fraction.to_string()),
        ("camera", format!("{},{},{},{},{},{}", k.fx, k.fy, k.ox, k.oy, k.width, k.height)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn set_net(n: &mut PoseNetConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "conv_channels" => n.conv_channels = list(key, v)?,
        "head_widths" => n.head_widths = list(key, v)?,
        "zero_init_output" => n.zero_init_output = value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn net_entries(n: &PoseNetConfig) -> Vec<(String, String)> {
    vec![
        ("conv_channels".into(), join(&n.conv_channels)),
        ("head_widths".into(), join(&n.head_widths)),
        ("zero_init_output".into(), n.zero_init_output.to_string()),
    ]
}

fn unknown(line: usize, key: &str) -> Error {
    Error::Parse {
        line,
        message: format!("unknown key {key:?}"),
    }
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Parse { .. } => e,
        other => Error::Parse {
            line,
            message: other.to_string(),
        },
    }
}

/// Settings of `generate`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub scene: SceneConfig,
    pub samples: usize,
    pub pattern: MotionPattern,
    /// Environment ids the samples cycle through.
    pub environments: Vec<u64>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            samples: 100,
            pattern: MotionPattern::Full6Dof,
            environments: vec![0],
        }
    }
}

impl GenerateConfig {
    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        let mut c = Self::default();
        for (line, key, v) in &file.entries {
            let known = match key.as_str() {
                "samples" => {
                    c.samples = value(key, v).map_err(|e| at_line(*line, e))?;
                    true
                }
                "pattern" => {
                    c.pattern = v.parse().map_err(|e| at_line(*line, e))?;
                    true
                }
                "environments" => {
                    c.environments = list(key, v).map_err(|e| at_line(*line, e))?;
                    true
                }
                "seed" => {
                    c.scene.seed = value(key, v).map_err(|e| at_line(*line, e))?;
                    true
                }
                _ => set_scene(&mut c.scene, key, v).map_err(|e| at_line(*line, e))?,
            };
            if !known {
                return Err(unknown(*line, key));
            }
        }
        Ok(c)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e = vec![
            ("samples".to_string(), self.samples.to_string()),
            ("pattern".to_string(), self.pattern.to_string()),
            ("environments".to_string(), join(&self.environments)),
            ("seed".to_string(), self.scene.seed.to_string()),
        ];
        e.extend(scene_entries(&self.scene));
        e
    }
}

/// Settings of `train`: training keys plus the network shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainFileConfig {
    pub train: TrainConfig,
    pub net: PoseNetConfig,
}

impl TrainFileConfig {
    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        let mut c = Self::default();
        for (line, key, v) in &file.entries {
            let known = c.train.set(key, v).map_err(|e| at_line(*line, e))?
                || set_net(&mut c.net, key, v).map_err(|e| at_line(*line, e))?;
            if !known {
                return Err(unknown(*line, key));
            }
        }
        Ok(c)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = self
            .train
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        e.extend(net_entries(&self.net));
        e
    }
}

fn set_experiment(c: &mut ExperimentConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "seed" => {
            let s: u64 = value(key, v)?;
            c.train.seed = s;
            c.scene.seed = s;
        }
        "pattern" => c.pattern = v.parse()?,
        "train_environments" => c.train_environments = value(key, v)?,
        "test_environments" => c.test_environments = value(key, v)?,
        "train_size" => c.train_size = value(key, v)?,
        "test_size" => c.test_size = value(key, v)?,
        "sizes" => c.sizes = list(key, v)?,
        "test_scale" => c.test_scale = value(key, v)?,
        "train_eval_size" => c.train_eval_size = value(key, v)?,
        _ => {
            return Ok(c.train.set(key, v)? || set_scene(&mut c.scene, key, v)? || set_net(&mut c.net, key, v)?);
        }
    }
    Ok(true)
}

pub fn experiment_from_file(file: &ConfigFile, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = base;
    for (line, key, v) in &file.entries {
        if !set_experiment(&mut c, key, v).map_err(|e| at_line(*line, e))? {
            return Err(unknown(*line, key));
        }
    }
    Ok(c)
}

pub fn experiment_entries(c: &ExperimentConfig) -> Vec<(String, String)> {
    let mut e: Vec<(String, String)> = vec![
        ("pattern".into(), c.pattern.to_string()),
        ("train_environments".into(), c.train_environments.to_string()),
        ("test_environments".into(), c.test_environments.to_string()),
        ("train_size".into(), c.train_size.to_string()),
        ("test_size".into(), c.test_size.to_string()),
        ("sizes".into(), join(&c.sizes)),
        ("test_scale".into(), c.test_scale.to_string()),
        ("train_eval_size".into(), c.train_eval_size.to_string()),
    ];
    e.extend(c.train.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
    e.extend(scene_entries(&c.scene));
    e.extend(net_entries(&c.net));
    e
}
