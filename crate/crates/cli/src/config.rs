//! The TOML run file.
//!
//! Every key is optional. Missing network keys fall back to the full
//! five-stage defaults, or to a small three-stage ladder in test mode.
//! Unknown keys are rejected. After command-line overrides are applied the
//! fully resolved file is written to the output directory as `config.toml`,
//! and reading that file back reproduces the run.

use std::path::{Path, PathBuf};

use pgseg::io::synth::SceneSpec;
use pgseg::network::NetworkConfig;
use pgseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_context, CliError, CliResult};

pub const ECHO_NAME: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub test_mode: Option<bool>,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub scene: SceneSection,
    pub data: DataSection,
    pub gen: GenSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub k: Option<usize>,
    pub encoder_widths: Option<Vec<usize>>,
    pub downsample_ratios: Option<Vec<usize>>,
    pub input_channels: Option<usize>,
    pub feature_augmenter: Option<bool>,
    pub fa_depth_input: Option<usize>,
    pub fa_depth_bottleneck: Option<usize>,
    pub local_repetition: Option<usize>,
    pub num_classes: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub head_widths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr0: Option<f64>,
    pub decay: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub class_weighting: Option<bool>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub extent: Option<f64>,
    pub point_density: Option<f64>,
    pub pothole_count: Option<usize>,
    pub radius_range: Option<[f64; 2]>,
    pub depth_range: Option<[f64; 2]>,
    pub roughness: Option<f64>,
    pub noise_sigma: Option<f64>,
}

/// Where datasets come from. Explicit paths (files or directories of
/// `.xyzl` / `.ply` files) take precedence over generated clouds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<Vec<PathBuf>>,
    pub val: Option<Vec<PathBuf>>,
    pub test: Option<Vec<PathBuf>>,
    pub synthetic_train: Option<usize>,
    pub synthetic_val: Option<usize>,
    pub synthetic_test: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub count: Option<usize>,
    pub format: Option<String>,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub test_mode: bool,
}

pub const TEST_MODE_WIDTHS: [usize; 3] = [16, 32, 64];
pub const TEST_MODE_RATIOS: [usize; 3] = [4, 4, 4];

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("run config: {}", e.message())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies overrides and fills every missing key with its default.
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if o.test_mode {
            self.test_mode = Some(true);
        }
        let test_mode = *self.test_mode.get_or_insert(false);
        self.seed.get_or_insert(0);
        self.out.get_or_insert_with(|| PathBuf::from("pgseg-out"));

        let base = if test_mode {
            NetworkConfig::test_mode(TEST_MODE_WIDTHS.to_vec(), TEST_MODE_RATIOS.to_vec())
        } else {
            NetworkConfig::default()
        };
        let n = &mut self.network;
        n.k.get_or_insert(base.k);
        n.encoder_widths.get_or_insert(base.encoder_widths);
        n.downsample_ratios.get_or_insert(base.downsample_ratios);
        n.input_channels.get_or_insert(base.input_channels);
        n.feature_augmenter.get_or_insert(base.feature_augmenter);
        n.fa_depth_input.get_or_insert(base.fa_depth_input);
        n.fa_depth_bottleneck.get_or_insert(base.fa_depth_bottleneck);
        n.local_repetition.get_or_insert(base.local_repetition);
        n.num_classes.get_or_insert(base.num_classes);
        n.dropout_rate.get_or_insert(base.dropout_rate);
        n.head_widths.get_or_insert(base.head_widths);

        let t = &mut self.train;
        let td = TrainConfig::default();
        t.epochs.get_or_insert(td.epochs);
        t.lr0.get_or_insert(td.lr0);
        t.decay.get_or_insert(td.decay);
        t.adam_beta1.get_or_insert(td.adam_beta1);
        t.adam_beta2.get_or_insert(td.adam_beta2);
        t.adam_eps.get_or_insert(td.adam_eps);
        t.class_weighting.get_or_insert(td.class_weighting);
        t.checkpoint_every.get_or_insert(td.checkpoint_every);

        let s = &mut self.scene;
        let sd = SceneSpec::default();
        s.extent.get_or_insert(sd.extent);
        s.point_density.get_or_insert(sd.point_density);
        s.pothole_count.get_or_insert(sd.pothole_count);
        s.radius_range.get_or_insert([sd.radius_range.0, sd.radius_range.1]);
        s.depth_range.get_or_insert([sd.depth_range.0, sd.depth_range.1]);
        s.roughness.get_or_insert(sd.roughness);
        s.noise_sigma.get_or_insert(sd.noise_sigma);

        let d = &mut self.data;
        d.train.get_or_insert_with(Vec::new);
        d.val.get_or_insert_with(Vec::new);
        d.test.get_or_insert_with(Vec::new);
        d.synthetic_train.get_or_insert(0);
        d.synthetic_val.get_or_insert(0);
        d.synthetic_test.get_or_insert(0);

        self.gen.count.get_or_insert(1);
        let format = self.gen.format.get_or_insert_with(|| "xyzl".into());
        if format != "xyzl" && format != "ply" {
            return Err(CliError::Config(format!("gen.format must be `xyzl` or `ply`, got `{format}`")));
        }

        self.network_config()?.validate()?;
        self.train_config()?.validate()?;
        self.scene_spec(0)?.validate()?;
        Ok(self)
    }

    fn resolved<T: Clone>(v: &Option<T>, key: &str) -> CliResult<T> {
        v.clone().ok_or_else(|| CliError::Config(format!("`{key}` is unresolved")))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("pgseg-out"))
    }

    pub fn network_config(&self) -> CliResult<NetworkConfig> {
        let n = &self.network;
        Ok(NetworkConfig {
            k: Self::resolved(&n.k, "network.k")?,
            encoder_widths: Self::resolved(&n.encoder_widths, "network.encoder_widths")?,
            downsample_ratios: Self::resolved(&n.downsample_ratios, "network.downsample_ratios")?,
            input_channels: Self::resolved(&n.input_channels, "network.input_channels")?,
            feature_augmenter: Self::resolved(&n.feature_augmenter, "network.feature_augmenter")?,
            fa_depth_input: Self::resolved(&n.fa_depth_input, "network.fa_depth_input")?,
            fa_depth_bottleneck: Self::resolved(&n.fa_depth_bottleneck, "network.fa_depth_bottleneck")?,
            local_repetition: Self::resolved(&n.local_repetition, "network.local_repetition")?,
            num_classes: Self::resolved(&n.num_classes, "network.num_classes")?,
            dropout_rate: Self::resolved(&n.dropout_rate, "network.dropout_rate")?,
            head_widths: Self::resolved(&n.head_widths, "network.head_widths")?,
            strict: !self.test_mode.unwrap_or(false),
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: Self::resolved(&t.epochs, "train.epochs")?,
            lr0: Self::resolved(&t.lr0, "train.lr0")?,
            decay: Self::resolved(&t.decay, "train.decay")?,
            adam_beta1: Self::resolved(&t.adam_beta1, "train.adam_beta1")?,
            adam_beta2: Self::resolved(&t.adam_beta2, "train.adam_beta2")?,
            adam_eps: Self::resolved(&t.adam_eps, "train.adam_eps")?,
            seed: self.seed(),
            class_weighting: Self::resolved(&t.class_weighting, "train.class_weighting")?,
            checkpoint_every: Self::resolved(&t.checkpoint_every, "train.checkpoint_every")?,
        })
    }

    pub fn scene_spec(&self, seed: u64) -> CliResult<SceneSpec> {
        let s = &self.scene;
        let r = Self::resolved(&s.radius_range, "scene.radius_range")?;
        let d = Self::resolved(&s.depth_range, "scene.depth_range")?;
        Ok(SceneSpec {
            extent: Self::resolved(&s.extent, "scene.extent")?,
            point_density: Self::resolved(&s.point_density, "scene.point_density")?,
            pothole_count: Self::resolved(&s.pothole_count, "scene.pothole_count")?,
            radius_range: (r[0], r[1]),
            depth_range: (d[0], d[1]),
            roughness: Self::resolved(&s.roughness, "scene.roughness")?,
            noise_sigma: Self::resolved(&s.noise_sigma, "scene.noise_sigma")?,
            seed,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize run config: {e}")))
    }

    /// Writes the resolved config to `<out>/config.toml`.
    pub fn echo(&self) -> CliResult<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).map_err(io_context(&dir))?;
        let path = dir.join(ECHO_NAME);
        pgseg::io::write_atomic(&path, self.to_toml()?.as_bytes()).map_err(io_context(&path))?;
        Ok(path)
    }
}
