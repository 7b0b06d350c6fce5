//! The encoder–decoder segmentation network.
//!
//! ```text
//! stem (-> 8) -> feature augmenter
//!   -> S x [ encoder layer at level s -> random downsample ]
//!   -> bottleneck feature augmenter
//!   -> S x [ nearest-neighbor upsample -> concat skip -> 2-layer MLP ]
//!   -> FC -> ReLU -> dropout -> FC -> ReLU -> FC (logits)
//! ```
//!
//! The skip consumed at level `s` is the encoder layer's output at that
//! level, taken before downsampling, so its row count always equals the
//! upsampled tensor's.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmenter::FeatureAugmenterBlock;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn, nn_upsample, sample_indices, Point, PointCloud, SamplingTrace};
use crate::local_context::{EncoderLayer, LocalFeatureExtractor};
use crate::nn::{LinearLayer, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Width of the per-point stem output.
pub const STEM_WIDTH: usize = 8;
/// Total downsampling factor of the strict ladder.
pub const STRICT_DOWNSAMPLING: usize = 512;
/// Stage count of the strict ladder.
pub const STRICT_STAGES: usize = 5;
/// Last encoder width of the strict ladder.
pub const STRICT_BOTTLENECK_WIDTH: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub k: usize,
    pub encoder_widths: Vec<usize>,
    pub downsample_ratios: Vec<usize>,
    /// Feature channels carried by input clouds besides x, y, z.
    pub input_channels: usize,
    pub feature_augmenter: bool,
    pub fa_depth_input: usize,
    pub fa_depth_bottleneck: usize,
    pub local_repetition: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub head_widths: Vec<usize>,
    /// Enforce the five-stage, 512x, 8 -> 512 ladder.
    pub strict: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            k: 16,
            encoder_widths: vec![16, 64, 128, 256, 512],
            downsample_ratios: vec![4, 4, 4, 4, 2],
            input_channels: 0,
            feature_augmenter: true,
            fa_depth_input: 2,
            fa_depth_bottleneck: 2,
            local_repetition: 1,
            num_classes: 2,
            dropout_rate: 0.5,
            head_widths: vec![64, 32],
            strict: true,
        }
    }
}

impl NetworkConfig {
    /// A relaxed-ladder config for small experiments and tests.
    pub fn test_mode(encoder_widths: Vec<usize>, downsample_ratios: Vec<usize>) -> Self {
        NetworkConfig {
            encoder_widths,
            downsample_ratios,
            head_widths: vec![16, 16],
            fa_depth_input: 1,
            fa_depth_bottleneck: 1,
            strict: false,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn total_downsampling(&self) -> usize {
        self.downsample_ratios.iter().product()
    }

    /// Width of the zero-padded stem input.
    pub fn stem_input_width(&self) -> usize {
        (3 + self.input_channels).max(STEM_WIDTH)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.encoder_widths.is_empty() {
            return fail("encoder_widths must not be empty".into());
        }
        if self.encoder_widths.len() != self.downsample_ratios.len() {
            return fail(format!(
                "{} encoder widths but {} downsample ratios",
                self.encoder_widths.len(),
                self.downsample_ratios.len()
            ));
        }
        if self.encoder_widths.contains(&0) {
            return fail("encoder widths must be positive".into());
        }
        if self.downsample_ratios.contains(&0) {
            return fail("downsample ratios must be at least 1".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes = {} must be at least 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.head_widths.len() != 2 || self.head_widths.contains(&0) {
            return fail(format!(
                "head_widths must list two positive widths, got {:?}",
                self.head_widths
            ));
        }
        if self.local_repetition == 0 {
            return fail("local_repetition must be at least 1".into());
        }
        if self.feature_augmenter && (self.fa_depth_input == 0 || self.fa_depth_bottleneck == 0) {
            return fail("feature augmenter depths must be at least 1".into());
        }
        if self.strict {
            if self.stages() != STRICT_STAGES {
                return fail(format!(
                    "strict ladder needs {STRICT_STAGES} stages, got {} (use test mode for shallow ladders)",
                    self.stages()
                ));
            }
            if self.total_downsampling() != STRICT_DOWNSAMPLING {
                return fail(format!(
                    "downsample ratios {:?} multiply to {}, strict ladder needs {STRICT_DOWNSAMPLING}",
                    self.downsample_ratios,
                    self.total_downsampling()
                ));
            }
            if self.encoder_widths.last() != Some(&STRICT_BOTTLENECK_WIDTH) {
                return fail(format!(
                    "strict ladder needs final encoder width {STRICT_BOTTLENECK_WIDTH}, got {:?}",
                    self.encoder_widths.last()
                ));
            }
        }
        Ok(())
    }

    /// Minimum point count a forward pass accepts.
    pub fn min_points(&self) -> usize {
        if self.strict {
            self.total_downsampling()
        } else {
            1
        }
    }

    /// Output widths of the decoder stages, in application order.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let w = &self.encoder_widths;
        (0..w.len())
            .rev()
            .map(|s| if s >= 1 { w[s - 1] } else { w[0] })
            .collect()
    }

    /// Closed-form count of scalar parameters the network registers.
    pub fn parameter_count(&self) -> usize {
        let lin = |i: usize, o: usize| (i + 1) * o;
        let mut total = lin(self.stem_input_width(), STEM_WIDTH);
        if self.feature_augmenter {
            total += FeatureAugmenterBlock::param_count_for(STEM_WIDTH, self.fa_depth_input);
            total += FeatureAugmenterBlock::param_count_for(
                *self.encoder_widths.last().unwrap(),
                self.fa_depth_bottleneck,
            );
        }
        let mut d_in = STEM_WIDTH;
        for &w in &self.encoder_widths {
            total += EncoderLayer::param_count_for(d_in, w, self.local_repetition);
            d_in = w;
        }
        let mut prev = *self.encoder_widths.last().unwrap();
        for (i, out) in self.decoder_widths().into_iter().enumerate() {
            let skip = self.encoder_widths[self.stages() - 1 - i];
            total += lin(prev + skip, out) + lin(out, out);
            prev = out;
        }
        let (h0, h1) = (self.head_widths[0], self.head_widths[1]);
        total + lin(prev, h0) + lin(h0, h1) + lin(h1, self.num_classes)
    }

    /// `key = value` lines, readable by [`NetworkConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "encoder_widths = {}", list(&self.encoder_widths));
        let _ = writeln!(s, "downsample_ratios = {}", list(&self.downsample_ratios));
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "feature_augmenter = {}", self.feature_augmenter);
        let _ = writeln!(s, "fa_depth_input = {}", self.fa_depth_input);
        let _ = writeln!(s, "fa_depth_bottleneck = {}", self.fa_depth_bottleneck);
        let _ = writeln!(s, "local_repetition = {}", self.local_repetition);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "dropout_rate = {:?}", self.dropout_rate);
        let _ = writeln!(s, "head_widths = {}", list(&self.head_widths));
        let _ = writeln!(s, "strict = {}", self.strict);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected `key = value`, got `{line}`")))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "k" => cfg.k = num(key, v)?,
                "encoder_widths" => cfg.encoder_widths = list(key, v)?,
                "downsample_ratios" => cfg.downsample_ratios = list(key, v)?,
                "input_channels" => cfg.input_channels = num(key, v)?,
                "feature_augmenter" => cfg.feature_augmenter = num(key, v)?,
                "fa_depth_input" => cfg.fa_depth_input = num(key, v)?,
                "fa_depth_bottleneck" => cfg.fa_depth_bottleneck = num(key, v)?,
                "local_repetition" => cfg.local_repetition = num(key, v)?,
                "num_classes" => cfg.num_classes = num(key, v)?,
                "dropout_rate" => cfg.dropout_rate = num(key, v)?,
                "head_widths" => cfg.head_widths = list(key, v)?,
                "strict" => cfg.strict = num(key, v)?,
                other => return Err(Error::config(format!("unknown network key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub mlp: Mlp,
}

/// Per-forward record of the resolution ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Point count at each level, finest first (`stages + 1` entries).
    pub level_sizes: Vec<usize>,
    /// Downsampling trace of each encoder stage.
    pub sampling: Vec<SamplingTrace>,
    /// Row count of the skip tensor consumed by each decoder stage, in
    /// decoder order.
    pub skip_rows: Vec<usize>,
}

impl ForwardTrace {
    /// Kept sets of every stage, suitable for replay.
    pub fn kept_sets(&self) -> Vec<Vec<usize>> {
        self.sampling.iter().map(|t| t.kept.clone()).collect()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub trace: ForwardTrace,
}

pub struct SegmentationNetwork {
    config: NetworkConfig,
    params: ParamStore,
    stem: LinearLayer,
    input_fa: Option<FeatureAugmenterBlock>,
    encoders: Vec<EncoderLayer>,
    bottleneck_fa: Option<FeatureAugmenterBlock>,
    decoders: Vec<DecoderStage>,
    head: [LinearLayer; 3],
}

impl SegmentationNetwork {
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let p = &mut params;
        let stem = LinearLayer::new(p, "stem", config.stem_input_width(), STEM_WIDTH, rng);
        let input_fa = if config.feature_augmenter {
            Some(FeatureAugmenterBlock::new(p, "fa_in", STEM_WIDTH, config.fa_depth_input, rng)?)
        } else {
            None
        };
        let mut encoders = Vec::with_capacity(config.stages());
        let mut d_in = STEM_WIDTH;
        for (s, &w) in config.encoder_widths.iter().enumerate() {
            encoders.push(EncoderLayer::new(
                p,
                &format!("enc{s}"),
                d_in,
                w,
                config.local_repetition,
                config.k,
                rng,
            )?);
            d_in = w;
        }
        let bottleneck_fa = if config.feature_augmenter {
            Some(FeatureAugmenterBlock::new(p, "fa_mid", d_in, config.fa_depth_bottleneck, rng)?)
        } else {
            None
        };
        let mut decoders = Vec::with_capacity(config.stages());
        let mut prev = d_in;
        for (i, out) in config.decoder_widths().into_iter().enumerate() {
            let skip = config.encoder_widths[config.stages() - 1 - i];
            let mlp = Mlp::new(p, &format!("dec{i}"), &[prev + skip, out, out], true, rng);
            decoders.push(DecoderStage { mlp });
            prev = out;
        }
        let (h0, h1) = (config.head_widths[0], config.head_widths[1]);
        let head = [
            LinearLayer::new(p, "head.0", prev, h0, rng),
            LinearLayer::new(p, "head.1", h0, h1, rng),
            LinearLayer::new(p, "head.2", h1, config.num_classes, rng),
        ];
        Ok(SegmentationNetwork {
            config,
            params,
            stem,
            input_fa,
            encoders,
            bottleneck_fa,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn encoders(&self) -> &[EncoderLayer] {
        &self.encoders
    }

    /// Overwrites every parameter from named tensors; names and shapes must
    /// match the registry exactly.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, network expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            self.params
                .set(id, value.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }

    /// Projects `[x, y, z, features.., 0..]` to the 8-wide stem.
    pub fn input_lift(&self, tape: &mut Tape, cloud: &PointCloud) -> Result<Var> {
        if cloud.feature_dim() != self.config.input_channels {
            return Err(Error::data(format!(
                "cloud has {} feature channels, network expects {}",
                cloud.feature_dim(),
                self.config.input_channels
            )));
        }
        let width = self.config.stem_input_width();
        let mut data = vec![0.0; cloud.len() * width];
        for (i, row) in data.chunks_mut(width).enumerate() {
            row[..3].copy_from_slice(&cloud.positions()[i]);
            row[3..3 + cloud.feature_dim()].copy_from_slice(cloud.feature_row(i));
        }
        let x = tape.constant(Tensor::new(vec![cloud.len(), width], data)?);
        self.stem.forward(tape, &self.params, x)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        cloud: &PointCloud,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        self.forward_with_plan(tape, cloud, mode, rng, None)
    }

    /// Forward pass that optionally replays given kept sets (one per stage)
    /// instead of drawing fresh random samples.
    pub fn forward_with_plan<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        cloud: &PointCloud,
        mode: Mode,
        rng: &mut R,
        plan: Option<&[Vec<usize>]>,
    ) -> Result<ForwardOutput> {
        let stages = self.config.stages();
        if cloud.len() < self.config.min_points() {
            return Err(Error::data(format!(
                "cloud has {} points; the strict ladder needs at least {} (use test mode for smaller clouds)",
                cloud.len(),
                self.config.min_points()
            )));
        }
        if let Some(plan) = plan {
            if plan.len() != stages {
                return Err(Error::invalid(format!(
                    "sampling plan has {} stages, network has {stages}",
                    plan.len()
                )));
            }
        }
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());

        let mut feats = self.input_lift(tape, cloud)?;
        if let Some(fa) = &self.input_fa {
            feats = fa.augment(tape, &self.params, feats)?;
        }

        let mut positions: Vec<Point> = cloud.positions().to_vec();
        let mut level_sizes = vec![positions.len()];
        let mut skips = Vec::with_capacity(stages);
        let mut sampling = Vec::with_capacity(stages);
        for (s, encoder) in self.encoders.iter().enumerate() {
            let n = positions.len();
            let nbrs = knn(&positions, encoder.effective_k(n))?;
            let encoded = encoder.extract(tape, &self.params, &positions, feats, &nbrs)?;
            skips.push(encoded);
            let kept = match plan {
                Some(plan) => plan[s].clone(),
                None => sample_indices(n, self.config.downsample_ratios[s], &mut sample_rng)?,
            };
            let trace = SamplingTrace::from_kept(&positions, kept)?;
            feats = tape.gather_rows(encoded, &trace.kept, &[trace.coarse_len()])?;
            positions = trace.kept.iter().map(|&i| positions[i]).collect();
            level_sizes.push(positions.len());
            sampling.push(trace);
        }

        if let Some(fa) = &self.bottleneck_fa {
            feats = fa.augment(tape, &self.params, feats)?;
        }

        let mut skip_rows = Vec::with_capacity(stages);
        for (i, stage) in self.decoders.iter().enumerate() {
            let level = stages - 1 - i;
            let trace = &sampling[level];
            let up = nn_upsample(tape, feats, trace, trace.fine_len())?;
            let skip = skips[level];
            skip_rows.push(tape.shape(skip)[0]);
            let joined = tape.concat(&[up, skip], 1)?;
            feats = stage.mlp.forward(tape, &self.params, joined)?;
        }

        let h = self.head[0].forward(tape, &self.params, feats)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.config.dropout_rate, mode == Mode::Train, &mut dropout_rng)?;
        let h = self.head[1].forward(tape, &self.params, h)?;
        let h = tape.relu(h);
        let logits = self.head[2].forward(tape, &self.params, h)?;
        Ok(ForwardOutput {
            logits,
            trace: ForwardTrace {
                level_sizes,
                sampling,
                skip_rows,
            },
        })
    }

    /// Inference-mode class predictions, with sampling seeded by `seed`.
    pub fn predict(&self, cloud: &PointCloud, seed: u64) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = self.forward(&mut tape, cloud, Mode::Infer, &mut rng)?;
        Ok(argmax_rows(tape.value(out.logits)))
    }
}

/// Index of the largest entry in each row (lowest index on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
