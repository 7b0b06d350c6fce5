//! Feature augmentation by local–global fusion.
//!
//! One cascade step summarizes the cloud with a columnwise max, appends that
//! summary to every point, maps the pair back to `d` channels, and adds a
//! refinement of the difference to the input as a residual:
//!
//! ```text
//! g      = max_i x_i
//! agg_i  = A([x_i, g])
//! out_i  = x_i + B(agg_i - x_i)
//! ```
//!
//! `A` is `2d -> d -> d` and `B` is `d -> d -> d`, both with a ReLU between
//! layers and a linear output. The block never changes the point count or
//! the feature width.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore};

/// Columnwise max over points: `[N, d] -> [1, d]`.
pub fn global_summary(tape: &mut Tape, features: Var) -> Result<Var> {
    Ok(tape.max_pool_axis(features, 0)?.0)
}

#[derive(Clone, Debug)]
pub struct CascadeStep {
    pub aggregation: Mlp,
    pub residual: Mlp,
}

#[derive(Clone, Debug)]
pub struct FeatureAugmenterBlock {
    width: usize,
    steps: Vec<CascadeStep>,
}

impl FeatureAugmenterBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("feature augmenter depth must be at least 1"));
        }
        let steps = (0..depth)
            .map(|s| CascadeStep {
                aggregation: Mlp::new(store, &format!("{name}.{s}.agg"), &[2 * width, width, width], false, rng),
                residual: Mlp::new(store, &format!("{name}.{s}.res"), &[width, width, width], false, rng),
            })
            .collect();
        Ok(FeatureAugmenterBlock { width, steps })
    }

    /// Parameters of a block of the given width and depth.
    pub fn param_count_for(width: usize, depth: usize) -> usize {
        let d = width;
        let per_step = (2 * d + 1) * d + (d + 1) * d + 2 * (d + 1) * d;
        depth * per_step
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[CascadeStep] {
        &self.steps
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Shape {
                op: "feature augmenter",
                lhs: shape.to_vec(),
                rhs: vec![self.width],
            });
        }
        Ok(())
    }

    /// Local–global aggregation of cascade step `step`: `A([x_i, g])`.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        step: usize,
        features: Var,
        summary: Var,
    ) -> Result<Var> {
        self.check_width(tape, features)?;
        let n = tape.shape(features)[0];
        if tape.shape(summary) != [1, self.width] {
            return Err(Error::Shape {
                op: "feature augmenter aggregate",
                lhs: tape.shape(summary).to_vec(),
                rhs: vec![1, self.width],
            });
        }
        let repeated = tape.repeat_rows(summary, n)?;
        let joined = tape.concat(&[features, repeated], 1)?;
        self.steps[step].aggregation.forward(tape, store, joined)
    }

    /// Runs every cascade step in order.
    pub fn augment(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        self.check_width(tape, features)?;
        let mut x = features;
        for (s, step) in self.steps.iter().enumerate() {
            let g = global_summary(tape, x)?;
            let aggregated = self.aggregate(tape, store, s, x, g)?;
            let diff = tape.sub(aggregated, x)?;
            let refined = step.residual.forward(tape, store, diff)?;
            x = tape.add(x, refined)?;
        }
        Ok(x)
    }
}
