//! Neighborhood context extraction for encoder stages.
//!
//! For each point the block sees its `k` neighbors through the 8-channel
//! [`relative_neighbor_encoding`] concatenated with the neighbors' features.
//! A shared mapping MLP runs per neighbor, a max over the neighbor axis pools
//! the result to one vector per point, and `R` independently parameterized
//! refine layers (each followed by ReLU) deepen it before a final projection.
//!
//! [`EncoderLayer`] wraps the block with the two concatenations and the
//! shortcut sum that produce an encoder stage's output:
//!
//! ```text
//! ctx, pooled = LocalContextBlock(r, features)
//! first       = [ctx, relu(P features)]
//! second      = [first, pooled]
//! out         = F second + S features
//! ```

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn, relative_neighbor_encoding, NeighborIndex, Point, ENCODING_CHANNELS};
use crate::nn::{LinearLayer, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Anything that turns a point set and per-point features into per-point
/// context features. Encoder stages are written against this trait.
pub trait LocalFeatureExtractor {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn extract(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        positions: &[Point],
        features: Var,
        nbrs: &NeighborIndex,
    ) -> Result<Var>;
}

/// Concatenates each neighbor's encoding with its features:
/// `[N, k, 8] ++ features[nbrs] -> [N, k, 8 + d_in]`.
pub fn neighbor_features(
    tape: &mut Tape,
    encoding: Var,
    features: Option<Var>,
    nbrs: &NeighborIndex,
) -> Result<Var> {
    let Some(features) = features else {
        return Ok(encoding);
    };
    let (n, k) = (nbrs.len(), nbrs.k());
    if tape.shape(encoding) != [n, k, ENCODING_CHANNELS] {
        return Err(Error::Shape {
            op: "neighbor_features",
            lhs: tape.shape(encoding).to_vec(),
            rhs: vec![n, k, ENCODING_CHANNELS],
        });
    }
    let gathered = tape.gather_rows(features, nbrs.as_flat(), &[n, k])?;
    tape.concat(&[encoding, gathered], 2)
}

/// Output of [`LocalContextBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LocalContext {
    /// Max over neighbors of the mapped encodings, `[N, d_mid]`.
    pub pooled: Var,
    /// Refined and projected context, `[N, d_out]`.
    pub context: Var,
}

#[derive(Clone, Debug)]
pub struct LocalContextBlock {
    d_in: usize,
    d_mid: usize,
    d_out: usize,
    pub mapping: Mlp,
    pub refine: Vec<LinearLayer>,
    pub out: LinearLayer,
}

impl LocalContextBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        repetition: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if repetition == 0 {
            return Err(Error::config("local context repetition must be at least 1"));
        }
        let d_mid = d_out;
        let mapping = Mlp::new(
            store,
            &format!("{name}.map"),
            &[ENCODING_CHANNELS + d_in, d_mid, d_mid],
            true,
            rng,
        );
        let refine = (0..repetition)
            .map(|r| LinearLayer::new(store, &format!("{name}.refine.{r}"), d_mid, d_mid, rng))
            .collect();
        let out = LinearLayer::new(store, &format!("{name}.out"), d_mid, d_out, rng);
        Ok(LocalContextBlock {
            d_in,
            d_mid,
            d_out,
            mapping,
            refine,
            out,
        })
    }

    pub fn param_count_for(d_in: usize, d_out: usize, repetition: usize) -> usize {
        let d_mid = d_out;
        (ENCODING_CHANNELS + d_in + 1) * d_mid
            + (d_mid + 1) * d_mid
            + repetition * (d_mid + 1) * d_mid
            + (d_mid + 1) * d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_mid(&self) -> usize {
        self.d_mid
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn repetition(&self) -> usize {
        self.refine.len()
    }

    /// `[N, k, 8 + d_in] -> (pooled [N, d_mid], context [N, d_out])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, grouped: Var) -> Result<LocalContext> {
        let shape = tape.shape(grouped).to_vec();
        if shape.len() != 3 || shape[2] != ENCODING_CHANNELS + self.d_in {
            return Err(Error::Shape {
                op: "local context",
                lhs: shape,
                rhs: vec![ENCODING_CHANNELS + self.d_in],
            });
        }
        let n = shape[0];
        let mapped = self.mapping.forward(tape, store, grouped)?;
        let (pooled, _) = tape.max_pool_axis(mapped, 1)?;
        let pooled = tape.reshape(pooled, &[n, self.d_mid])?;
        let mut x = pooled;
        for layer in &self.refine {
            let h = layer.forward(tape, store, x)?;
            x = tape.relu(h);
        }
        let context = self.out.forward(tape, store, x)?;
        Ok(LocalContext { pooled, context })
    }
}

/// One encoder stage's feature extractor: a [`LocalContextBlock`] plus the
/// concatenation and shortcut wiring around it.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    k: usize,
    pub block: LocalContextBlock,
    pub feature_proj: LinearLayer,
    pub fuse: LinearLayer,
    pub shortcut: LinearLayer,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        repetition: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("neighbor count k must be at least 1"));
        }
        let block = LocalContextBlock::new(store, &format!("{name}.ctx"), d_in, d_out, repetition, rng)?;
        let feature_proj = LinearLayer::new(store, &format!("{name}.proj"), d_in, d_out, rng);
        let fuse = LinearLayer::new(store, &format!("{name}.fuse"), 2 * d_out + block.d_mid(), d_out, rng);
        let shortcut = LinearLayer::new(store, &format!("{name}.shortcut"), d_in, d_out, rng);
        Ok(EncoderLayer {
            k,
            block,
            feature_proj,
            fuse,
            shortcut,
        })
    }

    pub fn param_count_for(d_in: usize, d_out: usize, repetition: usize) -> usize {
        let d_mid = d_out;
        LocalContextBlock::param_count_for(d_in, d_out, repetition)
            + (d_in + 1) * d_out
            + (2 * d_out + d_mid + 1) * d_out
            + (d_in + 1) * d_out
    }

    /// Neighbor count, clamped to the number of points available.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k.min(n)
    }

    /// Computes neighbors and the relative encoding, then runs the layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        positions: &[Point],
        features: Var,
    ) -> Result<Var> {
        let nbrs = knn(positions, self.effective_k(positions.len()))?;
        self.extract(tape, store, positions, features, &nbrs)
    }

    /// Runs the layer on a precomputed `[N, k, 8]` neighbor encoding.
    pub fn forward_encoded(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoding: Tensor,
        features: Var,
        nbrs: &NeighborIndex,
    ) -> Result<Var> {
        let encoding = tape.constant(encoding);
        let grouped = neighbor_features(tape, encoding, Some(features), nbrs)?;
        let ctx = self.block.forward(tape, store, grouped)?;
        let projected = self.feature_proj.forward(tape, store, features)?;
        let projected = tape.relu(projected);
        let first = tape.concat(&[ctx.context, projected], 1)?;
        let second = tape.concat(&[first, ctx.pooled], 1)?;
        let fused = self.fuse.forward(tape, store, second)?;
        let skip = self.shortcut.forward(tape, store, features)?;
        tape.add(fused, skip)
    }
}

impl LocalFeatureExtractor for EncoderLayer {
    fn in_dim(&self) -> usize {
        self.block.d_in()
    }

    fn out_dim(&self) -> usize {
        self.block.d_out()
    }

    fn extract(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        positions: &[Point],
        features: Var,
        nbrs: &NeighborIndex,
    ) -> Result<Var> {
        let n = positions.len();
        if tape.shape(features) != [n, self.block.d_in()] {
            return Err(Error::Shape {
                op: "encoder layer",
                lhs: tape.shape(features).to_vec(),
                rhs: vec![n, self.block.d_in()],
            });
        }
        let encoding = relative_neighbor_encoding(positions, nbrs);
        self.forward_encoded(tape, store, encoding, features, nbrs)
    }
}
