//! Shape/motion predictor, temporal encoding, attention context layer,
//! shape decoder and canonicalization network.
//!
//! Every frame travels as one row: 2D inputs as `[x_0..x_{P-1}, y_0..y_{P-1}]`
//! (`1 x 2P`) and shapes in the reshuffled layout (`1 x 3P`). Rotations are
//! row-major `1 x 9` rows.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Rotation3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub points: usize,
    /// Width of the encoder, decoder and canonicalizer hidden layers.
    pub hidden: usize,
    pub encoder_layers: usize,
    /// Width of the shape-head bottleneck.
    pub bottleneck: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub canon_hidden: usize,
    /// Rows of the temporal encoding; the longest sequence the model accepts.
    pub max_len: usize,
}

impl ModelConfig {
    /// Widths used for all reported experiments.
    pub fn standard(points: usize, max_len: usize) -> Self {
        Self {
            points,
            hidden: 1024,
            encoder_layers: 6,
            bottleneck: 10,
            embed_dim: 408,
            heads: 8,
            decoder_layers: 4,
            canon_hidden: 1024,
            max_len,
        }
    }

    /// A narrow variant with the same topology, for gradient checks and quick tests.
    pub fn tiny(points: usize, max_len: usize) -> Self {
        Self {
            points,
            hidden: 12,
            encoder_layers: 3,
            bottleneck: 4,
            embed_dim: 8,
            heads: 2,
            decoder_layers: 3,
            canon_hidden: 10,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.points == 0 || self.hidden == 0 || self.bottleneck == 0 || self.max_len == 0 {
            return bad("zero width");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.encoder_layers < 1 || self.decoder_layers < 2 {
            return bad("need at least 1 encoder layer and 2 decoder layers");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Index of a parameter array inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real> {
    pub names: Vec<String>,
    pub values: Vec<Array2<T>>,
}

impl<T: Real> ParamSet<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: String, value: Array2<T>) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of_f64(x.as_f64())))
                .collect(),
        }
    }
}

/// Fully connected layer `y = x W + b`, `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn init<T: Real, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |r, c| {
            Array2::from_shape_simple_fn((r, c), || T::of_f64(rng.random_range(-bound..=bound)))
        };
        let w = draw(fan_in, fan_out);
        let b = draw(1, fan_out);
        Self {
            weight: set.add(format!("{name}.weight"), w),
            bias: set.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

/// Encoder plus shape and motion heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorParams {
    pub encoder: Vec<Linear>,
    pub shape_head: [Linear; 2],
    pub motion_head: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextParams {
    pub embed: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub decoder: Vec<Linear>,
    pub temporal: ParamId,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonParams {
    pub layers: Vec<Linear>,
}

/// Parameters of one model, bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves registered in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub predictor: PredictorParams,
    pub context: ContextParams,
    pub canon: CanonParams,
}

/// Outputs of [`Model::forward_sequence`].
#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// `L x 3` axis-angle vectors.
    pub axis_angles: Var,
    /// `L x 9` row-major rotations.
    pub rotations: Var,
    /// `L x 3P` reshuffled shapes.
    pub shapes: Var,
    /// `L x 3P` coarse shapes from the per-frame predictor.
    pub coarse: Var,
    /// One `L x L` attention matrix per head.
    pub attention: Vec<Var>,
}

/// Temporal encoding initializer: `Γ[t, c] = sin(t / 10000^(c/D))`, with
/// sine at both even and odd columns.
pub fn temporal_encoding_init(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(t, c)| {
        (t as f64 / 10000f64.powf(c as f64 / dim as f64)).sin()
    })
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let p3 = 3 * c.points;
        let mut set = ParamSet::new();

        let mut encoder = vec![Linear::init(
            &mut set,
            "encoder.0",
            2 * c.points,
            c.hidden,
            rng,
        )];
        for i in 1..c.encoder_layers {
            encoder.push(Linear::init(
                &mut set,
                &format!("encoder.{i}"),
                c.hidden,
                c.hidden,
                rng,
            ));
        }
        let shape_head = [
            Linear::init(&mut set, "shape_head.0", c.hidden, c.bottleneck, rng),
            Linear::init(&mut set, "shape_head.1", c.bottleneck, p3, rng),
        ];
        let motion_head = Linear::init(&mut set, "motion_head", c.hidden, 3, rng);

        let d = c.embed_dim;
        let embed = Linear::init(&mut set, "context.embed", p3, d, rng);
        let query = Linear::init(&mut set, "context.query", d, d, rng);
        let key = Linear::init(&mut set, "context.key", d, d, rng);
        let value = Linear::init(&mut set, "context.value", d, d, rng);
        let output = Linear::init(&mut set, "context.output", d, d, rng);
        let mut decoder = vec![Linear::init(
            &mut set,
            "context.decoder.0",
            d,
            c.hidden,
            rng,
        )];
        for i in 1..c.decoder_layers - 1 {
            decoder.push(Linear::init(
                &mut set,
                &format!("context.decoder.{i}"),
                c.hidden,
                c.hidden,
                rng,
            ));
        }
        let last = c.decoder_layers - 1;
        decoder.push(Linear::init(
            &mut set,
            &format!("context.decoder.{last}"),
            c.hidden,
            p3,
            rng,
        ));
        let gamma = temporal_encoding_init(c.max_len, d).mapv(T::of_f64);
        let temporal = set.add("context.temporal".into(), gamma);

        let h = c.canon_hidden;
        let heads = c.heads;
        let canon_in = Linear::init(&mut set, "canon.0", p3, h, rng);
        let canon_mid = Linear::init(&mut set, "canon.1", h, h, rng);
        let canon_out = Linear::init(&mut set, "canon.2", h, p3, rng);
        // Ψ starts as the identity map: its residual branch outputs zero.
        set.get_mut(canon_out.weight).fill(T::zero());
        set.get_mut(canon_out.bias).fill(T::zero());

        Ok(Self {
            config,
            params: set,
            predictor: PredictorParams {
                encoder,
                shape_head,
                motion_head,
            },
            context: ContextParams {
                embed,
                query,
                key,
                value,
                output,
                decoder,
                temporal,
                heads,
            },
            canon: CanonParams {
                layers: vec![canon_in, canon_mid, canon_out],
            },
        })
    }

    /// Rebuilds a model with the given parameter values; names and shapes must
    /// match the layout `config` produces.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        if model.params.names != params.names {
            return Err(Error::InvalidArgument(
                "parameter names do not match the model layout".into(),
            ));
        }
        for (i, (a, b)) in model.params.values.iter().zip(&params.values).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::InvalidArgument(format!(
                    "{}: expected {:?}, got {:?}",
                    model.params.names[i],
                    a.dim(),
                    b.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            predictor: self.predictor.clone(),
            context: self.context.clone(),
            canon: self.canon.clone(),
        }
    }

    /// Registers every parameter array as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Bound {
        Bound(self.params.values.iter().map(|v| tape.param(v)).collect())
    }

    /// Per-frame predictor on `L x 2P` centered frames. Returns `(v, coarse)`
    /// with `v: L x 3` and `coarse: L x 3P`.
    pub fn predict_frames(&self, tape: &mut Tape<'_, T>, p: &Bound, w: Var) -> Result<(Var, Var)> {
        let (_, cols) = tape.shape(w);
        if cols != 2 * self.config.points {
            return Err(Error::ShapeMismatch {
                op: "predict_frames",
                lhs: tape.shape(w),
                rhs: (0, 2 * self.config.points),
            });
        }
        if tape.value(w).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("predictor input".into()));
        }
        let enc = &self.predictor.encoder;
        let first = enc[0].forward(tape, p, w)?;
        let mut h = tape.relu(first);
        for layer in &enc[1..] {
            let z = layer.forward(tape, p, h)?;
            let z = tape.relu(z);
            h = tape.add(h, z)?;
        }
        let v = self.predictor.motion_head.forward(tape, p, h)?;
        let b = self.predictor.shape_head[0].forward(tape, p, h)?;
        let coarse = self.predictor.shape_head[1].forward(tape, p, b)?;
        Ok((v, coarse))
    }

    /// Predictor on a single `2 x P` frame.
    pub fn predict_frame(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        frame: &Array2<T>,
    ) -> Result<(Var, Var)> {
        let (r, c) = frame.dim();
        if r != 2 || c != self.config.points {
            return Err(Error::ShapeMismatch {
                op: "predict_frame",
                lhs: (r, c),
                rhs: (2, self.config.points),
            });
        }
        let row = frame
            .to_shape((1, 2 * c))
            .expect("contiguous 2 x P")
            .to_owned();
        let w = tape.leaf(row);
        self.predict_frames(tape, p, w)
    }

    /// `X = embed(coarse) + Γ[0..L]`.
    pub fn temporal_encode(&self, tape: &mut Tape<'_, T>, p: &Bound, coarse: Var) -> Result<Var> {
        let len = tape.shape(coarse).0;
        if len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len,
                capacity: self.config.max_len,
            });
        }
        let e = self.context.embed.forward(tape, p, coarse)?;
        let gamma = tape.rows(p.var(self.context.temporal), 0..len)?;
        tape.add(e, gamma)
    }

    /// Multi-head self-attention with scores scaled by `1/√D` (full embedding
    /// width). Returns the projected output and each head's attention matrix.
    pub fn mha_block(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let ctx = &self.context;
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let q = ctx.query.forward(tape, p, x)?;
        let k = ctx.key.forward(tape, p, x)?;
        let v = ctx.value.forward(tape, p, x)?;
        let scale = T::of_f64(1.0 / (d as f64).sqrt());
        let mut heads = Vec::with_capacity(ctx.heads);
        let mut attention = Vec::with_capacity(ctx.heads);
        for h in 0..ctx.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.cols(q, cols.clone())?;
            let kh = tape.cols(k, cols.clone())?;
            let vh = tape.cols(v, cols)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax(scores);
            heads.push(tape.matmul(a, vh)?);
            attention.push(a);
        }
        let cat = tape.concat_cols(&heads)?;
        Ok((ctx.output.forward(tape, p, cat)?, attention))
    }

    /// Residual MLP from the attention output to reshuffled shape rows.
    pub fn decode_shapes(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let dec = &self.context.decoder;
        let first = dec[0].forward(tape, p, x)?;
        let mut h = tape.relu(first);
        for layer in &dec[1..dec.len() - 1] {
            let z = layer.forward(tape, p, h)?;
            let z = tape.relu(z);
            h = tape.add(h, z)?;
        }
        dec[dec.len() - 1].forward(tape, p, h)
    }

    /// Full sequence model on `L x 2P` centered frames.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        w: Var,
    ) -> Result<SequenceOutput> {
        let (axis_angles, coarse) = self.predict_frames(tape, p, w)?;
        let rotations = tape.rodrigues_rows(axis_angles)?;
        let x = self.temporal_encode(tape, p, coarse)?;
        let (ctx, attention) = self.mha_block(tape, p, x)?;
        let shapes = self.decode_shapes(tape, p, ctx)?;
        Ok(SequenceOutput {
            axis_angles,
            rotations,
            shapes,
            coarse,
            attention,
        })
    }

    /// Ψ applied row-wise to reshuffled shapes: `x + f(x)`.
    pub fn canon_net(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let l = &self.canon.layers;
        let first = l[0].forward(tape, p, x)?;
        let mut h = tape.relu(first);
        for layer in &l[1..l.len() - 1] {
            let z = layer.forward(tape, p, h)?;
            let z = tape.relu(z);
            h = tape.add(h, z)?;
        }
        let out = l[l.len() - 1].forward(tape, p, h)?;
        tape.add(x, out)
    }

    /// Rotates every shape row by each sampled rotation and canonicalizes the
    /// result. Output rows are grouped by rotation: rows `j·n .. (j+1)·n` hold
    /// `Ψ(R̂_j S_i)` for `i < n`.
    pub fn canonicalize(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        shapes: Var,
        rotations: &[Rotation3],
    ) -> Result<Var> {
        if rotations.is_empty() {
            return Err(Error::InvalidArgument(
                "canonicalize needs at least one rotation".into(),
            ));
        }
        let rotated = rotations
            .iter()
            .map(|r| {
                let m = tape.leaf(rotation_operator(r, self.config.points));
                tape.matmul(shapes, m)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&rotated)?;
        self.canon_net(tape, p, stacked)
    }
}

/// Right-multiplication operator applying `r` to a reshuffled shape row:
/// `row · M = reshuffle(r · unshuffle(row))`.
pub fn rotation_operator<T: Real>(r: &Rotation3, points: usize) -> Array2<T> {
    let m = r.matrix();
    let mut out = Array2::zeros((3 * points, 3 * points));
    for a in 0..3 {
        for b in 0..3 {
            let c = T::of_f64(m[(b, a)]);
            for j in 0..points {
                out[[a * points + j, b * points + j]] = c;
            }
        }
    }
    out
}
