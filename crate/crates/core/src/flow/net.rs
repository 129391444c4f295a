//! Vector-field network: time-axis attention blocks with per-sample
//! adaptive layer-norm modulation.
//!
//! The condition vector (flow time, pooled context, optional observation)
//! never enters the token stream directly; it only produces shift, scale
//! and gate vectors that are broadcast to every frame. Attention is the
//! only path by which frames exchange information.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::signal::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetConfig {
    /// Latent width.
    pub d: usize,
    /// Context frames L′ (0 for no context tokens).
    pub context_len: usize,
    /// Generated frames L.
    pub future_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Width of an optional global observation vector (0 = none).
    #[serde(default)]
    pub obs_dim: usize,
}

impl FlowNetConfig {
    pub fn world_model(d: usize, context_len: usize, future_len: usize) -> Self {
        Self {
            d,
            context_len,
            future_len,
            hidden: 128,
            heads: 4,
            blocks: 2,
            obs_dim: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.context_len + self.future_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.future_len == 0 || self.blocks == 0 {
            return Err(Error::Config("d, future_len and blocks must be positive".into()));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config("hidden must be even for sinusoidal embeddings".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a scalar position: `[sin(p f_i) .., cos(p f_i) ..]`
/// with `f_i = 10000^(-i/half)`.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * f).sin() as f32;
        out[half + i] = (pos * f).cos() as f32;
    }
    out
}

/// Per-sample conditioning inputs for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    /// Flow time in `[0, 1]`.
    pub t: f64,
    /// Replace the context rows with the learned null token.
    pub null_context: bool,
    pub obs: Option<Vec<f32>>,
}

/// A batch of `b` samples laid out for [`FlowNet::forward`].
pub struct NetInput {
    pub batch: usize,
    /// `[b*L, d]` noisy future rows.
    pub x_future: Tensor<f32>,
    /// `[b*L′, d]` clean context rows (ignored for null samples).
    pub context: Option<Tensor<f32>>,
    pub null_context: Vec<bool>,
    pub t: Vec<f64>,
    /// `[b, obs_dim]`.
    pub obs: Option<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct FlowNet {
    pub config: FlowNetConfig,
    pub params: ParamStore<f32>,
}

const MLP_RATIO: usize = 2;

impl FlowNet {
    pub fn new(config: FlowNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let (d, h) = (config.d, config.hidden);
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore<f32>, name: &str, i: usize, o: usize, rng: &mut SeededRng| {
            p.insert_xavier(&format!("{name}.w"), i, o, rng);
            p.insert_zeros(&format!("{name}.b"), &[1, o]);
        };
        linear(&mut p, "in", d, h, &mut rng);
        linear(&mut p, "time.0", h, h, &mut rng);
        linear(&mut p, "time.1", h, h, &mut rng);
        if config.context_len > 0 {
            linear(&mut p, "ctx", d, h, &mut rng);
            let null: Vec<f64> = rng.normal_vec(d).into_iter().map(|x| 0.5 * x).collect();
            p.insert("null", Tensor::from_f64(&[1, d], &null));
        }
        if config.obs_dim > 0 {
            linear(&mut p, "obs", config.obs_dim, h, &mut rng);
        }
        for b in 0..config.blocks {
            p.insert_zeros(&format!("blk{b}.mod.w"), &[h, 6 * h]);
            p.insert_zeros(&format!("blk{b}.mod.b"), &[1, 6 * h]);
            for part in ["q", "k", "v", "o"] {
                linear(&mut p, &format!("blk{b}.{part}"), h, h, &mut rng);
            }
            linear(&mut p, &format!("blk{b}.ff.0"), h, MLP_RATIO * h, &mut rng);
            linear(&mut p, &format!("blk{b}.ff.1"), MLP_RATIO * h, h, &mut rng);
        }
        p.insert_zeros("final.mod.w", &[h, 2 * h]);
        p.insert_zeros("final.mod.b", &[1, 2 * h]);
        linear(&mut p, "out", h, d, &mut rng);
        Ok(Self { config, params: p })
    }

    fn linear(tape: &mut Tape<f32>, p: &Bound, name: &str, x: Var) -> Var {
        let y = tape.matmul(x, p.get(&format!("{name}.w")));
        tape.add_row(y, p.get(&format!("{name}.b")))
    }

    /// `LN(h) * (1 + scale) + shift` with per-sample vectors broadcast over
    /// the sequence.
    fn modulate(tape: &mut Tape<f32>, h: Var, shift: Var, scale: Var) -> Var {
        let n = tape.layer_norm(h);
        let s = tape.add_scalar(scale, 1.0);
        let y = tape.mul(n, s);
        tape.add(y, shift)
    }

    /// Field over all `L′+L` rows, `[b*(L′+L), d]`.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, input: &NetInput) -> Result<Var> {
        let c = &self.config;
        let (b, lc, l, h) = (input.batch, c.context_len, c.future_len, c.hidden);
        let seq = lc + l;
        if input.x_future.rows() != b * l || input.x_future.cols() != c.d {
            return Err(Error::Shape(format!(
                "x_future is {:?}, expected [{}, {}]",
                input.x_future.shape(),
                b * l,
                c.d
            )));
        }
        if input.t.len() != b || input.null_context.len() != b {
            return Err(Error::Shape("t / null_context length differs from batch".into()));
        }

        let fut = tape.constant(input.x_future.clone());
        let (tokens, summary) = if lc > 0 {
            let real = match &input.context {
                Some(ctx) if ctx.rows() == b * lc && ctx.cols() == c.d => ctx.clone(),
                Some(ctx) => {
                    return Err(Error::Shape(format!(
                        "context is {:?}, expected [{}, {}]",
                        ctx.shape(),
                        b * lc,
                        c.d
                    )))
                }
                None if input.null_context.iter().all(|n| *n) => Tensor::zeros(&[b * lc, c.d]),
                None => return Err(Error::invalid("context rows required for non-null samples")),
            };
            let real = tape.constant(real);
            let pool = tape.concat_rows(&[real, p.get("null")]);
            let idx: Vec<usize> = (0..b)
                .flat_map(|s| {
                    let null = input.null_context[s];
                    (0..lc).map(move |r| if null { b * lc } else { s * lc + r })
                })
                .collect();
            let ctx = tape.gather_rows(pool, &idx);
            let all = tape.concat_rows(&[ctx, fut]);
            let order: Vec<usize> = (0..b)
                .flat_map(|s| (0..lc).map(move |r| s * lc + r).chain((0..l).map(move |r| b * lc + s * l + r)))
                .collect();
            let x = tape.gather_rows(all, &order);
            let pooled = tape.mean_groups(ctx, lc);
            (x, Some(pooled))
        } else {
            (fut, None)
        };

        let temb: Vec<f32> = input.t.iter().flat_map(|t| sinusoidal(1000.0 * t, h)).collect();
        let temb = tape.constant(Tensor::matrix(b, h, temb));
        let mut cond = Self::linear(tape, p, "time.0", temb);
        cond = tape.gelu(cond);
        cond = Self::linear(tape, p, "time.1", cond);
        if let Some(pooled) = summary {
            let e = Self::linear(tape, p, "ctx", pooled);
            cond = tape.add(cond, e);
        }
        if c.obs_dim > 0 {
            let obs = match &input.obs {
                Some(o) if o.rows() == b && o.cols() == c.obs_dim => o.clone(),
                _ => return Err(Error::Shape(format!("observation must be [{b}, {}]", c.obs_dim))),
            };
            let obs = tape.constant(obs);
            let e = Self::linear(tape, p, "obs", obs);
            cond = tape.add(cond, e);
        }
        let cond = tape.gelu(cond);

        let pos: Vec<f32> = (0..b)
            .flat_map(|_| (0..seq).flat_map(|r| sinusoidal(r as f64, h)))
            .collect();
        let pos = tape.constant(Tensor::matrix(b * seq, h, pos));
        let x = Self::linear(tape, p, "in", tokens);
        let mut hcur = tape.add(x, pos);

        for blk in 0..c.blocks {
            let m = Self::linear(tape, p, &format!("blk{blk}.mod"), cond);
            let part = |tape: &mut Tape<f32>, i: usize| {
                let s = tape.slice_cols(m, i * h, h);
                tape.repeat_rows(s, seq)
            };
            let (sh1, sc1, g1) = (part(tape, 0), part(tape, 1), part(tape, 2));
            let (sh2, sc2, g2) = (part(tape, 3), part(tape, 4), part(tape, 5));

            let a = Self::modulate(tape, hcur, sh1, sc1);
            let q = Self::linear(tape, p, &format!("blk{blk}.q"), a);
            let k = Self::linear(tape, p, &format!("blk{blk}.k"), a);
            let v = Self::linear(tape, p, &format!("blk{blk}.v"), a);
            let att = tape.attention(q, k, v, seq, c.heads);
            let o = Self::linear(tape, p, &format!("blk{blk}.o"), att);
            let o = tape.mul(g1, o);
            hcur = tape.add(hcur, o);

            let a = Self::modulate(tape, hcur, sh2, sc2);
            let f = Self::linear(tape, p, &format!("blk{blk}.ff.0"), a);
            let f = tape.gelu(f);
            let f = Self::linear(tape, p, &format!("blk{blk}.ff.1"), f);
            let f = tape.mul(g2, f);
            hcur = tape.add(hcur, f);
        }

        let m = Self::linear(tape, p, "final.mod", cond);
        let sh = tape.slice_cols(m, 0, h);
        let sh = tape.repeat_rows(sh, seq);
        let sc = tape.slice_cols(m, h, h);
        let sc = tape.repeat_rows(sc, seq);
        let y = Self::modulate(tape, hcur, sh, sc);
        Ok(Self::linear(tape, p, "out", y))
    }

    /// Row indices of the future frames inside a `[b*(L′+L), ·]` output.
    pub fn future_rows(&self, batch: usize) -> Vec<usize> {
        let (lc, l) = (self.config.context_len, self.config.future_len);
        (0..batch)
            .flat_map(|s| (0..l).map(move |r| s * (lc + l) + lc + r))
            .collect()
    }

    /// Evaluates the field for one sample. Rows `0..L′` of `x_full` are the
    /// context (replaced by the null token if the condition says so).
    pub fn predict_field(&self, x_full: &Grid, cond: &Condition) -> Result<Grid> {
        let c = &self.config;
        let seq = c.seq_len();
        if x_full.rows() != seq || x_full.cols() != c.d {
            return Err(Error::Shape(format!(
                "x_full is {}x{}, expected {seq}x{}",
                x_full.rows(),
                x_full.cols(),
                c.d
            )));
        }
        let ctx = x_full.sub_rows(0, c.context_len);
        let fut = x_full.sub_rows(c.context_len, c.future_len);
        let input = NetInput {
            batch: 1,
            x_future: Tensor::matrix(c.future_len, c.d, fut.into_data()),
            context: (c.context_len > 0).then(|| Tensor::matrix(c.context_len, c.d, ctx.into_data())),
            null_context: vec![cond.null_context],
            t: vec![cond.t],
            obs: cond
                .obs
                .as_ref()
                .map(|o| Tensor::matrix(1, o.len(), o.clone())),
        };
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, &input)?;
        tape.check_finite()?;
        Ok(Grid::new(seq, c.d, tape.value(out).data().to_vec()))
    }
}
