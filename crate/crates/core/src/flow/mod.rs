//! Conditional flow matching over latent sequences: linear-path objective,
//! frame-difference velocity loss, condition dropout, Euler sampling and
//! windowed autoregressive rollout.

pub mod net;
pub mod world;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autoencoder::TrainLog;
use crate::error::{Error, Result};
use crate::numerics::{Optimizer, SeededRng, Tape, Tensor};
use crate::signal::Grid;

pub use net::{sinusoidal, Condition, FlowNet, FlowNetConfig, NetInput};
pub use world::{Rollout, WindowLog, WmTrainConfig, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmLossConfig {
    pub lambda_fm: f64,
    pub lambda_v: f64,
    pub context_dropout_p: f64,
}

impl Default for FmLossConfig {
    fn default() -> Self {
        Self {
            lambda_fm: 1.0,
            lambda_v: 1.0,
            context_dropout_p: 0.5,
        }
    }
}

impl FmLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0 && self.lambda_v >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.context_dropout_p) {
            return Err(Error::Config("context_dropout_p must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 10, seed: 0 }
    }
}

fn same_shape(a: &Grid, b: &Grid) -> Result<()> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `(1 - t) x0 + t w`.
pub fn interpolant(x0: &Grid, w: &Grid, t: f64) -> Result<Grid> {
    same_shape(x0, w)?;
    let data = x0
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| ((1.0 - t) * *a as f64 + t * *b as f64) as f32)
        .collect();
    Ok(Grid::new(x0.rows(), x0.cols(), data))
}

/// `w - x0`, the time derivative of [`interpolant`].
pub fn target_field(x0: &Grid, w: &Grid) -> Result<Grid> {
    same_shape(x0, w)?;
    let data = x0.data().iter().zip(w.data()).map(|(a, b)| b - a).collect();
    Ok(Grid::new(x0.rows(), x0.cols(), data))
}

/// MSE between the last `u_target.rows()` rows of `v_pred` and `u_target`.
pub fn fm_loss(v_pred: &Grid, u_target: &Grid) -> Result<f64> {
    if v_pred.rows() < u_target.rows() {
        return Err(Error::Shape("prediction shorter than target".into()));
    }
    let tail = v_pred.sub_rows(v_pred.rows() - u_target.rows(), u_target.rows());
    same_shape(&tail, u_target)?;
    Ok(tail.mse(u_target))
}

fn frame_diff(g: &Grid) -> Grid {
    let mut out = Grid::zeros(g.rows() - 1, g.cols());
    for r in 0..g.rows() - 1 {
        for c in 0..g.cols() {
            out.set(r, c, g.get(r + 1, c) - g.get(r, c));
        }
    }
    out
}

/// MSE between consecutive-frame differences of the supervised rows.
pub fn velocity_loss(v_pred: &Grid, u_target: &Grid) -> Result<f64> {
    if u_target.rows() < 2 {
        return Err(Error::Shape("velocity loss needs at least 2 frames".into()));
    }
    if v_pred.rows() < u_target.rows() {
        return Err(Error::Shape("prediction shorter than target".into()));
    }
    let tail = v_pred.sub_rows(v_pred.rows() - u_target.rows(), u_target.rows());
    same_shape(&tail, u_target)?;
    Ok(frame_diff(&tail).mse(&frame_diff(u_target)))
}

/// One supervised sample: optional clean context, target future, optional
/// global observation.
#[derive(Clone, Copy, Debug)]
pub struct FlowExample<'a> {
    pub context: Option<&'a Grid>,
    pub future: &'a Grid,
    pub obs: Option<&'a [f32]>,
}

pub struct StepOutput {
    pub loss: f64,
    pub fm: f64,
    pub velocity: f64,
    pub null_count: usize,
    pub grads: BTreeMap<String, Tensor<f32>>,
}

fn stack_rows<'a>(grids: impl Iterator<Item = &'a Grid>, cols: usize) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut rows = 0;
    for g in grids {
        rows += g.rows();
        data.extend_from_slice(g.data());
    }
    Tensor::matrix(rows, cols, data)
}

/// Draws `t`, `x0` and the dropout decision for each sample, builds the noisy
/// input, and returns the total loss with parameter gradients.
pub fn training_step(
    net: &FlowNet,
    batch: &[FlowExample],
    cfg: &FmLossConfig,
    rng: &mut SeededRng,
) -> Result<StepOutput> {
    let c = &net.config;
    let (b, l, d) = (batch.len(), c.future_len, c.d);
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut ts = Vec::with_capacity(b);
    let mut nulls = Vec::with_capacity(b);
    let mut x_fut = Vec::with_capacity(b * l * d);
    let mut target = Vec::with_capacity(b * l * d);
    for ex in batch {
        if ex.future.rows() != l || ex.future.cols() != d {
            return Err(Error::Shape(format!(
                "future is {}x{}, expected {l}x{d}",
                ex.future.rows(),
                ex.future.cols()
            )));
        }
        let t = rng.uniform();
        let null = c.context_len > 0 && (ex.context.is_none() || rng.bernoulli(cfg.context_dropout_p));
        let x0: Vec<f64> = rng.normal_vec(l * d);
        for (x0i, wi) in x0.iter().zip(ex.future.data()) {
            let w = *wi as f64;
            x_fut.push(((1.0 - t) * x0i + t * w) as f32);
            target.push((w - x0i) as f32);
        }
        ts.push(t);
        nulls.push(null);
    }
    let context = if c.context_len > 0 {
        let zeros = Grid::zeros(c.context_len, d);
        Some(stack_rows(batch.iter().map(|e| e.context.unwrap_or(&zeros)), d))
    } else {
        None
    };
    let obs = if c.obs_dim > 0 {
        let mut data = Vec::with_capacity(b * c.obs_dim);
        for e in batch {
            let o = e.obs.ok_or_else(|| Error::invalid("observation required"))?;
            if o.len() != c.obs_dim {
                return Err(Error::Shape(format!("observation width {} != {}", o.len(), c.obs_dim)));
            }
            data.extend_from_slice(o);
        }
        Some(Tensor::matrix(b, c.obs_dim, data))
    } else {
        None
    };
    let input = NetInput {
        batch: b,
        x_future: Tensor::matrix(b * l, d, x_fut),
        context,
        null_context: nulls.clone(),
        t: ts,
        obs,
    };

    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape);
    let out = net.forward(&mut tape, &p, &input)?;
    let v = tape.gather_rows(out, &net.future_rows(b));
    let u = tape.constant(Tensor::matrix(b * l, d, target.clone()));
    let fm = tape.mean_square(v, u);
    let mut total = tape.scale(fm, cfg.lambda_fm);
    let mut vel_value = 0.0;
    if cfg.lambda_v > 0.0 && l >= 2 {
        let next: Vec<usize> = (0..b).flat_map(|s| (1..l).map(move |r| s * l + r)).collect();
        let prev: Vec<usize> = next.iter().map(|i| i - 1).collect();
        let vn = tape.gather_rows(v, &next);
        let vp = tape.gather_rows(v, &prev);
        let dv = tape.sub(vn, vp);
        let du: Vec<f32> = next
            .iter()
            .zip(&prev)
            .flat_map(|(&n, &p)| (0..d).map(move |j| (n, p, j)))
            .map(|(n, p, j)| target[n * d + j] - target[p * d + j])
            .collect();
        let du = tape.constant(Tensor::matrix(next.len(), d, du));
        let vel = tape.mean_square(dv, du);
        vel_value = tape.scalar(vel) as f64;
        let weighted = tape.scale(vel, cfg.lambda_v);
        total = tape.add(total, weighted);
    }
    let loss = tape.scalar(total) as f64;
    let fm_value = tape.scalar(fm) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, loss });
    }
    let grads = tape.backward(total)?.into_named();
    Ok(StepOutput {
        loss,
        fm: fm_value,
        velocity: vel_value,
        null_count: nulls.iter().filter(|n| **n).count(),
        grads,
    })
}

/// Training data for [`fit_flow`]. `context` and `obs` are either empty or
/// aligned with `future`.
#[derive(Clone, Debug, Default)]
pub struct FlowDataset {
    pub context: Vec<Grid>,
    pub future: Vec<Grid>,
    pub obs: Vec<Vec<f32>>,
}

impl FlowDataset {
    pub fn len(&self) -> usize {
        self.future.len()
    }

    pub fn is_empty(&self) -> bool {
        self.future.is_empty()
    }

    pub fn example(&self, i: usize) -> FlowExample<'_> {
        FlowExample {
            context: self.context.get(i),
            future: &self.future[i],
            obs: self.obs.get(i).map(|o| o.as_slice()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub loss: FmLossConfig,
}

pub fn fit_flow(net: &mut FlowNet, data: &FlowDataset, cfg: &FlowTrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::invalid("empty flow dataset"));
    }
    cfg.loss.validate()?;
    cfg.optimizer.schedule.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut sampler =
        crate::autoencoder::BatchSampler::new(data.len(), SeededRng::derive(cfg.seed, 1));
    let mut rng = SeededRng::derive(cfg.seed, 2);
    let mut log = TrainLog::default();
    let mut epoch = (0.0, 0);
    for step in 0..cfg.steps {
        let (idx, epoch_done) = sampler.next(cfg.batch_size);
        let batch: Vec<FlowExample> = idx.iter().map(|&i| data.example(i)).collect();
        let out = training_step(net, &batch, &cfg.loss, &mut rng).map_err(|e| match e {
            Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { step, loss },
            other => other,
        })?;
        cfg.optimizer.update(&mut net.params, &out.grads)?;
        log.record(out.loss, &mut epoch, epoch_done);
    }
    Ok(log)
}

/// Explicit Euler from `x0` over the grid `t = k / n_steps`.
pub fn euler(
    x0: Grid,
    n_steps: usize,
    mut field: impl FnMut(&Grid, f64) -> Result<Grid>,
) -> Result<Grid> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0;
    for k in 0..n_steps {
        let v = field(&x, k as f64 * dt)?;
        same_shape(&x, &v)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = (*xi as f64 + dt * *vi as f64) as f32;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite {
                index: k,
                op: "euler step".into(),
            });
        }
    }
    Ok(x)
}

/// One generation request for [`sample_batch`].
#[derive(Clone, Copy, Debug)]
pub struct SampleRequest<'a> {
    /// `None` samples with the null context.
    pub context: Option<&'a Grid>,
    pub obs: Option<&'a [f32]>,
    pub seed: u64,
}

/// Integrates the learned field from Gaussian noise for each request in one
/// batched pass per Euler step. Each request's noise depends only on its own
/// seed, so batching does not change results.
pub fn sample_batch(net: &FlowNet, requests: &[SampleRequest], n_steps: usize) -> Result<Vec<Grid>> {
    let c = &net.config;
    let (b, l, d) = (requests.len(), c.future_len, c.d);
    if b == 0 {
        return Ok(Vec::new());
    }
    let mut x0 = Vec::with_capacity(b * l * d);
    for r in requests {
        let mut rng = SeededRng::new(r.seed);
        x0.extend(rng.normal_vec(l * d).into_iter().map(|v| v as f32));
        if let Some(ctx) = r.context {
            if ctx.rows() != c.context_len || ctx.cols() != d {
                return Err(Error::Shape(format!(
                    "context is {}x{}, expected {}x{d}",
                    ctx.rows(),
                    ctx.cols(),
                    c.context_len
                )));
            }
        }
    }
    let nulls: Vec<bool> = requests.iter().map(|r| r.context.is_none()).collect();
    let context = (c.context_len > 0).then(|| {
        let zeros = Grid::zeros(c.context_len, d);
        stack_rows(requests.iter().map(|r| r.context.unwrap_or(&zeros)), d)
    });
    let obs = if c.obs_dim > 0 {
        let mut data = Vec::with_capacity(b * c.obs_dim);
        for r in requests {
            let o = r.obs.ok_or_else(|| Error::invalid("observation required"))?;
            if o.len() != c.obs_dim {
                return Err(Error::Shape(format!("observation width {} != {}", o.len(), c.obs_dim)));
            }
            data.extend_from_slice(o);
        }
        Some(Tensor::matrix(b, c.obs_dim, data))
    } else {
        None
    };
    let rows = net.future_rows(b);
    let x = euler(Grid::new(b * l, d, x0), n_steps, |x, t| {
        let input = NetInput {
            batch: b,
            x_future: Tensor::matrix(b * l, d, x.data().to_vec()),
            context: context.clone(),
            null_context: nulls.clone(),
            t: vec![t; b],
            obs: obs.clone(),
        };
        let mut tape = Tape::new();
        let p = net.params.bind_frozen(&mut tape);
        let out = net.forward(&mut tape, &p, &input)?;
        tape.check_finite()?;
        let v = tape.value(out);
        let mut data = Vec::with_capacity(b * l * d);
        for &r in &rows {
            data.extend_from_slice(v.row(r));
        }
        Ok(Grid::new(b * l, d, data))
    })?;
    Ok((0..b).map(|i| x.sub_rows(i * l, l)).collect())
}

/// Generates `L` future rows given `context` (`None` = null token).
pub fn sample(
    net: &FlowNet,
    context: Option<&Grid>,
    obs: Option<&[f32]>,
    cfg: &SamplerConfig,
) -> Result<Grid> {
    let req = SampleRequest {
        context,
        obs,
        seed: cfg.seed,
    };
    Ok(sample_batch(net, &[req], cfg.n_steps)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LrSchedule;
    use proptest::prelude::*;

    fn g(rows: usize, cols: usize, v: &[f32]) -> Grid {
        Grid::new(rows, cols, v.to_vec())
    }

    fn tiny(lc: usize, l: usize, d: usize) -> FlowNetConfig {
        FlowNetConfig {
            d,
            context_len: lc,
            future_len: l,
            hidden: 8,
            heads: 2,
            blocks: 1,
            obs_dim: 0,
        }
    }

    #[test]
    fn interpolant_examples() {
        let x0 = g(1, 1, &[0.0]);
        let w = g(1, 1, &[2.0]);
        assert_eq!(interpolant(&x0, &w, 0.5).unwrap().data(), &[1.0]);
        assert!(interpolant(&x0, &g(1, 2, &[0.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn target_field_is_the_time_derivative() {
        let mut rng = SeededRng::new(3);
        let x0 = g(3, 2, &rng.normal_vec(6).iter().map(|x| *x as f32).collect::<Vec<_>>());
        let w = g(3, 2, &rng.normal_vec(6).iter().map(|x| *x as f32).collect::<Vec<_>>());
        let u = target_field(&x0, &w).unwrap();
        assert!(target_field(&w, &w).unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(target_field(&Grid::zeros(3, 2), &w).unwrap(), w);
        let h = 1e-3;
        for t in [0.25, 0.75] {
            let a = interpolant(&x0, &w, t + h).unwrap();
            let b = interpolant(&x0, &w, t - h).unwrap();
            for i in 0..6 {
                let fd = (a.data()[i] as f64 - b.data()[i] as f64) / (2.0 * h);
                assert!((fd - u.data()[i] as f64).abs() < 1e-3, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(fm_loss(&g(1, 1, &[3.0]), &g(1, 1, &[1.0])).unwrap(), 4.0);
        let u = g(2, 1, &[1.0, 2.0]);
        assert_eq!(fm_loss(&g(3, 1, &[99.0, 1.0, 2.0]), &u).unwrap(), 0.0);
        assert_eq!(fm_loss(&g(3, 1, &[-7.0, 1.0, 2.0]), &u).unwrap(), 0.0);
        let v = g(3, 1, &[0.0, 1.0, 3.0]);
        let u = g(3, 1, &[0.0, 1.0, 1.0]);
        assert_eq!(velocity_loss(&v, &u).unwrap(), 2.0);
        assert_eq!(velocity_loss(&g(3, 1, &[5.0; 3]), &g(3, 1, &[1.0; 3])).unwrap(), 0.0);
        assert_eq!(
            velocity_loss(&g(3, 1, &[1.5, 2.5, 3.5]), &g(3, 1, &[1.0, 2.0, 3.0])).unwrap(),
            0.0
        );
        assert!(velocity_loss(&g(1, 1, &[0.0]), &g(1, 1, &[0.0])).is_err());
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let mut rng = SeededRng::new(9);
        let x0 = g(4, 3, &rng.normal_vec(12).iter().map(|x| *x as f32).collect::<Vec<_>>());
        let w = g(4, 3, &rng.normal_vec(12).iter().map(|x| *x as f32).collect::<Vec<_>>());
        let u = target_field(&x0, &w).unwrap();
        for n in [1, 3, 10, 64] {
            let x = euler(x0.clone(), n, |_, _| Ok(u.clone())).unwrap();
            for (a, b) in x.data().iter().zip(w.data()) {
                assert!((a - b).abs() < 1e-5, "n={n}");
            }
        }
        let one = euler(x0.clone(), 1, |_, _| Ok(u.clone())).unwrap();
        assert!(one.data().iter().zip(w.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    /// Terminal error of Euler on `dx/dt = -x` against `x0 e^{-1}`.
    fn decay_error(n: usize) -> f64 {
        let x0 = g(1, 3, &[1.0, -0.5, 2.0]);
        let x = euler(x0.clone(), n, |x, _| Ok(g(1, 3, &x.data().iter().map(|v| -v).collect::<Vec<_>>())))
            .unwrap();
        x.data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| (*a as f64 - *b as f64 * (-1f64).exp()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn euler_is_first_order_on_linear_decay() {
        let e: Vec<f64> = [10, 100, 1000].iter().map(|n| decay_error(*n)).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
        let ratio = e[0] / e[1];
        assert!((8.0..=12.0).contains(&ratio), "ratio {ratio}");
        // closed form of the discrete scheme: (1 - 1/n)^n
        let exact10 = (1.0 - 0.1f64).powi(10);
        assert!((e[0] - 2.0 * ((-1f64).exp() - exact10)).abs() < 1e-5);
    }

    #[test]
    fn lambda_v_zero_reduces_to_weighted_fm() {
        let net = FlowNet::new(tiny(2, 4, 3), 1).unwrap();
        let ctx = Grid::filled(2, 3, 0.1);
        let fut = Grid::filled(4, 3, -0.2);
        let ex = [FlowExample {
            context: Some(&ctx),
            future: &fut,
            obs: None,
        }];
        let cfg = FmLossConfig {
            lambda_fm: 2.5,
            lambda_v: 0.0,
            context_dropout_p: 0.5,
        };
        let out = training_step(&net, &ex, &cfg, &mut SeededRng::new(4)).unwrap();
        assert!((out.loss - 2.5 * out.fm).abs() <= 1e-6 * out.loss.abs());
        assert_eq!(out.velocity, 0.0);
    }

    #[test]
    fn dropout_statistics() {
        let net = FlowNet::new(tiny(2, 2, 2), 1).unwrap();
        let ctx = Grid::filled(2, 2, 0.1);
        let fut = Grid::filled(2, 2, -0.2);
        let ex = [FlowExample {
            context: Some(&ctx),
            future: &fut,
            obs: None,
        }];
        let mut rng = SeededRng::new(11);
        let cfg = FmLossConfig::default();
        let nulls: usize = (0..10_000)
            .map(|_| training_step(&net, &ex, &cfg, &mut rng).unwrap().null_count)
            .sum();
        let frac = nulls as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");

        let all = FmLossConfig {
            context_dropout_p: 1.0,
            ..cfg
        };
        let batch = [ex[0]; 8];
        let out = training_step(&net, &batch, &all, &mut rng).unwrap();
        assert_eq!(out.null_count, 8);
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let data = FlowDataset {
            context: vec![Grid::filled(2, 3, 0.3), Grid::filled(2, 3, -0.3)],
            future: vec![Grid::filled(4, 3, 0.5), Grid::filled(4, 3, -0.5)],
            obs: vec![],
        };
        let cfg = FlowTrainConfig {
            steps: 30,
            batch_size: 2,
            seed: 5,
            optimizer: Optimizer::with_schedule(LrSchedule {
                base_lr: 1e-3,
                warmup_steps: 5,
                total_steps: 30,
            }),
            loss: FmLossConfig::default(),
        };
        let run = || {
            let mut net = FlowNet::new(tiny(2, 4, 3), 2).unwrap();
            let log = fit_flow(&mut net, &data, &cfg).unwrap();
            (log, sample(&net, Some(&data.context[0]), None, &SamplerConfig::default()).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.step_losses, b.0.step_losses);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn batched_sampling_matches_single() {
        let net = FlowNet::new(tiny(2, 4, 3), 6).unwrap();
        let c1 = Grid::filled(2, 3, 0.4);
        let reqs = [
            SampleRequest { context: Some(&c1), obs: None, seed: 1 },
            SampleRequest { context: None, obs: None, seed: 2 },
        ];
        let many = sample_batch(&net, &reqs, 5).unwrap();
        let one = sample(&net, Some(&c1), None, &SamplerConfig { n_steps: 5, seed: 1 }).unwrap();
        let two = sample(&net, None, None, &SamplerConfig { n_steps: 5, seed: 2 }).unwrap();
        for (a, b) in many[0].data().iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in many[1].data().iter().zip(two.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn interpolant_endpoints_are_exact(vals in proptest::collection::vec(-10.0f32..10.0, 2..40)) {
            let n = vals.len() / 2;
            let x0 = g(1, n, &vals[..n]);
            let w = g(1, n, &vals[n..2 * n]);
            prop_assert_eq!(interpolant(&x0, &w, 0.0).unwrap(), x0.clone());
            prop_assert_eq!(interpolant(&x0, &w, 1.0).unwrap(), w.clone());
        }

        #[test]
        fn fm_loss_ignores_context_rows(ctx in proptest::collection::vec(-100.0f32..100.0, 3), fut in proptest::collection::vec(-1.0f32..1.0, 4)) {
            let u = g(2, 2, &fut);
            let mut v = ctx.clone();
            v.push(0.0);
            v.extend_from_slice(&fut);
            prop_assert_eq!(fm_loss(&g(4, 2, &v), &u).unwrap(), 0.0);
        }
    }
}
