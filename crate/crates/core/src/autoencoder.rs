//! Block-local autoencoder mapping T×M grids to (T/block)×d latent sequences.
//!
//! A window is cut into consecutive blocks of `block` rows; each block is
//! flattened and passed through the same MLP. Because row-major `[T, M]`
//! data is already laid out as `[T/block, block*M]`, the encoder never mixes
//! information across blocks, and neither does the decoder.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Checkpoint, Optimizer, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::signal::{Grid, NormalizationStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// Values in `[-1, 1]`, tanh output head.
    Spectrogram,
    /// Binary cells, sigmoid output head.
    PianoRoll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub block: usize,
    pub d: usize,
    pub hidden: Vec<usize>,
    pub features: usize,
    pub domain: Domain,
}

impl AutoencoderConfig {
    pub fn spectrogram(features: usize) -> Self {
        Self {
            block: 16,
            d: 32,
            hidden: vec![256],
            features,
            domain: Domain::Spectrogram,
        }
    }

    pub fn piano_roll() -> Self {
        Self {
            block: 2,
            d: 16,
            hidden: vec![128],
            features: 88,
            domain: Domain::PianoRoll,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.d == 0 || self.features == 0 {
            return Err(Error::Config("block, d and features must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn block_width(&self) -> usize {
        self.block * self.features
    }

    fn layer_dims(&self, encoder: bool) -> Vec<(usize, usize)> {
        let mut widths = vec![self.block_width()];
        widths.extend(self.hidden.iter().copied());
        widths.push(self.d);
        if !encoder {
            widths.reverse();
        }
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// L×d latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub frames: Grid,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: ParamStore<f32>,
    pub normalization: Option<NormalizationStats>,
}

const ROLL_BIAS_INIT: f32 = -5.0;

fn layer_name(part: &str, i: usize, kind: &str) -> String {
    format!("{part}.{i}.{kind}")
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        for (part, encoder) in [("enc", true), ("dec", false)] {
            for (i, (fan_in, fan_out)) in config.layer_dims(encoder).into_iter().enumerate() {
                params.insert_xavier(&layer_name(part, i, "w"), fan_in, fan_out, &mut rng);
                params.insert_zeros(&layer_name(part, i, "b"), &[1, fan_out]);
            }
        }
        if config.domain == Domain::PianoRoll {
            // start near the logit of a sparse roll so early steps don't
            // zero out the hidden path
            let last = config.layer_dims(false).len() - 1;
            let b = params.get_mut(&layer_name("dec", last, "b")).expect("inserted above");
            b.data_mut().fill(ROLL_BIAS_INIT);
        }
        Ok(Self {
            config,
            params,
            normalization: None,
        })
    }

    pub fn latent_len(&self, rows: usize) -> Result<usize> {
        if rows == 0 || !rows.is_multiple_of(self.config.block) {
            return Err(Error::Shape(format!(
                "window of {rows} frames is not divisible by block {}",
                self.config.block
            )));
        }
        Ok(rows / self.config.block)
    }

    fn check_window(&self, w: &Grid) -> Result<usize> {
        if w.cols() != self.config.features {
            return Err(Error::Shape(format!(
                "window has {} features, autoencoder expects {}",
                w.cols(),
                self.config.features
            )));
        }
        self.latent_len(w.rows())
    }

    /// Stacks windows into `[sum L, block*M]` block rows.
    fn block_rows(&self, windows: &[&Grid]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut rows = 0;
        for w in windows {
            rows += self.check_window(w)?;
            data.extend_from_slice(w.data());
        }
        Ok(Tensor::matrix(rows, self.config.block_width(), data))
    }

    fn mlp(&self, tape: &mut Tape<f32>, p: &Bound, part: &str, mut x: Var, encoder: bool) -> Var {
        let n = self.config.layer_dims(encoder).len();
        for i in 0..n {
            let h = tape.matmul(x, p.get(&layer_name(part, i, "w")));
            x = tape.add_row(h, p.get(&layer_name(part, i, "b")));
            if i + 1 < n {
                x = tape.gelu(x);
            }
        }
        x
    }

    pub fn encode_on_tape(&self, tape: &mut Tape<f32>, p: &Bound, blocks: Var) -> Var {
        self.mlp(tape, p, "enc", blocks, true)
    }

    /// Decoder output before clamping: `[rows, block*M]`.
    pub fn decode_on_tape(&self, tape: &mut Tape<f32>, p: &Bound, latents: Var) -> Var {
        let out = self.mlp(tape, p, "dec", latents, false);
        match self.config.domain {
            Domain::Spectrogram => tape.tanh(out),
            Domain::PianoRoll => tape.sigmoid(out),
        }
    }

    pub fn encode(&self, window: &Grid) -> Result<LatentSequence> {
        Ok(self.encode_batch(&[window])?.remove(0))
    }

    pub fn encode_batch(&self, windows: &[&Grid]) -> Result<Vec<LatentSequence>> {
        let blocks = self.block_rows(windows)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(blocks);
        let z = self.encode_on_tape(&mut tape, &p, x);
        tape.check_finite()?;
        let z = tape.value(z).data();
        let d = self.config.d;
        let mut out = Vec::with_capacity(windows.len());
        let mut offset = 0;
        for w in windows {
            let l = w.rows() / self.config.block;
            out.push(LatentSequence {
                frames: Grid::new(l, d, z[offset * d..(offset + l) * d].to_vec()),
            });
            offset += l;
        }
        Ok(out)
    }

    /// Decodes to an `(L*block)×M` grid clamped to `[-1, 1]`.
    pub fn decode(&self, latents: &LatentSequence) -> Result<Grid> {
        if latents.width() != self.config.d {
            return Err(Error::Shape(format!(
                "latent width {} != {}",
                latents.width(),
                self.config.d
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::matrix(
            latents.len(),
            self.config.d,
            latents.frames.data().to_vec(),
        ));
        let y = self.decode_on_tape(&mut tape, &p, z);
        tape.check_finite()?;
        let data = tape.value(y).data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(Grid::new(
            latents.len() * self.config.block,
            self.config.features,
            data,
        ))
    }

    pub fn reconstruct(&self, window: &Grid) -> Result<Grid> {
        self.decode(&self.encode(window)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            json!({
                "kind": "autoencoder",
                "config": self.config,
                "normalization": self.normalization,
                "step": self.params.step(),
            }),
            &self.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("autoencoder") {
            return Err(Error::invalid("checkpoint is not an autoencoder"));
        }
        let config: AutoencoderConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        config.validate()?;
        let normalization = serde_json::from_value(ck.metadata["normalization"].clone())?;
        let reference = Self::new(config.clone(), 0)?;
        let mut params = ck.to_store();
        params.set_step(ck.metadata["step"].as_u64().unwrap_or(0));
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::invalid(format!("checkpoint missing or misshapen tensor {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            normalization,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

/// Per-step losses plus the mean loss of each pass over the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.step_losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Trailing mean over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.step_losses.len()).max(1);
        self.step_losses[self.step_losses.len().saturating_sub(k)..]
            .iter()
            .sum::<f64>()
            / k as f64
    }

    pub(crate) fn record(&mut self, loss: f64, epoch_sum: &mut (f64, usize), epoch_done: bool) {
        self.step_losses.push(loss);
        epoch_sum.0 += loss;
        epoch_sum.1 += 1;
        if epoch_done {
            self.epoch_losses.push(epoch_sum.0 / epoch_sum.1 as f64);
            *epoch_sum = (0.0, 0);
        }
    }
}

/// Shuffled minibatch indices over `n` items; reshuffles at each epoch.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, rng: SeededRng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Returns the batch and whether it finished an epoch.
    pub(crate) fn next(&mut self, batch: usize) -> (Vec<usize>, bool) {
        let mut out = Vec::with_capacity(batch);
        let mut wrapped = false;
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.reshuffle();
                wrapped = true;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        (out, wrapped || self.cursor == self.order.len())
    }
}

pub fn train_autoencoder(
    corpus: &[Grid],
    config: AutoencoderConfig,
    train: &AeTrainConfig,
) -> Result<(Autoencoder, TrainLog)> {
    let mut ae = Autoencoder::new(config, train.seed)?;
    let log = fit_autoencoder(&mut ae, corpus, train)?;
    Ok((ae, log))
}

/// Continues training an existing autoencoder on `corpus`.
pub fn fit_autoencoder(ae: &mut Autoencoder, corpus: &[Grid], train: &AeTrainConfig) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty autoencoder corpus"));
    }
    let shape = (corpus[0].rows(), corpus[0].cols());
    if let Some(i) = corpus.iter().position(|g| (g.rows(), g.cols()) != shape) {
        return Err(Error::Shape(format!("window {i} differs in shape from window 0")));
    }
    ae.check_window(&corpus[0])?;
    train.optimizer.schedule.validate()?;
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let mut sampler = BatchSampler::new(corpus.len(), SeededRng::derive(train.seed, 1));
    let mut log = TrainLog::default();
    let mut epoch = (0.0, 0);
    for step in 0..train.steps {
        let (idx, epoch_done) = sampler.next(train.batch_size);
        let windows: Vec<&Grid> = idx.iter().map(|&i| &corpus[i]).collect();
        let blocks = ae.block_rows(&windows)?;
        let mut tape = Tape::new();
        let p = ae.params.bind(&mut tape);
        let x = tape.constant(blocks);
        let z = ae.encode_on_tape(&mut tape, &p, x);
        let y = ae.decode_on_tape(&mut tape, &p, z);
        let loss = tape.mean_square(y, x);
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        train.optimizer.update(&mut ae.params, &grads.into_named())?;
        log.record(value, &mut epoch, epoch_done);
    }
    Ok(log)
}

/// Per-dimension latent standard deviation over a set of windows.
pub fn latent_std(ae: &Autoencoder, windows: &[Grid]) -> Result<Vec<f64>> {
    let refs: Vec<&Grid> = windows.iter().collect();
    let seqs = ae.encode_batch(&refs)?;
    let d = ae.config.d;
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for s in &seqs {
        for r in 0..s.len() {
            for (j, v) in s.frames.row(r).iter().enumerate() {
                sum[j] += *v as f64;
                sq[j] += (*v as f64) * (*v as f64);
            }
            n += 1;
        }
    }
    Ok((0..d)
        .map(|j| {
            let m = sum[j] / n as f64;
            (sq[j] / n as f64 - m * m).max(0.0).sqrt()
        })
        .collect())
}
