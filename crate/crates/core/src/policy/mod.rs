//! Controllers that consume current and predicted audio: a flow-matching
//! action-chunk policy for the water task and a receding-horizon key
//! controller for the piano.

pub mod piano;
pub mod water;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autoencoder::TrainLog;
use crate::error::{Error, Result};
use crate::flow::{fit_flow, sample, FlowDataset, FlowNet, FlowNetConfig, FlowTrainConfig, SamplerConfig};
use crate::numerics::Checkpoint;
use crate::signal::Grid;

pub use crate::sims::KeyCommand;
pub use piano::{f1_score, piano_controller, run_piano, GoalSource, PianoEpisode};
pub use water::{context_window, future_window, water_demos, LookaheadController};

pub const CHUNK_LEN: usize = 16;
pub const DEFAULT_EXECUTE: usize = 8;

/// Tile grid used to mean-pool the two spectrogram windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub current_shape: [usize; 2],
    pub current_tiles: [usize; 2],
    pub predicted_shape: [usize; 2],
    pub predicted_tiles: [usize; 2],
    pub state_dim: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            current_shape: [128, 128],
            current_tiles: [16, 8],
            predicted_shape: [256, 128],
            predicted_tiles: [32, 16],
            state_dim: 1,
        }
    }
}

impl ObservationConfig {
    pub fn current_width(&self) -> usize {
        self.current_tiles[0] * self.current_tiles[1]
    }

    pub fn predicted_width(&self) -> usize {
        self.predicted_tiles[0] * self.predicted_tiles[1]
    }

    pub fn width(&self) -> usize {
        self.current_width() + self.predicted_width() + self.state_dim
    }

    /// Index range of the predicted block inside an observation.
    pub fn predicted_range(&self) -> std::ops::Range<usize> {
        let s = self.current_width();
        s..s + self.predicted_width()
    }

    pub fn validate(&self) -> Result<()> {
        for (shape, tiles) in [
            (self.current_shape, self.current_tiles),
            (self.predicted_shape, self.predicted_tiles),
        ] {
            if tiles[0] == 0 || tiles[1] == 0 || shape[0] % tiles[0] != 0 || shape[1] % tiles[1] != 0 {
                return Err(Error::Config(format!("tiles {tiles:?} do not divide window {shape:?}")));
            }
        }
        Ok(())
    }
}

/// Mean over a `tiles[0] x tiles[1]` grid of equal blocks, row-major.
pub fn pool(g: &Grid, tiles: [usize; 2]) -> Result<Vec<f32>> {
    let [tr, tc] = tiles;
    if tr == 0 || tc == 0 || !g.rows().is_multiple_of(tr) || !g.cols().is_multiple_of(tc) {
        return Err(Error::Shape(format!(
            "cannot pool {}x{} into {tr}x{tc} tiles",
            g.rows(),
            g.cols()
        )));
    }
    let (br, bc) = (g.rows() / tr, g.cols() / tc);
    let mut out = vec![0.0f64; tr * tc];
    for r in 0..g.rows() {
        let row = g.row(r);
        for (c, v) in row.iter().enumerate() {
            out[(r / br) * tc + c / bc] += *v as f64;
        }
    }
    let n = (br * bc) as f64;
    Ok(out.into_iter().map(|s| (s / n) as f32).collect())
}

/// Concatenates pooled current window, pooled predicted window (zeros when
/// absent or in baseline mode) and the state features.
pub fn build_observation(
    cfg: &ObservationConfig,
    current: &Grid,
    predicted: Option<&Grid>,
    state: &[f32],
    baseline_mode: bool,
) -> Result<Vec<f32>> {
    let check = |g: &Grid, shape: [usize; 2], what: &str| {
        if [g.rows(), g.cols()] != shape {
            return Err(Error::Shape(format!(
                "{what} window is {}x{}, expected {}x{}",
                g.rows(),
                g.cols(),
                shape[0],
                shape[1]
            )));
        }
        Ok(())
    };
    check(current, cfg.current_shape, "current")?;
    if state.len() != cfg.state_dim {
        return Err(Error::Shape(format!("state has {} features, expected {}", state.len(), cfg.state_dim)));
    }
    let mut obs = pool(current, cfg.current_tiles)?;
    match predicted {
        Some(p) if !baseline_mode => {
            check(p, cfg.predicted_shape, "predicted")?;
            obs.extend(pool(p, cfg.predicted_tiles)?);
        }
        _ => obs.extend(std::iter::repeat_n(0.0, cfg.predicted_width())),
    }
    obs.extend_from_slice(state);
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("observation contains non-finite values"));
    }
    Ok(obs)
}

/// Observation/action-chunk pairs. Stored as little-endian f32 records with a
/// JSON sidecar giving the widths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoSet {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub obs: Vec<Vec<f32>>,
    pub chunks: Vec<Grid>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoSidecar {
    obs_dim: usize,
    action_dim: usize,
    horizon: usize,
    count: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl DemoSet {
    pub fn new(obs_dim: usize, action_dim: usize, horizon: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            horizon,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f32>, chunk: Grid) -> Result<()> {
        if obs.len() != self.obs_dim || chunk.rows() != self.horizon || chunk.cols() != self.action_dim {
            return Err(Error::Shape("demo record does not match the set's widths".into()));
        }
        self.obs.push(obs);
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (o, c) in self.obs.iter().zip(&self.chunks) {
            for v in o.iter().chain(c.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], obs_dim: usize, action_dim: usize, horizon: usize) -> Result<Self> {
        let rec = 4 * (obs_dim + horizon * action_dim);
        if rec == 0 || !bytes.len().is_multiple_of(rec) {
            return Err(Error::invalid(format!(
                "demo file length {} is not a multiple of the record size {rec}",
                bytes.len()
            )));
        }
        let mut set = Self::new(obs_dim, action_dim, horizon);
        for r in bytes.chunks_exact(rec) {
            let vals: Vec<f32> = r
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            set.obs.push(vals[..obs_dim].to_vec());
            set.chunks.push(Grid::new(horizon, action_dim, vals[obs_dim..].to_vec()));
        }
        Ok(set)
    }

    /// Writes `path` and `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = DemoSidecar {
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            horizon: self.horizon,
            count: self.len(),
        };
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sp = sidecar_path(path);
        let side: DemoSidecar =
            serde_json::from_slice(&std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let set = Self::from_bytes(&bytes, side.obs_dim, side.action_dim, side.horizon)?;
        if set.len() != side.count {
            return Err(Error::invalid(format!(
                "sidecar promises {} records, file has {}",
                side.count,
                set.len()
            )));
        }
        Ok(set)
    }
}

/// Flow-matching policy over action chunks, conditioned on an observation.
#[derive(Clone, Debug)]
pub struct ChunkPolicy {
    pub net: FlowNet,
    pub obs_config: ObservationConfig,
    pub baseline_mode: bool,
    pub action_bound: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub action_dim: usize,
    pub action_bound: f32,
    pub baseline_mode: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            blocks: 2,
            action_dim: 1,
            action_bound: 1.0,
            baseline_mode: false,
        }
    }
}

impl ChunkPolicy {
    pub fn new(obs_config: ObservationConfig, cfg: &PolicyConfig, seed: u64) -> Result<Self> {
        obs_config.validate()?;
        let net = FlowNet::new(
            FlowNetConfig {
                d: cfg.action_dim,
                context_len: 0,
                future_len: CHUNK_LEN,
                hidden: cfg.hidden,
                heads: cfg.heads,
                blocks: cfg.blocks,
                obs_dim: obs_config.width(),
            },
            seed,
        )?;
        Ok(Self {
            net,
            obs_config,
            baseline_mode: cfg.baseline_mode,
            action_bound: cfg.action_bound,
        })
    }

    fn prepare(&self, obs: &[f32]) -> Result<Vec<f32>> {
        if obs.len() != self.obs_config.width() {
            return Err(Error::Shape(format!(
                "observation width {} does not match policy width {}",
                obs.len(),
                self.obs_config.width()
            )));
        }
        let mut o = obs.to_vec();
        if self.baseline_mode {
            o[self.obs_config.predicted_range()].fill(0.0);
        }
        Ok(o)
    }

    /// Samples a `16 x A` chunk, clamped to `±action_bound`.
    pub fn act(&self, obs: &[f32], sampler: &SamplerConfig) -> Result<Grid> {
        let o = self.prepare(obs)?;
        let mut chunk = sample(&self.net, None, Some(&o), sampler)?;
        let b = self.action_bound;
        chunk.data_mut().iter_mut().for_each(|v| *v = v.clamp(-b, b));
        Ok(chunk)
    }

    pub fn to_checkpoint(&self, train: Option<&FlowTrainConfig>) -> Checkpoint {
        Checkpoint::from_store(
            json!({
                "kind": "chunk-policy",
                "net": self.net.config,
                "observation": self.obs_config,
                "baseline_mode": self.baseline_mode,
                "action_bound": self.action_bound,
                "train": train,
                "step": self.net.params.step(),
            }),
            &self.net.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("chunk-policy") {
            return Err(Error::invalid("checkpoint is not a chunk policy"));
        }
        let config: FlowNetConfig = serde_json::from_value(ck.metadata["net"].clone())?;
        let obs_config: ObservationConfig = serde_json::from_value(ck.metadata["observation"].clone())?;
        if config.obs_dim != obs_config.width() {
            return Err(Error::invalid("policy network width disagrees with its observation layout"));
        }
        let mut net = crate::flow::world::net_from_store(config, ck)?;
        net.params.set_step(ck.metadata["step"].as_u64().unwrap_or(0));
        Ok(Self {
            net,
            obs_config,
            baseline_mode: ck.metadata["baseline_mode"].as_bool().unwrap_or(false),
            action_bound: ck.metadata["action_bound"].as_f64().unwrap_or(1.0) as f32,
        })
    }
}

/// Fits a chunk policy on demonstrations. The velocity term is disabled.
pub fn train_chunk_policy(
    demos: &DemoSet,
    obs_config: ObservationConfig,
    cfg: &PolicyConfig,
    train: &FlowTrainConfig,
) -> Result<(ChunkPolicy, TrainLog)> {
    if demos.is_empty() {
        return Err(Error::invalid("no demonstrations"));
    }
    if demos.obs_dim != obs_config.width() || demos.action_dim != cfg.action_dim || demos.horizon != CHUNK_LEN {
        return Err(Error::Shape("demonstrations do not match the policy layout".into()));
    }
    let mut policy = ChunkPolicy::new(obs_config, cfg, train.seed)?;
    let data = FlowDataset {
        context: Vec::new(),
        future: demos.chunks.clone(),
        obs: demos
            .obs
            .iter()
            .map(|o| policy.prepare(o))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut train = *train;
    train.loss.lambda_v = 0.0;
    let log = fit_flow(&mut policy.net, &data, &train)?;
    Ok((policy, log))
}
