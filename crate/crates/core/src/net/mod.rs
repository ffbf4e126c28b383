//! Directional extraction network: angle encoder, FiLM-conditioned
//! separation blocks, offline and streaming inference, loss and training.

mod checkpoint;
mod loss;
mod model;
mod stream;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::signal::FrameSpec;

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{si_sdr_loss, L1_WEIGHT, SI_SDR_CLAMP_DB};
pub use model::{Conditioning, Model};
pub use stream::{StreamState, Streamer};
pub use train::{learning_rate, load_example, train, AugmentConfig, Example, LrSchedule, TrainConfig, TrainReport};

/// Weight of sectors adjacent to a selected one in the raw query vector.
pub const ADJACENT_WEIGHT: f64 = 0.25;

/// What the decoder's two output channels mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Complex mask applied to the reference-mic spectrogram.
    #[default]
    Mask,
    /// The target spectrogram itself.
    Direct,
}

fn default_embed() -> usize {
    16
}
fn default_blocks() -> usize {
    2
}
fn default_stride() -> usize {
    4
}
fn default_hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub n_sectors: usize,
    #[serde(default)]
    pub frame: FrameSpec,
    #[serde(default = "default_embed")]
    pub embed_channels: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_stride")]
    pub freq_downsample: usize,
    #[serde(default = "default_hidden")]
    pub blstm_hidden: usize,
    #[serde(default = "default_hidden")]
    pub causal_lstm_hidden: usize,
    /// Width of the dense layer refining the raw query vector.
    #[serde(default = "default_hidden")]
    pub angle_hidden: usize,
    #[serde(default)]
    pub output: OutputMode,
}

impl NetConfig {
    pub fn new(n_sectors: usize) -> Self {
        Self {
            n_sectors,
            frame: FrameSpec::default(),
            embed_channels: default_embed(),
            n_blocks: default_blocks(),
            freq_downsample: default_stride(),
            blstm_hidden: default_hidden(),
            causal_lstm_hidden: default_hidden(),
            angle_hidden: default_hidden(),
            output: OutputMode::Mask,
        }
    }

    fn field(path: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.n_sectors) {
            return Err(Self::field("n_sectors", format!("{} outside 2..=32", self.n_sectors)));
        }
        for (name, v) in [
            ("embed_channels", self.embed_channels),
            ("freq_downsample", self.freq_downsample),
            ("blstm_hidden", self.blstm_hidden),
            ("causal_lstm_hidden", self.causal_lstm_hidden),
            ("angle_hidden", self.angle_hidden),
        ] {
            if v == 0 {
                return Err(Self::field(name, "must be positive"));
            }
        }
        if self.bins() < self.down_kernel() {
            return Err(Self::field(
                "freq_downsample",
                format!("kernel {} wider than {} bins", self.down_kernel(), self.bins()),
            ));
        }
        Ok(())
    }

    /// Samples consumed and produced per streaming step.
    pub fn chunk_samples(&self) -> usize {
        self.frame.hop()
    }

    /// Future samples each step may look at.
    pub fn lookahead_samples(&self) -> usize {
        self.frame.pad()
    }

    pub fn bins(&self) -> usize {
        self.frame.bins()
    }

    pub(crate) fn down_kernel(&self) -> usize {
        self.freq_downsample + 1
    }

    pub(crate) fn down_pad(&self) -> usize {
        self.freq_downsample / 2
    }

    /// Frequency extent inside the recurrent part of a block.
    pub fn reduced_bins(&self) -> usize {
        (self.bins() + 2 * self.down_pad() - self.down_kernel()) / self.freq_downsample + 1
    }
}

/// A set of selected sectors, sector `i` (1-based) at bit `i - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AngleQuery {
    pub n_sectors: usize,
    pub selected: u32,
}

impl AngleQuery {
    pub fn new(n_sectors: usize, selected: u32) -> Result<Self> {
        if n_sectors == 0 || n_sectors > 32 {
            bail!(Argument, "sector count {n_sectors} outside 1..=32");
        }
        if selected == 0 {
            bail!(Argument, "empty sector selection");
        }
        if n_sectors < 32 && selected >> n_sectors != 0 {
            bail!(Argument, "selection {selected:#b} exceeds {n_sectors} sectors");
        }
        let k = selected.count_ones();
        if k > 3 {
            bail!(Argument, "{k} sectors selected, at most 3 allowed");
        }
        Ok(Self { n_sectors, selected })
    }

    /// Builds a query from 1-based sector numbers.
    pub fn from_sectors(n_sectors: usize, sectors: &[usize]) -> Result<Self> {
        let mut mask = 0u32;
        for &s in sectors {
            if s == 0 || s > n_sectors {
                bail!(Argument, "sector {s} outside 1..={n_sectors}");
            }
            mask |= 1 << (s - 1);
        }
        Self::new(n_sectors, mask)
    }

    pub fn sectors(&self) -> Vec<usize> {
        (0..self.n_sectors)
            .filter(|i| ((self.selected >> i) & 1) == 1)
            .map(|i| i + 1)
            .collect()
    }

    /// Selected sectors weigh 1, their non-selected neighbours 0.25, the
    /// rest 0. The ends do not wrap around.
    pub fn raw_vector(&self) -> Vec<f64> {
        let on = |i: usize| ((self.selected >> i) & 1) == 1;
        (0..self.n_sectors)
            .map(|i| {
                if on(i) {
                    1.0
                } else if (i > 0 && on(i - 1)) || (i + 1 < self.n_sectors && on(i + 1)) {
                    ADJACENT_WEIGHT
                } else {
                    0.0
                }
            })
            .collect()
    }
}
