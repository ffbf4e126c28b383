use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rand::RngExt;

use super::{AngleQuery, NetConfig, OutputMode};
use crate::autodiff::{lstm_step, BoundParams, Conv2dOpts, LstmState, ParamSet, SharedParams, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::features::{encode_features, FeatureStack, NormStats, FEATURE_CHANNELS};
use crate::rng::{rng_from, Rng};
use crate::signal::{AudioBuffer, StftEngine};

const ENC_KERNEL: usize = 3;
const DEC_KERNEL: usize = 3;
const PRELU_INIT: f64 = 0.25;

enum Init {
    Uniform(f64),
    Const(f64),
    /// LSTM bias: zero except the forget gate.
    ForgetBias(usize),
}

fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.embed_channels;
    let f = cfg.bins();
    let k = cfg.down_kernel();
    let (hb, hl, ha) = (cfg.blstm_hidden, cfg.causal_lstm_hidden, cfg.angle_hidden);
    let fan = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
    let mut v: Vec<(String, Vec<usize>, Init)> = vec![
        ("enc.weight".into(), vec![1, ENC_KERNEL, FEATURE_CHANNELS, c], fan(ENC_KERNEL * FEATURE_CHANNELS)),
        ("enc.bias".into(), vec![c], Init::Const(0.0)),
        ("angle.fc1.weight".into(), vec![cfg.n_sectors, ha], fan(cfg.n_sectors)),
        ("angle.fc1.bias".into(), vec![ha], Init::Const(0.0)),
        ("angle.prelu".into(), vec![ha], Init::Const(PRELU_INIT)),
        ("angle.fc2.weight".into(), vec![ha, f * c], fan(ha)),
        ("angle.fc2.bias".into(), vec![f * c], Init::Const(0.0)),
        ("angle.ln.gamma".into(), vec![c], Init::Const(1.0)),
        ("angle.ln.beta".into(), vec![c], Init::Const(0.0)),
    ];
    for b in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        let lstm = |v: &mut Vec<_>, prefix: String, inp: usize, h: usize| {
            v.push((format!("{prefix}.w_ih"), vec![inp, 4 * h], fan(h)));
            v.push((format!("{prefix}.w_hh"), vec![h, 4 * h], fan(h)));
            v.push((format!("{prefix}.bias"), vec![4 * h], Init::ForgetBias(h)));
        };
        v.push((p("ln.gamma"), vec![c], Init::Const(1.0)));
        v.push((p("ln.beta"), vec![c], Init::Const(0.0)));
        v.push((p("prelu"), vec![c], Init::Const(PRELU_INIT)));
        v.push((p("down.weight"), vec![1, k, c, c], fan(k * c)));
        v.push((p("down.bias"), vec![c], Init::Const(0.0)));
        lstm(&mut v, p("blstm.fwd"), c, hb);
        lstm(&mut v, p("blstm.bwd"), c, hb);
        v.push((p("blstm.proj.weight"), vec![2 * hb, c], fan(2 * hb)));
        v.push((p("blstm.proj.bias"), vec![c], Init::Const(0.0)));
        lstm(&mut v, p("lstm"), c, hl);
        v.push((p("lstm.fc.weight"), vec![hl, c], fan(hl)));
        v.push((p("lstm.fc.bias"), vec![c], Init::Const(0.0)));
        v.push((p("up.weight"), vec![c, 1, k, c], fan(k * c / cfg.freq_downsample.max(1))));
        v.push((p("up.bias"), vec![c], Init::Const(0.0)));
        v.push((p("film.gamma.weight"), vec![c, c], fan(c)));
        v.push((p("film.gamma.bias"), vec![c], Init::Const(1.0)));
        v.push((p("film.beta.weight"), vec![c, c], fan(c)));
        v.push((p("film.beta.bias"), vec![c], Init::Const(0.0)));
    }
    v.push(("out.ln.gamma".into(), vec![c], Init::Const(1.0)));
    v.push(("out.ln.beta".into(), vec![c], Init::Const(0.0)));
    v.push(("dec.weight".into(), vec![c, 1, DEC_KERNEL, 2], fan(c * DEC_KERNEL)));
    v
}

fn init_tensor(shape: &[usize], init: &Init, rng: &mut Rng) -> Tensor {
    match *init {
        Init::Uniform(a) => Tensor::from_fn(shape, |_| rng.random_range(-a..a)),
        Init::Const(x) => Tensor::full(shape, x),
        Init::ForgetBias(h) => Tensor::from_fn(shape, |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }),
    }
}

/// FiLM scale and shift per block for one query, computed once and reused.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub query: AngleQuery,
    film: Vec<(Rc<Tensor>, Rc<Tensor>)>,
}

impl Conditioning {
    pub fn film(&self) -> &[(Rc<Tensor>, Rc<Tensor>)] {
        &self.film
    }
}

/// Network weights plus everything needed to run them on audio.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    stats: NormStats,
    params: ParamSet,
    engine: Arc<StftEngine>,
    synthesis: Arc<(Tensor, Tensor)>,
}

impl Model {
    /// Randomly initialized network, deterministic in `seed`.
    pub fn new(config: NetConfig, stats: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_layout(&config) {
            params.insert(name, init_tensor(&shape, &init, &mut rng))?;
        }
        Self::from_parts(config, stats, params)
    }

    /// Assembles a model from existing weights, checking every tensor
    /// against the layout implied by `config`.
    pub fn from_parts(config: NetConfig, stats: NormStats, params: ParamSet) -> Result<Self> {
        config.validate()?;
        stats.validate()?;
        if stats.bins() != config.bins() {
            bail!(
                Compatibility,
                "normalization stats cover {} bins, network expects {}",
                stats.bins(),
                config.bins()
            );
        }
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            bail!(Compatibility, "{} tensors given, layout has {}", params.len(), layout.len());
        }
        let mut ordered = ParamSet::new();
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => ordered.insert(name.clone(), t.clone())?,
                Some(t) => bail!(Compatibility, "tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
                None => bail!(Compatibility, "missing tensor {name}"),
            };
        }
        let params = ordered;
        let engine = Arc::new(StftEngine::new(config.frame.clone()));
        let synthesis = Arc::new(synthesis_basis(&config));
        Ok(Self {
            config,
            stats,
            params,
            engine,
            synthesis,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn engine(&self) -> &StftEngine {
        &self.engine
    }

    /// Rounds every weight to the nearest f32, as stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn check_query(&self, query: &AngleQuery) -> Result<()> {
        if query.n_sectors != self.config.n_sectors {
            bail!(
                Compatibility,
                "query uses {} sectors, network was built for {}",
                query.n_sectors,
                self.config.n_sectors
            );
        }
        Ok(())
    }

    /// Angle embedding of shape `(bins, channels)`.
    pub fn embed_angle<'t>(&self, p: &BoundParams<'t>, query: &AngleQuery) -> Result<Var<'t>> {
        self.check_query(query)?;
        let tape = p.get("enc.bias")?.tape();
        let c = self.config.embed_channels;
        let v = tape.constant(Tensor::new(&[1, query.n_sectors], query.raw_vector())?);
        let h = v
            .linear(p.get("angle.fc1.weight")?, Some(p.get("angle.fc1.bias")?))?
            .prelu(p.get("angle.prelu")?)?;
        h.linear(p.get("angle.fc2.weight")?, Some(p.get("angle.fc2.bias")?))?
            .reshape(&[self.config.bins(), c])?
            .layer_norm(Some((p.get("angle.ln.gamma")?, p.get("angle.ln.beta")?)))
    }

    /// Per-block FiLM `(scale, shift)`, each `(bins, channels)`.
    pub fn film<'t>(&self, p: &BoundParams<'t>, query: &AngleQuery) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        let e = self.embed_angle(p, query)?;
        (0..self.config.n_blocks)
            .map(|b| {
                let g = |s: &str| p.get(&format!("blocks.{b}.film.{s}"));
                Ok((
                    e.linear(g("gamma.weight")?, Some(g("gamma.bias")?))?,
                    e.linear(g("beta.weight")?, Some(g("beta.bias")?))?,
                ))
            })
            .collect()
    }

    pub fn condition(&self, query: &AngleQuery) -> Result<Conditioning> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let film = self
            .film(&p, query)?
            .into_iter()
            .map(|(g, b)| (g.value(), b.value()))
            .collect();
        Ok(Conditioning { query: *query, film })
    }

    pub fn shared_params(&self) -> SharedParams {
        self.params.shared()
    }

    /// Reference and structured-mic spectrograms plus the feature stack.
    pub fn analyze(&self, ref_mic: &[f64], struct_mic: &[f64]) -> Result<(Vec<Complex64>, FeatureStack)> {
        if ref_mic.len() != struct_mic.len() {
            bail!(Shape, "channel lengths differ: {} vs {}", ref_mic.len(), struct_mic.len());
        }
        let x1 = self.engine.stft_channel(ref_mic)?;
        let x2 = self.engine.stft_channel(struct_mic)?;
        let feats = encode_features(&x1, &x2, &self.stats)?;
        Ok((x1, feats))
    }

    /// One separation block on a `(frames, bins, channels)` trunk. With
    /// `state` the causal LSTM continues from and updates it (no gradient);
    /// without, it starts from zeros on the tape.
    pub fn block<'t>(
        &self,
        p: &BoundParams<'t>,
        b: usize,
        x: Var<'t>,
        film: (Var<'t>, Var<'t>),
        state: Option<&mut LstmState>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let g = |s: &str| p.get(&format!("blocks.{b}.{s}"));
        let xs = x.shape();
        if xs.len() != 3 || xs[1] != cfg.bins() || xs[2] != cfg.embed_channels {
            bail!(Shape, "block input {xs:?}, expected (frames, {}, {})", cfg.bins(), cfg.embed_channels);
        }
        let frames = xs[0];
        let opts = Conv2dOpts {
            stride: (1, cfg.freq_downsample),
            pad: (0, cfg.down_pad()),
        };
        let y = x
            .layer_norm(Some((g("ln.gamma")?, g("ln.beta")?)))?
            .prelu(g("prelu")?)?;
        let d = y.conv2d(g("down.weight")?, opts)?.add(g("down.bias")?)?;

        // bidirectional recurrence across frequency, one sequence per frame
        let df = d.permute(&[1, 0, 2])?;
        let fwd = df.lstm(g("blstm.fwd.w_ih")?, g("blstm.fwd.w_hh")?, g("blstm.fwd.bias")?, false)?;
        let bwd = df.lstm(g("blstm.bwd.w_ih")?, g("blstm.bwd.w_hh")?, g("blstm.bwd.bias")?, true)?;
        let r = Var::concat(&[fwd, bwd], 2)?
            .linear(g("blstm.proj.weight")?, Some(g("blstm.proj.bias")?))?
            .permute(&[1, 0, 2])?;
        let d = d.add(r)?;

        // causal recurrence across time, one sequence per reduced bin
        let (w_ih, w_hh, bias) = (g("lstm.w_ih")?, g("lstm.w_hh")?, g("lstm.bias")?);
        let h = match state {
            Some(st) => {
                let out = lstm_step(&d.value(), &w_ih.value(), &w_hh.value(), &bias.value(), st)?;
                x.tape().constant(out)
            }
            None => d.lstm(w_ih, w_hh, bias, false)?,
        };
        let d = d.add(h.linear(g("lstm.fc.weight")?, Some(g("lstm.fc.bias")?))?)?;

        let up = d
            .conv_transpose2d(g("up.weight")?, opts, (frames, cfg.bins()))?
            .add(g("up.bias")?)?
            .add(y)?;
        let (scale, shift) = film;
        x.add(up.mul(scale)?.add(shift)?)
    }

    /// Output spectrogram `(frames, bins, 2)` holding real and imaginary
    /// parts. `states`, if given, holds one causal LSTM state per block.
    pub fn spectral<'t>(
        &self,
        p: &BoundParams<'t>,
        feats: &FeatureStack,
        x1: &[Complex64],
        film: &[(Var<'t>, Var<'t>)],
        mut states: Option<&mut [LstmState]>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (frames, bins) = (feats.frames, feats.bins);
        if bins != cfg.bins() || x1.len() != frames * bins {
            bail!(Shape, "features ({frames} x {bins}) do not match network bins {}", cfg.bins());
        }
        if film.len() != cfg.n_blocks {
            bail!(Shape, "{} conditioning pairs for {} blocks", film.len(), cfg.n_blocks);
        }
        if let Some(s) = states.as_deref() {
            if s.len() != cfg.n_blocks {
                bail!(Shape, "{} stream states for {} blocks", s.len(), cfg.n_blocks);
            }
        }
        let tape = p.get("enc.bias")?.tape();
        let input = tape.constant(Tensor::new(&[frames, bins, FEATURE_CHANNELS], feats.data.clone())?);
        let half = Conv2dOpts {
            stride: (1, 1),
            pad: (0, ENC_KERNEL / 2),
        };
        let mut x = input.conv2d(p.get("enc.weight")?, half)?.add(p.get("enc.bias")?)?;
        for (b, &pair) in film.iter().enumerate() {
            let st = states.as_deref_mut().map(|s| &mut s[b]);
            x = self.block(p, b, x, pair, st)?;
        }
        let x = x.layer_norm(Some((p.get("out.ln.gamma")?, p.get("out.ln.beta")?)))?;
        let dec = Conv2dOpts {
            stride: (1, 1),
            pad: (0, DEC_KERNEL / 2),
        };
        let out = x.conv_transpose2d(p.get("dec.weight")?, dec, (frames, bins))?;
        match cfg.output {
            OutputMode::Direct => Ok(out),
            OutputMode::Mask => {
                let re = tape.constant(Tensor::new(&[frames, bins, 1], x1.iter().map(|z| z.re).collect())?);
                let im = tape.constant(Tensor::new(&[frames, bins, 1], x1.iter().map(|z| z.im).collect())?);
                let mr = out.slice(2, 0, 1)?;
                let mi = out.slice(2, 1, 1)?;
                let yr = mr.mul(re)?.sub(mi.mul(im)?)?;
                let yi = mr.mul(im)?.add(mi.mul(re)?)?;
                Var::concat(&[yr, yi], 2)
            }
        }
    }

    /// Differentiable inverse STFT of a `(frames, bins, 2)` spectrogram,
    /// trimmed to `out_len` samples.
    pub fn synthesize<'t>(&self, y: Var<'t>, out_len: usize) -> Result<Var<'t>> {
        let s = y.shape();
        let (frames, bins) = (s[0], s[1]);
        let tape = y.tape();
        let (br, bi) = &*self.synthesis;
        let yr = y.slice(2, 0, 1)?.reshape(&[frames, bins])?;
        let yi = y.slice(2, 1, 1)?.reshape(&[frames, bins])?;
        let framed = yr
            .matmul(tape.constant(br.clone()))?
            .add(yi.matmul(tape.constant(bi.clone()))?)?;
        let sig = framed.overlap_add(self.config.frame.hop())?;
        let pad = self.config.frame.pad();
        if sig.shape()[0] < pad + out_len {
            bail!(Size, "{frames} frames cannot cover {out_len} samples");
        }
        sig.slice(0, pad, out_len)
    }

    /// Extracts the queried directions from a two-channel recording
    /// (reference mic first). Output has the input's length.
    pub fn forward_offline(&self, audio: &AudioBuffer, query: &AngleQuery) -> Result<Vec<f64>> {
        if audio.num_channels() != 2 {
            bail!(Shape, "expected 2 channels, got {}", audio.num_channels());
        }
        self.check_query(query)?;
        let (x1, feats) = self.analyze(audio.channel(0), audio.channel(1))?;
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let film = self.film(&p, query)?;
        let y = self.spectral(&p, &feats, &x1, &film, None)?;
        let spec = interleaved_to_complex(y.value().data());
        Ok(self.engine.istft_channel(&spec, feats.frames, audio.len()))
    }
}

pub(crate) fn interleaved_to_complex(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

/// Real and imaginary inverse-DFT bases `(bins, window_len)` including the
/// synthesis window and `1/N`, matching `StftEngine::synthesize`.
fn synthesis_basis(cfg: &NetConfig) -> (Tensor, Tensor) {
    let n = cfg.frame.window_len();
    let bins = cfg.bins();
    let ws = cfg.frame.synthesis_window();
    let mut re = vec![0.0; bins * n];
    let mut im = vec![0.0; bins * n];
    for k in 0..bins {
        let edge = k == 0 || k == bins - 1;
        let c = if edge { 1.0 } else { 2.0 };
        for t in 0..n {
            let ang = 2.0 * PI * (k * t % n) as f64 / n as f64;
            re[k * n + t] = c * ang.cos() * ws[t] / n as f64;
            im[k * n + t] = if edge { 0.0 } else { -c * ang.sin() * ws[t] / n as f64 };
        }
    }
    (
        Tensor::new(&[bins, n], re).expect("sized"),
        Tensor::new(&[bins, n], im).expect("sized"),
    )
}
