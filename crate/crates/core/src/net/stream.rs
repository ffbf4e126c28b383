use std::ops::Deref;

use num_complex::Complex64;

use super::model::interleaved_to_complex;
use super::{AngleQuery, Conditioning, Model};
use crate::autodiff::{LstmState, SharedParams, Tape};
use crate::error::{bail, Result};
use crate::features::encode_features;

/// Everything a stream carries between chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    query: AngleQuery,
    /// Last `window_len` input samples per channel.
    input: [Vec<f64>; 2],
    lstm: Vec<LstmState>,
    /// Overlap-add accumulator, aligned with the current input window.
    tail: Vec<f64>,
    frames: u64,
}

impl StreamState {
    pub fn query(&self) -> &AngleQuery {
        &self.query
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames
    }
}

/// Chunked inference: each call to [`Streamer::step`] consumes one hop of
/// two-channel input and returns one hop of output, delayed by the
/// lookahead relative to the input. `M` is any handle to the model: a
/// borrow, an `Arc`, or a `Box`.
#[derive(Debug)]
pub struct Streamer<M: Deref<Target = Model>> {
    model: M,
    shared: SharedParams,
    cond: Conditioning,
    state: StreamState,
}

impl<M: Deref<Target = Model>> Streamer<M> {
    pub fn new(model: M, query: &AngleQuery) -> Result<Self> {
        let cond = model.condition(query)?;
        let state = Self::fresh_state(&model, query);
        let shared = model.shared_params();
        Ok(Self {
            model,
            shared,
            cond,
            state,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn fresh_state(model: &Model, query: &AngleQuery) -> StreamState {
        let cfg = model.config();
        let w = cfg.frame.window_len();
        let lstm = (0..cfg.n_blocks)
            .map(|_| LstmState::zeros(cfg.reduced_bins(), cfg.causal_lstm_hidden))
            .collect();
        StreamState {
            query: *query,
            input: [vec![0.0; w], vec![0.0; w]],
            lstm,
            tail: vec![0.0; w],
            frames: 0,
        }
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    /// Clears all history and switches to `query`.
    pub fn reset(&mut self, query: &AngleQuery) -> Result<()> {
        if *query != self.cond.query {
            self.cond = self.model.condition(query)?;
        }
        self.state = Self::fresh_state(&self.model, query);
        Ok(())
    }

    /// Processes one chunk of `chunk_samples` per channel. The query must
    /// match the one the stream was started or last reset with.
    pub fn step(&mut self, query: &AngleQuery, ref_mic: &[f64], struct_mic: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let hop = cfg.chunk_samples();
        if ref_mic.len() != hop || struct_mic.len() != hop {
            bail!(
                Argument,
                "chunk of {}/{} samples, expected {hop}",
                ref_mic.len(),
                struct_mic.len()
            );
        }
        if *query != self.state.query {
            bail!(Compatibility, "query changed mid-stream; reset the stream first");
        }
        for (buf, new) in self.state.input.iter_mut().zip([ref_mic, struct_mic]) {
            buf.copy_within(hop.., 0);
            let w = buf.len();
            buf[w - hop..].copy_from_slice(new);
        }
        let engine = self.model.engine();
        let bins = cfg.bins();
        let mut x1 = vec![Complex64::new(0.0, 0.0); bins];
        let mut x2 = x1.clone();
        engine.analyze(&self.state.input[0], &mut x1);
        engine.analyze(&self.state.input[1], &mut x2);
        let feats = encode_features(&x1, &x2, self.model.stats())?;

        let tape = Tape::no_grad();
        let p = self.shared.bind(&tape);
        let film: Vec<_> = self
            .cond
            .film()
            .iter()
            .map(|(g, b)| (tape.constant(g.clone()), tape.constant(b.clone())))
            .collect();
        let y = self
            .model
            .spectral(&p, &feats, &x1, &film, Some(&mut self.state.lstm))?;
        let spec = interleaved_to_complex(y.value().data());
        let mut frame = vec![0.0; cfg.frame.window_len()];
        engine.synthesize(&spec, &mut frame);

        let tail = &mut self.state.tail;
        for (t, v) in tail.iter_mut().zip(&frame) {
            *t += v;
        }
        let out = tail[..hop].to_vec();
        tail.copy_within(hop.., 0);
        let w = tail.len();
        tail[w - hop..].fill(0.0);
        self.state.frames += 1;
        Ok(out)
    }

    /// Streams a whole recording chunk by chunk, zero-padding the last
    /// chunk and flushing the lookahead, and returns the output aligned
    /// with the input (same length, lookahead delay removed).
    pub fn process_signal(&mut self, ref_mic: &[f64], struct_mic: &[f64]) -> Result<Vec<f64>> {
        if ref_mic.len() != struct_mic.len() {
            bail!(Shape, "channel lengths differ: {} vs {}", ref_mic.len(), struct_mic.len());
        }
        let cfg = self.model.config();
        let (hop, delay) = (cfg.chunk_samples(), cfg.lookahead_samples());
        let query = self.state.query;
        let n = ref_mic.len();
        let chunks = (n + delay).div_ceil(hop);
        let mut out = Vec::with_capacity(chunks * hop);
        let mut a = vec![0.0; hop];
        let mut b = vec![0.0; hop];
        for k in 0..chunks {
            let start = (k * hop).min(n);
            let end = ((k + 1) * hop).min(n);
            a.fill(0.0);
            b.fill(0.0);
            a[..end - start].copy_from_slice(&ref_mic[start..end]);
            b[..end - start].copy_from_slice(&struct_mic[start..end]);
            out.extend(self.step(&query, &a, &b)?);
        }
        Ok(out[delay..delay + n].to_vec())
    }
}
