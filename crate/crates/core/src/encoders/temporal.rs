//! Temporal attention codec: learned per-head master queries attend over
//! day-encoded observations; the decoder maps embedding plus day encoding
//! back to channels date by date.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalCodecConfig {
    /// Flattened channels per date.
    pub channels: usize,
    pub d: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl TemporalCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.key_dim == 0 {
            return Err(Error::Config("temporal codec needs channels, heads and key_dim".into()));
        }
        if self.d == 0 || !self.d.is_multiple_of(2) || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} must be even and divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

/// Per-date attention averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace(pub Vec<f64>);

/// Sinusoidal day-of-year encoding: `d/2` sin/cos pairs with periods
/// geometric between 2 and 730 days.
pub fn day_encoding(day: u16, d: usize) -> Result<Vec<f64>> {
    if !(1..=365).contains(&day) {
        return Err(Error::Invalid(format!("day {day} outside 1..=365")));
    }
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for i in 0..half {
        let period = if half > 1 { 2.0 * 365f64.powf(i as f64 / (half - 1) as f64) } else { 730.0 };
        let angle = 2.0 * PI * day as f64 / period;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

fn day_table(days: &[u16], d: usize, repeat: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(days.len() * d);
    for &day in days {
        rows.extend(day_encoding(day, d)?);
    }
    let mut data = Vec::with_capacity(repeat * rows.len());
    for _ in 0..repeat {
        data.extend_from_slice(&rows);
    }
    Ok(Tensor::from_vec(&[repeat * days.len(), d], data))
}

/// Indices of the `max(1, ceil(fraction * L_valid))` highest-attention
/// valid dates, lowest index first among ties; returned ascending.
pub fn select_reconstruction_dates(trace: &AttentionTrace, valid: &[bool], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("date fraction {fraction} outside (0, 1]")));
    }
    if trace.0.len() != valid.len() {
        return Err(Error::Shape(format!("trace of {} dates with {} validity flags", trace.0.len(), valid.len())));
    }
    let mut cand: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if cand.is_empty() {
        return Err(Error::Invalid("no valid dates to select from".into()));
    }
    let k = ((fraction * cand.len() as f64).ceil() as usize).clamp(1, cand.len());
    cand.sort_by(|&a, &b| trace.0[b].total_cmp(&trace.0[a]).then(a.cmp(&b)));
    cand.truncate(k);
    cand.sort_unstable();
    Ok(cand)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalCodec {
    pub cfg: TemporalCodecConfig,
    input: Linear,
    keys: Linear,
    queries: ParamId,
    output: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
}

impl TemporalCodec {
    pub fn new(init: &mut Init, prefix: &str, cfg: TemporalCodecConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d, h, dk) = (cfg.channels, cfg.d, cfg.heads, cfg.key_dim);
        Ok(TemporalCodec {
            input: init.linear(&format!("{prefix}.in"), c, d),
            keys: init.linear(&format!("{prefix}.keys"), d, h * dk),
            queries: init.normal(&format!("{prefix}.queries"), &[h, dk], 1.0 / (dk as f64).sqrt()),
            output: init.linear(&format!("{prefix}.out"), d, d),
            dec_hidden: init.linear(&format!("{prefix}.dec_hidden"), d, d),
            dec_out: init.linear(&format!("{prefix}.dec_out"), d, c),
            cfg,
        })
    }

    /// `x: [n * L, C]` (sequence-major, one row per date) sharing the
    /// `days` stamps; `valid: [n * L]`. Returns `[n, d]` and one trace per
    /// sequence.
    pub fn encode(&self, tape: &mut Tape, x: Var, days: &[u16], valid: &[bool]) -> Result<(Var, Vec<AttentionTrace>)> {
        let l = days.len();
        let rows = tape.shape(x)[0];
        if l == 0 || !rows.is_multiple_of(l) || tape.value(x).cols() != self.cfg.channels || valid.len() != rows {
            return Err(Error::Shape(format!(
                "series input {:?} with {} dates, {} flags and {} channels",
                tape.shape(x),
                l,
                valid.len(),
                self.cfg.channels
            )));
        }
        let n = rows / l;
        for s in 0..n {
            if !valid[s * l..(s + 1) * l].iter().any(|&v| v) {
                return Err(Error::Invalid(format!("sequence {s} has no valid dates")));
            }
        }
        let (d, heads) = (self.cfg.d, self.cfg.heads);
        let h = self.input.forward(tape, x);
        let enc = tape.constant(day_table(days, d, n)?);
        let h = tape.add(h, enc);
        let k = self.keys.forward(tape, h);
        let q = tape.param(self.queries);
        let scores = tape.master_query_scores(k, q, l);
        let mut mask = vec![0.0; n * heads * l];
        for s in 0..n {
            for hh in 0..heads {
                for t in 0..l {
                    if !valid[s * l + t] {
                        mask[(s * heads + hh) * l + t] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let mask = tape.constant(Tensor::from_vec(&[n * heads, l], mask));
        let scores = tape.add(scores, mask);
        let attn = tape.softmax_rows(scores);
        let pooled = tape.grouped_weighted_sum(attn, h, heads);
        let out = self.output.forward(tape, pooled);
        let av = tape.value(attn);
        let traces = (0..n)
            .map(|s| {
                let mut w = vec![0.0; l];
                for hh in 0..heads {
                    for (o, a) in w.iter_mut().zip(av.row(s * heads + hh)) {
                        *o += a / heads as f64;
                    }
                }
                AttentionTrace(w)
            })
            .collect();
        Ok((out, traces))
    }

    /// `e: [n, d]` to `[n * L, C]`, one row per (sequence, date).
    pub fn decode(&self, tape: &mut Tape, e: Var, days: &[u16]) -> Result<Var> {
        let n = tape.shape(e)[0];
        if days.is_empty() || tape.value(e).cols() != self.cfg.d {
            return Err(Error::Shape(format!("series decoder input {:?} with {} dates", tape.shape(e), days.len())));
        }
        let rep = tape.repeat_rows(e, days.len());
        let enc = tape.constant(day_table(days, self.cfg.d, n)?);
        let h = tape.add(rep, enc);
        let h = self.dec_hidden.forward(tape, h);
        let h = tape.gelu(h);
        Ok(self.dec_out.forward(tape, h))
    }
}

/// `[C, L]` channel-major token values to `[L, C]` date rows.
pub fn series_rows(values: &[f64], channels: usize) -> Vec<f64> {
    let l = values.len() / channels;
    let mut out = vec![0.0; values.len()];
    for c in 0..channels {
        for t in 0..l {
            out[t * channels + c] = values[c * l + t];
        }
    }
    out
}
