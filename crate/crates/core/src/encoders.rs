//! Sequence encoders producing one hidden state per input step.
//!
//! All kinds consume a series-major input block `[B*T, F]` (row `b*T + t`)
//! and return hidden states in the same layout, so the decoder never needs
//! to know which encoder produced them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MqError, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Lstm,
    LstmNarx,
    LstmLag,
    Wavenet,
}

impl std::str::FromStr for EncoderKind {
    type Err = MqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "lstm_narx" => Ok(EncoderKind::LstmNarx),
            "lstm_lag" => Ok(EncoderKind::LstmLag),
            "wavenet" => Ok(EncoderKind::Wavenet),
            other => Err(MqError::arg(format!("unknown encoder kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Hidden size H (channel width for the convolutional encoder).
    pub hidden: usize,
    /// Skip depth D for the NARX summarizer, lag count for the lag encoder.
    pub depth: usize,
    /// LSTM stack height, or number of dilated layers L.
    pub layers: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Lstm,
            hidden: 16,
            depth: 52,
            layers: 1,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 || self.depth < 1 || self.layers < 1 {
            return Err(MqError::Config(format!(
                "encoder needs hidden, depth and layers >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Dilations `1, 2, 4, ..., 2^(L-1)` of the convolutional stack.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers).map(|l| 1usize << l).collect()
    }
}

/// Gate weights of one LSTM layer; each gate matrix is `(F+H) x H`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub w_input: ParamId,
    pub w_forget: ParamId,
    pub w_output: ParamId,
    pub w_cell: ParamId,
    pub b_input: ParamId,
    pub b_forget: ParamId,
    pub b_output: ParamId,
    pub b_cell: ParamId,
}

impl LstmParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = input + hidden;
        let w = |store: &mut ParamStore, gate: &str, rng: &mut _| {
            store.add(
                format!("{prefix}.w_{gate}"),
                glorot_uniform(&[fan_in, hidden], fan_in, hidden, rng),
            )
        };
        let w_input = w(store, "input", rng)?;
        let w_forget = w(store, "forget", rng)?;
        let w_output = w(store, "output", rng)?;
        let w_cell = w(store, "cell", rng)?;
        let b_input = store.add(format!("{prefix}.b_input"), Tensor::zeros(&[hidden]))?;
        let b_forget = store.add(format!("{prefix}.b_forget"), Tensor::full(&[hidden], 1.0))?;
        let b_output = store.add(format!("{prefix}.b_output"), Tensor::zeros(&[hidden]))?;
        let b_cell = store.add(format!("{prefix}.b_cell"), Tensor::zeros(&[hidden]))?;
        Ok(LstmParams {
            input,
            hidden,
            w_input,
            w_forget,
            w_output,
            w_cell,
            b_input,
            b_forget,
            b_output,
            b_cell,
        })
    }

    /// Runs the recurrence over `steps` steps for `batch` series stacked
    /// series-major in `x`, starting from zero hidden and cell states.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, steps: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input || shape[0] != batch * steps {
            return Err(MqError::shape("lstm_encode", &shape, &[batch * steps, self.input]));
        }
        let gate = |g: &mut Graph, w: ParamId, b: ParamId| (g.param(store, w), g.param(store, b));
        let (wi, bi) = gate(g, self.w_input, self.b_input);
        let (wf, bf) = gate(g, self.w_forget, self.b_forget);
        let (wo, bo) = gate(g, self.w_output, self.b_output);
        let (wc, bc) = gate(g, self.w_cell, self.b_cell);

        let mut h = g.input(Tensor::zeros(&[batch, self.hidden]));
        let mut c = g.input(Tensor::zeros(&[batch, self.hidden]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.gather_rows(x, (0..batch).map(|b| Some(b * steps + t)).collect())?;
            let z = g.concat_cols(&[xt, h])?;
            let pre = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
                let m = g.matmul(z, w)?;
                g.add_bias(m, b)
            };
            let i_pre = pre(g, wi, bi)?;
            let f_pre = pre(g, wf, bf)?;
            let o_pre = pre(g, wo, bo)?;
            let c_pre = pre(g, wc, bc)?;
            let i_gate = g.sigmoid(i_pre)?;
            let f_gate = g.sigmoid(f_pre)?;
            let o_gate = g.sigmoid(o_pre)?;
            let cand = g.tanh(c_pre)?;
            let keep = g.mul(f_gate, c)?;
            let write = g.mul(i_gate, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c)?;
            h = g.mul(o_gate, squashed)?;
            outputs.push(h);
        }
        // time-major [T*B, H] -> series-major [B*T, H]
        let stacked = g.concat_rows(&outputs)?;
        let order = (0..batch)
            .flat_map(|b| (0..steps).map(move |t| Some(t * batch + b)))
            .collect();
        g.gather_rows(stacked, order)
    }
}

/// Hidden state for every step of one encoded window.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[T, H]`
    pub hidden: Tensor,
}

/// Standalone single-series LSTM encoding of `inputs: [T, F]`.
pub fn lstm_encode(inputs: &Tensor, params: &LstmParams, store: &ParamStore) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let steps = inputs.rows();
    let x = g.input(inputs.clone());
    let h = params.forward(&mut g, store, x, 1, steps)?;
    Ok(EncoderOutput {
        hidden: g.value(h).clone(),
    })
}

/// Shared linear map over `(h_t, h_{t-1}, ..., h_{t-D})`, zero-padded
/// before the start of each series.
#[derive(Clone, Debug)]
pub struct NarxSummarizer {
    pub depth: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl NarxSummarizer {
    pub fn register(store: &mut ParamStore, prefix: &str, hidden: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = (depth + 1) * hidden;
        Ok(NarxSummarizer {
            depth,
            weight: store.add(
                format!("{prefix}.weight"),
                glorot_uniform(&[fan_in, hidden], fan_in, hidden, rng),
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[hidden]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var, steps: usize) -> Result<Var> {
        let rows = g.shape(hidden)[0];
        let lagged = lag_stack(g, hidden, rows, steps, self.depth)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let m = g.matmul(lagged, w)?;
        g.add_bias(m, b)
    }
}

/// `[R, H] -> [R, (D+1) H]` with block `d` holding the state `d` steps
/// back within the same series segment.
pub fn lag_stack(g: &mut Graph, x: Var, rows: usize, seg_len: usize, depth: usize) -> Result<Var> {
    let mut blocks = Vec::with_capacity(depth + 1);
    blocks.push(x);
    for d in 1..=depth {
        let index = (0..rows).map(|r| (r % seg_len >= d).then(|| r - d)).collect();
        blocks.push(g.gather_rows(x, index)?);
    }
    g.concat_cols(&blocks)
}

/// Standalone summarizer over an encoded window `[T, H]`.
pub fn narx_summarize(hidden: &Tensor, summarizer: &NarxSummarizer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.input(hidden.clone());
    let out = summarizer.forward(&mut g, store, h, hidden.rows())?;
    Ok(g.value(out).clone())
}

/// One dilated causal layer: `tanh(conv(x) + b)`, plus the input when the
/// channel widths agree.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct WavenetParams {
    pub layers: Vec<ConvLayer>,
}

impl WavenetParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers);
        let mut cin = input;
        for (l, dilation) in spec.dilations().into_iter().enumerate() {
            let cout = spec.hidden;
            let kernel = store.add(
                format!("{prefix}.layer{l}.kernel"),
                glorot_uniform(&[2, cin, cout], 2 * cin, cout, rng),
            )?;
            let bias = store.add(format!("{prefix}.layer{l}.bias"), Tensor::zeros(&[cout]))?;
            layers.push(ConvLayer {
                dilation,
                in_channels: cin,
                out_channels: cout,
                kernel,
                bias,
            });
            cin = cout;
        }
        Ok(WavenetParams { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, steps: usize) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let k = g.param(store, layer.kernel);
            let b = g.param(store, layer.bias);
            let conv = g.causal_conv(h, k, layer.dilation, steps)?;
            let pre = g.add_bias(conv, b)?;
            let z = g.tanh(pre)?;
            h = if layer.in_channels == layer.out_channels {
                g.add(h, z)?
            } else {
                z
            };
        }
        Ok(h)
    }
}

/// Standalone single-series convolutional encoding of `inputs: [T, F]`.
pub fn wavenet_encode(inputs: &Tensor, params: &WavenetParams, store: &ParamStore) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let x = g.input(inputs.clone());
    let h = params.forward(&mut g, store, x, inputs.rows())?;
    Ok(EncoderOutput {
        hidden: g.value(h).clone(),
    })
}

/// A registered encoder of any kind.
#[derive(Clone, Debug)]
pub enum Encoder {
    Lstm(Vec<LstmParams>),
    Narx(Vec<LstmParams>, NarxSummarizer),
    Wavenet(WavenetParams),
}

impl Encoder {
    pub fn register(store: &mut ParamStore, spec: &EncoderSpec, input: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let stack = |store: &mut ParamStore, rng: &mut _| -> Result<Vec<LstmParams>> {
            let mut layers = Vec::with_capacity(spec.layers);
            let mut width = input;
            for l in 0..spec.layers {
                layers.push(LstmParams::register(store, &format!("encoder.lstm{l}"), width, spec.hidden, rng)?);
                width = spec.hidden;
            }
            Ok(layers)
        };
        Ok(match spec.kind {
            EncoderKind::Lstm | EncoderKind::LstmLag => Encoder::Lstm(stack(store, rng)?),
            EncoderKind::LstmNarx => {
                let layers = stack(store, rng)?;
                let narx = NarxSummarizer::register(store, "encoder.narx", spec.hidden, spec.depth, rng)?;
                Encoder::Narx(layers, narx)
            }
            EncoderKind::Wavenet => Encoder::Wavenet(WavenetParams::register(store, "encoder.wavenet", input, spec, rng)?),
        })
    }

    /// Encodes `batch` equal-length series stacked series-major in `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, steps: usize) -> Result<Var> {
        let run_stack = |g: &mut Graph, layers: &[LstmParams]| -> Result<Var> {
            let mut h = x;
            for layer in layers {
                h = layer.forward(g, store, h, batch, steps)?;
            }
            Ok(h)
        };
        match self {
            Encoder::Lstm(layers) => run_stack(g, layers),
            Encoder::Narx(layers, narx) => {
                let h = run_stack(g, layers)?;
                narx.forward(g, store, h, steps)
            }
            Encoder::Wavenet(w) => w.forward(g, store, x, steps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(42)
    }

    fn random_inputs(t: usize, f: usize, seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * f).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::matrix(t, f, data).unwrap()
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let mut store = ParamStore::new();
        let p = LstmParams::register(&mut store, "l", 3, 2, &mut rng()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).value.fill(0.0);
        }
        let out = lstm_encode(&random_inputs(1, 3, 1), &p, &store).unwrap();
        assert_eq!(out.hidden.data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_matches_scalar_recurrence() {
        let (t_len, f, h) = (3, 2, 2);
        let mut store = ParamStore::new();
        let p = LstmParams::register(&mut store, "l", f, h, &mut rng()).unwrap();
        // randomize the biases too
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for id in [p.b_input, p.b_forget, p.b_output, p.b_cell] {
            for v in store.get_mut(id).value.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        let x = random_inputs(t_len, f, 9);
        let out = lstm_encode(&x, &p, &store).unwrap();

        let w = |id: ParamId| store.value(id).clone();
        let (wi, wf, wo, wc) = (w(p.w_input), w(p.w_forget), w(p.w_output), w(p.w_cell));
        let (bi, bf, bo, bc) = (w(p.b_input), w(p.b_forget), w(p.b_output), w(p.b_cell));
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        for t in 0..t_len {
            let z: Vec<f64> = x.row(t).iter().chain(hs.iter()).copied().collect();
            let lin = |m: &Tensor, b: &Tensor, j: usize| -> f64 {
                let mut acc = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    acc += zk * m.get2(k, j);
                }
                acc + b.data()[j]
            };
            let mut next_h = vec![0.0; h];
            for j in 0..h {
                let ig = sigmoid(lin(&wi, &bi, j));
                let fg = sigmoid(lin(&wf, &bf, j));
                let og = sigmoid(lin(&wo, &bo, j));
                let cand = lin(&wc, &bc, j).tanh();
                cs[j] = fg * cs[j] + ig * cand;
                next_h[j] = og * cs[j].tanh();
            }
            hs = next_h;
            for j in 0..h {
                assert!((out.hidden.get2(t, j) - hs[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_is_causal() {
        let mut store = ParamStore::new();
        let p = LstmParams::register(&mut store, "l", 2, 3, &mut rng()).unwrap();
        let x = random_inputs(6, 2, 3);
        let base = lstm_encode(&x, &p, &store).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[5 * 2] += 10.0;
        let pert = lstm_encode(&x2, &p, &store).unwrap();
        for t in 0..5 {
            assert_eq!(base.hidden.row(t), pert.hidden.row(t));
        }
        assert_ne!(base.hidden.row(5), pert.hidden.row(5));
    }

    #[test]
    fn batched_lstm_matches_single_series() {
        let mut store = ParamStore::new();
        let p = LstmParams::register(&mut store, "l", 2, 3, &mut rng()).unwrap();
        let a = random_inputs(5, 2, 1);
        let b = random_inputs(5, 2, 2);
        let mut g = Graph::new();
        let stacked = Tensor::matrix(10, 2, [a.data(), b.data()].concat()).unwrap();
        let x = g.input(stacked);
        let h = p.forward(&mut g, &store, x, 2, 5).unwrap();
        let both = g.value(h).clone();
        let ha = lstm_encode(&a, &p, &store).unwrap().hidden;
        let hb = lstm_encode(&b, &p, &store).unwrap().hidden;
        assert_eq!(&both.data()[..15], ha.data());
        assert_eq!(&both.data()[15..], hb.data());
    }

    fn narx(h: usize, d: usize) -> (ParamStore, NarxSummarizer) {
        let mut store = ParamStore::new();
        let s = NarxSummarizer::register(&mut store, "narx", h, d, &mut rng()).unwrap();
        (store, s)
    }

    #[test]
    fn narx_current_state_only() {
        let (mut store, s) = narx(3, 2);
        let w = &mut store.get_mut(s.weight).value;
        w.fill(0.0);
        let m = [[0.5, -1.0, 0.0], [2.0, 0.0, 1.0], [0.0, 0.3, 0.7]];
        for i in 0..3 {
            for j in 0..3 {
                w.data_mut()[i * 3 + j] = m[i][j];
            }
        }
        let hidden = random_inputs(4, 3, 8);
        let out = narx_summarize(&hidden, &s, &store).unwrap();
        let lin = hidden.matmul(&Tensor::from_rows(&m.map(|r| r.to_vec())).unwrap()).unwrap();
        assert_eq!(out, lin);
    }

    #[test]
    fn narx_pads_with_zero_states_at_start() {
        let (store, s) = narx(2, 4);
        let hidden = random_inputs(3, 2, 4);
        let out = narx_summarize(&hidden, &s, &store).unwrap();
        let w = store.value(s.weight);
        let b = store.value(s.bias);
        // at t = 0 only block 0 contributes
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..2 {
                acc += hidden.get2(0, k) * w.get2(k, j);
            }
            assert!((out.get2(0, j) - (acc + b.data()[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn narx_matches_concat_reference() {
        let (t_len, h, d) = (6, 3, 2);
        let (store, s) = narx(h, d);
        let hidden = random_inputs(t_len, h, 10);
        let out = narx_summarize(&hidden, &s, &store).unwrap();
        let w = store.value(s.weight);
        for t in 0..t_len {
            let mut cat = Vec::new();
            for lag in 0..=d {
                if t >= lag {
                    cat.extend_from_slice(hidden.row(t - lag));
                } else {
                    cat.extend(std::iter::repeat_n(0.0, h));
                }
            }
            for j in 0..h {
                let mut acc = 0.0;
                for (k, c) in cat.iter().enumerate() {
                    acc += c * w.get2(k, j);
                }
                assert!((out.get2(t, j) - acc).abs() < 1e-12);
            }
        }
    }

    fn wavenet(layers: usize, input: usize, hidden: usize) -> (ParamStore, WavenetParams) {
        let mut store = ParamStore::new();
        let spec = EncoderSpec {
            kind: EncoderKind::Wavenet,
            hidden,
            layers,
            ..EncoderSpec::default()
        };
        let w = WavenetParams::register(&mut store, "wn", input, &spec, &mut rng()).unwrap();
        (store, w)
    }

    #[test]
    fn zero_wavenet_is_tanh_of_bias() {
        let (mut store, w) = wavenet(1, 2, 3);
        store.get_mut(w.layers[0].kernel).value.fill(0.0);
        store.get_mut(w.layers[0].bias).value = Tensor::vector(vec![0.2, -0.4, 1.0]);
        let out = wavenet_encode(&random_inputs(5, 2, 1), &w, &store).unwrap();
        for t in 0..5 {
            assert_eq!(out.hidden.row(t), &[0.2f64.tanh(), (-0.4f64).tanh(), 1.0f64.tanh()]);
        }
    }

    #[test]
    fn wavenet_receptive_field_is_two_to_the_layers() {
        let (store, w) = wavenet(4, 1, 4);
        let x = random_inputs(40, 1, 6);
        let base = wavenet_encode(&x, &w, &store).unwrap().hidden;
        let t = 35;
        let probe = |lag: usize| {
            let mut x2 = x.clone();
            x2.data_mut()[t - lag] += 1.0;
            wavenet_encode(&x2, &w, &store).unwrap().hidden
        };
        assert_eq!(probe(16).row(t), base.row(t));
        assert_ne!(probe(15).row(t), base.row(t));
        // future perturbation
        let mut x3 = x.clone();
        x3.data_mut()[t + 1] += 1.0;
        let fut = wavenet_encode(&x3, &w, &store).unwrap().hidden;
        assert_eq!(fut.row(t), base.row(t));
    }

    #[test]
    fn wavenet_shift_consistency() {
        let (store, w) = wavenet(3, 2, 2);
        let x = random_inputs(20, 2, 12);
        let mut padded = vec![0.0; 5 * 2];
        padded.extend_from_slice(x.data());
        let xp = Tensor::matrix(25, 2, padded).unwrap();
        let a = wavenet_encode(&x, &w, &store).unwrap().hidden;
        let b = wavenet_encode(&xp, &w, &store).unwrap().hidden;
        // beyond the receptive field (8) the alignment is exact
        for t in 8..20 {
            assert_eq!(a.row(t), b.row(t + 5));
        }
    }

    #[test]
    fn spec_validation() {
        let bad = EncoderSpec {
            hidden: 0,
            ..EncoderSpec::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("lstm_narx".parse::<EncoderKind>().unwrap(), EncoderKind::LstmNarx);
        assert!("gru".parse::<EncoderKind>().is_err());
    }
}
