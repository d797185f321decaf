//! Forked multi-horizon decoder: a global MLP turning `(h_t, static,
//! x_f[t+1..=t+K])` into horizon-specific contexts plus one agnostic
//! context, and a local MLP, shared across horizons, mapping
//! `(c_{t+k}, c_a, x_f[t+k], static)` to the per-horizon outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MqError, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::stats::normal_ppf;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Global contexts followed by the horizon-shared local MLP.
    #[default]
    Full,
    /// Global MLP emitting the whole output grid directly.
    Simplified,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Quantile,
    /// `log(y + 1) ~ N(mu, sigma^2)` per horizon.
    #[serde(rename = "loggaussian")]
    LogGaussian,
}

impl std::str::FromStr for Head {
    type Err = MqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Head::Quantile),
            "loggaussian" => Ok(Head::LogGaussian),
            other => Err(MqError::arg(format!("unknown head {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    /// Width of both global hidden layers; defaults to `2 H`.
    pub global_hidden: Option<usize>,
    /// Width of both local hidden layers; defaults to `H`.
    pub local_hidden: Option<usize>,
    /// Horizon-specific context width; defaults to `H / 2`.
    pub context_horizon: Option<usize>,
    /// Horizon-agnostic context width; defaults to `H / 2`.
    pub context_agnostic: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Dense {
            weight: store.add(format!("{prefix}.weight"), glorot_uniform(&[input, output], input, output, rng))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let m = g.matmul(x, w)?;
        g.add_bias(m, b)
    }
}

/// Two relu hidden layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: [Dense; 3],
}

impl Mlp {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Mlp {
            layers: [
                Dense::register(store, &format!("{prefix}.l0"), input, hidden, rng)?,
                Dense::register(store, &format!("{prefix}.l1"), hidden, hidden, rng)?,
                Dense::register(store, &format!("{prefix}.l2"), hidden, output, rng)?,
            ],
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.layers[0].forward(g, store, x)?;
        let a = g.relu(a)?;
        let b = self.layers[1].forward(g, store, a)?;
        let b = g.relu(b)?;
        self.layers[2].forward(g, store, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|d| [d.weight, d.bias]).collect()
    }
}

/// Global MLP output for one creation time.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBundle {
    /// `K` contexts `c_{t+1} .. c_{t+K}`.
    pub horizon_contexts: Vec<Vec<f64>>,
    pub agnostic_context: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub horizon: usize,
    /// Outputs per horizon: Q for the quantile head, 2 for log-Gaussian.
    pub out_width: usize,
    pub hidden_dim: usize,
    pub static_dim: usize,
    pub future_dim: usize,
    pub context_horizon: usize,
    pub context_agnostic: usize,
    pub global: Mlp,
    pub local: Option<Mlp>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        spec: &DecoderSpec,
        horizon: usize,
        out_width: usize,
        hidden_dim: usize,
        static_dim: usize,
        future_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if horizon == 0 || out_width == 0 {
            return Err(MqError::Config("decoder needs K >= 1 and at least one output".into()));
        }
        let half = (hidden_dim / 2).max(1);
        let ch = spec.context_horizon.unwrap_or(half);
        let ca = spec.context_agnostic.unwrap_or(half);
        let gh = spec.global_hidden.unwrap_or(2 * hidden_dim);
        let lh = spec.local_hidden.unwrap_or(hidden_dim);
        if ch == 0 || ca == 0 || gh == 0 || lh == 0 {
            return Err(MqError::Config("decoder widths must be positive".into()));
        }
        let global_in = hidden_dim + static_dim + horizon * future_dim;
        let (global, local) = match spec.kind {
            DecoderKind::Full => {
                let global = Mlp::register(store, "decoder.global", global_in, gh, horizon * ch + ca, rng)?;
                let local_in = ch + ca + future_dim + static_dim;
                let local = Mlp::register(store, "decoder.local", local_in, lh, out_width, rng)?;
                (global, Some(local))
            }
            DecoderKind::Simplified => (
                Mlp::register(store, "decoder.global", global_in, gh, horizon * out_width, rng)?,
                None,
            ),
        };
        Ok(Decoder {
            kind: spec.kind,
            horizon,
            out_width,
            hidden_dim,
            static_dim,
            future_dim,
            context_horizon: ch,
            context_agnostic: ca,
            global,
            local,
        })
    }

    fn global_input(&self, g: &mut Graph, hidden: Var, statics: Option<Var>, future: Option<Var>) -> Result<Var> {
        let mut parts = vec![hidden];
        parts.extend(statics);
        parts.extend(future);
        let x = if parts.len() == 1 { hidden } else { g.concat_cols(&parts)? };
        let want = self.hidden_dim + self.static_dim + self.horizon * self.future_dim;
        if g.shape(x)[1] != want {
            return Err(MqError::shape("global_mlp", g.shape(x), &[want]));
        }
        Ok(x)
    }

    /// Decodes `R` creation times at once.
    ///
    /// `hidden` is `[R, H]`, `statics` `[R, S]`, `future` `[R, K F_f]`.
    /// Returns `[R K, out_width]` with row `r K + (k - 1)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var, statics: Option<Var>, future: Option<Var>) -> Result<Var> {
        let rows = g.shape(hidden)[0];
        let x = self.global_input(g, hidden, statics, future)?;
        let global = self.global.forward(g, store, x)?;
        let Some(local) = &self.local else {
            return self.reshape_rows(g, global, rows);
        };
        let (ch, ca, k_max, ff) = (self.context_horizon, self.context_agnostic, self.horizon, self.future_dim);
        let agnostic = g.slice_cols(global, k_max * ch, k_max * ch + ca)?;
        let mut per_horizon = Vec::with_capacity(k_max);
        for k in 0..k_max {
            let ck = g.slice_cols(global, k * ch, (k + 1) * ch)?;
            let mut parts = vec![ck, agnostic];
            if let (Some(f), true) = (future, ff > 0) {
                parts.push(g.slice_cols(f, k * ff, (k + 1) * ff)?);
            }
            parts.extend(statics);
            per_horizon.push(g.concat_cols(&parts)?);
        }
        // [K R, in_L] with row k R + r
        let stacked = g.concat_rows(&per_horizon)?;
        let out = local.forward(g, store, stacked)?;
        let order = (0..rows)
            .flat_map(|r| (0..k_max).map(move |k| Some(k * rows + r)))
            .collect();
        g.gather_rows(out, order)
    }

    fn reshape_rows(&self, g: &mut Graph, global: Var, rows: usize) -> Result<Var> {
        let w = self.out_width;
        let parts = (0..self.horizon)
            .map(|k| g.slice_cols(global, k * w, (k + 1) * w))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&parts)?;
        let order = (0..rows)
            .flat_map(|r| (0..self.horizon).map(move |k| Some(k * rows + r)))
            .collect();
        g.gather_rows(stacked, order)
    }

    /// Global MLP for a single creation time.
    pub fn global_mlp(&self, store: &ParamStore, hidden: &[f64], statics: &[f64], future: &[f64]) -> Result<ContextBundle> {
        if future.len() != self.horizon * self.future_dim {
            return Err(MqError::shape(
                "global_mlp future inputs",
                &[future.len()],
                &[self.horizon * self.future_dim],
            ));
        }
        if self.local.is_none() {
            return Err(MqError::Contract("simplified decoder has no contexts".into()));
        }
        let mut g = Graph::new();
        let x: Vec<f64> = hidden.iter().chain(statics).chain(future).copied().collect();
        let width = x.len();
        let x = g.input(Tensor::matrix(1, width, x)?);
        let x = self.global_input(&mut g, x, None, None)?;
        let out = self.global.forward(&mut g, store, x)?;
        let v = g.value(out).data();
        let ch = self.context_horizon;
        Ok(ContextBundle {
            horizon_contexts: (0..self.horizon).map(|k| v[k * ch..(k + 1) * ch].to_vec()).collect(),
            agnostic_context: v[self.horizon * ch..].to_vec(),
        })
    }

    /// Local MLP for one horizon; the same weights serve every `k`.
    pub fn local_mlp(&self, store: &ParamStore, context: &[f64], agnostic: &[f64], future_k: &[f64], statics: &[f64]) -> Result<Vec<f64>> {
        let local = self
            .local
            .as_ref()
            .ok_or_else(|| MqError::Contract("simplified decoder has no local MLP".into()))?;
        let x: Vec<f64> = context.iter().chain(agnostic).chain(future_k).chain(statics).copied().collect();
        let want = self.context_horizon + self.context_agnostic + self.future_dim + self.static_dim;
        if x.len() != want {
            return Err(MqError::shape("local_mlp", &[x.len()], &[want]));
        }
        let mut g = Graph::new();
        let width = x.len();
        let x = g.input(Tensor::matrix(1, width, x)?);
        let out = local.forward(&mut g, store, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Per-horizon log-Gaussian parameters of `log(y + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogGaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LogGaussianParams {
    /// `exp(mu_k + sigma_k Phi^-1(q)) - 1` for every horizon and level.
    pub fn quantiles(&self, levels: &[f64]) -> Result<Vec<Vec<f64>>> {
        let z = levels.iter().map(|&q| normal_ppf(q)).collect::<Result<Vec<_>>>()?;
        Ok(self
            .mu
            .iter()
            .zip(&self.sigma)
            .map(|(&m, &s)| z.iter().map(|&zq| (m + s * zq).exp() - 1.0).collect())
            .collect())
    }
}

/// Rearranges every row into non-decreasing order.
pub fn repair_crossings(rows: &mut [Vec<f64>]) {
    for row in rows {
        row.sort_by(f64::total_cmp);
    }
}
