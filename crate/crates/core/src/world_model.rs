//! Predictive-coding LSTM world model.
//!
//! Two LSTM populations share one input, the prediction error
//! `eₜ = pₜ₋₁ − xₜ`. For each gate `j ∈ {input, forget, output, candidate}`:
//!
//! ```text
//! belief:      zʰⱼ = Wʰⱼ eₜ + Uʰⱼ hₜ₋₁ + bʰⱼ
//! prediction:  zᵖⱼ = Wᵖⱼ eₜ + Uᵖⱼ hₜ₋₁ + bᵖⱼ
//! ```
//!
//! Both recurrent terms read the belief state `hₜ₋₁`. Each population then
//! applies the usual cell update `c' = σ(z_f)⊙c + σ(z_i)⊙tanh(z_cand)`,
//! `out = σ(z_o)⊙tanh(c')`. The prediction output `pₜ` is the forecast of the
//! next latent, and `[hₜ, pₜ]` feeds the actor-critic heads.
//!
//! Gate pre-activations are packed row-wise in the order input, forget, output,
//! candidate, so one `linear` call produces all four.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::init;
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

/// Carried recurrent state as plain values. The baseline uses `h`/`c_h` only;
/// its `p`/`c_p` have zero columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor<T>,
    pub c_h: Tensor<T>,
    pub p: Tensor<T>,
    pub c_p: Tensor<T>,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(batch: usize, belief: usize, prediction: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, belief]),
            c_h: Tensor::zeros(&[batch, belief]),
            p: Tensor::zeros(&[batch, prediction]),
            c_p: Tensor::zeros(&[batch, prediction]),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    fn parts(&self) -> [&Tensor<T>; 4] {
        [&self.h, &self.c_h, &self.p, &self.c_p]
    }

    fn map_parts(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            h: f(&self.h),
            c_h: f(&self.c_h),
            p: f(&self.p),
            c_p: f(&self.c_p),
        }
    }

    /// Zeroes the rows whose `reset` flag is set.
    pub fn reset_rows(&self, reset: &[bool]) -> Self {
        self.map_parts(|t| {
            let mut t = t.clone();
            let n = t.row_len();
            for (row, &r) in t.data_mut().chunks_mut(n.max(1)).zip(reset) {
                if r {
                    row.iter_mut().for_each(|v| *v = T::zero());
                }
            }
            t
        })
    }

    pub fn all_finite(&self) -> bool {
        self.parts().iter().all(|t| t.all_finite())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        self.map_parts(|t| {
            let n = t.row_len();
            let mut data = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(&[rows.len(), n], data).expect("row selection keeps shape")
        })
    }

    pub fn concat_rows(parts: &[&RecurrentState<T>]) -> Result<Self> {
        let pick = |f: fn(&RecurrentState<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|s| f(s)).collect();
            Tensor::concat_rows(&ts)
        };
        Ok(Self {
            h: pick(|s| &s.h)?,
            c_h: pick(|s| &s.c_h)?,
            p: pick(|s| &s.p)?,
            c_p: pick(|s| &s.c_p)?,
        })
    }

    pub fn cast<U: Real>(&self) -> RecurrentState<U> {
        RecurrentState {
            h: self.h.cast(),
            c_h: self.c_h.cast(),
            p: self.p.cast(),
            c_p: self.c_p.cast(),
        }
    }

    /// Leaves without gradient.
    pub fn to_vars(&self, g: &mut Graph<'_, T>) -> StateVars {
        StateVars {
            h: g.constant(self.h.clone()),
            c_h: g.constant(self.c_h.clone()),
            p: g.constant(self.p.clone()),
            c_p: g.constant(self.c_p.clone()),
        }
    }
}

/// Recurrent state as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c_h: Var,
    pub p: Var,
    pub c_p: Var,
}

impl StateVars {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> RecurrentState<T> {
        RecurrentState {
            h: g.value(self.h).clone(),
            c_h: g.value(self.c_h).clone(),
            p: g.value(self.p).clone(),
            c_p: g.value(self.c_p).clone(),
        }
    }

    /// Multiplies every component row-wise by `mask` (1 keeps, 0 resets).
    pub fn mask_rows<T: Real>(&self, g: &mut Graph<'_, T>, mask: &[T]) -> Result<Self> {
        Ok(Self {
            h: g.scale_rows(self.h, mask)?,
            c_h: g.scale_rows(self.c_h, mask)?,
            p: g.scale_rows(self.p, mask)?,
            c_p: g.scale_rows(self.c_p, mask)?,
        })
    }
}

/// Output of one world-model step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// `eₜ = pₜ₋₁ − xₜ` (zeros for the baseline).
    pub error: Var,
    pub state: StateVars,
    /// `[hₜ, pₜ]`, the actor-critic input.
    pub combined: Var,
}

#[derive(Clone, Copy, Debug)]
struct GateParams {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl GateParams {
    /// `units` cells per gate, `input` external inputs, `recurrent` recurrent inputs.
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        units: usize,
        input: usize,
        recurrent: usize,
    ) -> Result<Self> {
        let w = init::fan_in_uniform(rng, 4 * units * input, input);
        let mut u = Vec::with_capacity(4 * units * recurrent);
        for _ in 0..4 {
            u.extend(init::orthogonal(rng, units, recurrent));
        }
        let mut b = vec![0.0; 4 * units];
        b[units..2 * units].iter_mut().for_each(|v| *v = 1.0);
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        Ok(Self {
            w: store.add(&format!("{name}.w"), &[4 * units, input], cast(w))?,
            u: store.add(&format!("{name}.u"), &[4 * units, recurrent], cast(u))?,
            b: store.add(&format!("{name}.b"), &[4 * units], cast(b))?,
        })
    }

    /// Packed pre-activations `W·input + U·recurrent + b`.
    fn preact<T: Real>(&self, g: &mut Graph<'_, T>, input: Var, recurrent: Var) -> Result<Var> {
        let (w, u, b) = (g.param(self.w), g.param(self.u), g.param(self.b));
        let a = g.linear(input, w, Some(b))?;
        let r = g.linear(recurrent, u, None)?;
        g.add(a, r)
    }
}

/// Gate nonlinearities and cell update on packed pre-activations `[B, 4n]`.
/// Returns `(hidden, cell)`.
fn lstm_cell<T: Real>(g: &mut Graph<'_, T>, z: Var, cell: Var, n: usize) -> Result<(Var, Var)> {
    let zi = g.slice_cols(z, 0, n)?;
    let zf = g.slice_cols(z, n, n)?;
    let zo = g.slice_cols(z, 2 * n, n)?;
    let zc = g.slice_cols(z, 3 * n, n)?;
    let gi = g.sigmoid(zi);
    let gf = g.sigmoid(zf);
    let go = g.sigmoid(zo);
    let cand = g.tanh(zc);
    let keep = g.mul(gf, cell)?;
    let write = g.mul(gi, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(go, tc)?;
    Ok((h, c))
}

fn check_finite<T: Real>(g: &Graph<'_, T>, state: &StateVars, t: usize) -> Result<()> {
    for v in [state.h, state.c_h, state.p, state.c_p] {
        if !g.value(v).all_finite() {
            return Err(Error::Numeric(format!("non-finite recurrent state at timestep {t}")));
        }
    }
    Ok(())
}

/// Two-population predictive-coding LSTM.
#[derive(Clone, Debug)]
pub struct PcLstm {
    latent: usize,
    belief: usize,
    belief_gates: GateParams,
    prediction_gates: GateParams,
}

impl PcLstm {
    pub fn new<T: Real>(latent: usize, belief: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        if latent == 0 || belief == 0 {
            return Err(Error::Config(format!(
                "world model sizes must be positive, got p={latent} q={belief}"
            )));
        }
        let k = latent + belief;
        let own = Self::param_count(latent, belief);
        let baseline = BaselineLstm::param_count(k, latent);
        if own >= baseline {
            return Err(Error::Config(format!(
                "predictive LSTM has {own} parameters, not fewer than the {baseline} of a {k}-unit LSTM"
            )));
        }
        Ok(Self {
            latent,
            belief,
            belief_gates: GateParams::new(store, rng, "world.belief", belief, latent, belief)?,
            prediction_gates: GateParams::new(store, rng, "world.prediction", latent, latent, belief)?,
        })
    }

    /// `4(kp + kq + k)` with `k = p + q`.
    pub fn param_count(latent: usize, belief: usize) -> usize {
        let k = latent + belief;
        4 * (k * latent + k * belief + k)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn belief_dim(&self) -> usize {
        self.belief
    }

    /// One closed-loop step: consumes the latent `x` (`[B, p]`).
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, prev: &StateVars, t: usize) -> Result<StepVars> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.latent || g.shape(prev.p) != xs.as_slice() {
            return Err(Error::dim("pc_lstm_step", &xs, g.shape(prev.p)));
        }
        let error = g.sub(prev.p, x)?;
        self.step_from_error(g, error, prev, t)
    }

    /// One step with the error input fixed to zero.
    pub fn zero_error_step<T: Real>(&self, g: &mut Graph<'_, T>, prev: &StateVars, t: usize) -> Result<StepVars> {
        let shape = g.shape(prev.p).to_vec();
        let error = g.constant(Tensor::zeros(&shape));
        self.step_from_error(g, error, prev, t)
    }

    fn step_from_error<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        error: Var,
        prev: &StateVars,
        t: usize,
    ) -> Result<StepVars> {
        let zb = self.belief_gates.preact(g, error, prev.h)?;
        let zp = self.prediction_gates.preact(g, error, prev.h)?;
        let (h, c_h) = lstm_cell(g, zb, prev.c_h, self.belief)?;
        let (p, c_p) = lstm_cell(g, zp, prev.c_p, self.latent)?;
        let state = StateVars { h, c_h, p, c_p };
        check_finite(g, &state, t)?;
        let combined = g.concat_cols(&[h, p])?;
        Ok(StepVars {
            error,
            state,
            combined,
        })
    }

    /// `horizon` zero-error steps from `start`; returns the prediction output of
    /// each step. The belief population evolves too.
    pub fn open_loop_rollout<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        start: &StateVars,
        horizon: usize,
    ) -> Result<Vec<Var>> {
        if horizon == 0 {
            return Err(Error::Config("open-loop horizon must be at least 1".into()));
        }
        self.unroll(g, start, horizon)
    }

    fn unroll<T: Real>(&self, g: &mut Graph<'_, T>, start: &StateVars, steps: usize) -> Result<Vec<Var>> {
        let mut state = *start;
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let s = self.zero_error_step(g, &state, i)?;
            out.push(s.state.p);
            state = s.state;
        }
        Ok(out)
    }

    /// Forecasts of `xₜ₊₁ … xₜ₊H` from the state after step `t`: the closed-loop
    /// prediction `pₜ` followed by `H − 1` open-loop steps.
    pub fn horizon_predictions<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        state: &StateVars,
        horizon: usize,
    ) -> Result<Vec<Var>> {
        if horizon == 0 {
            return Err(Error::Config("prediction horizon must be at least 1".into()));
        }
        let mut out = vec![state.p];
        out.extend(self.unroll(g, state, horizon - 1)?);
        Ok(out)
    }
}

/// Single-population LSTM of the baseline variants, fed the latent directly.
#[derive(Clone, Debug)]
pub struct BaselineLstm {
    latent: usize,
    hidden: usize,
    gates: GateParams,
}

impl BaselineLstm {
    pub fn new<T: Real>(latent: usize, hidden: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        if latent == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "baseline LSTM sizes must be positive, got p={latent} k={hidden}"
            )));
        }
        Ok(Self {
            latent,
            hidden,
            gates: GateParams::new(store, rng, "world.lstm", hidden, latent, hidden)?,
        })
    }

    /// `4(k² + kp + k)`.
    pub fn param_count(hidden: usize, latent: usize) -> usize {
        4 * (hidden * hidden + hidden * latent + hidden)
    }

    /// Hidden size whose parameter count is closest to a predictive LSTM with
    /// sizes `(p, q)`.
    pub fn matched_hidden(latent: usize, belief: usize) -> usize {
        let target = PcLstm::param_count(latent, belief);
        let mut best = 1;
        for k in 1..=4 * (latent + belief) {
            let d = (Self::param_count(k, latent) as i64 - target as i64).abs();
            let bd = (Self::param_count(best, latent) as i64 - target as i64).abs();
            if d < bd {
                best = k;
            }
            if Self::param_count(k, latent) > target {
                break;
            }
        }
        best
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, prev: &StateVars, t: usize) -> Result<StepVars> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.latent || g.shape(prev.h)[1] != self.hidden {
            return Err(Error::dim("baseline_lstm_step", &xs, g.shape(prev.h)));
        }
        let z = self.gates.preact(g, x, prev.h)?;
        let (h, c_h) = lstm_cell(g, z, prev.c_h, self.hidden)?;
        let state = StateVars {
            h,
            c_h,
            p: prev.p,
            c_p: prev.c_p,
        };
        check_finite(g, &state, t)?;
        let error = g.constant(Tensor::zeros(&xs));
        Ok(StepVars {
            error,
            state,
            combined: h,
        })
    }
}

/// The recurrent core of an agent.
#[derive(Clone, Debug)]
pub enum WorldModel {
    Predictive(PcLstm),
    Baseline(BaselineLstm),
}

impl WorldModel {
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, prev: &StateVars, t: usize) -> Result<StepVars> {
        match self {
            WorldModel::Predictive(m) => m.step(g, x, prev, t),
            WorldModel::Baseline(m) => m.step(g, x, prev, t),
        }
    }

    /// `(belief, prediction)` widths of the carried state.
    pub fn state_dims(&self) -> (usize, usize) {
        match self {
            WorldModel::Predictive(m) => (m.belief, m.latent),
            WorldModel::Baseline(m) => (m.hidden, 0),
        }
    }

    pub fn combined_dim(&self) -> usize {
        let (a, b) = self.state_dims();
        a + b
    }

    pub fn zero_state<T: Real>(&self, batch: usize) -> RecurrentState<T> {
        let (a, b) = self.state_dims();
        RecurrentState::zeros(batch, a, b)
    }

    pub fn predictive(&self) -> Option<&PcLstm> {
        match self {
            WorldModel::Predictive(m) => Some(m),
            WorldModel::Baseline(_) => None,
        }
    }
}

/// `Σᵢ MSE(predᵢ − targetᵢ)`, each MSE averaged over batch and features.
pub fn prediction_loss<T: Real>(g: &mut Graph<'_, T>, predictions: &[Var], targets: &[Var]) -> Result<Var> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::dim(
            "prediction_loss",
            &[predictions.len()],
            &[targets.len()],
        ));
    }
    let mut total: Option<Var> = None;
    for (&p, &x) in predictions.iter().zip(targets) {
        let d = g.sub(p, x)?;
        let sq = g.square(d);
        let mse = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, mse)?,
            None => mse,
        });
    }
    Ok(total.expect("non-empty"))
}
