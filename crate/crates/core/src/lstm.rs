//! Single-layer LSTM: forward recurrence and its hand-derived backward pass.
//!
//! ```text
//! i_t = sigmoid(W_vi v_t + W_hi h_{t-1} + b_i)
//! f_t = sigmoid(W_vf v_t + W_hf h_{t-1} + b_f)
//! o_t = sigmoid(W_vo v_t + W_ho h_{t-1} + b_o)
//! g_t = tanh   (W_vg v_t + W_hg h_{t-1} + b_g)
//! c_t = f_t * c_{t-1} + i_t * g_t
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! Weights live in a [`ParameterStore`]; [`LstmParams`] only holds handles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Matrix, ParamId, ParamTable, ParameterStore};

/// Input-side weights `H x D`, recurrent weights `H x H` and bias `H x 1`
/// of one gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateParams {
    pub w_v: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub modulation: GateParams,
}

impl LstmParams {
    /// Registers all twelve tensors under `prefix`. Weights are uniform in
    /// `[-scale, scale]`, biases zero.
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Input(format!(
                "init scale must be positive, got {scale}"
            )));
        }
        if hidden_dim == 0 {
            return Err(Error::Input("hidden dimension must be at least 1".into()));
        }
        let mut gate = |suffix: &str| -> Result<GateParams> {
            let w_v = uniform(rng, hidden_dim, input_dim, scale);
            let w_h = uniform(rng, hidden_dim, hidden_dim, scale);
            Ok(GateParams {
                w_v: store.register(format!("{prefix}.w_v{suffix}"), w_v)?,
                w_h: store.register(format!("{prefix}.w_h{suffix}"), w_h)?,
                b: store.register(format!("{prefix}.b_{suffix}"), Matrix::zeros(hidden_dim, 1))?,
            })
        };
        let input_gate = gate("i")?;
        let forget_gate = gate("f")?;
        let output_gate = gate("o")?;
        let modulation = gate("g")?;
        Ok(Self {
            input_dim,
            hidden_dim,
            input_gate,
            forget_gate,
            output_gate,
            modulation,
        })
    }

    /// Re-binds handles from a store populated under `prefix`.
    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let id = |name: String| store.id(&name).ok_or(Error::MissingKey(name));
        let gate = |s: &str| -> Result<GateParams> {
            Ok(GateParams {
                w_v: id(format!("{prefix}.w_v{s}"))?,
                w_h: id(format!("{prefix}.w_h{s}"))?,
                b: id(format!("{prefix}.b_{s}"))?,
            })
        };
        let params = Self {
            input_gate: gate("i")?,
            forget_gate: gate("f")?,
            output_gate: gate("o")?,
            modulation: gate("g")?,
            input_dim: 0,
            hidden_dim: 0,
        };
        let (hidden_dim, input_dim) = store.value(params.input_gate.w_v).shape();
        let params = Self {
            input_dim,
            hidden_dim,
            ..params
        };
        params.validate(store.values())?;
        Ok(params)
    }

    fn gates(&self) -> [GateParams; 4] {
        [
            self.input_gate,
            self.forget_gate,
            self.output_gate,
            self.modulation,
        ]
    }

    pub fn validate(&self, values: &ParamTable) -> Result<()> {
        let (h, d) = (self.hidden_dim, self.input_dim);
        for gate in self.gates() {
            for (id, want) in [(gate.w_v, (h, d)), (gate.w_h, (h, h)), (gate.b, (h, 1))] {
                let got = values[id].shape();
                if got != want {
                    return Err(Error::shape(
                        "lstm parameters",
                        format!("{}x{}", want.0, want.1),
                        format!("{}x{}", got.0, got.1),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

/// Standalone LSTM in a fresh store, seeded deterministically.
pub fn init_params(
    input_dim: usize,
    hidden_dim: usize,
    scale: f64,
    seed: u64,
) -> Result<(ParameterStore, LstmParams)> {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LstmParams::register(&mut store, "lstm", input_dim, hidden_dim, scale, &mut rng)?;
    Ok((store, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache {
    pub v: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn preactivation(
    gate: GateParams,
    values: &ParamTable,
    v: &[f64],
    h_prev: &[f64],
) -> Result<Vec<f64>> {
    let mut a = values[gate.b].data().to_vec();
    values[gate.w_v].add_matvec_into(v, &mut a)?;
    values[gate.w_h].add_matvec_into(h_prev, &mut a)?;
    Ok(a)
}

pub fn lstm_step(
    v: &[f64],
    prev: &LstmState,
    params: &LstmParams,
    values: &ParamTable,
) -> Result<(LstmState, StepCache)> {
    if v.len() != params.input_dim {
        return Err(Error::shape(
            "lstm_step input",
            format!("expected {}", params.input_dim),
            format!("got {}", v.len()),
        ));
    }
    let hd = params.hidden_dim;
    if prev.h.len() != hd || prev.c.len() != hd {
        return Err(Error::shape(
            "lstm_step state",
            format!("expected {hd}"),
            format!("h {} / c {}", prev.h.len(), prev.c.len()),
        ));
    }
    let mut i = preactivation(params.input_gate, values, v, &prev.h)?;
    let mut f = preactivation(params.forget_gate, values, v, &prev.h)?;
    let mut o = preactivation(params.output_gate, values, v, &prev.h)?;
    let mut g = preactivation(params.modulation, values, v, &prev.h)?;
    for x in i.iter_mut().chain(f.iter_mut()).chain(o.iter_mut()) {
        *x = sigmoid_scalar(*x);
    }
    g.iter_mut().for_each(|x| *x = x.tanh());

    let c: Vec<f64> = (0..hd).map(|j| f[j] * prev.c[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let h: Vec<f64> = (0..hd).map(|j| o[j] * tanh_c[j]).collect();

    let cache = StepCache {
        v: v.to_vec(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i,
        f,
        o,
        g,
        c: c.clone(),
        tanh_c,
    };
    Ok((LstmState { h, c }, cache))
}

/// Runs the recurrence over `inputs`, returning every hidden state, the
/// final state and the per-step caches.
pub fn lstm_forward(
    inputs: &[Vec<f64>],
    params: &LstmParams,
    values: &ParamTable,
    initial: &LstmState,
) -> Result<(Vec<Vec<f64>>, LstmState, Vec<StepCache>)> {
    if inputs.is_empty() {
        return Err(Error::Domain("lstm_forward on an empty sequence".into()));
    }
    let mut state = initial.clone();
    let mut hidden = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for v in inputs {
        let (next, cache) = lstm_step(v, &state, params, values)?;
        hidden.push(next.h.clone());
        caches.push(cache);
        state = next;
    }
    Ok((hidden, state, caches))
}

/// Gradients with respect to everything that is not a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmInputGrads {
    pub inputs: Vec<Vec<f64>>,
    pub h0: Vec<f64>,
    pub c0: Vec<f64>,
}

/// Backpropagation through time. `grad_h[t]` is dL/dh_t from above;
/// parameter gradients are added into `grads`.
pub fn lstm_backward(
    grad_h: &[Vec<f64>],
    caches: &[StepCache],
    params: &LstmParams,
    values: &ParamTable,
    grads: &mut ParamTable,
) -> Result<LstmInputGrads> {
    if grad_h.len() != caches.len() {
        return Err(Error::shape(
            "lstm_backward",
            format!("{} upstream gradients", grad_h.len()),
            format!("{} caches", caches.len()),
        ));
    }
    let hd = params.hidden_dim;
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut d_inputs = vec![Vec::new(); caches.len()];

    for (t, cache) in caches.iter().enumerate().rev() {
        if grad_h[t].len() != hd {
            return Err(Error::shape(
                "lstm_backward upstream",
                format!("expected {hd}"),
                format!("got {}", grad_h[t].len()),
            ));
        }
        let mut da_i = vec![0.0; hd];
        let mut da_f = vec![0.0; hd];
        let mut da_o = vec![0.0; hd];
        let mut da_g = vec![0.0; hd];
        let mut dc_prev = vec![0.0; hd];
        for j in 0..hd {
            let dh = grad_h[t][j] + dh_next[j];
            let (i, f, o, g, tc) = (
                cache.i[j],
                cache.f[j],
                cache.o[j],
                cache.g[j],
                cache.tanh_c[j],
            );
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da_o[j] = dh * tc * o * (1.0 - o);
            da_i[j] = dc * g * i * (1.0 - i);
            da_f[j] = dc * cache.c_prev[j] * f * (1.0 - f);
            da_g[j] = dc * i * (1.0 - g * g);
            dc_prev[j] = dc * f;
        }

        let mut dv = vec![0.0; params.input_dim];
        let mut dh_prev = vec![0.0; hd];
        for (gate, da) in [
            (params.input_gate, &da_i),
            (params.forget_gate, &da_f),
            (params.output_gate, &da_o),
            (params.modulation, &da_g),
        ] {
            grads[gate.w_v].add_outer(da, &cache.v)?;
            grads[gate.w_h].add_outer(da, &cache.h_prev)?;
            for (b, d) in grads[gate.b].data_mut().iter_mut().zip(da.iter()) {
                *b += d;
            }
            values[gate.w_v].add_transpose_matvec_into(da, &mut dv)?;
            values[gate.w_h].add_transpose_matvec_into(da, &mut dh_prev)?;
        }
        d_inputs[t] = dv;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok(LstmInputGrads {
        inputs: d_inputs,
        h0: dh_next,
        c0: dc_next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_difference_check};

    fn random_inputs(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn init_is_seeded_bounded_and_zero_bias() {
        let (a, pa) = init_params(5, 4, 0.08, 11).unwrap();
        let (b, _) = init_params(5, 4, 0.08, 11).unwrap();
        assert_eq!(a, b);
        for id in a.ids() {
            assert!(a.value(id).data().iter().all(|x| x.abs() <= 0.08));
        }
        for gate in pa.gates() {
            assert!(a.value(gate.b).data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(a.len(), 12);
        assert!(init_params(5, 4, 0.0, 1).is_err());
    }

    #[test]
    fn zero_params_give_zero_state() {
        let (mut store, params) = init_params(3, 4, 0.1, 0).unwrap();
        store.values_mut().zero();
        let (next, cache) = lstm_step(
            &[0.3, -2.0, 5.0],
            &LstmState::zeros(4),
            &params,
            store.values(),
        )
        .unwrap();
        assert_eq!(next, LstmState::zeros(4));
        assert!(cache
            .i
            .iter()
            .chain(&cache.f)
            .chain(&cache.o)
            .all(|&x| x == 0.5));
        assert!(cache.g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_step_matches_hand_evaluation() {
        let (mut store, p) = init_params(1, 1, 0.1, 0).unwrap();
        let set =
            |store: &mut ParameterStore, id: ParamId, x: f64| store.value_mut(id).data_mut()[0] = x;
        set(&mut store, p.input_gate.w_v, 0.5);
        set(&mut store, p.input_gate.w_h, -0.3);
        set(&mut store, p.input_gate.b, 0.1);
        set(&mut store, p.forget_gate.w_v, -0.7);
        set(&mut store, p.forget_gate.w_h, 0.2);
        set(&mut store, p.forget_gate.b, 0.4);
        set(&mut store, p.output_gate.w_v, 1.1);
        set(&mut store, p.output_gate.w_h, 0.6);
        set(&mut store, p.output_gate.b, -0.2);
        set(&mut store, p.modulation.w_v, 0.9);
        set(&mut store, p.modulation.w_h, -1.3);
        set(&mut store, p.modulation.b, 0.05);
        let (v, h0, c0) = (0.8, 0.25, -0.6);

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let i = sig(0.5 * v - 0.3 * h0 + 0.1);
        let f = sig(-0.7 * v + 0.2 * h0 + 0.4);
        let o = sig(1.1 * v + 0.6 * h0 - 0.2);
        let g = (0.9 * v - 1.3 * h0 + 0.05).tanh();
        let c = f * c0 + i * g;
        let h = o * c.tanh();

        let prev = LstmState {
            h: vec![h0],
            c: vec![c0],
        };
        let (next, _) = lstm_step(&[v], &prev, &p, store.values()).unwrap();
        assert!((next.c[0] - c).abs() < 1e-12);
        assert!((next.h[0] - h).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_wrong_dims() {
        let (store, p) = init_params(3, 2, 0.1, 0).unwrap();
        assert!(matches!(
            lstm_step(&[1.0], &LstmState::zeros(2), &p, store.values()),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            lstm_forward(&[], &p, store.values(), &LstmState::zeros(2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn forward_composes_across_split_points() {
        let (store, p) = init_params(3, 5, 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = random_inputs(&mut rng, 6, 3);
        let zero = LstmState::zeros(5);
        let (all, _, _) = lstm_forward(&xs, &p, store.values(), &zero).unwrap();
        let (first, mid, _) = lstm_forward(&xs[..2], &p, store.values(), &zero).unwrap();
        let (rest, _, _) = lstm_forward(&xs[2..], &p, store.values(), &mid).unwrap();
        let chained: Vec<_> = first.into_iter().chain(rest).collect();
        assert_eq!(all, chained);

        let (one, _, _) = lstm_forward(&xs[..1], &p, store.values(), &zero).unwrap();
        let (step, _) = lstm_step(&xs[0], &zero, &p, store.values()).unwrap();
        assert_eq!(one[0], step.h);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (mut store, p) = init_params(3, 4, 0.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = random_inputs(&mut rng, 4, 3);
        let (_, _, caches) = lstm_forward(&xs, &p, store.values(), &LstmState::zeros(4)).unwrap();
        let (values, grads) = store.split_mut();
        lstm_backward(&vec![vec![0.0; 4]; 4], &caches, &p, values, grads).unwrap();
        assert_eq!(store.grads().squared_norm(), 0.0);
        assert!(lstm_backward(
            &vec![vec![0.0; 4]; 3],
            &caches,
            &p,
            store.values(),
            &mut store.grads().clone()
        )
        .is_err());
    }

    /// Scalar loss sum_t <w_t, h_t> with fixed random projections w_t.
    fn projected_loss(
        store: &ParameterStore,
        p: &LstmParams,
        xs: &[Vec<f64>],
        proj: &[Vec<f64>],
    ) -> Result<f64> {
        let (hs, _, _) = lstm_forward(xs, p, store.values(), &LstmState::zeros(p.hidden_dim))?;
        Ok(hs.iter().zip(proj).map(|(h, w)| dot(h, w)).sum())
    }

    fn check_seed(seed: u64, t: usize, d: usize, h: usize) {
        let (mut store, p) = init_params(d, h, 0.6, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        // Non-zero biases so their gradients are exercised.
        for gate in p.gates() {
            for b in store.value_mut(gate.b).data_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        let xs = random_inputs(&mut rng, t, d);
        let proj = random_inputs(&mut rng, t, h);
        let (_, _, caches) = lstm_forward(&xs, &p, store.values(), &LstmState::zeros(h)).unwrap();
        let (values, grads) = store.split_mut();
        let dinputs = lstm_backward(&proj, &caches, &p, values, grads).unwrap();

        let report = finite_difference_check(
            |s| projected_loss(s, &p, &xs, &proj),
            &mut store,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.worst());

        // Input gradients via the same oracle on perturbed inputs.
        let eps = 1e-5;
        for (ti, x) in xs.iter().enumerate() {
            for k in 0..x.len() {
                let mut plus = xs.clone();
                plus[ti][k] += eps;
                let mut minus = xs.clone();
                minus[ti][k] -= eps;
                let numeric = (projected_loss(&store, &p, &plus, &proj).unwrap()
                    - projected_loss(&store, &p, &minus, &proj).unwrap())
                    / (2.0 * eps);
                let err = crate::numerics::relative_error(dinputs.inputs[ti][k], numeric);
                assert!(err < 1e-5, "seed {seed} input grad t={ti} k={k}: {err}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_seed(0, 4, 5, 7);
        for seed in 1..=20 {
            check_seed(
                seed,
                1 + (seed as usize % 5),
                1 + (seed as usize % 4),
                2 + (seed as usize % 6),
            );
        }
    }

    #[test]
    fn long_range_gradient_reaches_first_input() {
        let (store, p) = init_params(3, 6, 0.5, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs = random_inputs(&mut rng, 8, 3);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let last = |xs: &[Vec<f64>]| {
            let (hs, _, _) = lstm_forward(xs, &p, store.values(), &LstmState::zeros(6)).unwrap();
            dot(hs.last().unwrap(), &w)
        };
        let eps = 1e-5;
        let mut plus = xs.clone();
        plus[0][0] += eps;
        let mut minus = xs.clone();
        minus[0][0] -= eps;
        let probe = (last(&plus) - last(&minus)) / (2.0 * eps);
        assert!(probe.abs() > 1e-8, "{probe}");

        // The analytic pass agrees.
        let (_, _, caches) = lstm_forward(&xs, &p, store.values(), &LstmState::zeros(6)).unwrap();
        let mut upstream = vec![vec![0.0; 6]; 8];
        upstream[7] = w.clone();
        let mut grads = store.grads().clone();
        let d = lstm_backward(&upstream, &caches, &p, store.values(), &mut grads).unwrap();
        assert!(crate::numerics::relative_error(d.inputs[0][0], probe) < 1e-5);
    }

    #[test]
    fn gates_stay_inside_codomains_and_h_is_bounded() {
        let (store, p) = init_params(4, 8, 2.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let (hs, _, caches) = lstm_forward(&xs, &p, store.values(), &LstmState::zeros(8)).unwrap();
        for c in &caches {
            assert!(c
                .i
                .iter()
                .chain(&c.f)
                .chain(&c.o)
                .all(|&x| x > 0.0 && x < 1.0));
            assert!(c.g.iter().all(|&x| x > -1.0 && x < 1.0));
        }
        assert!(hs.iter().flatten().all(|h| h.abs() < 1.0));
    }
}
